"""Small VGG-style backbone with a GAP head and dropblock insertion points.

Stages are stacks of 3x3 conv + ReLU blocks with optional 2x downsampling;
the dual-attention dropblock is routed after the output of each listed
stage during training and bypassed at evaluation.  The head is global
average pooling into a single linear classifier, which keeps the final
feature map compatible with class-activation heatmaps.  The dropblock
adds no parameters, so checkpoints are interchangeable between models
built with and without it.
"""

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .layer import DgdmConfig, DgdmLayer

__all__ = [
    "StageSpec",
    "BackboneSpec",
    "DgdmCnn",
    "build_model",
    "init_parameters",
    "count_parameters",
    "predict",
]


@dataclass(frozen=True)
class StageSpec:
    n_convs: int
    width: int
    downsample: bool = True

    def __post_init__(self):
        if self.n_convs < 1 or self.width < 1:
            raise ValueError(f"invalid stage: {self}")


def _default_stages():
    return (StageSpec(2, 16), StageSpec(2, 32), StageSpec(2, 64))


@dataclass(frozen=True)
class BackboneSpec:
    """Architecture description: stages, dropblock insertion points, head."""

    stages: tuple[StageSpec, ...] = field(default_factory=_default_stages)
    dgdm_insertion_points: tuple[int, ...] = (1, 2)
    num_classes: int = 3
    in_channels: int = 3

    def __post_init__(self):
        if not self.stages:
            raise ValueError("backbone needs at least one stage")
        for point in self.dgdm_insertion_points:
            if not 0 <= point < len(self.stages):
                raise ValueError(
                    f"insertion point {point} outside stages 0..{len(self.stages) - 1}"
                )
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")

    def to_dict(self) -> dict:
        return {
            "stages": [
                {"n_convs": s.n_convs, "width": s.width, "downsample": s.downsample}
                for s in self.stages
            ],
            "dgdm_insertion_points": list(self.dgdm_insertion_points),
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BackboneSpec":
        return cls(
            stages=tuple(StageSpec(**s) for s in data["stages"]),
            dgdm_insertion_points=tuple(data["dgdm_insertion_points"]),
            num_classes=data["num_classes"],
            in_channels=data["in_channels"],
        )


class DgdmCnn(nn.Module):
    """Conv stages -> (dropblock) -> GAP -> linear classifier."""

    def __init__(self, spec: BackboneSpec, dgdm_cfg: DgdmConfig | None = None):
        super().__init__()
        self.spec = spec
        self.dgdm_cfg = dgdm_cfg
        self.stages = nn.ModuleList()
        in_ch = spec.in_channels
        for stage in spec.stages:
            layers = []
            for _ in range(stage.n_convs):
                layers.append(nn.Conv2d(in_ch, stage.width, kernel_size=3, padding=1))
                layers.append(nn.ReLU(inplace=True))
                in_ch = stage.width
            if stage.downsample:
                layers.append(nn.MaxPool2d(2))
            self.stages.append(nn.Sequential(*layers))
        self.dgdm = nn.ModuleDict()
        if dgdm_cfg is not None:
            for point in spec.dgdm_insertion_points:
                self.dgdm[str(point)] = DgdmLayer(dgdm_cfg)
        self.classifier = nn.Linear(in_ch, spec.num_classes)

    def features(self, x: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if str(i) in self.dgdm:
                layer = self.dgdm[str(i)]
                x = layer(x, rng) if self.training else layer(x)
        return x

    def forward(self, x: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
        feats = self.features(x, rng)
        return self.classifier(feats.mean(dim=(2, 3)))

    def classifier_weights(self) -> torch.Tensor:
        """Per-class weight rows over final-stage channels, (num_classes, C)."""
        return self.classifier.weight


def build_model(
    spec: BackboneSpec,
    dgdm_cfg: DgdmConfig | None = None,
    init_seed: int | None = None,
) -> DgdmCnn:
    model = DgdmCnn(spec, dgdm_cfg)
    if init_seed is not None:
        init_parameters(model, torch.Generator().manual_seed(init_seed))
    return model


def init_parameters(model: nn.Module, rng: torch.Generator) -> None:
    """Seeded He fan-in init for convs and linears; zero biases."""
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.Linear)):
                fan_in = module.weight[0].numel()
                std = math.sqrt(2.0 / fan_in)
                noise = torch.randn(
                    module.weight.shape, generator=rng, dtype=module.weight.dtype
                )
                module.weight.copy_(noise * std)
                if module.bias is not None:
                    module.bias.zero_()


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def predict(model: DgdmCnn, images: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Class scores and pre-GAP feature maps in evaluation mode."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            feats = model.features(images)
            scores = model.classifier(feats.mean(dim=(2, 3)))
    finally:
        model.train(was_training)
    return scores, feats
