"""The dual-attention dropblock layer.

Each training forward computes the self-attention map, then selects with
probability ``drop_rate`` the spatial drop mask (otherwise the sigmoid
importance map), multiplies the selection into the features, and finally
applies the channel drop mask.  Branch choice is one draw per forward
call; the channel-mask draw follows it, so a seeded generator replays a
run exactly.  At evaluation time the layer is the identity: it adds no
parameters and no compute to the host network.

``replay_forward`` and ``gradient_of_forward`` rerun and differentiate a
recorded forward with its masks frozen, which is what the finite-difference
checks compare against.
"""

import enum
from dataclasses import dataclass, field, replace

import torch
from torch import nn

from .attention import (
    channelwise_average_pool,
    check_feature_map,
    global_average_pool,
    importance_map,
)
from .cagd import CagdConfig, apply_channel_mask, channel_drop_mask
from .sagd import SagdConfig, apply_spatial_mask, build_spatial_drop_mask

__all__ = [
    "Branch",
    "DgdmConfig",
    "ForwardTrace",
    "STAGES",
    "stage_flags",
    "apply_stage",
    "forward_train",
    "forward_eval",
    "replay_forward",
    "gradient_of_forward",
    "DgdmLayer",
]

STAGES = ("stage1", "stage1+2", "full")


class Branch(enum.Enum):
    DROP_MASK = "drop_mask"
    IMPORTANCE_MAP = "importance_map"


@dataclass(frozen=True)
class DgdmConfig:
    """Layer hyperparameters: branch selection rate, sub-module configs,
    and the ablation flags for the staged variants."""

    drop_rate: float = 0.75
    cagd: CagdConfig = field(default_factory=CagdConfig)
    sagd: SagdConfig = field(default_factory=SagdConfig)
    use_cagd: bool = True
    use_sagd_stage_low: bool = True

    def __post_init__(self):
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError(f"dgdm.drop_rate must be in [0, 1], got {self.drop_rate}")

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DgdmConfig":
        return cls(
            drop_rate=data["drop_rate"],
            cagd=CagdConfig(**data["cagd"]),
            sagd=SagdConfig(**data["sagd"]),
            use_cagd=data["use_cagd"],
            use_sagd_stage_low=data["use_sagd_stage_low"],
        )


def stage_flags(stage: str) -> dict:
    """Ablation-flag settings for the three staged variants.

    stage1 erases only the most discriminative blocks; stage1+2 adds the
    background blocks; full adds the channel drop mask.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}, got {stage!r}")
    return {
        "stage1": {"use_sagd_stage_low": False, "use_cagd": False},
        "stage1+2": {"use_sagd_stage_low": True, "use_cagd": False},
        "full": {"use_sagd_stage_low": True, "use_cagd": True},
    }[stage]


def apply_stage(cfg: DgdmConfig, stage: str) -> DgdmConfig:
    return replace(cfg, **stage_flags(stage))


@dataclass
class ForwardTrace:
    """Record of one training forward: branch taken, masks produced, and
    scalar drop statistics.  The importance branch stores no spatial drop
    mask; the drop branch stores no importance map."""

    branch: Branch
    self_attention: torch.Tensor
    importance: torch.Tensor | None
    spatial_drop_mask: torch.Tensor | None
    channel_mask: torch.Tensor | None
    zeroed_pixel_fraction: float
    zeroed_channel_fraction: float


def forward_train(
    f: torch.Tensor, cfg: DgdmConfig, rng: torch.Generator
) -> tuple[torch.Tensor, ForwardTrace]:
    """One stochastic training forward; returns the output and its trace.

    Draw order is fixed: one scalar for the branch choice, then (if CAGD is
    enabled) one uniform per (sample, channel) for the channel mask.
    """
    check_feature_map(f)
    m_self = channelwise_average_pool(f)

    u = torch.rand((), generator=rng).item()
    if u < cfg.drop_rate:
        branch = Branch.DROP_MASK
        drop_mask = build_spatial_drop_mask(
            m_self.detach(), cfg.sagd, include_low=cfg.use_sagd_stage_low
        )
        out = apply_spatial_mask(f, drop_mask)
        imp = None
        zeroed_pixels = 1.0 - drop_mask.mean().item()
    else:
        branch = Branch.IMPORTANCE_MAP
        imp = importance_map(m_self)
        out = f * imp.unsqueeze(1)
        drop_mask = None
        zeroed_pixels = 0.0

    channel_mask = None
    zeroed_channels = 0.0
    if cfg.use_cagd:
        attn = global_average_pool(f.detach())
        channel_mask = channel_drop_mask(attn, cfg.cagd, rng)
        out = apply_channel_mask(out, channel_mask)
        zeroed_channels = 1.0 - channel_mask.mean().item()

    trace = ForwardTrace(
        branch=branch,
        self_attention=m_self.detach(),
        importance=imp.detach() if imp is not None else None,
        spatial_drop_mask=drop_mask,
        channel_mask=channel_mask,
        zeroed_pixel_fraction=zeroed_pixels,
        zeroed_channel_fraction=zeroed_channels,
    )
    return out, trace


def forward_eval(f: torch.Tensor) -> torch.Tensor:
    """Identity: every activation passes through at evaluation time."""
    check_feature_map(f)
    return f


def _check_trace(f: torch.Tensor, trace: ForwardTrace) -> None:
    b, c, h, w = f.shape
    if trace.branch is Branch.DROP_MASK:
        if trace.spatial_drop_mask is None:
            raise ValueError("drop-mask trace is missing its spatial mask")
        if trace.spatial_drop_mask.shape != (b, h, w):
            raise ValueError(
                f"trace spatial mask {tuple(trace.spatial_drop_mask.shape)} does not "
                f"match feature map {tuple(f.shape)}"
            )
    if trace.channel_mask is not None and trace.channel_mask.shape != (b, c):
        raise ValueError(
            f"trace channel mask {tuple(trace.channel_mask.shape)} does not match "
            f"feature map {tuple(f.shape)}"
        )


def replay_forward(f: torch.Tensor, trace: ForwardTrace) -> torch.Tensor:
    """Rerun a recorded forward on (possibly perturbed) features.

    Binary masks are reused frozen; the importance branch recomputes the
    sigmoid of the self-attention map, since that path is differentiable.
    """
    check_feature_map(f)
    _check_trace(f, trace)
    if trace.branch is Branch.DROP_MASK:
        out = apply_spatial_mask(f, trace.spatial_drop_mask.to(f.dtype))
    else:
        out = f * importance_map(channelwise_average_pool(f)).unsqueeze(1)
    if trace.channel_mask is not None:
        out = apply_channel_mask(out, trace.channel_mask.to(f.dtype))
    return out


def gradient_of_forward(f: torch.Tensor, trace: ForwardTrace) -> torch.Tensor:
    """Analytic Jacobian of ``replay_forward`` w.r.t. the input features.

    Returns a (B, N, N) tensor with N = C*H*W, indexed in the flattened
    (c, h, w) order of ``f.reshape(B, -1)``.  The drop branch is purely
    multiplicative (diagonal); the importance branch adds the coupling of
    every channel through the channelwise mean and the sigmoid slope.
    """
    check_feature_map(f)
    _check_trace(f, trace)
    b, c, h, w = f.shape
    hw = h * w

    if trace.channel_mask is not None:
        m1 = trace.channel_mask.to(f.dtype)
    else:
        m1 = torch.ones(b, c, dtype=f.dtype)

    if trace.branch is Branch.DROP_MASK:
        m2 = trace.spatial_drop_mask.to(f.dtype)
        multiplier = m2.unsqueeze(1) * m1[:, :, None, None]
        return torch.diag_embed(multiplier.reshape(b, -1))

    sig = torch.sigmoid(channelwise_average_pool(f)).reshape(b, hw)
    dsig = sig * (1.0 - sig)
    fv = f.reshape(b, c, hw)
    # per-pixel C x C block: sig * diag(m1) + (m1 * f) dsig / C on every column
    blocks = sig[:, :, None, None] * torch.diag_embed(m1)[:, None, :, :] + (
        m1[:, None, :, None] * fv.permute(0, 2, 1)[:, :, :, None]
    ) * dsig[:, :, None, None] / c
    jac = torch.zeros(b, c, hw, c, hw, dtype=f.dtype)
    pix = torch.arange(hw)
    jac[:, :, pix, :, pix] = blocks.permute(1, 0, 2, 3)
    return jac.reshape(b, c * hw, c * hw)


class DgdmLayer(nn.Module):
    """Module wrapper: stochastic in training mode, identity in eval mode.

    Training forwards need a caller-owned ``torch.Generator``.  Setting
    ``frozen_trace`` replays that trace instead of sampling (gradient
    checks); setting ``record_trace`` keeps the last trace on the module
    for inspection.
    """

    def __init__(self, cfg: DgdmConfig):
        super().__init__()
        self.cfg = cfg
        self.frozen_trace: ForwardTrace | None = None
        self.record_trace = False
        self.last_trace: ForwardTrace | None = None

    def forward(self, x: torch.Tensor, rng: torch.Generator | None = None) -> torch.Tensor:
        if not self.training:
            return forward_eval(x)
        if self.frozen_trace is not None:
            return replay_forward(x, self.frozen_trace)
        if rng is None:
            raise ValueError("training-mode forward requires a random generator")
        out, trace = forward_train(x, self.cfg, rng)
        if self.record_trace:
            self.last_trace = trace
        return out

    def extra_repr(self) -> str:
        return (
            f"drop_rate={self.cfg.drop_rate}, use_cagd={self.cfg.use_cagd}, "
            f"use_sagd_stage_low={self.cfg.use_sagd_stage_low}"
        )
