"""Attention-map kernels shared by the channel and spatial dropout paths.

Channelwise average pooling (CAP) turns a feature map into a per-sample
2-D self-attention map, global average pooling (GAP) turns it into a
per-sample channel-attention vector, and the importance map is the
sigmoid of the self-attention map.  All three are pure, parameter-free
functions over (B, C, H, W) tensors; per-sample quantities are computed
independently for each batch element.
"""

import torch

__all__ = [
    "channelwise_average_pool",
    "importance_map",
    "global_average_pool",
    "check_feature_map",
    "check_spatial_map",
]


def _first_nonfinite_index(t: torch.Tensor):
    bad = ~torch.isfinite(t)
    flat = int(bad.flatten().nonzero()[0])
    return tuple(int(i) for i in torch.unravel_index(torch.tensor(flat), t.shape))


def check_feature_map(f: torch.Tensor, name: str = "feature map") -> None:
    """Validate a 4-D (B, C, H, W) activation block: shape and finiteness."""
    if f.dim() != 4:
        raise ValueError(f"{name} must be 4-D (B, C, H, W), got shape {tuple(f.shape)}")
    if min(f.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {tuple(f.shape)}")
    if not f.is_floating_point():
        raise ValueError(f"{name} must be floating point, got {f.dtype}")
    if not bool(torch.isfinite(f).all()):
        idx = _first_nonfinite_index(f)
        raise ValueError(f"{name} contains a non-finite entry at (b,c,h,w)={idx}")


def check_spatial_map(m: torch.Tensor, name: str = "spatial map") -> None:
    """Validate a 3-D (B, H, W) per-sample spatial map."""
    if m.dim() != 3:
        raise ValueError(f"{name} must be 3-D (B, H, W), got shape {tuple(m.shape)}")
    if min(m.shape) < 1:
        raise ValueError(f"{name} has an empty dimension: {tuple(m.shape)}")
    if not bool(torch.isfinite(m).all()):
        idx = _first_nonfinite_index(m)
        raise ValueError(f"{name} contains a non-finite entry at (b,h,w)={idx}")


def channelwise_average_pool(f: torch.Tensor) -> torch.Tensor:
    """Mean over channels at each spatial location: (B, C, H, W) -> (B, H, W)."""
    check_feature_map(f)
    return f.mean(dim=1)


def importance_map(m: torch.Tensor) -> torch.Tensor:
    """Elementwise sigmoid of a self-attention map, values in (0, 1)."""
    check_spatial_map(m, name="self-attention map")
    return torch.sigmoid(m)


def global_average_pool(f: torch.Tensor) -> torch.Tensor:
    """Mean over spatial locations per channel: (B, C, H, W) -> (B, C)."""
    check_feature_map(f)
    return f.mean(dim=(2, 3))
