"""Spatial attention guided dropblock.

Seeds come straight from the self-attention map: pixels below
``delta_l * max`` (background) or above ``delta_h * max`` (most
discriminative) are marked for dropping, then every seed erases a full
``block_size`` x ``block_size`` square.  Blocks anchor at the seed's
top-left corner and shift inward at the borders so a complete block is
always removed; with ``block_size == 1`` the mask equals the seed mask,
and a block spanning the whole map reduces to SpatialDropout.  The mask
is shared across channels.
"""

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .attention import check_spatial_map

logger = logging.getLogger(__name__)

ADAPTIVE_7 = "adaptive_7"

__all__ = [
    "ADAPTIVE_7",
    "SagdConfig",
    "resolve_block_size",
    "spatial_seed_mask",
    "dilate_to_blocks",
    "build_spatial_drop_mask",
    "apply_spatial_mask",
]


@dataclass(frozen=True)
class SagdConfig:
    """Spatial-dropblock hyperparameters.

    delta_l / delta_h: background and discriminative cutoffs, as fractions
    of the per-sample attention maximum.  block_size_high dilates the
    discriminative seeds, block_size_low the background seeds; with
    ``adaptive == "adaptive_7"`` both resolve to floor(min(H, W) / 7).
    """

    delta_l: float = 0.10
    delta_h: float = 0.90
    block_size_high: int = 2
    block_size_low: int = 3
    adaptive: str = "fixed"

    def __post_init__(self):
        if not 0.0 <= self.delta_l < 1.0:
            raise ValueError(f"sagd.delta_l must be in [0, 1), got {self.delta_l}")
        if not 0.0 < self.delta_h <= 1.0:
            raise ValueError(f"sagd.delta_h must be in (0, 1], got {self.delta_h}")
        if self.delta_l >= self.delta_h:
            raise ValueError(
                f"sagd.delta_l ({self.delta_l}) must be below sagd.delta_h ({self.delta_h})"
            )
        for name in ("block_size_high", "block_size_low"):
            if getattr(self, name) != ADAPTIVE_7 and int(getattr(self, name)) < 1:
                raise ValueError(f"sagd.{name} must be >= 1, got {getattr(self, name)}")
        if self.adaptive not in ("fixed", ADAPTIVE_7):
            raise ValueError(f"sagd.adaptive must be 'fixed' or '{ADAPTIVE_7}'")

    def resolve(self, height: int, width: int) -> tuple[int, int]:
        """Concrete (block_size_high, block_size_low) for a map of this size."""
        if self.adaptive == ADAPTIVE_7:
            size = resolve_block_size(ADAPTIVE_7, height, width)
            return size, size
        return (
            resolve_block_size(self.block_size_high, height, width),
            resolve_block_size(self.block_size_low, height, width),
        )


def resolve_block_size(block_size, height: int, width: int) -> int:
    """Pass an explicit size through; ADAPTIVE_7 yields floor(min(H,W)/7), >= 1."""
    if height < 1 or width < 1:
        raise ValueError(f"map size must be positive, got {height}x{width}")
    if block_size == ADAPTIVE_7:
        return max(1, min(height, width) // 7)
    size = int(block_size)
    if size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    return size


def _seed_zero_sets(m: torch.Tensor, delta_l: float, delta_h: float):
    """Boolean (B, H, W) zero-seed indicators for the low and high thresholds.

    Cutoffs are fractions of the per-sample maximum; a constant map yields no
    seeds at all (it carries no ranking signal).
    """
    mx = m.amax(dim=(1, 2), keepdim=True)
    constant = mx == m.amin(dim=(1, 2), keepdim=True)
    low = (m < delta_l * mx) & ~constant
    high = (m > delta_h * mx) & ~constant
    return low, high


def spatial_seed_mask(m: torch.Tensor, cfg: SagdConfig) -> torch.Tensor:
    """Binary (B, H, W) seed mask: 0 where attention is below delta_l*max or
    above delta_h*max (strict inequalities), 1 otherwise."""
    check_spatial_map(m, name="self-attention map")
    low, high = _seed_zero_sets(m, cfg.delta_l, cfg.delta_h)
    return (~(low | high)).to(m.dtype)


def dilate_to_blocks(seed: torch.Tensor, block_size: int) -> torch.Tensor:
    """Expand each zero seed into a block_size x block_size zero square.

    Blocks anchor at the seed and shift inward at borders so a full square
    is always dropped.  block_size above min(H, W) is clamped with a warning.
    """
    check_spatial_map(seed, name="seed mask")
    _, h, w = seed.shape
    size = int(block_size)
    if size < 1:
        raise ValueError(f"block_size must be >= 1, got {block_size}")
    if size > min(h, w):
        logger.warning(
            "block_size %d exceeds map side %d; clamping", size, min(h, w)
        )
        size = min(h, w)
    if size == 1:
        return seed.clone()

    zeros = (seed == 0).to(seed.dtype)
    # collapse seeds whose shifted anchors coincide at the border
    rows = torch.cat(
        [zeros[:, : h - size, :], zeros[:, h - size :, :].amax(dim=1, keepdim=True)],
        dim=1,
    )
    anchors = torch.cat(
        [rows[:, :, : w - size], rows[:, :, w - size :].amax(dim=2, keepdim=True)],
        dim=2,
    )
    pad = size - 1
    padded = F.pad(anchors.unsqueeze(1), (pad, pad, pad, pad))
    covered = F.max_pool2d(padded, kernel_size=size, stride=1).squeeze(1)
    return (covered < 0.5).to(seed.dtype)


def build_spatial_drop_mask(
    m: torch.Tensor, cfg: SagdConfig, include_low: bool = True
) -> torch.Tensor:
    """Full drop mask from a self-attention map: threshold, then dilate.

    Discriminative seeds dilate with block_size_high, background seeds with
    block_size_low; ``include_low=False`` keeps only the discriminative stage.
    """
    check_spatial_map(m, name="self-attention map")
    _, h, w = m.shape
    low, high = _seed_zero_sets(m, cfg.delta_l, cfg.delta_h)
    size_high, size_low = cfg.resolve(h, w)
    mask = dilate_to_blocks((~high).to(m.dtype), size_high)
    if include_low:
        mask = mask * dilate_to_blocks((~low).to(m.dtype), size_low)
    return mask


def apply_spatial_mask(f: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Multiply the mask into every channel; no rescaling of survivors."""
    if f.dim() != 4 or m.dim() != 3 or (f.shape[0],) + f.shape[2:] != m.shape:
        raise ValueError(
            f"spatial mask shape {tuple(m.shape)} does not match feature map "
            f"{tuple(f.shape)}"
        )
    return f * m.unsqueeze(1)
