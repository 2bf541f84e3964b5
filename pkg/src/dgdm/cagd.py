"""Channel attention guided dropout.

Channel attentions come from global average pooling; a channel counts as
low-importance when its magnitude falls below ``beta`` times the smallest
per-sample magnitude, and each low-importance channel is zeroed with
probability ``alpha``.  Channels at or above the threshold always survive,
so the mask can thin out weak channels while letting them recover later in
training.  Top-k selection by magnitude is exposed as a diagnostic.
"""

from dataclasses import dataclass

import torch

__all__ = [
    "CagdConfig",
    "topk_channels",
    "drop_candidates",
    "channel_drop_mask",
    "apply_channel_mask",
]


@dataclass(frozen=True)
class CagdConfig:
    """Channel-dropout hyperparameters.

    alpha: probability of zeroing each below-threshold channel.
    beta:  threshold multiplier on the per-sample minimum attention magnitude.
    """

    alpha: float = 0.5
    beta: float = 3.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"cagd.alpha must be in [0, 1], got {self.alpha}")
        if self.beta < 1.0:
            raise ValueError(f"cagd.beta must be >= 1, got {self.beta}")


def _check_attention(s: torch.Tensor) -> None:
    if s.dim() != 2:
        raise ValueError(f"channel attention must be 2-D (B, C), got shape {tuple(s.shape)}")
    if not bool(torch.isfinite(s).all()):
        raise ValueError("channel attention contains non-finite entries")


def topk_channels(s: torch.Tensor, k: int) -> torch.Tensor:
    """Indices of the k largest-magnitude channels per sample, (B, k).

    Ranked by |S_c| descending; ties are broken toward the lower index.
    """
    _check_attention(s)
    n_channels = s.shape[1]
    if not 1 <= k <= n_channels:
        raise ValueError(f"k must be in [1, {n_channels}], got {k}")
    order = torch.argsort(-s.abs(), dim=1, stable=True)
    return order[:, :k]


def drop_candidates(s: torch.Tensor, cfg: CagdConfig) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample drop candidacy under the beta threshold.

    Returns ``(candidates, tau)`` where ``candidates`` is a (B, C) bool mask
    and ``tau = beta * min_c |S_c|`` per sample.  Degenerate cases:

    * all magnitudes equal: nothing is a candidate (the attentions carry no
      ranking signal);
    * ``tau == 0``: only exactly-dead channels (|S_c| == 0) are candidates;
    * ``tau > max_c |S_c|``: every channel is a candidate except the single
      largest-magnitude one (lowest index on ties), so the map can never be
      erased completely.
    """
    _check_attention(s)
    mag = s.abs()
    lo = mag.amin(dim=1, keepdim=True)
    hi = mag.amax(dim=1, keepdim=True)
    tau = cfg.beta * lo

    candidates = mag < tau
    candidates = torch.where(tau == 0, mag == 0, candidates)

    # tau above every magnitude: exempt one survivor per sample
    overshoot = tau > hi
    if bool(overshoot.any()):
        all_cand = torch.ones_like(candidates)
        keep = torch.argsort(-mag, dim=1, stable=True)[:, :1]
        all_cand.scatter_(1, keep, False)
        candidates = torch.where(overshoot, all_cand, candidates)

    candidates = candidates & (hi != lo)
    return candidates, tau.squeeze(1)


def channel_drop_mask(
    s: torch.Tensor, cfg: CagdConfig, rng: torch.Generator
) -> torch.Tensor:
    """Binary (B, C) channel mask: candidates are zeroed with probability alpha."""
    candidates, _ = drop_candidates(s, cfg)
    u = torch.rand(s.shape, generator=rng, dtype=s.dtype)
    dropped = candidates & (u < cfg.alpha)
    return (~dropped).to(s.dtype)


def apply_channel_mask(f: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Multiply each channel by its mask entry; surviving channels pass unscaled."""
    if m.dim() != 2 or f.dim() != 4 or f.shape[:2] != m.shape:
        raise ValueError(
            f"channel mask shape {tuple(m.shape)} does not match feature map "
            f"{tuple(f.shape)}"
        )
    return f * m[:, :, None, None]
