"""Dual-attention guided dropblock for weakly supervised object localization."""

from .attention import channelwise_average_pool, global_average_pool, importance_map
from .cagd import CagdConfig, apply_channel_mask, channel_drop_mask, topk_channels
from .layer import Branch, DgdmConfig, DgdmLayer, ForwardTrace, forward_eval, forward_train
from .sagd import (
    ADAPTIVE_7,
    SagdConfig,
    apply_spatial_mask,
    build_spatial_drop_mask,
    dilate_to_blocks,
    resolve_block_size,
    spatial_seed_mask,
)

__all__ = [
    "ADAPTIVE_7",
    "Branch",
    "CagdConfig",
    "DgdmConfig",
    "DgdmLayer",
    "ForwardTrace",
    "SagdConfig",
    "apply_channel_mask",
    "apply_spatial_mask",
    "build_spatial_drop_mask",
    "channel_drop_mask",
    "channelwise_average_pool",
    "dilate_to_blocks",
    "forward_eval",
    "forward_train",
    "global_average_pool",
    "importance_map",
    "resolve_block_size",
    "spatial_seed_mask",
    "topk_channels",
]
