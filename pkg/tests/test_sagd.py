import logging

import numpy as np
import pytest
import torch

from dgdm.attention import channelwise_average_pool
from dgdm.sagd import (
    ADAPTIVE_7,
    SagdConfig,
    apply_spatial_mask,
    build_spatial_drop_mask,
    dilate_to_blocks,
    resolve_block_size,
    spatial_seed_mask,
)
from oracles import brute_dilate, loop_apply_spatial_mask, loop_seed_mask


def test_config_validation():
    with pytest.raises(ValueError, match="delta_l"):
        SagdConfig(delta_l=-0.1)
    with pytest.raises(ValueError, match="below"):
        SagdConfig(delta_l=0.9, delta_h=0.5)
    with pytest.raises(ValueError, match="block_size_high"):
        SagdConfig(block_size_high=0)
    with pytest.raises(ValueError, match="adaptive"):
        SagdConfig(adaptive="sometimes")


def test_seed_mask_threshold_example():
    m = torch.tensor([[[10.0, 1.0], [5.0, 0.0]]])
    cfg = SagdConfig(delta_l=0.15, delta_h=0.9)
    seeds = spatial_seed_mask(m, cfg)
    assert seeds.tolist() == [[[0.0, 0.0], [1.0, 0.0]]]


def test_seed_mask_vacuous_thresholds():
    m = torch.rand(3, 6, 6) + 0.1
    cfg = SagdConfig(delta_l=0.0, delta_h=1.0)
    assert torch.equal(spatial_seed_mask(m, cfg), torch.ones(3, 6, 6))


def test_seed_mask_matches_loop_oracle():
    rng = np.random.default_rng(31)
    cfg = SagdConfig(delta_l=0.2, delta_h=0.8)
    for _ in range(100):
        m = rng.random(size=(2, 8, 8))
        got = spatial_seed_mask(torch.from_numpy(m), cfg).numpy()
        assert np.array_equal(got, loop_seed_mask(m, 0.2, 0.8))


@pytest.mark.parametrize("value", [5.0, 0.0, -2.0])
def test_constant_map_keeps_everything(value):
    m = torch.full((2, 4, 4), value)
    seeds = spatial_seed_mask(m, SagdConfig())
    assert torch.equal(seeds, torch.ones(2, 4, 4))


def test_resolve_block_size():
    assert resolve_block_size(2, 14, 14) == 2
    assert resolve_block_size(ADAPTIVE_7, 14, 14) == 2
    assert resolve_block_size(ADAPTIVE_7, 5, 5) == 1
    assert resolve_block_size(ADAPTIVE_7, 21, 14) == 2
    with pytest.raises(ValueError):
        resolve_block_size(0, 4, 4)


def test_config_resolve_adaptive_applies_to_both_sizes():
    cfg = SagdConfig(block_size_high=2, block_size_low=3, adaptive=ADAPTIVE_7)
    assert cfg.resolve(14, 14) == (2, 2)
    assert SagdConfig(block_size_high=2, block_size_low=3).resolve(14, 14) == (2, 3)


def test_dilate_single_seed_example():
    seed = torch.ones(1, 4, 4)
    seed[0, 1, 1] = 0
    out = dilate_to_blocks(seed, 2)
    zeros = {(i, j) for i in range(4) for j in range(4) if out[0, i, j] == 0}
    assert zeros == {(1, 1), (1, 2), (2, 1), (2, 2)}


def test_dilate_block_size_one_is_passthrough():
    rng = np.random.default_rng(5)
    seed = torch.from_numpy((rng.random(size=(3, 5, 5)) > 0.3).astype(np.float64))
    assert torch.equal(dilate_to_blocks(seed, 1), seed)


@pytest.mark.parametrize("pos", [(0, 0), (2, 3), (4, 4), (3, 0)])
def test_dilate_full_map_block_drops_everything(pos):
    seed = torch.ones(1, 5, 5)
    seed[0, pos[0], pos[1]] = 0
    assert torch.equal(dilate_to_blocks(seed, 5), torch.zeros(1, 5, 5))


def test_dilate_matches_brute_oracle():
    rng = np.random.default_rng(41)
    for _ in range(200):
        seed = (rng.random(size=(1, 5, 5)) > 0.25).astype(np.float64)
        for bs in (1, 2, 3):
            got = dilate_to_blocks(torch.from_numpy(seed), bs).numpy()
            assert np.array_equal(got, brute_dilate(seed, bs))


def test_dilate_rectangular_matches_brute_oracle():
    rng = np.random.default_rng(43)
    for _ in range(50):
        seed = (rng.random(size=(2, 4, 7)) > 0.3).astype(np.float64)
        for bs in (2, 3, 4):
            got = dilate_to_blocks(torch.from_numpy(seed), bs).numpy()
            assert np.array_equal(got, brute_dilate(seed, bs))


def test_dilate_clamps_oversized_block(caplog):
    seed = torch.ones(1, 3, 3)
    seed[0, 2, 2] = 0
    with caplog.at_level(logging.WARNING, logger="dgdm.sagd"):
        out = dilate_to_blocks(seed, 10)
    assert any("clamping" in rec.message for rec in caplog.records)
    assert torch.equal(out, torch.zeros(1, 3, 3))


def test_dilate_zero_monotone_in_seeds():
    # flipping one more seed to zero can only grow the zero set
    rng = np.random.default_rng(47)
    for _ in range(50):
        seed = (rng.random(size=(1, 6, 6)) > 0.2).astype(np.float64)
        base = dilate_to_blocks(torch.from_numpy(seed), 2).numpy()
        ones = np.argwhere(seed[0] == 1)
        if len(ones) == 0:
            continue
        i, j = ones[rng.integers(len(ones))]
        more = seed.copy()
        more[0, i, j] = 0
        grown = dilate_to_blocks(torch.from_numpy(more), 2).numpy()
        assert np.all(grown <= base)


def test_mask_commutes_with_cap():
    # channel-shared mask: masking then CAP equals CAP then masking, exactly
    f = torch.randn(2, 5, 6, 6)
    m_self = channelwise_average_pool(f)
    mask = build_spatial_drop_mask(m_self, SagdConfig())
    lhs = channelwise_average_pool(apply_spatial_mask(f, mask))
    rhs = channelwise_average_pool(f) * mask
    assert torch.equal(lhs, rhs)


def test_build_mask_with_uniform_sizes_equals_single_dilation():
    f = torch.rand(3, 7, 9)
    cfg = SagdConfig(delta_l=0.2, delta_h=0.8, block_size_high=2, block_size_low=2)
    combined = build_spatial_drop_mask(f, cfg)
    direct = dilate_to_blocks(spatial_seed_mask(f, cfg), 2)
    assert torch.equal(combined, direct)


def test_build_mask_stage1_ignores_background_seeds():
    m = torch.tensor([[[10.0, 1.0], [5.0, 4.0]]])
    cfg = SagdConfig(delta_l=0.15, delta_h=0.9, block_size_high=1, block_size_low=1)
    full = build_spatial_drop_mask(m, cfg, include_low=True)
    high_only = build_spatial_drop_mask(m, cfg, include_low=False)
    assert full.tolist() == [[[0.0, 0.0], [1.0, 1.0]]]
    assert high_only.tolist() == [[[0.0, 1.0], [1.0, 1.0]]]


def test_apply_identity_mask():
    f = torch.randn(2, 3, 4, 4)
    assert torch.equal(apply_spatial_mask(f, torch.ones(2, 4, 4)), f)


def test_apply_broadcasts_across_channels():
    f = torch.randn(1, 3, 4, 4)
    m = torch.ones(1, 4, 4)
    m[0, 2, 1] = 0
    out = apply_spatial_mask(f, m)
    assert bool((out[0, :, 2, 1] == 0).all())
    keep = torch.ones_like(f, dtype=torch.bool)
    keep[0, :, 2, 1] = False
    assert torch.equal(out[keep], f[keep])


def test_apply_matches_loop_oracle():
    rng = np.random.default_rng(53)
    f = rng.normal(size=(2, 3, 4, 5))
    m = (rng.random(size=(2, 4, 5)) > 0.5).astype(np.float64)
    out = apply_spatial_mask(torch.from_numpy(f), torch.from_numpy(m)).numpy()
    assert np.array_equal(out, loop_apply_spatial_mask(f, m))


def test_apply_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="does not match"):
        apply_spatial_mask(torch.zeros(1, 3, 4, 4), torch.ones(1, 4, 5))
