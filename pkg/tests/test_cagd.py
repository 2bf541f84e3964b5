import numpy as np
import pytest
import torch

from dgdm.cagd import (
    CagdConfig,
    apply_channel_mask,
    channel_drop_mask,
    drop_candidates,
    topk_channels,
)
from oracles import loop_apply_channel_mask


def test_config_validation():
    with pytest.raises(ValueError, match="alpha"):
        CagdConfig(alpha=1.5)
    with pytest.raises(ValueError, match="beta"):
        CagdConfig(beta=0.5)


def test_topk_example():
    s = torch.tensor([[0.9, 0.1, 0.5, 0.3, 0.7]])
    assert topk_channels(s, 2).tolist() == [[0, 4]]


def test_topk_uses_magnitude():
    s = torch.tensor([[-3.0, 1.0, 2.0]])
    assert topk_channels(s, 1).tolist() == [[0]]


def test_topk_rejects_bad_k():
    s = torch.zeros(1, 4)
    with pytest.raises(ValueError):
        topk_channels(s, 5)
    with pytest.raises(ValueError):
        topk_channels(s, 0)


def test_topk_matches_sort_oracle_with_ties():
    rng = np.random.default_rng(3)
    # quantized magnitudes force ties; oracle sorts by (-|s|, index)
    s = np.round(rng.normal(size=(4, 9)) * 2) / 2
    st = torch.from_numpy(s)
    for k in range(1, 10):
        got = topk_channels(st, k).numpy()
        for b in range(s.shape[0]):
            order = np.lexsort((np.arange(9), -np.abs(s[b])))
            assert got[b].tolist() == order[:k].tolist()


def test_candidates_from_spec_example():
    s = torch.tensor([[2.0, 4.0, 6.0, 8.0]])
    cand, tau = drop_candidates(s, CagdConfig(alpha=0.5, beta=3.0))
    assert tau.item() == pytest.approx(6.0)
    assert cand.tolist() == [[True, True, False, False]]


def test_drop_frequency_matches_alpha():
    cfg = CagdConfig(alpha=0.5, beta=3.0)
    s = torch.tensor([[2.0, 4.0, 6.0, 8.0]])
    rng = torch.Generator().manual_seed(1234)
    drops = torch.zeros(4)
    trials = 10_000
    for _ in range(trials):
        drops += (channel_drop_mask(s, cfg, rng)[0] == 0).float()
    freq = drops / trials
    assert 0.48 <= freq[0].item() <= 0.52
    assert 0.48 <= freq[1].item() <= 0.52
    assert freq[2].item() == 0.0 and freq[3].item() == 0.0


def test_alpha_zero_never_drops():
    cfg = CagdConfig(alpha=0.0, beta=3.0)
    rng = torch.Generator().manual_seed(0)
    s = torch.randn(3, 8)
    mask = channel_drop_mask(s, cfg, rng)
    assert torch.equal(mask, torch.ones(3, 8))


@pytest.mark.parametrize("value", [3.0, 0.0])
@pytest.mark.parametrize("beta", [1.0, 3.0])
def test_all_equal_attentions_keep_everything(value, beta):
    cfg = CagdConfig(alpha=1.0, beta=beta)
    rng = torch.Generator().manual_seed(5)
    s = torch.full((2, 6), value)
    mask = channel_drop_mask(s, cfg, rng)
    assert torch.equal(mask, torch.ones(2, 6))


def test_dead_channels_are_candidates_when_tau_zero():
    s = torch.tensor([[0.0, 5.0, 3.0]])
    cfg = CagdConfig(alpha=1.0, beta=3.0)
    rng = torch.Generator().manual_seed(2)
    mask = channel_drop_mask(s, cfg, rng)
    assert mask.tolist() == [[0.0, 1.0, 1.0]]


def test_overshoot_exempts_largest_channel():
    # beta*min above every magnitude: all candidates except one survivor
    cfg = CagdConfig(alpha=1.0, beta=3.0)
    rng = torch.Generator().manual_seed(2)
    s = torch.tensor([[1.0, 1.1]])
    assert channel_drop_mask(s, cfg, rng).tolist() == [[0.0, 1.0]]
    s = torch.tensor([[1.0, 2.0, 2.0]])
    assert channel_drop_mask(s, cfg, rng).tolist() == [[0.0, 1.0, 0.0]]


def test_survivor_guarantee_property():
    rng_np = np.random.default_rng(17)
    for _ in range(100):
        s = torch.from_numpy(rng_np.normal(size=(3, 10)))
        beta = float(rng_np.uniform(1.0, 4.0))
        cfg = CagdConfig(alpha=1.0, beta=beta)
        cand, tau = drop_candidates(s, cfg)
        mask = channel_drop_mask(s, cfg, torch.Generator().manual_seed(9))
        mag = s.abs()
        above = mag >= tau.unsqueeze(1)
        # channels at or above the threshold are never candidates, never dropped
        # (continuous inputs: the tau == 0 carve-out cannot fire)
        assert not bool((cand & above).any())
        assert bool((mask[above] == 1).all())
        # at least one survivor per sample even with alpha = 1
        assert bool((mask.sum(dim=1) >= 1).all())


def test_mask_determinism():
    cfg = CagdConfig(alpha=0.5, beta=2.0)
    s = torch.randn(4, 16, dtype=torch.float64)
    m1 = channel_drop_mask(s, cfg, torch.Generator().manual_seed(42))
    m2 = channel_drop_mask(s, cfg, torch.Generator().manual_seed(42))
    assert torch.equal(m1, m2)


def test_apply_identity_mask():
    f = torch.randn(2, 3, 4, 4)
    assert torch.equal(apply_channel_mask(f, torch.ones(2, 3)), f)


def test_apply_selective_zeroing():
    f = torch.randn(1, 3, 4, 4)
    m = torch.tensor([[1.0, 0.0, 1.0]])
    out = apply_channel_mask(f, m)
    assert torch.equal(out[:, 0], f[:, 0])
    assert torch.equal(out[:, 2], f[:, 2])
    assert bool((out[:, 1] == 0).all())


def test_apply_matches_loop_oracle():
    rng = np.random.default_rng(23)
    f = rng.normal(size=(2, 4, 3, 5))
    m = (rng.random(size=(2, 4)) > 0.5).astype(np.float64)
    out = apply_channel_mask(torch.from_numpy(f), torch.from_numpy(m)).numpy()
    assert np.array_equal(out, loop_apply_channel_mask(f, m))


def test_apply_rejects_shape_mismatch():
    with pytest.raises(ValueError, match="does not match"):
        apply_channel_mask(torch.zeros(1, 3, 2, 2), torch.ones(1, 4))
