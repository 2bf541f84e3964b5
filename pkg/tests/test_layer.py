import numpy as np
import pytest
import torch

from dgdm.attention import channelwise_average_pool, global_average_pool
from dgdm.cagd import CagdConfig, channel_drop_mask
from dgdm.layer import (
    Branch,
    DgdmConfig,
    DgdmLayer,
    apply_stage,
    forward_eval,
    forward_train,
    gradient_of_forward,
    replay_forward,
    stage_flags,
)
from dgdm.sagd import SagdConfig
from oracles import fd_jacobian, max_rel_err


def make_features(shape=(2, 3, 6, 6), seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g, dtype=dtype) + 0.05


def test_config_validation():
    with pytest.raises(ValueError, match="drop_rate"):
        DgdmConfig(drop_rate=1.5)


def test_stage_flags():
    assert stage_flags("stage1") == {"use_sagd_stage_low": False, "use_cagd": False}
    assert stage_flags("stage1+2") == {"use_sagd_stage_low": True, "use_cagd": False}
    assert stage_flags("full") == {"use_sagd_stage_low": True, "use_cagd": True}
    with pytest.raises(ValueError):
        stage_flags("stage3")
    cfg = apply_stage(DgdmConfig(), "stage1")
    assert not cfg.use_cagd and not cfg.use_sagd_stage_low


def test_drop_rate_zero_takes_importance_branch():
    f = make_features()
    cfg = DgdmConfig(drop_rate=0.0)
    out, trace = forward_train(f, cfg, torch.Generator().manual_seed(3))
    assert trace.branch is Branch.IMPORTANCE_MAP
    assert trace.spatial_drop_mask is None and trace.importance is not None

    # replicate the fixed draw order: branch scalar first, then channel uniforms
    g = torch.Generator().manual_seed(3)
    torch.rand((), generator=g)
    mask = channel_drop_mask(global_average_pool(f), cfg.cagd, g)
    imp = torch.sigmoid(channelwise_average_pool(f))
    expected = f * imp.unsqueeze(1) * mask[:, :, None, None]
    assert torch.equal(out, expected)
    assert torch.equal(trace.channel_mask, mask)


def test_drop_rate_one_takes_drop_branch():
    f = make_features()
    cfg = DgdmConfig(drop_rate=1.0, use_cagd=False)
    out, trace = forward_train(f, cfg, torch.Generator().manual_seed(3))
    assert trace.branch is Branch.DROP_MASK
    assert trace.importance is None and trace.spatial_drop_mask is not None
    expected = f * trace.spatial_drop_mask.unsqueeze(1)
    assert torch.equal(out, expected)


def test_importance_branch_frequency():
    f = make_features((1, 2, 4, 4))
    cfg = DgdmConfig(drop_rate=0.75, use_cagd=False)
    rng = torch.Generator().manual_seed(2024)
    hits = 0
    n = 10_000
    for _ in range(n):
        _, trace = forward_train(f, cfg, rng)
        hits += trace.branch is Branch.IMPORTANCE_MAP
    assert 0.23 <= hits / n <= 0.27


def test_drop_branch_frequency_three_sigma():
    f = make_features((1, 2, 4, 4))
    rate = 0.6
    cfg = DgdmConfig(drop_rate=rate, use_cagd=False)
    rng = torch.Generator().manual_seed(55)
    n = 10_000
    hits = sum(
        forward_train(f, cfg, rng)[1].branch is Branch.DROP_MASK for _ in range(n)
    )
    sigma = (rate * (1 - rate) / n) ** 0.5
    assert abs(hits / n - rate) <= 3 * sigma


def test_forward_eval_is_identity_and_rng_free():
    f = make_features()
    out = forward_eval(f)
    assert torch.equal(out, f)
    assert torch.equal(forward_eval(out), out)

    layer = DgdmLayer(DgdmConfig())
    layer.eval()
    assert torch.equal(layer(f), f)


def test_layer_requires_rng_in_training():
    layer = DgdmLayer(DgdmConfig())
    layer.train()
    with pytest.raises(ValueError, match="random generator"):
        layer(make_features())


def test_seeded_determinism():
    f = make_features(seed=9)
    cfg = DgdmConfig(drop_rate=0.5)
    out1, tr1 = forward_train(f, cfg, torch.Generator().manual_seed(77))
    out2, tr2 = forward_train(f, cfg, torch.Generator().manual_seed(77))
    assert torch.equal(out1, out2)
    assert tr1.branch == tr2.branch
    assert torch.equal(tr1.channel_mask, tr2.channel_mask)


@pytest.mark.parametrize("drop_rate", [0.0, 1.0])
@pytest.mark.parametrize("use_cagd", [True, False])
def test_shape_preserved(drop_rate, use_cagd):
    f = make_features((3, 5, 7, 4))
    cfg = DgdmConfig(drop_rate=drop_rate, use_cagd=use_cagd)
    out, _ = forward_train(f, cfg, torch.Generator().manual_seed(1))
    assert out.shape == f.shape


def test_masked_pixels_zero_in_every_channel():
    f = make_features((2, 4, 8, 8), seed=21)
    cfg = DgdmConfig(drop_rate=1.0, use_cagd=False)
    out, trace = forward_train(f, cfg, torch.Generator().manual_seed(4))
    mask = trace.spatial_drop_mask
    assert bool((mask == 0).any())
    zeroed = out.permute(1, 0, 2, 3)[:, mask == 0]
    assert bool((zeroed == 0).all())
    assert trace.zeroed_pixel_fraction == pytest.approx(
        (mask == 0).float().mean().item()
    )


def test_replay_reproduces_forward():
    f = make_features(seed=13)
    for rate in (0.0, 1.0):
        cfg = DgdmConfig(drop_rate=rate)
        out, trace = forward_train(f, cfg, torch.Generator().manual_seed(6))
        assert torch.equal(replay_forward(f, trace), out)


def test_gradient_identity_when_nothing_drops():
    # vacuous thresholds produce an all-ones drop mask: the layer is identity
    f = make_features((1, 3, 4, 4), dtype=torch.float64)
    cfg = DgdmConfig(
        drop_rate=1.0,
        use_cagd=False,
        sagd=SagdConfig(delta_l=0.0, delta_h=1.0),
    )
    out, trace = forward_train(f, cfg, torch.Generator().manual_seed(8))
    assert torch.equal(out, f)
    jac = gradient_of_forward(f, trace)
    assert torch.equal(jac[0], torch.eye(f.numel(), dtype=torch.float64))


def test_gradient_drop_branch_matches_finite_differences():
    f = make_features((1, 2, 4, 4), seed=31, dtype=torch.float64)
    cfg = DgdmConfig(drop_rate=1.0, sagd=SagdConfig(delta_l=0.2, delta_h=0.7))
    _, trace = forward_train(f, cfg, torch.Generator().manual_seed(10))
    assert bool((trace.spatial_drop_mask == 0).any())
    jac = gradient_of_forward(f, trace)[0]
    fd = fd_jacobian(lambda x: replay_forward(x, trace), f, step=1e-5)
    assert max_rel_err(jac, fd) <= 1e-4


@pytest.mark.parametrize("shape", [(1, 1, 2, 2), (1, 2, 4, 4)])
def test_gradient_importance_branch_matches_finite_differences(shape):
    f = make_features(shape, seed=37, dtype=torch.float64)
    cfg = DgdmConfig(drop_rate=0.0, cagd=CagdConfig(alpha=1.0, beta=2.0))
    _, trace = forward_train(f, cfg, torch.Generator().manual_seed(12))
    jac = gradient_of_forward(f, trace)[0]
    fd = fd_jacobian(lambda x: replay_forward(x, trace), f, step=1e-5)
    assert max_rel_err(jac, fd) <= 1e-4


def test_gradient_importance_cross_checked_with_autograd():
    f = make_features((2, 3, 3, 3), seed=41, dtype=torch.float64)
    cfg = DgdmConfig(drop_rate=0.0, use_cagd=True)
    _, trace = forward_train(f, cfg, torch.Generator().manual_seed(14))
    jac = gradient_of_forward(f, trace)
    auto = torch.autograd.functional.jacobian(
        lambda x: replay_forward(x, trace), f
    )
    n = f[0].numel()
    auto = auto.reshape(f.shape[0], n, f.shape[0], n)
    for b in range(f.shape[0]):
        assert torch.allclose(jac[b], auto[b, :, b], rtol=1e-12, atol=1e-12)


def test_gradient_rejects_mismatched_trace():
    f = make_features((1, 2, 4, 4))
    _, trace = forward_train(f, DgdmConfig(drop_rate=1.0), torch.Generator().manual_seed(1))
    with pytest.raises(ValueError, match="does not match"):
        gradient_of_forward(make_features((1, 2, 5, 5)), trace)


def test_frozen_trace_replay_on_module():
    f = make_features(seed=51)
    layer = DgdmLayer(DgdmConfig(drop_rate=1.0))
    layer.train()
    layer.record_trace = True
    rng = torch.Generator().manual_seed(16)
    out = layer(f, rng)
    layer.frozen_trace = layer.last_trace
    assert torch.equal(layer(f), out)
    assert torch.equal(layer(f), out)
