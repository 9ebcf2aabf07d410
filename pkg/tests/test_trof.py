import math

import numpy as np
import pytest
import torch

from oracles import corr_oracle, pool_oracle, sample_oracle, upsample_oracle
from pssflow.errors import NumericError, ValidationError
from pssflow.flow import FlowField
from pssflow.trof import (
    ETROF,
    CorrelationFusion,
    FlowDecoder,
    FlowFusion,
    MotionEncoder,
    build_correlation_volume,
    lookup,
    trof_forward,
    upsample_flow,
)


def test_correlation_matches_double_loop():
    g = torch.Generator().manual_seed(0)
    fs = torch.randn(1, 5, 8, 8, generator=g, dtype=torch.float64)
    ft = torch.randn(1, 5, 8, 8, generator=g, dtype=torch.float64)
    vol = build_correlation_volume(fs, ft, levels=3, radius=1)
    ref = corr_oracle(fs[0].numpy(), ft[0].numpy())
    np.testing.assert_allclose(vol.dense(0)[0].numpy(), ref, atol=1e-6)
    lvl1 = vol.dense(1)[0].numpy()
    for y in range(8):
        for x in range(8):
            np.testing.assert_allclose(lvl1[y, x], pool_oracle(ref[y, x]), atol=1e-6)


def test_one_hot_features_give_scaled_identity():
    d = 16
    f = torch.zeros(1, d, 4, 4)
    for p in range(16):
        f[0, p, p // 4, p % 4] = 1.0
    dense = build_correlation_volume(f, f, levels=1).dense(0)[0].reshape(16, 16)
    torch.testing.assert_close(dense, torch.eye(16) / math.sqrt(d))


@pytest.mark.parametrize("h,w", [(5, 7), (1, 3), (9, 9)])
def test_pyramid_dims_ceil(h, w):
    f = torch.randn(1, 3, h, w, dtype=torch.float64)
    vol = build_correlation_volume(f, f, levels=3)
    for l, p in enumerate(vol.pyramid):
        assert p.shape[-2:] == (math.ceil(h / 2**l), math.ceil(w / 2**l))
    # partial windows average only the cells that exist
    ref = vol.dense(0)[0, 0, 0].numpy()
    np.testing.assert_allclose(vol.dense(1)[0, 0, 0].numpy(), pool_oracle(ref), atol=1e-12)


def test_degenerate_and_zero_volumes():
    f = torch.randn(2, 4, 3, 3)
    vol = build_correlation_volume(f, torch.zeros_like(f), levels=1)
    assert vol.levels == 1 and not vol.pyramid[0].any()
    with pytest.raises(ValidationError):
        build_correlation_volume(f, torch.zeros(2, 4, 3, 2))


def test_lookup_matches_bilinear_oracle():
    g = torch.Generator().manual_seed(1)
    fs = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
    ft = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
    vol = build_correlation_volume(fs, ft, levels=2, radius=2)
    flow = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64) * 2.5
    out = lookup(vol, flow)[0].numpy()
    r, side = 2, 5
    assert out.shape == (2 * side * side, 8, 8)
    for y in range(8):
        for x in range(8):
            for l in range(2):
                m = vol.dense(l)[0, y, x].numpy()
                cx = (x + flow[0, 0, y, x].item()) / 2**l
                cy = (y + flow[0, 1, y, x].item()) / 2**l
                for iy in range(side):
                    for ix in range(side):
                        want = sample_oracle(m, cx + ix - r, cy + iy - r)
                        assert abs(out[l * side * side + iy * side + ix, y, x] - want) < 1e-6


def test_lookup_integer_flow_is_indexing():
    f = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    t = torch.randn(1, 3, 8, 8, dtype=torch.float64)
    vol = build_correlation_volume(f, t, levels=1, radius=0)
    flow = torch.zeros(1, 2, 8, 8, dtype=torch.float64)
    flow[:, 0] = 1.0
    out = lookup(vol, flow)[0, 0]
    dense = vol.dense(0)[0]
    for y in range(8):
        for x in range(7):
            assert abs(out[y, x] - dense[y, x, y, x + 1]) < 1e-12
    assert torch.all(out[:, 7] == 0)
    zero = lookup(vol, torch.zeros_like(flow))[0, 0]
    diag = torch.stack([torch.stack([dense[y, x, y, x] for x in range(8)]) for y in range(8)])
    torch.testing.assert_close(zero, diag)


def test_lookup_far_outside_is_zero():
    f = torch.randn(1, 3, 4, 4)
    vol = build_correlation_volume(f, f, levels=2, radius=1)
    assert not lookup(vol, torch.full((1, 2, 4, 4), 50.0)).any()
    with pytest.raises(NumericError):
        lookup(vol, torch.full((1, 2, 4, 4), float("nan")))


def test_upsample_examples():
    const = torch.zeros(1, 2, 8, 8)
    const[:, 0] = 1.0
    up = upsample_flow(const)
    assert up.shape == (1, 2, 64, 64)
    assert torch.all(up[:, 0] == 8) and torch.all(up[:, 1] == 0)
    assert not upsample_flow(torch.zeros(1, 2, 3, 3)).any()
    ys, xs = np.mgrid[0:8, 0:8]
    ramp = np.stack([0.3 * xs - 0.2 * ys, 0.1 * ys + 1.0]).astype(np.float64)
    got = upsample_flow(torch.from_numpy(ramp)[None])[0].numpy()
    np.testing.assert_allclose(got, upsample_oracle(ramp), atol=1e-9)
    ff = upsample_flow(FlowField(np.ones((2, 2, 2), np.float32), 8))
    assert ff.stride == 1 and ff.shape == (16, 16)
    with pytest.raises(ValidationError):
        upsample_flow(torch.zeros(1, 2, 2, 2), stride=4)
    with pytest.raises(ValidationError):
        upsample_flow(FlowField(np.zeros((2, 2, 2), np.float32), 1))


def _zero_bias(m):
    with torch.no_grad():
        for n, p in m.named_parameters():
            if n.endswith("bias"):
                p.zero_()


def test_fusions():
    cf, ff = CorrelationFusion(10, 12), FlowFusion(6)
    _zero_bias(cf)
    _zero_bias(ff)
    assert not cf(torch.zeros(1, 10, 3, 4), torch.zeros(1, 10, 3, 4)).any()
    assert not ff(torch.zeros(1, 2, 3, 4), torch.zeros(1, 2, 3, 4)).any()
    a, b = torch.randn(1, 10, 5, 6), torch.randn(1, 10, 5, 6)
    assert cf(a, b).shape == (1, 12, 5, 6)
    assert not torch.allclose(cf(a, b), cf(b, a))
    fa, fb = torch.randn(1, 2, 5, 6), torch.randn(1, 2, 5, 6)
    assert ff(fa, fb).shape == (1, 6, 5, 6) and not torch.allclose(ff(fa, fb), ff(fb, fa))


def test_motion_encoder():
    me = MotionEncoder(8 + 4 + 6, 10, 2)
    _zero_bias(me)
    z = [torch.zeros(1, c, 4, 4) for c in (8, 4, 6)]
    feat, state = me(*z)
    assert not feat.any() and not state.any()
    assert feat.shape == (1, 10, 4, 4) and state.shape == (1, 2, 4, 4)
    me = MotionEncoder(8 + 4 + 6, 10, 2)
    x = [torch.randn(1, c, 4, 4) for c in (8, 4, 6)]
    f1, s1 = me(*x)
    f2, s2 = me(x[0], x[1], x[2] + 1.0)
    assert not torch.allclose(f1, f2) and not torch.allclose(s1, s2)
    with pytest.raises(ValidationError):
        me(x[0], x[1], torch.zeros(1, 6, 3, 4))


@pytest.fixture
def model(tiny_cfg):
    torch.manual_seed(0)
    return ETROF(tiny_cfg)


def test_refinement_laws(model):
    reps = [torch.randn(1, 12, 32, 24) for _ in range(3)]
    size = (32, 24)
    trip = model.prepare(*(model.encode(r) for r in reps), size)
    st = model.init_state(trip, 0)
    torch.testing.assert_close(st.h, torch.tanh(trip.context))
    assert not st.f_fwd.any() and not st.f_bwd.any() and st.k == 0
    for k in range(3):
        nxt = model.step(trip, st, model.mop_input(None, st, trip))
        assert nxt.k == k + 1
        d_bwd, d_fwd = nxt.deltas[-1].split(2, 1)
        assert torch.equal(nxt.f_fwd, st.f_fwd + d_fwd)
        assert torch.equal(nxt.f_bwd, st.f_bwd + d_bwd)
        st = nxt
    with torch.no_grad():
        model.decoder.conv2.weight.zero_()
        model.decoder.conv2.bias.zero_()
    after = model.step(trip, st, model.mop_input(None, st, trip))
    assert torch.equal(after.f_fwd, st.f_fwd) and torch.equal(after.f_bwd, st.f_bwd)


def test_trof_forward_contract(model):
    reps = [torch.randn(2, 12, 20, 28) for _ in range(3)]
    out = trof_forward(model, *reps, iters=3)
    assert out.flow_fwd.shape == (2, 2, 20, 28) and out.flow_bwd.shape == (2, 2, 20, 28)
    assert len(out.fwd_iters) == 3 and len(out.bwd_iters) == 3
    assert out.motion.shape == (2, model.cfg.motion_dim, 3, 4)
    again = trof_forward(model, *reps, iters=3)
    assert torch.equal(out.flow_fwd, again.flow_fwd)
    with pytest.raises(ValidationError):
        trof_forward(model, *reps, iters=0)


def test_mop_source_is_used(model):
    reps = [torch.randn(1, 12, 16, 16) for _ in range(3)]
    base = trof_forward(model, *reps, iters=2)
    fixed = torch.ones(1, model.mop_channels, 2, 2)
    moved = trof_forward(model, *reps, iters=2, f_mop_source=fixed)
    assert not torch.allclose(base.flow_fwd, moved.flow_fwd)
    calls = []
    trof_forward(model, *reps, iters=2, f_mop_source=lambda k, s: calls.append(k) or fixed)
    assert calls == [0, 1]


def test_decoder_channel_count(tiny_cfg):
    assert FlowDecoder(tiny_cfg.hidden_dim)(torch.randn(1, tiny_cfg.hidden_dim, 2, 2)).shape == (1, 4, 2, 2)
