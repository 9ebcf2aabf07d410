import numpy as np
import pytest

from pssflow.errors import SpecError
from pssflow.events import EventStream, window_slices
from pssflow.harness.synth import PATTERNS, SceneSpec, gen_synthetic_sequence


def test_static_scene_is_silent():
    seq = gen_synthetic_sequence(SceneSpec(motion=[(0, 0, 0)] * 3), 0)
    assert len(seq.stream) == 0
    for f in list(seq.gt_fwd.values()) + list(seq.gt_bwd.values()):
        assert not f.data.any()


def test_translation_ground_truth():
    seq = gen_synthetic_sequence(SceneSpec(motion=[(3, 4, 0)] * 3), 1)
    assert seq.bounds == [0, 10000, 20000, 30000]
    np.testing.assert_allclose(seq.gt_fwd[1].data, np.broadcast_to([3, 4], (64, 64, 2)), atol=1e-5)
    np.testing.assert_allclose(seq.gt_bwd[2].data, -seq.gt_fwd[1].data, atol=1e-5)
    assert seq.gt_fwd[1].direction == "forward" and seq.gt_bwd[2].direction == "backward"


def test_rotation_ground_truth_is_affine():
    seq = gen_synthetic_sequence(SceneSpec(motion=[(0, 0, 2.0)] * 3, size=(32, 32)), 0)
    f = seq.gt_fwd[0].data
    c = 15.5
    th = np.radians(2.0)
    y, x = 3, 29
    want = [np.cos(th) * (x - c) - np.sin(th) * (y - c) + c - x, np.sin(th) * (x - c) + np.cos(th) * (y - c) + c - y]
    np.testing.assert_allclose(f[y, x], want, atol=1e-5)
    # for a small rotation the backward field is close to the negated forward one
    assert np.abs(f + seq.gt_bwd[1].data).max() < 0.2


@pytest.mark.parametrize("pattern", PATTERNS)
def test_streams_are_valid_and_deterministic(pattern):
    spec = SceneSpec(pattern=pattern, motion=[(1.5, -2, 1.0), (2, 0, 0), (0, 1, -1)], noise_rate=0.01, size=(32, 40))
    a = gen_synthetic_sequence(spec, 3)
    b = gen_synthetic_sequence(spec, 3)
    assert a.stream.same_as(b.stream) and len(a.stream) > 0
    # re-validates bounds, polarity and ordering
    s = a.stream
    EventStream(s.t.copy(), s.x.copy(), s.y.copy(), s.p.copy(), s.sensor_h, s.sensor_w)
    assert s.t.max() <= a.bounds[-1] and sum(len(w) for w in window_slices(s, a.bounds)) == len(s)
    assert not gen_synthetic_sequence(spec, 4).stream.same_as(a.stream)


def test_event_count_grows_with_speed():
    counts = []
    for v in (0.5, 1.0, 2.0, 4.0):
        counts.append(np.mean([len(gen_synthetic_sequence(SceneSpec(motion=[(v, 0, 0)] * 3), s).stream) for s in range(3)]))
    assert all(a < b for a, b in zip(counts, counts[1:]))


def test_displacement_bound_enforced():
    with pytest.raises(SpecError):
        gen_synthetic_sequence(SceneSpec(motion=[(4, 4, 0)] * 3, max_displacement=5.0), 0)
    with pytest.raises(SpecError):
        gen_synthetic_sequence(SceneSpec(motion=[(0, 0, 20)] * 3, max_displacement=5.0), 0)
    with pytest.raises(SpecError):
        SceneSpec(pattern="stripes")
    with pytest.raises(SpecError):
        SceneSpec(motion=[(0, 0, 0)] * 2, windows=3)
