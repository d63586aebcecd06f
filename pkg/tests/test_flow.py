import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omnilab import flow
from omnilab.numcore import NonFiniteError, seeded_stream


def _x0(seed, shape=(4, 4, 3)):
    return np.random.default_rng(seed).uniform(size=shape).astype(np.float32)


def test_flow_example_invariants_10k_draws():
    rng = seeded_stream(0)
    x0 = _x0(0, (6,))
    ts = []
    for _ in range(10_000):
        ex = flow.make_training_example(x0, rng)
        t = np.float32(ex.t)
        assert np.array_equal(ex.x_t, (1 - t) * ex.x0 + t * ex.eps)
        assert np.array_equal(ex.v_target, ex.eps - ex.x0)
        ts.append(ex.t)
    ts = np.array(ts)
    assert 0.0 <= ts.min() and ts.max() <= 1.0
    # t ~ U[0, 1]: a 10-bin histogram of 10^4 draws stays within 5 sigma of flat
    counts = np.histogram(ts, bins=10, range=(0, 1))[0]
    assert np.all(np.abs(counts - 1000) < 5 * np.sqrt(1000 * 0.9))


def test_endpoints():
    x0 = _x0(1)
    assert np.array_equal(flow.make_training_example(x0, seeded_stream(1), t=0.0).x_t, x0)
    ex = flow.make_training_example(x0, seeded_stream(1), t=1.0)
    assert np.array_equal(ex.x_t, ex.eps)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), t=st.floats(0, 1))
def test_interpolation_matches_elementwise_loop(seed, t):
    x0 = _x0(seed % 1000, (5,))
    eps = np.random.default_rng(seed).normal(size=5).astype(np.float32)
    got = flow.interpolate(x0, eps, t)
    one, tt = np.float32(1), np.float32(t)
    want = np.array([(one - tt) * a + tt * b for a, b in zip(x0, eps)], dtype=np.float32)
    assert got.tobytes() == want.tobytes()


def test_flow_loss_values():
    v = np.random.default_rng(0).normal(size=(3, 5))
    assert flow.flow_loss(v, v) == 0.0
    assert flow.flow_loss(v + 1, v) == pytest.approx(1.0, abs=1e-12)
    w = np.random.default_rng(1).normal(size=(3, 5))
    total = 0.0
    for a, b in zip(v.ravel(), w.ravel()):
        total += (a - b) ** 2
    assert abs(flow.flow_loss(v, w) - total / v.size) < 1e-6


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_flow_loss_nonnegative_zero_iff_equal(seed):
    r = np.random.default_rng(seed)
    a = r.normal(size=7)
    b = a.copy()
    assert flow.flow_loss(a, b) == 0.0
    b[r.integers(7)] += r.uniform(1e-3, 1)
    assert flow.flow_loss(a, b) > 0.0


def test_direct_loss_values():
    assert flow.direct_loss(np.full((4, 4, 3), 0.5), np.zeros((4, 4, 3))) == 0.25
    x = _x0(2)
    assert flow.direct_loss(x, x) == 0.0
    y = _x0(3)
    assert abs(flow.direct_loss(x, y) - sum(float(d) ** 2 for d in (x - y).ravel()) / x.size) < 1e-6


@pytest.mark.parametrize("fn", [flow.flow_loss, flow.direct_loss])
def test_loss_shape_mismatch(fn):
    with pytest.raises(ValueError):
        fn(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("seed", range(10))
def test_exact_velocity_one_step(seed):
    x0 = _x0(seed)
    eps = np.random.default_rng(seed).normal(size=x0.shape).astype(np.float32)
    out = flow.sample(lambda x, t: eps - x0, x0.shape, steps=1, x1=eps)
    np.testing.assert_allclose(out, x0, rtol=0, atol=np.finfo(np.float32).eps * 8)


def test_exact_state_dependent_velocity_many_steps():
    # v(x, t) = (x - x0) / t is the straight-line field towards x0; Euler is exact on it
    x0 = _x0(4)
    x1 = np.random.default_rng(4).normal(size=x0.shape).astype(np.float64)
    out = flow.sample(lambda x, t: (x - x0) / t, x0.shape, steps=8, x1=x1, dtype=np.float64)
    np.testing.assert_allclose(out, x0, atol=1e-12)


def test_sample_is_deterministic():
    f = lambda x, t: 0.3 * x - t
    a = flow.sample(f, (2, 3), steps=5, rng=seeded_stream(9))
    b = flow.sample(f, (2, 3), steps=5, rng=seeded_stream(9))
    assert a.tobytes() == b.tobytes()


def test_sample_errors():
    with pytest.raises(ValueError):
        flow.sample(lambda x, t: x, (2,), steps=0, rng=seeded_stream(0))
    with pytest.raises(NonFiniteError) as exc, np.errstate(over="ignore"):
        flow.sample(lambda x, t: x * 1e30, (2,), steps=4, x1=np.ones(2, np.float32))
    assert exc.value.node.startswith("euler_step#")


def test_make_example_rejects_nonfinite():
    with pytest.raises(ValueError):
        flow.make_training_example(np.array([np.nan]), seeded_stream(0))
