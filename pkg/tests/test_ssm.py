import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drowzee import ssm
from drowzee.ssm import (DiscreteSSM, init_s6_weights, s6_selective_scan, selective_scan,
                         ssm_apply_conv, ssm_conv_kernel, ssm_recurrence, zoh_discretize)
from drowzee.tensor import ShapeError, Tensor, finite_diff_check

BACKENDS = ["numpy", "numba"]


def leaf(a):
    return Tensor(a, requires_grad=True)


def test_zoh_analytic_values():
    d = zoh_discretize(np.array([-1.0]), np.array([1.0]), np.log(2.0))
    assert d.A_bar.data[0] == pytest.approx(0.5, abs=1e-15)
    assert d.B_bar.data[0] == pytest.approx(0.5, abs=1e-15)


def test_zoh_series_limit():
    # exact relative deviation from delta*b is |delta*a|/2, so keep |a| <= 16 (the A init range)
    a, b = np.array([-3.0, -0.2, -16.0]), np.array([0.7, -1.3, 2.0])
    d = zoh_discretize(a, b, 1e-12)
    assert np.allclose(d.B_bar.data, 1e-12 * b, rtol=1e-15, atol=0)
    d6 = zoh_discretize(a, b, 1e-6)
    assert np.linalg.norm(d6.B_bar.data - 1e-6 * b) / np.linalg.norm(1e-6 * b) < 1e-5


def test_zoh_rejects_nonpositive_delta():
    with pytest.raises(ValueError):
        zoh_discretize(np.array([-1.0]), np.array([1.0]), 0.0)
    with pytest.raises(ValueError):
        zoh_discretize(np.array([-1.0]), np.array([1.0]), np.array([0.1, -0.1]))


def test_discrete_abar_strictly_inside_unit_interval(rng):
    A = -rng.uniform(0.01, 10, size=(5, 8))
    d = zoh_discretize(A, rng.normal(size=(5, 8)), rng.uniform(1e-3, 1, size=(5, 1)))
    assert np.all(np.abs(d.A_bar.data) < 1)


def scalar_ssm(a_bar, b_bar):
    return DiscreteSSM(Tensor(np.array([a_bar])), Tensor(np.array([b_bar])))


def test_recurrence_examples():
    y = ssm_recurrence(scalar_ssm(0.5, 1.0), np.array([1.0]), np.array([1.0, 0.0, 0.0]))
    assert np.allclose(y.data, [1.0, 0.5, 0.25])
    assert np.array_equal(ssm_recurrence(scalar_ssm(0.5, 1.0), np.array([1.0]), np.zeros(5)).data,
                          np.zeros(5))
    x = np.array([2.0, -1.0, 3.0])
    y0 = ssm_recurrence(scalar_ssm(0.0, 0.7), np.array([1.5]), x)
    assert np.allclose(y0.data, 1.5 * 0.7 * x)


def test_recurrence_extent_mismatch():
    d = DiscreteSSM(Tensor(np.full(3, 0.5)), Tensor(np.ones(3)))
    with pytest.raises(ShapeError):
        ssm_recurrence(d, np.ones(2), np.ones(4))
    with pytest.raises(ShapeError):
        ssm_recurrence(d, np.ones(3), np.ones(4), h0=np.zeros(2))


def test_recurrence_initial_state():
    y = ssm_recurrence(scalar_ssm(0.5, 1.0), np.array([1.0]), np.zeros(3), h0=np.array([4.0]))
    assert np.allclose(y.data, [2.0, 1.0, 0.5])


def test_kernel_examples(rng):
    assert np.allclose(ssm_conv_kernel(scalar_ssm(0.5, 1.0), np.array([1.0]), 3).data, [1, 0.5, 0.25])
    assert np.array_equal(ssm_conv_kernel(scalar_ssm(0.5, 1.0), np.array([0.0]), 4).data, np.zeros(4))
    d = DiscreteSSM(Tensor(np.array([0.9, -0.3])), Tensor(np.array([1.0, 2.0])))
    C = np.array([0.5, 1.5])
    K = ssm_conv_kernel(d, C, 6).data
    t = np.arange(6)
    assert np.allclose(K, 0.5 * 0.9 ** t + 3.0 * (-0.3) ** t)
    impulse = np.zeros(6)
    impulse[0] = 1.0
    assert np.allclose(ssm_recurrence(d, C, impulse).data, K, atol=1e-15)


def test_apply_conv_examples(rng):
    K = rng.normal(size=6)
    x = np.zeros(7)
    x[1] = 1.0
    y = ssm_apply_conv(x[1:], K).data           # impulse at the first retained step
    assert np.allclose(y, K, atol=1e-14)
    delta = np.zeros(6)
    delta[0] = 1.0
    z = rng.normal(size=6)
    assert np.allclose(ssm_apply_conv(z, delta).data, z, atol=1e-14)
    with pytest.raises(ShapeError):
        ssm_apply_conv(z, np.ones(5))


def random_lti(rng, ch, N):
    A = -rng.uniform(0.01, 5.0, size=(ch, N))
    delta = rng.uniform(1e-3, 1.0, size=(ch, 1))
    return zoh_discretize(A, rng.normal(size=(ch, N)), delta), rng.normal(size=(ch, N))


def test_conv_equals_recurrence_L64_N8(rng):
    d, C = random_lti(rng, 3, 8)
    x = rng.normal(size=(2, 64, 3))
    diff = np.abs(ssm_recurrence(d, C, x).data - ssm_apply_conv(x, ssm_conv_kernel(d, C, 64)).data)
    assert diff.max() < 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 16), st.integers(1, 128), st.integers(0, 2 ** 31))
def test_conv_recurrence_equivalence_property(N, L, seed):
    rng = np.random.default_rng(seed)
    d, C = random_lti(rng, 2, N)
    x = rng.normal(size=(1, L, 2))
    y_rec = ssm_recurrence(d, C, x).data
    y_conv = ssm_apply_conv(x, ssm_conv_kernel(d, C, L)).data
    assert np.max(np.abs(y_rec - y_conv)) < 1e-10


def test_long_run_stability_bound(rng):
    A = -rng.uniform(0.05, 2.0, size=(1, 4))
    d = zoh_discretize(A, rng.normal(size=(1, 4)), 0.3)
    x = rng.uniform(-1, 1, size=(1, 10_000, 1))
    a, b = d.A_bar.data.ravel(), d.B_bar.data.ravel()
    # each state channel obeys |h_t| <= |b| max|x| / (1 - |a|)
    for n in range(4):
        e = np.zeros(4)
        e[n] = 1.0
        h = ssm_recurrence(d, e[None], x).data
        assert np.abs(h).max() <= abs(b[n]) * np.abs(x).max() / (1 - abs(a[n])) + 1e-12


@pytest.mark.parametrize("variant", ["recurrence", "conv", "selective"])
def test_causality(rng, variant):
    L, t = 20, 11
    x = rng.normal(size=(1, L, 3))
    x2 = x.copy()
    x2[:, t + 1:] += rng.normal(size=(1, L - t - 1, 3))
    if variant == "selective":
        w = init_s6_weights(3, 4, rng=rng)
        y1, y2 = s6_selective_scan(x, w).data, s6_selective_scan(x2, w).data
    else:
        d, C = random_lti(rng, 3, 4)
        run = (lambda z: ssm_recurrence(d, C, z)) if variant == "recurrence" else \
            (lambda z: ssm_apply_conv(z, ssm_conv_kernel(d, C, L)))
        y1, y2 = run(x).data, run(x2).data
    assert np.allclose(y1[:, :t + 1], y2[:, :t + 1], atol=1e-13, rtol=0)
    assert not np.allclose(y1[:, t + 1:], y2[:, t + 1:])


def test_s6_zero_projections_is_skip_only(rng):
    w = init_s6_weights(4, 3, rng=rng)
    w.x_proj.data[:] = 0.0
    w.dt_proj.data[:] = 0.0
    x = rng.normal(size=(2, 9, 4))
    assert np.allclose(s6_selective_scan(x, w).data, x, atol=0)


@pytest.mark.parametrize("backend", BACKENDS)
def test_selective_scan_time_constant_reduces_to_recurrence(rng, backend):
    Bn, L, d, N = 2, 12, 3, 5
    A = -rng.uniform(0.1, 3.0, size=(1, d, N))
    dt = rng.uniform(0.05, 1.0, size=d)
    Bv, Cv, D = rng.normal(size=N), rng.normal(size=N), rng.normal(size=(1, d))
    u = rng.normal(size=(Bn, 1, L, d))
    y = selective_scan(u, np.broadcast_to(dt, u.shape), A, np.broadcast_to(Bv, (Bn, 1, L, N)),
                       np.broadcast_to(Cv, (Bn, 1, L, N)), D, backend=backend).data[:, 0]
    disc = zoh_discretize(A[0], np.broadcast_to(Bv, (d, N)), dt[:, None])
    ref = ssm_recurrence(disc, np.broadcast_to(Cv, (d, N)), u[:, 0]).data + D * u[:, 0]
    assert np.allclose(y, ref, atol=1e-12)


def test_selective_scan_backends_agree(rng):
    Bn, K, L, d, N = 2, 4, 17, 5, 6
    u = rng.normal(size=(Bn, K, L, d))
    delta = rng.uniform(1e-3, 2.0, size=u.shape)
    delta.flat[::5] = 1e-10                           # series branch of the ZOH factor
    delta.flat[1::5] = 1e-5                           # short-series branch
    A = -rng.uniform(0.05, 4.0, size=(K, d, N))
    B, C = rng.normal(size=(Bn, K, L, N)), rng.normal(size=(Bn, K, L, N))
    D = rng.normal(size=(K, d))
    outs, grads = [], []
    G = rng.normal(size=u.shape)
    for be in BACKENDS:
        ts = [leaf(a) for a in (u, delta, A, B, C, D)]
        y = selective_scan(*ts, backend=be)
        (y * G).sum().backward()
        outs.append(y.data)
        grads.append([t.grad for t in ts])
    assert np.allclose(outs[0], outs[1], atol=1e-13, rtol=0)
    for g0, g1 in zip(*grads):
        assert np.allclose(g0, g1, atol=1e-11, rtol=1e-11)


def test_selective_scan_shape_errors(rng):
    u = rng.normal(size=(1, 1, 4, 2))
    with pytest.raises(ShapeError):
        selective_scan(u, u, -np.ones((1, 2, 3)), np.ones((1, 1, 4, 3)), np.ones((1, 1, 4, 2)))


def test_s6_is_selective(rng):
    w = init_s6_weights(4, 4, rng=rng)
    w.dt_proj.data[:] = rng.normal(size=w.dt_proj.shape)
    x = rng.normal(size=(1, 16, 4))
    perm = rng.permutation(16)
    y = s6_selective_scan(x, w).data
    y_perm = s6_selective_scan(x[:, perm], w).data
    assert not np.allclose(y[:, perm], y_perm, atol=1e-6)


def test_s6_init_conventions(rng):
    w = init_s6_weights(32, 16, rng=rng)
    assert w.dt_rank == math.ceil(32 / 16)
    assert np.allclose(-np.exp(w.A_log.data), -np.arange(1, 17)[None].repeat(32, 0))
    dt = np.log1p(np.exp(w.dt_bias.data))
    assert np.all((dt >= 1e-3 - 1e-12) & (dt <= 1e-1 + 1e-12))
    assert np.array_equal(w.D.data, np.ones(32))


@pytest.mark.parametrize("backend", BACKENDS)
def test_selective_scan_gradcheck(rng, backend):
    Bn, K, L, d, N = 2, 1, 6, 4, 4
    ts = {"u": leaf(rng.normal(size=(Bn, K, L, d))),
          "delta": leaf(rng.uniform(0.05, 1.0, size=(Bn, K, L, d))),
          "A": leaf(-rng.uniform(0.2, 2.0, size=(K, d, N))),
          "B": leaf(rng.normal(size=(Bn, K, L, N))), "C": leaf(rng.normal(size=(Bn, K, L, N))),
          "D": leaf(rng.normal(size=(K, d)))}
    R = rng.normal(size=(Bn, K, L, d))
    rep = finite_diff_check(lambda: (selective_scan(*ts.values(), backend=backend) * R).sum(), ts)
    assert rep.passed, rep.lines()


def test_s6_gradcheck_batch2_L6_ch4_N4(rng):
    w = init_s6_weights(4, 4, rng=rng)
    w.dt_proj.data[:] = rng.normal(size=w.dt_proj.shape)
    x = leaf(rng.normal(size=(2, 6, 4)))
    R = rng.normal(size=(2, 6, 4))
    rep = finite_diff_check(lambda: (s6_selective_scan(x, w) * R).sum(), {"x": x, **w.tensors()})
    assert rep.passed, rep.lines()


def test_lti_gradchecks(rng):
    A = leaf(-rng.uniform(0.2, 2.0, size=(2, 3)))
    B, C = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(2, 3)))
    dl = leaf(rng.uniform(0.05, 1.0, size=(2, 1)))
    x = leaf(rng.normal(size=(2, 8, 2)))
    R = rng.normal(size=(2, 8, 2))
    params = {"A": A, "B": B, "C": C, "delta": dl, "x": x}
    rec = lambda: (ssm_recurrence(zoh_discretize(A, B, dl), C, x) * R).sum()   # noqa: E731
    conv = lambda: (ssm_apply_conv(x, ssm_conv_kernel(zoh_discretize(A, B, dl), C, 8)) * R).sum()  # noqa: E731
    assert finite_diff_check(rec, params).passed
    assert finite_diff_check(conv, params).passed


def test_zoh_gradient_near_series_threshold(rng):
    # |delta * a| straddling the series / expm1 switch points
    A = leaf(-np.array([1.0, 1.0, 1.0, 1.0]))
    dl = leaf(np.array([5e-9, 2e-8, 5e-4, 2e-3]))
    B = leaf(np.ones(4))
    rep = finite_diff_check(lambda: (zoh_discretize(A, B, dl).B_bar * 1e6).sum(), [A, dl, B],
                            step=1e-11, tolerance=1e-4)
    assert rep.passed, rep.lines()


def test_numba_registered():
    assert ssm._numba_available()
    assert set(ssm.SCAN_BACKENDS) == set(BACKENDS)
