"""Selective-SSM kernel: discretization, scan equivalence, gradients."""

import numpy as np
import pytest

from roadseg import ops
from roadseg.ssm import (DiscreteParams, TAYLOR_THRESHOLD, blelloch_prefix,
                         discretize_zoh, init_ssm_params, linear_recurrence,
                         scan_parallel, scan_sequential, selective_params,
                         ssm_forward, ssm_forward_multi, _scan_op)
from roadseg.tensor import DomainError, Tape, Tensor, backward, grad_check


def random_discrete(rng, length, d, n, dtype=np.float64):
    a = -rng.uniform(0.1, 3.0, size=(d, n))
    delta = rng.uniform(0.01, 1.0, size=(length, d))
    abar = np.exp(delta[:, :, None] * a[None])
    bbar_x = rng.normal(size=(length, d, n))
    c = rng.normal(size=(length, n))
    return DiscreteParams(abar.astype(dtype), bbar_x.astype(dtype), c.astype(dtype))


# ---------------------------------------------------------------------------
# ZOH discretization

def test_zoh_hand_value():
    # A=-1, delta=ln 2: abar = 1/2, bbar = ((1/2)-1)/(-1) * 1 = 1/2
    abar, bbar = discretize_zoh(np.array([[-1.0]]), np.array([1.0]),
                                np.array([np.log(2.0)]))
    np.testing.assert_allclose(abar, 0.5, atol=1e-15)
    np.testing.assert_allclose(bbar, 0.5, atol=1e-15)


def test_zoh_rejects_nonpositive_delta():
    with pytest.raises(DomainError):
        discretize_zoh(np.array([[-1.0]]), np.array([1.0]), np.array([0.0]))


def test_zoh_branches_agree_at_switch_point():
    # evaluating both branch formulas at |delta*A| = 1e-4: mismatch is
    # |B|*delta*|dA|/2 = 5e-9*|B|/|A|, under 1e-9 once |A| is a few units
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        mag = rng.uniform(5.0, 50.0)
        b = rng.uniform(-1.0, 1.0)
        delta = TAYLOR_THRESHOLD / mag
        exact = (np.exp(-TAYLOR_THRESHOLD) - 1.0) / (-mag) * b
        taylor = delta * b
        worst = max(worst, abs(exact - taylor))
    assert worst < 1e-9


def test_zoh_branch_mismatch_is_second_order():
    # |exact - taylor| = |B| * delta * |dA| / 2 to leading order, so the
    # switch at the threshold introduces only an O(threshold^2) seam
    rng = np.random.default_rng(1)
    for _ in range(100):
        a = -rng.uniform(0.1, 10.0)
        b = rng.uniform(-2.0, 2.0)
        delta = TAYLOR_THRESHOLD / abs(a)
        exact = (np.exp(delta * a) - 1.0) / a * b
        taylor = delta * b
        predicted = abs(b) * delta * TAYLOR_THRESHOLD / 2.0
        assert abs(abs(exact - taylor) - predicted) < predicted * 1e-3 + 1e-18


def test_zoh_abar_in_unit_interval():
    rng = np.random.default_rng(0)
    a = -np.exp(rng.normal(size=(5, 3)))
    delta = rng.uniform(1e-4, 2.0, size=5)
    abar, _ = discretize_zoh(a, rng.normal(size=3), delta)
    assert np.all(abar > 0) and np.all(abar < 1)


# ---------------------------------------------------------------------------
# scan equivalence

def test_parallel_matches_sequential_200_instances():
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(200):
        length = int(rng.integers(1, 65))
        d = int(rng.integers(1, 5))
        n = int(rng.integers(1, 5))
        dp = random_discrete(rng, length, d, n)
        ys = scan_sequential(dp)
        yp = scan_parallel(dp)
        worst = max(worst, np.abs(ys - yp).max() / max(1.0, np.abs(ys).max()))
    assert worst < 1e-10


def test_parallel_matches_sequential_float32():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(50):
        dp = random_discrete(rng, int(rng.integers(1, 65)), 3, 3, dtype=np.float32)
        ys = scan_sequential(dp)
        yp = scan_parallel(dp)
        worst = max(worst, np.abs(ys - yp).max() / max(1.0, np.abs(ys).max()))
    assert worst < 1e-5


def test_scan_hand_unrolled():
    # h = [1, 1.5, 1.75] for a=0.5, b=1 at every step, c=1, d=n=1
    dp = DiscreteParams(np.full((3, 1, 1), 0.5), np.ones((3, 1, 1)), np.ones((3, 1)))
    np.testing.assert_allclose(scan_parallel(dp)[:, 0], [1.0, 1.5, 1.75], atol=1e-15)


def test_scan_with_initial_state():
    dp = random_discrete(np.random.default_rng(3), 9, 2, 2)
    h0 = np.random.default_rng(4).normal(size=(2, 2))
    ys = scan_sequential(dp, h0)
    yp = scan_parallel(dp, h0)
    np.testing.assert_allclose(yp, ys, atol=1e-12)


def test_scan_length_one_and_non_power_of_two():
    rng = np.random.default_rng(5)
    for length in (1, 2, 3, 5, 17, 100):
        dp = random_discrete(rng, length, 2, 2)
        np.testing.assert_allclose(scan_parallel(dp), scan_sequential(dp), atol=1e-12)


def test_scan_stable_at_length_10000():
    rng = np.random.default_rng(11)
    dp = random_discrete(rng, 10000, 2, 2)
    y = scan_parallel(dp)
    assert np.isfinite(y).all()
    # |h| is bounded by max|b| / (1 - max|a|); y = c.h stays bounded too
    bound = np.abs(dp.bbar_x).max() / (1.0 - dp.abar.max())
    assert np.abs(y).max() <= dp.c.shape[1] * np.abs(dp.c).max() * bound


def test_blelloch_prefix_matches_cumulative_definition():
    rng = np.random.default_rng(21)
    a = rng.uniform(0.2, 0.9, size=(13, 2))
    b = rng.normal(size=(13, 2))
    ca, cb = blelloch_prefix(a, b)
    h = np.zeros(2)
    for i in range(13):
        h = a[i] * h + b[i]
        np.testing.assert_allclose(cb[i], h, atol=1e-12)
        np.testing.assert_allclose(ca[i], np.prod(a[: i + 1], axis=0), atol=1e-12)


# ---------------------------------------------------------------------------
# selectivity and gradients

def test_selective_params_depend_on_input():
    rng = np.random.default_rng(1)
    p = init_ssm_params(4, 8, 3, rng, dtype=np.float64)
    x1 = Tensor(rng.normal(size=(6, 4)), dtype=np.float64)
    x2 = Tensor(rng.normal(size=(6, 4)), dtype=np.float64)
    d1, b1, c1 = selective_params(x1, p)
    d2, b2, c2 = selective_params(x2, p)
    assert np.abs(d1.data - d2.data).max() > 1e-6
    assert np.abs(b1.data - b2.data).max() > 1e-6
    assert np.abs(c1.data - c2.data).max() > 1e-6
    assert np.all(d1.data > 0) and np.all(d2.data > 0)


def test_ssm_forward_not_permutation_equivariant():
    # the recurrence is order-dependent: permuting tokens must not merely
    # permute the outputs (that is the whole point of selective scanning)
    rng = np.random.default_rng(2)
    p = init_ssm_params(4, 8, 3, rng, dtype=np.float64)
    x = rng.normal(size=(10, 4))
    perm = rng.permutation(10)
    y = ssm_forward(Tensor(x, dtype=np.float64), p).data
    y_perm = ssm_forward(Tensor(x[perm], dtype=np.float64), p).data
    assert np.abs(y[perm] - y_perm).max() > 1e-8


def test_ssm_forward_identity_ablation():
    rng = np.random.default_rng(3)
    p = init_ssm_params(4, 8, 3, rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(5, 4)), dtype=np.float64)
    assert ssm_forward(x, p, ablate_identity=True) is x


def test_scan_op_gradients():
    rng = np.random.default_rng(8)
    b = Tensor(rng.normal(size=(8, 3, 2)), dtype=np.float64)
    c = Tensor(rng.normal(size=(8, 2)), dtype=np.float64)
    x = Tensor(rng.normal(size=(8, 3, 2)), requires_grad=True, dtype=np.float64)
    weights = Tensor(rng.normal(size=(8, 3)), dtype=np.float64)

    def f(t):
        return ops.tsum(ops.mul(_scan_op(ops.sigmoid(t), b, c), weights))

    assert grad_check(f, x) < 1e-6


def test_scan_op_gradients_per_channel_c():
    rng = np.random.default_rng(9)
    b = Tensor(rng.normal(size=(6, 2, 3)), dtype=np.float64)
    c = Tensor(rng.normal(size=(6, 2, 3)), dtype=np.float64)
    x = Tensor(rng.normal(size=(6, 2, 3)), requires_grad=True, dtype=np.float64)
    weights = Tensor(rng.normal(size=(6, 2)), dtype=np.float64)

    def f(t):
        return ops.tsum(ops.mul(_scan_op(ops.sigmoid(t), b, c), weights))

    assert grad_check(f, x) < 1e-6


def test_ssm_forward_end_to_end_gradient():
    rng = np.random.default_rng(10)
    p = init_ssm_params(3, 6, 2, rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(7, 3)), requires_grad=True, dtype=np.float64)
    weights = Tensor(rng.normal(size=(7, 3)), dtype=np.float64)

    def f(t):
        return ops.tsum(ops.mul(ssm_forward(t, p), weights))

    assert grad_check(f, x) < 1e-4


def test_ssm_parameter_gradients():
    rng = np.random.default_rng(12)
    p = init_ssm_params(3, 4, 2, rng, dtype=np.float64)
    x = Tensor(rng.normal(size=(5, 3)), dtype=np.float64)
    weights = Tensor(rng.normal(size=(5, 3)), dtype=np.float64)
    for name, param in p.named("p").items():
        def f(t):
            setattr(p, name.split(".")[1], t)
            try:
                return ops.tsum(ops.mul(ssm_forward(x, p), weights))
            finally:
                setattr(p, name.split(".")[1], param)
        err = grad_check(f, Tensor(param.data.copy(), requires_grad=True,
                                   dtype=np.float64))
        assert err < 1e-4, f"{name}: {err}"


def test_multi_direction_matches_sum_of_singles():
    rng = np.random.default_rng(13)
    p = init_ssm_params(4, 8, 2, rng, dtype=np.float64)
    x = rng.normal(size=(12, 4))
    perms = [np.arange(12), np.arange(12)[::-1].copy(), rng.permutation(12)]
    invs = [np.argsort(f) for f in perms]
    y = ssm_forward_multi(Tensor(x, dtype=np.float64), perms, invs, p).data
    expect = np.zeros_like(y)
    for f_, i_ in zip(perms, invs):
        expect += ssm_forward(Tensor(x[f_], dtype=np.float64), p).data[i_]
    np.testing.assert_allclose(y, expect, atol=1e-12)
