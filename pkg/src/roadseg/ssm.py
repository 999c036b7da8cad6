"""Selective state-space kernel.

A diagonal, per-channel SISO recurrence: continuous parameters (A, B)
are discretized per token with a zero-order hold under an input-
dependent timestep, then scanned over the sequence either step by step
or with a Blelloch-style parallel scan over the associative operator
(a1, b1) o (a2, b2) = (a1*a2, a2*b1 + b2).

Conventions: D is the inner channel count, N the state expansion
factor. A is parameterized as -exp(A_log) so it stays strictly
negative; the timestep goes through softplus so it stays strictly
positive; together these keep exp(delta*A) in (0, 1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import DomainError, Tensor, record

# below this |delta*A|, (exp(dA)-1)/A cancels badly; use Bbar = delta*B
TAYLOR_THRESHOLD = 1e-4


@dataclass
class SSMParams:
    """Learnable parameters of one selective SSM mixer."""

    a_log: Tensor          # [D, N]; A = -exp(a_log)
    w_in: Tensor           # [d_model, D]
    b_in: Tensor           # [D]
    w_delta: Tensor        # [d_model, D]
    b_delta: Tensor        # [D]
    w_b: Tensor            # [d_model, N]
    w_c: Tensor            # [d_model, N]
    w_out: Tensor          # [D, d_model]
    b_out: Tensor          # [d_model]

    @property
    def d_model(self):
        return self.w_in.shape[0]

    @property
    def d_inner(self):
        return self.w_in.shape[1]

    @property
    def n_state(self):
        return self.a_log.shape[1]

    def named(self, prefix):
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("a_log", "w_in", "b_in", "w_delta", "b_delta", "w_b", "w_c", "w_out", "b_out")}


def init_ssm_params(d_model, d_inner, n_state, rng, dtype=np.float32):
    """S4-style A init (A = -1..-N per channel), small random projections."""
    def w(shape, scale=0.02):
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True, dtype=dtype)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)

    a = np.tile(np.arange(1, n_state + 1, dtype=np.float64), (d_inner, 1))
    # delta bias chosen so softplus lands around 0.05 at init
    db = np.full(d_inner, np.log(np.expm1(0.05)))
    return SSMParams(
        a_log=Tensor(np.log(a), requires_grad=True, dtype=dtype),
        w_in=w((d_model, d_inner)), b_in=zeros(d_inner),
        w_delta=w((d_model, d_inner)), b_delta=Tensor(db, requires_grad=True, dtype=dtype),
        w_b=w((d_model, n_state)), w_c=w((d_model, n_state)),
        w_out=w((d_inner, d_model)), b_out=zeros(d_model),
    )


@dataclass
class DiscreteParams:
    """Per-token discretized recurrence inputs."""

    abar: np.ndarray    # [L, D, N], in (0, 1)
    bbar_x: np.ndarray  # [L, D, N], the product Bbar * x_t
    c: np.ndarray       # [L, N]


def discretize_zoh(a, b_t, delta_t):
    """One-step zero-order hold for a diagonal state matrix.

    Returns (abar, bbar) with abar = exp(delta*A) and
    bbar = ((exp(delta*A) - 1)/A) * B, falling back to the first-order
    expansion bbar = delta*B when |delta*A| < TAYLOR_THRESHOLD.
    """
    a = np.asarray(a, dtype=np.float64)
    b_t = np.asarray(b_t, dtype=np.float64)
    delta_t = np.asarray(delta_t, dtype=np.float64)
    if np.any(delta_t <= 0):
        raise DomainError("ZOH discretization requires delta > 0")
    da = delta_t[:, None] * a
    abar = np.exp(da)
    exact = np.divide(abar - 1.0, a, out=np.zeros_like(a), where=a != 0) * b_t[None, :]
    taylor = delta_t[:, None] * b_t[None, :]
    bbar = np.where(np.abs(da) < TAYLOR_THRESHOLD, taylor, exact)
    return abar, bbar


def scan_sequential(dp, h0=None):
    """Reference recurrence: h_t = abar_t*h_{t-1} + bbar_x_t, y_t = C_t . h_t."""
    length, d_inner, _ = dp.abar.shape
    h = np.zeros_like(dp.abar[0]) if h0 is None else np.array(h0, dtype=dp.abar.dtype)
    y = np.empty((length, d_inner), dtype=dp.abar.dtype)
    for t in range(length):
        h = dp.abar[t] * h + dp.bbar_x[t]
        y[t] = h @ dp.c[t]
    return y


def blelloch_prefix(a, b):
    """Inclusive prefix composition of per-step pairs along axis 0.

    Returns (ca, cb) with h_t = ca_t*h0 + cb_t. Up/down sweep over a
    power-of-two padding; identity element is (1, 0).
    """
    length = a.shape[0]
    p = 1
    while p < length:
        p *= 2
    aa = np.ones((p,) + a.shape[1:], dtype=a.dtype)
    bb = np.zeros((p,) + b.shape[1:], dtype=b.dtype)
    aa[:length] = a
    bb[:length] = b

    step = 1
    while step < p:
        r = np.arange(2 * step - 1, p, 2 * step)
        left = r - step
        # combine left block into right: s[r] := s[l] o s[r]
        bb[r] = bb[left] * aa[r] + bb[r]
        aa[r] = aa[left] * aa[r]
        step *= 2

    aa[-1] = 1.0
    bb[-1] = 0.0
    step = p // 2
    while step >= 1:
        r = np.arange(2 * step - 1, p, 2 * step)
        left = r - step
        al = aa[left].copy()
        bl = bb[left].copy()
        aa[left] = aa[r]
        bb[left] = bb[r]
        # right child prefix = parent prefix o left reduction
        bb[r] = bb[r] * al + bl
        aa[r] = aa[r] * al
        step //= 2

    # exclusive -> inclusive
    ca = aa[:length] * a
    cb = bb[:length] * a + b
    return ca, cb


def linear_recurrence(a, b, h0=None):
    """All states h_t of h_t = a_t*h_{t-1} + b_t via the parallel scan."""
    ca, cb = blelloch_prefix(a, b)
    if h0 is None:
        return cb
    return ca * np.asarray(h0, dtype=a.dtype) + cb


def scan_parallel(dp, h0=None):
    """Same contract as :func:`scan_sequential`, via the Blelloch sweep."""
    h = linear_recurrence(dp.abar, dp.bbar_x, h0)
    return np.einsum("ldn,ln->ld", h, dp.c)


def selective_params(x, p):
    """Input-dependent (delta, B, C) for each token of x [L, d_model]."""
    delta = ops.softplus(ops.linear(x, p.w_delta, p.b_delta))
    b = ops.matmul(x, p.w_b)
    c = ops.matmul(x, p.w_c)
    return delta, b, c


def _scan_op(abar, bx, c):
    """Taped scan primitive: y_t[d] = sum_n c_t[d, n] * h_t[d, n].

    c may be [L, N] (shared across channels) or [L, D, N] (per channel).
    Backward runs the adjoint recurrence lam_t = G_t + abar_{t+1}*lam_{t+1}
    (the reverse of the forward recurrence), itself evaluated with the
    same parallel sweep.
    """
    per_channel = c.data.ndim == 3
    h = linear_recurrence(abar.data, bx.data)
    if per_channel:
        y = np.einsum("ldn,ldn->ld", h, c.data)
    else:
        y = np.einsum("ldn,ln->ld", h, c.data)
    out = Tensor(y, dtype=abar.dtype)

    def bwd(g):
        big_g = g[:, :, None] * (c.data if per_channel else c.data[:, None, :])
        # reverse-time coefficients: lam_t uses abar_{t+1}; last step has none
        a_rev = np.empty_like(abar.data)
        a_rev[0] = 1.0
        a_rev[1:] = abar.data[:0:-1]
        lam = linear_recurrence(a_rev, big_g[::-1])[::-1]
        h_prev = np.empty_like(h)
        h_prev[0] = 0.0
        h_prev[1:] = h[:-1]
        ga = lam * h_prev
        gb = lam
        if per_channel:
            gc = g[:, :, None] * h
        else:
            gc = np.einsum("ld,ldn->ln", g, h)
        return ga, gb, gc

    return record(out, (abar, bx, c), bwd)


def _token_scan_inputs(x, p):
    """Taped per-token scan coefficients for x [L, d_model].

    Returns (abar, bx, c): the ZOH transition, discretized input, and
    readout vectors, all in the token order of x.
    """
    length = x.shape[0]
    d_inner, n_state = p.d_inner, p.n_state

    u = ops.linear(x, p.w_in, p.b_in)                       # [L, D]
    delta, b, c = selective_params(x, p)                    # [L,D], [L,N], [L,N]

    a = ops.neg(ops.exp(p.a_log))                           # [D, N], strictly negative
    a_b = ops.broadcast_to(ops.reshape(a, (1, d_inner, n_state)), (length, d_inner, n_state))
    delta_b = ops.broadcast_to(ops.reshape(delta, (length, d_inner, 1)),
                               (length, d_inner, n_state))
    b_b = ops.broadcast_to(ops.reshape(b, (length, 1, n_state)), (length, d_inner, n_state))
    u_b = ops.broadcast_to(ops.reshape(u, (length, d_inner, 1)), (length, d_inner, n_state))

    da = ops.mul(delta_b, a_b)
    abar = ops.exp(da)
    exact = ops.mul(ops.div(ops.sub(abar, 1.0), a_b), b_b)
    taylor = ops.mul(delta_b, b_b)
    bbar = ops.where_mask(np.abs(da.data) < TAYLOR_THRESHOLD, taylor, exact)
    bx = ops.mul(bbar, u_b)
    return abar, bx, c


def ssm_forward(x, p, ablate_identity=False):
    """Selective SSM mixer over a token sequence x [L, d_model].

    With ablate_identity the mixer is skipped entirely and x is
    returned unchanged.
    """
    if ablate_identity:
        return x
    abar, bx, c = _token_scan_inputs(x, p)
    y = _scan_op(abar, bx, c)                               # [L, D]
    return ops.linear(y, p.w_out, p.b_out)


def ssm_forward_multi(x, forwards, inverses, p):
    """Sum of ssm_forward over several row permutations of x, in one scan.

    Equivalent to ``sum_k ssm_forward(x[f_k], p)[inv_k]`` for permutation
    pairs (f_k, inv_k), but the per-token coefficients are projected once
    and all directions run as extra channels of a single scan.
    """
    length = x.shape[0]
    k = len(forwards)
    d_inner, n_state, d_model = p.d_inner, p.n_state, p.d_model
    abar, bx, c = _token_scan_inputs(x, p)

    # gather[l*k + j] = forwards[j][l]: row-major (L, k) block layout
    gather = np.stack([np.asarray(f, dtype=np.int64) for f in forwards], axis=1).ravel()
    abar_k = ops.reshape(ops.take_rows(abar, gather), (length, k * d_inner, n_state))
    bx_k = ops.reshape(ops.take_rows(bx, gather), (length, k * d_inner, n_state))
    c_k = ops.reshape(
        ops.broadcast_to(ops.reshape(ops.take_rows(c, gather), (length, k, 1, n_state)),
                         (length, k, d_inner, n_state)),
        (length, k * d_inner, n_state))

    y = _scan_op(abar_k, bx_k, c_k)                         # [L, k*D]

    # undo each direction's permutation, then merge by sum
    inv = np.stack([np.asarray(i, dtype=np.int64) for i in inverses], axis=1)
    scatter = (inv * k + np.arange(k, dtype=np.int64)[None, :]).ravel()
    y_sp = ops.take_rows(ops.reshape(y, (length * k, d_inner)), scatter)
    y_sum = ops.tsum(ops.reshape(y_sp, (length, k, d_inner)), axis=1)

    out = ops.linear(y_sum, p.w_out, p.b_out)
    if k > 1:
        # per-direction outputs each carried the bias once
        extra = ops.broadcast_to(ops.reshape(p.b_out, (1, d_model)), (length, d_model))
        out = ops.add(out, ops.mul(extra, float(k - 1)))
    return out
