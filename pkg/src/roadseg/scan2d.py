"""Serialization of 2D feature maps into 1D token sequences.

Each :class:`ScanOrder` is a bijective permutation from token index to
flat (row-major) pixel index, paired with its inverse. Builders cover
the four cardinal directions (cross-scan), uni/bi-directional subsets,
and a windowed local scan; directional SSM outputs are merged by
elementwise sum in label order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .ssm import ssm_forward, ssm_forward_multi
from .tensor import DimensionError, DomainError


@dataclass
class ScanOrder:
    forward: np.ndarray   # token index -> flat pixel index
    inverse: np.ndarray   # flat pixel index -> token index
    label: str

    def __post_init__(self):
        self.forward = np.asarray(self.forward, dtype=np.int64)
        self.inverse = np.asarray(self.inverse, dtype=np.int64)


def _order(perm, label):
    perm = np.asarray(perm, dtype=np.int64)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return ScanOrder(perm, inv, label)


def _check_dims(h, w):
    if h < 1 or w < 1:
        raise DomainError(f"grid dimensions must be positive, got {h}x{w}")


def build_uni_scan(h, w):
    """Row-major left-to-right only."""
    _check_dims(h, w)
    return [_order(np.arange(h * w), "row_lr")]


def build_bi_scan(h, w):
    """Row-major plus its reversal."""
    _check_dims(h, w)
    fwd = np.arange(h * w)
    return [_order(fwd, "row_lr"), _order(fwd[::-1], "row_rl")]


def build_cross_scan(h, w):
    """The four cardinal directions: row-major, column-major, and reversals."""
    _check_dims(h, w)
    rows = np.arange(h * w)
    cols = np.arange(h * w).reshape(h, w).T.reshape(-1)
    return [
        _order(rows, "row_lr"),
        _order(rows[::-1], "row_rl"),
        _order(cols, "col_tb"),
        _order(cols[::-1], "col_bt"),
    ]


def build_local_scan(h, w, k):
    """Window-by-window traversal of k x k tiles (remainder tiles at edges).

    Returns four parameter-free variants: tile order and intra-tile
    order each forward or reversed, mirroring cross-scan's 4-way
    structure.
    """
    _check_dims(h, w)
    if k < 1:
        raise DomainError(f"window size must be positive, got {k}")
    tiles = []
    for r0 in range(0, h, k):
        for c0 in range(0, w, k):
            tile = [r * w + c
                    for r in range(r0, min(r0 + k, h))
                    for c in range(c0, min(c0 + k, w))]
            tiles.append(np.asarray(tile, dtype=np.int64))

    def flatten(tile_seq, intra_rev):
        parts = [t[::-1] if intra_rev else t for t in tile_seq]
        return np.concatenate(parts)

    return [
        _order(flatten(tiles, False), f"local{k}_ff"),
        _order(flatten(tiles, True), f"local{k}_fr"),
        _order(flatten(tiles[::-1], False), f"local{k}_rf"),
        _order(flatten(tiles[::-1], True), f"local{k}_rr"),
    ]


def build_orders(strategy, h, w, local_k=2):
    """Order list for a named strategy: cross, uni, bi, or local."""
    if strategy == "cross":
        return build_cross_scan(h, w)
    if strategy == "uni":
        return build_uni_scan(h, w)
    if strategy == "bi":
        return build_bi_scan(h, w)
    if strategy == "local":
        return build_local_scan(h, w, local_k)
    raise DomainError(f"unknown scan strategy: {strategy!r}")


def serialize(fm, order):
    """[H, W, d] feature map -> [H*W, d] sequence following ``order``."""
    h, w, d = fm.shape
    if h * w != order.forward.size:
        raise DimensionError(f"order length {order.forward.size} does not match {h}x{w} map")
    flat = ops.reshape(fm, (h * w, d))
    return ops.take_rows(flat, order.forward)


def deserialize(seq, order, h, w):
    """Exact inverse of :func:`serialize`."""
    length, d = seq.shape
    if length != order.forward.size or length != h * w:
        raise DimensionError(f"sequence length {length} does not match {h}x{w} map")
    flat = ops.take_rows(seq, order.inverse)
    return ops.reshape(flat, (h, w, d))


def multi_directional_ssm(fm, orders, params, ablate_identity=False):
    """Serialize along each order, run the shared SSM, merge by sum.

    All directions share one set of SSM parameters and are evaluated in
    a single batched scan (see :func:`roadseg.ssm.ssm_forward_multi`).
    """
    if not orders:
        raise DomainError("multi_directional_ssm requires at least one scan order")
    h, w, d = fm.shape
    if ablate_identity:
        # every direction passes its input through unchanged
        return ops.mul(fm, float(len(orders)))
    flat = ops.reshape(fm, (h * w, d))
    mixed = ssm_forward_multi(flat, [o.forward for o in orders],
                              [o.inverse for o in orders], params)
    return ops.reshape(mixed, (h, w, d))


def multi_directional_ssm_reference(fm, orders, params, ablate_identity=False):
    """One-direction-at-a-time evaluation of :func:`multi_directional_ssm`."""
    if not orders:
        raise DomainError("multi_directional_ssm requires at least one scan order")
    h, w, _ = fm.shape
    out = None
    for order in orders:
        seq = serialize(fm, order)
        mixed = ssm_forward(seq, params, ablate_identity=ablate_identity)
        branch = deserialize(mixed, order, h, w)
        out = branch if out is None else ops.add(out, branch)
    return out
