"""Visualize how the 2-D scan strategies serialize a feature map.

A feature map has no canonical token order; each strategy turns the grid
into one or more 1-D sequences for the selective scan. Printing the visit
ranks per pixel makes the traversal patterns obvious.
"""

import numpy as np

from roadseg.scan2d import build_orders, deserialize, serialize
from roadseg.tensor import Tensor


def show(order, h, w):
    ranks = np.empty(h * w, dtype=int)
    ranks[order.forward] = np.arange(h * w)
    print(f"  {order.label}")
    for row in ranks.reshape(h, w):
        print("   ", " ".join(f"{r:2d}" for r in row))


def main():
    h = w = 4
    for strategy in ("uni", "bi", "cross", "local"):
        orders = build_orders(strategy, h, w, local_k=2)
        print(f"{strategy}: {len(orders)} direction(s)")
        for order in orders:
            show(order, h, w)
        print()

    # serialization round trip
    fm = Tensor(np.arange(h * w, dtype=np.float64).reshape(h, w, 1))
    order = build_orders("cross", h, w)[1]
    seq = serialize(fm, order)
    back = deserialize(seq, order, h, w)
    print("serialize o deserialize is the identity:",
          bool(np.all(back.data == fm.data)))


if __name__ == "__main__":
    main()
