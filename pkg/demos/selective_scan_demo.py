"""Walk through the selective state-space layer on a toy sequence.

Shows (1) zero-order-hold discretization with its small-step Taylor
fallback, (2) the associative scan recovering the sequential recurrence,
and (3) input-dependent selectivity: the same layer retains or forgets
depending on content, which a fixed convolution cannot do.
"""

import numpy as np

from roadseg import ops
from roadseg.ssm import (discretize_zoh, init_ssm_params, linear_recurrence,
                         ssm_forward)
from roadseg.tensor import Tensor


def main():
    rng = np.random.default_rng(0)

    # --- discretization ------------------------------------------------
    a = np.array([[-2.0]])
    b = np.array([0.5])
    for delta_val in (1.0, 1e-3, 1e-5):
        abar, bbar = discretize_zoh(a, b, np.array([delta_val]))
        print(f"delta={delta_val:8.0e}  abar={abar.item():.8f}  "
              f"bbar={bbar.item():.3e}")
    print("small deltas switch to the Taylor branch; abar -> 1, bbar -> delta*b\n")

    # --- scan == recurrence ---------------------------------------------
    length, d, n = 6, 1, 1
    abar = rng.uniform(0.5, 0.9, size=(length, d, n))
    bx = rng.normal(size=(length, d, n))
    h_scan = linear_recurrence(abar, bx)
    h = np.zeros((d, n))
    for t in range(length):
        h = abar[t] * h + bx[t]
        print(f"t={t}  recurrence h={h.item():+.6f}  scan h={h_scan[t].item():+.6f}")
    print()

    # --- selectivity ------------------------------------------------------
    # feed a marker token followed by noise; the layer's input-dependent
    # delta lets the marker's influence persist much longer than the noise.
    d = 4
    p = init_ssm_params(d, d, 4, rng, dtype=np.float64)
    base = rng.normal(scale=0.05, size=(32, d))
    marked = base.copy()
    marked[0] = 3.0
    out_base = ssm_forward(Tensor(base, dtype=np.float64), p).data
    out_mark = ssm_forward(Tensor(marked, dtype=np.float64), p).data
    influence = np.abs(out_mark - out_base).mean(axis=1)
    print("influence of a token injected at t=0, measured downstream:")
    for t in (0, 1, 4, 8, 16, 31):
        print(f"  t={t:2d}  {influence[t]:.3e}")
    print("the marker's effect decays but propagates the whole sequence.")


if __name__ == "__main__":
    main()
