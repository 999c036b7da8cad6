"""Score two road masks topologically, step by step.

Pixel metrics can look fine while the road network is broken. This demo
builds a ground-truth mask, knocks a hole in it, and walks through
skeleton -> graph -> control nodes -> snapped paths -> APLS, showing why
the topological score drops far more than IoU does.
"""

import numpy as np

from roadseg.losses import iou
from roadseg.topology import apls, inject_control_nodes, mask_to_graph


def make_mask():
    mask = np.zeros((64, 64), dtype=bool)
    mask[30:33, 4:60] = True     # horizontal road
    mask[4:60, 30:33] = True     # vertical road crossing it
    return mask


def main():
    gt_mask = make_mask()
    broken = gt_mask.copy()
    broken[30:33, 44:50] = False  # a 6-pixel gap in the horizontal road

    gt = mask_to_graph(gt_mask)
    pred = mask_to_graph(broken)

    print("ground truth graph:")
    print(gt.export_text())
    print("\nbroken prediction graph:")
    print(pred.export_text())

    dense = inject_control_nodes(gt, spacing=10.0)
    print(f"\ncontrol nodes at spacing 10: {len(gt.nodes)} -> {len(dense.nodes)} nodes")

    report = apls(gt, pred, spacing=10.0, snap_dist=4.0)
    print(f"\nper-pair path-length terms (0 = perfect, 1 = broken):")
    print(" ", np.round(report.terms, 3))
    print(f"\nIoU of the masks:  {iou(broken, gt_mask):.3f}   (barely moved)")
    print(f"APLS of the graphs: {report.score:.3f}   (the break is visible)")


if __name__ == "__main__":
    main()
