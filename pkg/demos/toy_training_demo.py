"""Train a miniature hybrid model end to end on synthetic scenes.

Everything here is the real pipeline, just scaled down to run in about a
minute: scene generation, the hybrid backbone, the combined loss, AdamW
with warmup + poly decay, and topological evaluation. Loss should drop
visibly and the final report prints IoU / F1 / APLS.
"""

import json
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from roadseg.synthgen import SceneConfig
from roadseg.training import (OptimConfig, toy_run_config, train)


def main():
    iters = int(sys.argv[1]) if len(sys.argv) > 1 else 150
    out = tempfile.mkdtemp(prefix="toy_train_")
    rc = toy_run_config(seed=0)
    rc = replace(
        rc,
        n_scenes=40,
        scene=replace(rc.scene, size=32, n_roads=(1, 2), n_occluders=(1, 3)),
        optim=replace(rc.optim, total_iters=iters, warmup_iters=min(20, iters)),
        eval_interval=max(1, iters // 2),
        output_dir=out,
    )

    report = train(rc)

    lines = [json.loads(l) for l in
             (Path(out) / "metrics.jsonl").read_text().splitlines()]
    first = sum(l["loss"] for l in lines[:10]) / 10
    last = sum(l["loss"] for l in lines[-10:]) / 10
    print(f"\nmean loss, first 10 iters: {first:.4f}")
    print(f"mean loss, last 10 iters:  {last:.4f}")
    print(f"final eval: {report['final']}")
    print(f"artifacts in {out}: metrics.jsonl, last.ckpt, report.json")


if __name__ == "__main__":
    main()
