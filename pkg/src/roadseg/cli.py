"""Command-line entry points: generate / train / evaluate / gradcheck / ablate.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .tensor import ConfigError, DimensionError, DomainError, StateError
from .training import (ablate, ablation_suite, evaluate_checkpoint,
                       run_config_from_dict, train)


def _load_run_config(path):
    with open(path) as f:
        return run_config_from_dict(json.load(f))


def _cmd_generate(args):
    from .synthgen import SceneConfig, generate_dataset
    with open(args.config) as f:
        raw = json.load(f)
    scene_raw = raw.get("data", {}).get("scene", raw.get("scene", raw))
    from .training import _dataclass_from_dict
    cfg = _dataclass_from_dict(SceneConfig, scene_raw)
    manifest = generate_dataset(cfg, args.count, args.out)
    print(json.dumps({"out": args.out, "count": len(manifest["scenes"])}))
    return 0


def _cmd_train(args):
    rc = _load_run_config(args.config)
    rc = replace(rc, output_dir=args.out)
    report = train(rc, resume=args.resume)
    print(json.dumps(report["final"], sort_keys=True))
    return 0


def _cmd_evaluate(args):
    report = evaluate_checkpoint(args.ckpt, args.data,
                                 symmetric_apls=args.symmetric_apls)
    Path(args.out).write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(json.dumps(report["mean"], sort_keys=True))
    return 0


def _gradcheck_suite(module):
    """Central-difference checks on representative ops; returns worst error."""
    from . import ops
    from .ssm import _scan_op, init_ssm_params, ssm_forward
    from .tensor import Tensor, grad_check

    rng = np.random.default_rng(0)

    def t(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)

    def scalar(f):
        # reduce with fixed random weights so sign errors cannot cancel
        weights = {}

        def g(x):
            y = f(x)
            if y.shape not in weights:
                weights[y.shape] = Tensor(
                    np.random.default_rng(7).normal(size=y.shape), dtype=np.float64)
            return ops.tsum(ops.mul(y, weights[y.shape]))
        return g

    w = Tensor(rng.normal(size=(3, 5)), dtype=np.float64)
    scan_b = Tensor(rng.normal(size=(8, 3, 2)), dtype=np.float64)
    scan_c = Tensor(rng.normal(size=(8, 2)), dtype=np.float64)
    ssm_p = init_ssm_params(4, 8, 2, np.random.default_rng(1), dtype=np.float64)
    suites = {
        "ops": [
            ("mul", lambda x: ops.mul(x, x), t(4, 3)),
            ("matmul", lambda x: ops.matmul(x, w), t(4, 3)),
            ("exp", lambda x: ops.exp(x), t(6)),
            ("sigmoid", lambda x: ops.sigmoid(x), t(6)),
            ("gelu", lambda x: ops.gelu(x), t(6)),
            ("softplus", lambda x: ops.softplus(x), t(6)),
            ("softmax", lambda x: ops.softmax(x), t(4, 5)),
            ("layer_norm", lambda x: ops.layer_norm(
                x, Tensor(np.ones(5), dtype=np.float64),
                Tensor(np.zeros(5), dtype=np.float64)), t(4, 5)),
        ],
        "ssm": [
            ("scan", lambda x: _scan_op(ops.sigmoid(x), scan_b, scan_c), t(8, 3, 2)),
            ("ssm_forward", lambda x: ssm_forward(x, ssm_p), t(6, 4)),
        ],
    }
    if module is not None and module not in suites:
        raise ConfigError(f"unknown gradcheck module {module!r}")
    worst = 0.0
    rows = []
    for name, cases in suites.items():
        if module is not None and name != module:
            continue
        for label, f, x in cases:
            err = grad_check(scalar(f), x)
            worst = max(worst, err)
            rows.append({"module": name, "op": label, "max_rel_err": err})
    return worst, rows


def _cmd_gradcheck(args):
    worst, rows = _gradcheck_suite(args.module)
    ok = worst < 1e-6
    print(json.dumps({"ok": ok, "worst": worst, "checks": rows}, sort_keys=True))
    return 0 if ok else 2


def _cmd_ablate(args):
    rc = _load_run_config(args.config)
    rc = replace(rc, output_dir=args.out)
    variants = ablation_suite(rc, args.suite)
    table = ablate(rc, variants)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "ablation.json").write_text(
        json.dumps(table, sort_keys=True, indent=2) + "\n")
    print(json.dumps(table["rows"], sort_keys=True))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="roadseg")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic scene dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_generate)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--symmetric-apls", action="store_true")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="run finite-difference gradient checks")
    p.add_argument("--module", default=None)
    p.set_defaults(fn=_cmd_gradcheck)

    p = sub.add_parser("ablate", help="train and tabulate an ablation suite")
    p.add_argument("--config", required=True)
    p.add_argument("--suite", required=True,
                   choices=("layouts", "ssm-removal", "scans", "stages"))
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DimensionError, DomainError, StateError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
