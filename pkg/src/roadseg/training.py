"""Optimizer, schedule, training/evaluation loops, and the ablation driver.

Every source of randomness is a Philox counter-based stream keyed by
(seed, stream id, iteration), so runs are bit-reproducible and a
checkpoint-resume continues the exact uninterrupted trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import losses as losses_mod
from .backbone import BackboneConfig, build_model, model_forward
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import LossConfig, binarize, combined_loss, f1, iou
from .synthgen import SceneConfig, generate_scene, load_dataset
from .tensor import ConfigError, DomainError, Tape, backward
from .topology import apls, mask_to_graph

_STREAM_INIT = 0
_STREAM_BATCH = 1
_STREAM_DROP = 2


def _stream_rng(seed, stream, iteration=0):
    word = (np.uint64(stream) << np.uint64(48)) | np.uint64(iteration)
    return np.random.Generator(np.random.Philox(key=[np.uint64(seed), word]))


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 6e-5
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    warmup_iters: int = 1500
    warmup_start_lr: float = 1e-6
    total_iters: int = 160000
    poly_power: float = 1.0
    min_lr: float = 0.0
    eps: float = 1e-8

    def __post_init__(self):
        if self.warmup_iters > self.total_iters:
            raise ConfigError("warmup_iters must not exceed total_iters")
        if self.lr <= self.warmup_start_lr:
            raise ConfigError("base lr must exceed warmup_start_lr")


def lr_at(iteration, oc):
    """Linear warmup then polynomial decay, floored at min_lr."""
    if iteration < 0 or iteration > oc.total_iters:
        raise DomainError(f"iteration {iteration} outside [0, {oc.total_iters}]")
    if iteration < oc.warmup_iters:
        frac = iteration / oc.warmup_iters
        return oc.warmup_start_lr + frac * (oc.lr - oc.warmup_start_lr)
    span = oc.total_iters - oc.warmup_iters
    decay = (1.0 - (iteration - oc.warmup_iters) / span) ** oc.poly_power if span else 1.0
    return max(oc.min_lr, oc.lr * decay)


class AdamWState:
    """First/second moment buffers, keyed like the parameter dict."""

    def __init__(self):
        self.m = {}
        self.v = {}


def adamw_step(named_params, state, oc, iteration, lr=None):
    """One decoupled-weight-decay Adam update (decay applied before Adam)."""
    if lr is None:
        lr = lr_at(iteration, oc)
    t = iteration + 1
    b1, b2 = oc.betas
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in named_params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        g = g.reshape(p.data.shape)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        if oc.weight_decay:
            p.data -= (lr * oc.weight_decay) * p.data
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + oc.eps)


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    scene: SceneConfig | None = field(default_factory=SceneConfig)
    data_dir: str | None = None
    n_scenes: int = 300
    batch_size: int = 4
    eval_interval: int = 500
    eval_fraction: float = 0.2
    aux_weight: float = 0.4
    seed: int = 0
    output_dir: str = "runs/out"
    threshold: float = 0.5
    apls_spacing: float = 50.0
    apls_snap_dist: float = 4.0
    symmetric_apls: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.scene is None and self.data_dir is None:
            raise ConfigError("either a scene config or a data directory is required")


def toy_run_config(seed=0, **overrides):
    """Desk-scale defaults: tiny dims, short schedule, synthetic scenes.

    This is the desk-scale analogue of the full protocol, not a
    reproduction of it.
    """
    base = RunConfig(
        backbone=BackboneConfig(depths=(1, 1, 2, 1), embed_dim=16,
                                stage_layouts=("m", "m", "mm", "a"),
                                drop_path_rate=0.1, n_state=8, heads=2,
                                decoder_width=32),
        optim=OptimConfig(lr=2e-3, warmup_iters=150, total_iters=2000,
                          warmup_start_lr=1e-6),
        scene=SceneConfig(seed=seed, dashed_mode=True,
                          n_occluders=(1, 3), occluder_size=(4, 8)),
        n_scenes=300,
        batch_size=2,
        eval_interval=1000,
        seed=seed,
        apls_spacing=5.0,
    )
    return replace(base, **overrides) if overrides else base


# ---------------------------------------------------------------------------
# config (de)serialization, mirroring RunConfig field names

def _dataclass_to_dict(obj):
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, frozenset):
            v = sorted(v)
        out[f.name] = v
    return out


def run_config_to_dict(rc):
    return {
        "backbone": _dataclass_to_dict(rc.backbone),
        "loss": _dataclass_to_dict(rc.loss),
        "optim": _dataclass_to_dict(rc.optim),
        "data": ({"dir": rc.data_dir} if rc.data_dir is not None
                 else {"scene": _dataclass_to_dict(rc.scene), "count": rc.n_scenes}),
        **{k: getattr(rc, k) for k in
           ("batch_size", "eval_interval", "eval_fraction", "aux_weight", "seed",
            "output_dir", "threshold", "apls_spacing", "apls_snap_dist",
            "symmetric_apls")},
    }


def _dataclass_from_dict(cls, d):
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        if isinstance(v, list):
            v = frozenset(v) if f.name == "ablate_ssm_stages" else tuple(v)
        kwargs[f.name] = v
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**kwargs)


def run_config_from_dict(d):
    d = dict(d)
    data = d.pop("data", {})
    scene = None
    data_dir = data.get("dir")
    n_scenes = data.get("count", 300)
    if "scene" in data:
        scene = _dataclass_from_dict(SceneConfig, data["scene"])
    elif data_dir is None:
        scene = SceneConfig()
    kwargs = {
        "backbone": _dataclass_from_dict(BackboneConfig, d.pop("backbone", {})),
        "loss": _dataclass_from_dict(LossConfig, d.pop("loss", {})),
        "optim": _dataclass_from_dict(OptimConfig, d.pop("optim", {})),
        "scene": scene,
        "data_dir": data_dir,
        "n_scenes": n_scenes,
    }
    for f in fields(RunConfig):
        if f.name in d:
            kwargs[f.name] = d.pop(f.name)
    if d:
        raise ConfigError(f"unknown run config fields: {sorted(d)}")
    return RunConfig(**kwargs)


# ---------------------------------------------------------------------------
# data

@dataclass
class Dataset:
    images: list          # float32 [H, W, 3]
    masks: list           # bool [H, W]
    train_idx: list
    eval_idx: list
    gt_graphs: dict = field(default_factory=dict)

    def gt_graph(self, i):
        if i not in self.gt_graphs:
            self.gt_graphs[i] = mask_to_graph(self.masks[i])
        return self.gt_graphs[i]


def build_dataset(rc):
    if rc.data_dir is not None:
        images, masks, _ = load_dataset(rc.data_dir)
    else:
        images, masks = [], []
        for i in range(rc.n_scenes):
            scene = generate_scene(rc.scene, i)
            images.append(scene.image)
            masks.append(scene.gt_mask)
    images = [img.astype(np.float32) for img in images]
    n = len(images)
    n_eval = max(1, int(round(n * rc.eval_fraction)))
    split = n - n_eval
    return Dataset(images, masks, list(range(split)), list(range(split, n)))


# ---------------------------------------------------------------------------
# evaluation

def evaluate_model(mp, ds, rc, indices=None):
    """Per-image and mean IoU / F1 / APLS on the given indices (eval split)."""
    if indices is None:
        indices = ds.eval_idx
    per_image = []
    for i in indices:
        from .tensor import Tensor
        logits, _ = model_forward(Tensor(ds.images[i]), mp, train=False)
        pred_mask = binarize(logits, rc.threshold)
        gt = ds.masks[i]
        report = apls(ds.gt_graph(i), mask_to_graph(pred_mask),
                      spacing=rc.apls_spacing, snap_dist=rc.apls_snap_dist,
                      symmetric=rc.symmetric_apls)
        per_image.append({"index": i, "iou": iou(pred_mask, gt),
                          "f1": f1(pred_mask, gt), "apls": report.score})
    mean = {k: float(np.mean([r[k] for r in per_image])) for k in ("iou", "f1", "apls")}
    return {"per_image": per_image, "mean": mean}


def evaluate_checkpoint(ckpt_path, data_dir, symmetric_apls=False, threshold=0.5,
                        apls_spacing=50.0, apls_snap_dist=4.0):
    """Standalone evaluation of a saved checkpoint on a dataset directory."""
    mp, _, _, rc = load_training_checkpoint(ckpt_path)
    rc = replace(rc, data_dir=data_dir, scene=None, eval_fraction=1.0,
                 symmetric_apls=symmetric_apls, threshold=threshold,
                 apls_spacing=apls_spacing, apls_snap_dist=apls_snap_dist)
    ds = build_dataset(rc)
    return evaluate_model(mp, ds, rc, indices=list(range(len(ds.images))))


# ---------------------------------------------------------------------------
# checkpointing of full training state

def _config_bytes_tensor(rc):
    raw = json.dumps(run_config_to_dict(rc), sort_keys=True).encode("utf-8")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.float64)


def save_training_checkpoint(path, mp, state, iteration, rc):
    named = {f"model.{k}": v for k, v in mp.named().items()}
    named.update({f"opt.m.{k}": v for k, v in state.m.items()})
    named.update({f"opt.v.{k}": v for k, v in state.v.items()})
    named["meta.iteration"] = np.array([float(iteration)], dtype=np.float64)
    named["meta.config_utf8"] = _config_bytes_tensor(rc)
    save_checkpoint(path, named)


def load_training_checkpoint(path):
    """Rebuild (model, optimizer state, iteration, run config) from a file."""
    blobs = load_checkpoint(path)
    raw = bytes(blobs["meta.config_utf8"].astype(np.uint8).tolist())
    rc = run_config_from_dict(json.loads(raw.decode("utf-8")))
    iteration = int(blobs["meta.iteration"][0])
    mp = build_model(rc.backbone, _stream_rng(rc.seed, _STREAM_INIT), dtype=np.float32)
    named = mp.named()
    state = AdamWState()
    for key, arr in blobs.items():
        if key.startswith("model."):
            named[key[len("model."):]].data[...] = arr
        elif key.startswith("opt.m."):
            state.m[key[len("opt.m."):]] = arr.astype(np.float32)
        elif key.startswith("opt.v."):
            state.v[key[len("opt.v."):]] = arr.astype(np.float32)
    return mp, state, iteration, rc


# ---------------------------------------------------------------------------
# training loop

def _batch_loss(mp, ds, idx, rc, rng):
    from .tensor import Tensor
    total = None
    for i in idx:
        logits, aux = model_forward(Tensor(ds.images[i]), mp, train=True, rng=rng)
        item = combined_loss(logits, ds.masks[i], rc.loss)
        if aux is not None:
            item = item + rc.aux_weight * combined_loss(aux, ds.masks[i], rc.loss)
        total = item if total is None else total + item
    return total * (1.0 / len(idx))


def train(rc, resume=None, stop_after=None):
    """Seeded end-to-end loop; writes metrics.jsonl, last.ckpt, report.json.

    stop_after halts after that many iterations (as if preempted) with a
    resumable checkpoint in place; pass the checkpoint path as resume to
    continue the same schedule later.
    """
    out = Path(rc.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = build_dataset(rc)
    oc = rc.optim

    if resume is not None:
        mp, state, start, rc_ckpt = load_training_checkpoint(resume)
        if run_config_to_dict(replace(rc_ckpt, output_dir=rc.output_dir)) != \
                run_config_to_dict(rc):
            raise ConfigError("resume checkpoint was produced by a different run config")
    else:
        mp = build_model(rc.backbone, _stream_rng(rc.seed, _STREAM_INIT), dtype=np.float32)
        state = AdamWState()
        start = 0

    named = mp.named()
    mode = "a" if resume is not None else "w"
    last_eval = None
    with open(out / "metrics.jsonl", mode) as log:
        for it in range(start, oc.total_iters):
            lr = lr_at(it, oc)
            batch_rng = _stream_rng(rc.seed, _STREAM_BATCH, it)
            pick = batch_rng.integers(0, len(ds.train_idx), size=rc.batch_size)
            idx = [ds.train_idx[j] for j in pick]
            drop_rng = _stream_rng(rc.seed, _STREAM_DROP, it)
            for p in named.values():
                p.grad = None
            with Tape():
                loss = _batch_loss(mp, ds, idx, rc, drop_rng)
                backward(loss)
            adamw_step(named, state, oc, it, lr)
            entry = {"iteration": it + 1, "lr": lr, "loss": loss.item()}
            if (it + 1) % rc.eval_interval == 0 or it + 1 == oc.total_iters:
                last_eval = evaluate_model(mp, ds, rc)["mean"]
                entry["eval"] = last_eval
                save_training_checkpoint(out / "last.ckpt", mp, state, it + 1, rc)
            log.write(json.dumps(entry, sort_keys=True) + "\n")
            if stop_after is not None and it + 1 >= stop_after:
                break

    done = oc.total_iters if stop_after is None else min(stop_after, oc.total_iters)
    if last_eval is None:
        last_eval = evaluate_model(mp, ds, rc)["mean"]
    save_training_checkpoint(out / "last.ckpt", mp, state, done, rc)
    report = {"config": run_config_to_dict(rc), "final": last_eval,
              "iterations": done}
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    return report


# ---------------------------------------------------------------------------
# ablation driver

def _with_stage3_layout(rc, layout):
    depth = len([c for c in layout if c != "-"])
    depths = list(rc.backbone.depths)
    depths[2] = depth
    layouts = list(rc.backbone.stage_layouts)
    layouts[2] = layout
    bb = replace(rc.backbone, depths=tuple(depths), stage_layouts=tuple(layouts))
    return replace(rc, backbone=bb)


def _with_stage_kinds(rc, kinds):
    layouts = [k * d for k, d in zip(kinds, rc.backbone.depths)]
    bb = replace(rc.backbone, stage_layouts=tuple(layouts))
    return replace(rc, backbone=bb)


def ablation_suite(rc, suite):
    """Named config variants matching the ablation families."""
    if suite == "layouts":
        return [(s, _with_stage3_layout(rc, s)) for s in
                ("mmmm-aaaa", "ma-ma-ma-ma", "am-am-am-am", "aaaa-mmmm", "mmmmmmm-a")]
    if suite == "ssm-removal":
        return [
            ("baseline", replace(rc, backbone=replace(rc.backbone,
                                                      ablate_ssm_stages=frozenset()))),
            ("stage-1-2", replace(rc, backbone=replace(rc.backbone,
                                                       ablate_ssm_stages=frozenset({1, 2})))),
            ("all-stages", replace(rc, backbone=replace(rc.backbone,
                                                        ablate_ssm_stages=frozenset({1, 2, 3, 4})))),
        ]
    if suite == "scans":
        return [(s, replace(rc, backbone=replace(rc.backbone, scan=s)))
                for s in ("cross", "bi", "uni", "local")]
    if suite == "stages":
        return [("-".join(kinds), _with_stage_kinds(rc, kinds)) for kinds in
                (("m", "m", "m", "m"), ("m", "m", "m", "a"),
                 ("m", "m", "a", "m"), ("m", "m", "a", "a"))]
    raise ConfigError(f"unknown ablation suite {suite!r}")


def ablate(rc, variants):
    """Train each named variant with identical seed/data; tabulate metrics."""
    rows = []
    for name, vrc in variants:
        vrc = replace(vrc, output_dir=str(Path(rc.output_dir) / f"ablate_{name}"))
        report = train(vrc)
        rows.append({"name": name, **report["final"]})
    return {"seed": rc.seed, "rows": rows}
