"""Deterministic synthetic road scenes: curved strokes with occlusions.

Roads are rasterized quadratic Bezier strokes spanning the frame. The
ground-truth mask always contains the full stroke; occluders (and the
optional dashed rendering) degrade the image only, so the ground truth
stays topologically complete and the model must infer continuity
through the interruptions.

All randomness comes from the Philox 4x64 counter-based generator keyed
by (seed, scene index), so scenes are bit-reproducible across platforms.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import ConfigError
from .topology import RoadGraph, mask_to_graph


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    n_roads: tuple = (2, 4)
    road_width: int = 3
    n_occluders: tuple = (3, 8)
    occluder_size: tuple = (4, 10)
    noise_amplitude: float = 0.06
    dashed_mode: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.size < 32:
            raise ConfigError("scene size must be at least 32")
        if self.road_width < 1:
            raise ConfigError("road width must be at least 1")


@dataclass
class Scene:
    image: np.ndarray      # [H, W, 3] float in [0, 1]
    gt_mask: np.ndarray    # [H, W] bool
    gt_graph: RoadGraph
    strokes: list          # per-road boolean masks (for construction checks)


_ROAD_FRACTION = (0.01, 0.25)


def _disc_offsets(width):
    r = width / 2.0
    span = int(np.ceil(r))
    offs = [(dr, dc) for dr in range(-span, span + 1) for dc in range(-span, span + 1)
            if dr * dr + dc * dc <= r * r]
    return np.asarray(offs, dtype=np.int64)


def _edge_point(rng, size, edge):
    t = rng.uniform(0.1, 0.9) * (size - 1)
    return {0: (0.0, t), 1: (size - 1.0, t), 2: (t, 0.0), 3: (t, size - 1.0)}[edge]


def _sample_bezier(rng, size):
    """Endpoints on two distinct frame edges, control point in the interior."""
    e0 = int(rng.integers(0, 4))
    e1 = int((e0 + 1 + rng.integers(0, 3)) % 4)
    p0 = np.array(_edge_point(rng, size, e0))
    p2 = np.array(_edge_point(rng, size, e1))
    p1 = rng.uniform(0.15, 0.85, size=2) * (size - 1)
    return p0, p1, p2


def _rasterize_stroke(p0, p1, p2, size, width):
    """Stamp a disc of the road width along a densely sampled Bezier.

    Returns (mask, centers) where centers are the integer curve samples
    in order, used for dashed rendering.
    """
    n = 6 * size
    t = np.linspace(0.0, 1.0, n)[:, None]
    pts = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
    centers = np.round(pts).astype(np.int64)
    offs = _disc_offsets(width)
    stamped = centers[:, None, :] + offs[None, :, :]
    stamped = stamped.reshape(-1, 2)
    keep = ((stamped[:, 0] >= 0) & (stamped[:, 0] < size)
            & (stamped[:, 1] >= 0) & (stamped[:, 1] < size))
    mask = np.zeros((size, size), dtype=bool)
    stamped = stamped[keep]
    mask[stamped[:, 0], stamped[:, 1]] = True
    return mask, centers


_BG_BASE = np.array([0.20, 0.28, 0.20])
_ROAD_BASE = np.array([0.78, 0.76, 0.72])


def _background(rng, size, amplitude):
    noise = rng.uniform(-1.0, 1.0, size=(size, size, 3)) * amplitude
    return np.clip(_BG_BASE[None, None, :] + noise, 0.0, 1.0)


def generate_scene(cfg, index):
    """Scene keyed by (cfg.seed, index); identical inputs give identical bits."""
    rng = np.random.Generator(np.random.Philox(key=[np.uint64(cfg.seed), np.uint64(index)]))
    size = cfg.size
    lo_frac, hi_frac = _ROAD_FRACTION

    for _attempt in range(64):
        n_roads = int(rng.integers(cfg.n_roads[0], cfg.n_roads[1] + 1))
        strokes = []
        curves = []
        mask = np.zeros((size, size), dtype=bool)
        for _ in range(n_roads):
            p0, p1, p2 = _sample_bezier(rng, size)
            stroke, centers = _rasterize_stroke(p0, p1, p2, size, cfg.road_width)
            strokes.append(stroke)
            curves.append(centers)
            mask |= stroke
        frac = mask.mean()
        if lo_frac <= frac <= hi_frac:
            break
    else:
        raise RuntimeError("could not sample a scene within the road-fraction band")

    image = _background(rng, size, cfg.noise_amplitude)
    road_noise = rng.uniform(-1.0, 1.0, size=(size, size, 3)) * (0.4 * cfg.noise_amplitude)
    road_color = np.clip(_ROAD_BASE[None, None, :] + road_noise, 0.0, 1.0)

    if cfg.dashed_mode:
        painted = np.zeros((size, size), dtype=bool)
        offs = _disc_offsets(cfg.road_width)
        dash = max(4, cfg.road_width * 3)
        for centers in curves:
            steps = np.zeros(len(centers))
            steps[1:] = np.linalg.norm(np.diff(centers, axis=0), axis=1)
            arc = np.cumsum(steps)
            on = (np.floor(arc / dash).astype(np.int64) % 2) == 0
            pts = centers[on]
            stamped = (pts[:, None, :] + offs[None, :, :]).reshape(-1, 2)
            keep = ((stamped[:, 0] >= 0) & (stamped[:, 0] < size)
                    & (stamped[:, 1] >= 0) & (stamped[:, 1] < size))
            stamped = stamped[keep]
            painted[stamped[:, 0], stamped[:, 1]] = True
        painted &= mask
    else:
        painted = mask
    image[painted] = road_color[painted]

    # occluders cover the image only; the mask keeps the full road
    n_occ = int(rng.integers(cfg.n_occluders[0], cfg.n_occluders[1] + 1))
    road_rc = np.argwhere(mask)
    for _ in range(n_occ):
        if road_rc.size == 0:
            break
        r, c = road_rc[int(rng.integers(0, len(road_rc)))]
        s = int(rng.integers(cfg.occluder_size[0], cfg.occluder_size[1] + 1))
        r0 = max(0, r - s // 2)
        c0 = max(0, c - s // 2)
        r1 = min(size, r0 + s)
        c1 = min(size, c0 + s)
        patch_noise = rng.uniform(-1.0, 1.0, size=(r1 - r0, c1 - c0, 3)) * cfg.noise_amplitude
        image[r0:r1, c0:c1] = np.clip(_BG_BASE[None, None, :] + patch_noise, 0.0, 1.0)

    return Scene(image=image.astype(np.float64), gt_mask=mask,
                 gt_graph=mask_to_graph(mask), strokes=strokes)


def generate_dataset(cfg, count, out_dir):
    """Write image/mask PNG pairs plus a JSON manifest; idempotent."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        scene = generate_scene(cfg, i)
        img_name = f"scene_{i:05d}_img.png"
        mask_name = f"scene_{i:05d}_mask.png"
        Image.fromarray((scene.image * 255).round().astype(np.uint8)).save(out / img_name)
        Image.fromarray(np.where(scene.gt_mask, 255, 0).astype(np.uint8)).save(out / mask_name)
        entries.append({"image": img_name, "mask": mask_name})
    manifest = {"config": _config_dict(cfg), "count": count, "scenes": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def _config_dict(cfg):
    d = asdict(cfg)
    for k, v in d.items():
        if isinstance(v, tuple):
            d[k] = list(v)
    return d


def load_dataset(path):
    """Read back a generated dataset as (images, masks) float/bool arrays."""
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    images, masks = [], []
    for entry in manifest["scenes"]:
        img = np.asarray(Image.open(root / entry["image"]), dtype=np.float64) / 255.0
        m = np.asarray(Image.open(root / entry["mask"])) > 127
        images.append(img)
        masks.append(m)
    return images, masks, manifest
