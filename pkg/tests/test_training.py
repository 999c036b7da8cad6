"""Schedule, optimizer, checkpointing, determinism, resume, ablation suites."""

import json
import shutil
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from roadseg.backbone import BackboneConfig
from roadseg.checkpoint import load_checkpoint, save_checkpoint
from roadseg.synthgen import SceneConfig
from roadseg.tensor import ConfigError, DomainError, StateError, Tensor
from roadseg.training import (AdamWState, OptimConfig, RunConfig, ablate,
                              ablation_suite, adamw_step, build_dataset,
                              evaluate_model, load_training_checkpoint, lr_at,
                              run_config_from_dict, run_config_to_dict,
                              save_training_checkpoint, toy_run_config, train)


def tiny_run_config(tmp_path, seed=0, **overrides):
    """A seconds-scale config for loop-mechanics tests."""
    base = dict(
        backbone=BackboneConfig(depths=(1, 1, 1, 1), embed_dim=8,
                                stage_layouts=("m", "a", "m", "a"), heads=2,
                                n_state=2, decoder_width=8, drop_path_rate=0.1),
        optim=OptimConfig(lr=1e-3, warmup_iters=2, total_iters=6),
        scene=SceneConfig(size=32, n_roads=(1, 2), n_occluders=(1, 3), seed=seed),
        n_scenes=6, batch_size=2, eval_interval=3, seed=seed,
        output_dir=str(tmp_path / "run"),
    )
    base.update(overrides)
    return RunConfig(**base)


# ---------------------------------------------------------------------------
# learning-rate schedule

def test_lr_schedule_pinned_points():
    oc = OptimConfig(lr=6e-5, warmup_iters=1500, warmup_start_lr=1e-6,
                     total_iters=160000, poly_power=1.0, min_lr=0.0)
    assert lr_at(0, oc) == 1e-6
    assert lr_at(1500, oc) == 6e-5
    assert lr_at(oc.total_iters, oc) == 0.0


def test_lr_warmup_is_linear():
    oc = OptimConfig(lr=1e-3, warmup_iters=100, warmup_start_lr=1e-5, total_iters=1000)
    pts = np.array([lr_at(i, oc) for i in range(101)])
    np.testing.assert_allclose(np.diff(pts), (1e-3 - 1e-5) / 100)


def test_lr_poly_decay_and_floor():
    oc = OptimConfig(lr=1e-3, warmup_iters=0, total_iters=100,
                     poly_power=2.0, min_lr=1e-4)
    np.testing.assert_allclose(lr_at(50, oc), 1e-3 * 0.25)
    assert lr_at(100, oc) == 1e-4


def test_lr_domain_errors():
    oc = OptimConfig(total_iters=10, warmup_iters=2)
    with pytest.raises(DomainError):
        lr_at(-1, oc)
    with pytest.raises(DomainError):
        lr_at(11, oc)


def test_optim_config_validation():
    with pytest.raises(ConfigError):
        OptimConfig(warmup_iters=11, total_iters=10)
    with pytest.raises(ConfigError):
        OptimConfig(lr=1e-6, warmup_start_lr=1e-6)


# ---------------------------------------------------------------------------
# optimizer

def test_adamw_first_step_hand_value():
    oc = OptimConfig(lr=0.1, betas=(0.9, 0.999), weight_decay=0.0,
                     warmup_iters=0, total_iters=10, eps=1e-8)
    p = Tensor(np.array([1.0]), dtype=np.float64)
    p.grad = np.array([2.0])
    state = AdamWState()
    adamw_step({"p": p}, state, oc, 0, lr=0.1)
    # bias-corrected m-hat = g, v-hat = g^2, so the step is -lr * g/(|g|+eps)
    np.testing.assert_allclose(p.data, 1.0 - 0.1 * 2.0 / (2.0 + 1e-8))


def test_adamw_decoupled_decay_applied_before_update():
    oc = OptimConfig(lr=0.1, weight_decay=0.5, warmup_iters=0,
                     total_iters=10, eps=1e-8)
    p = Tensor(np.array([1.0]), dtype=np.float64)
    p.grad = np.array([0.0])
    adamw_step({"p": p}, AdamWState(), oc, 0, lr=0.1)
    # zero gradient: only the decay term moves the parameter
    np.testing.assert_allclose(p.data, 1.0 - 0.1 * 0.5)


def test_adamw_missing_grad_is_zero():
    oc = OptimConfig(lr=0.1, weight_decay=0.0, warmup_iters=0, total_iters=10)
    p = Tensor(np.array([3.0]), dtype=np.float64)
    adamw_step({"p": p}, AdamWState(), oc, 0, lr=0.1)
    np.testing.assert_allclose(p.data, 3.0)


def test_adamw_matches_reference_sequence():
    oc = OptimConfig(lr=0.05, betas=(0.9, 0.999), weight_decay=0.1,
                     warmup_iters=0, total_iters=10, eps=1e-8)
    rng = np.random.default_rng(0)
    p = Tensor(rng.normal(size=(4,)), dtype=np.float64)
    ref = p.data.copy()
    m = np.zeros(4)
    v = np.zeros(4)
    state = AdamWState()
    for t in range(5):
        g = rng.normal(size=(4,))
        p.grad = g.copy()
        adamw_step({"p": p}, state, oc, t, lr=0.05)
        ref -= 0.05 * 0.1 * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.05 * (m / (1 - 0.9 ** (t + 1))) / (
            np.sqrt(v / (1 - 0.999 ** (t + 1))) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


# ---------------------------------------------------------------------------
# run config serialization

def test_run_config_json_round_trip():
    rc = toy_run_config(3)
    d = run_config_to_dict(rc)
    json.dumps(d)  # must be JSON-serializable as-is
    assert run_config_from_dict(d) == rc
    assert run_config_to_dict(run_config_from_dict(d)) == d


def test_run_config_rejects_unknown_fields():
    d = run_config_to_dict(toy_run_config())
    d["mystery"] = 1
    with pytest.raises(ConfigError):
        run_config_from_dict(d)


def test_run_config_data_dir_round_trip():
    rc = replace(toy_run_config(), scene=None, data_dir="/some/dir")
    assert run_config_from_dict(run_config_to_dict(rc)) == rc


def test_run_config_requires_a_data_source():
    with pytest.raises(ConfigError):
        replace(toy_run_config(), scene=None, data_dir=None)


# ---------------------------------------------------------------------------
# checkpoint format

def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {
        "a.w": Tensor(rng.normal(size=(3, 4)), dtype=np.float32),
        "a.b": Tensor(rng.normal(size=(4,)), dtype=np.float64),
        "scalar": np.float64(7.5),
    }
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, tensors)
    back = load_checkpoint(path)
    assert set(back) == set(tensors)
    np.testing.assert_array_equal(back["a.w"], tensors["a.w"].data)
    assert back["a.w"].dtype == np.float32
    np.testing.assert_array_equal(back["a.b"], tensors["a.b"].data)
    assert back["scalar"] == 7.5


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(StateError):
        load_checkpoint(path)


def test_training_checkpoint_round_trip(tmp_path):
    from roadseg.backbone import build_model
    rc = tiny_run_config(tmp_path)
    mp = build_model(rc.backbone, np.random.default_rng(0), dtype=np.float32)
    state = AdamWState()
    named = mp.named()
    for k, p in named.items():
        p.grad = np.ones_like(p.data)
    adamw_step(named, state, rc.optim, 0, lr=1e-3)
    path = tmp_path / "train.ckpt"
    save_training_checkpoint(path, mp, state, 5, rc)
    mp2, state2, it, rc2 = load_training_checkpoint(path)
    assert it == 5
    assert rc2 == rc
    for k, p in mp2.named().items():
        np.testing.assert_array_equal(p.data, named[k].data)
    for k in state.m:
        np.testing.assert_array_equal(state2.m[k], state.m[k])
        np.testing.assert_array_equal(state2.v[k], state.v[k])


# ---------------------------------------------------------------------------
# training loop

def test_train_is_bit_deterministic(tmp_path):
    rc1 = tiny_run_config(tmp_path, output_dir=str(tmp_path / "a"))
    rc2 = tiny_run_config(tmp_path, output_dir=str(tmp_path / "b"))
    train(rc1)
    train(rc2)
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert a == b
    assert len(a.splitlines()) == 6


def test_train_resume_is_bit_exact(tmp_path):
    full = tiny_run_config(tmp_path, output_dir=str(tmp_path / "full"))
    train(full)

    part = tiny_run_config(tmp_path, output_dir=str(tmp_path / "part"))
    train(part, stop_after=3)
    cont = tiny_run_config(tmp_path, output_dir=str(tmp_path / "cont"))
    train(cont, resume=str(tmp_path / "part" / "last.ckpt"))

    merged = ((tmp_path / "part" / "metrics.jsonl").read_text()
              + (tmp_path / "cont" / "metrics.jsonl").read_text())
    assert merged == (tmp_path / "full" / "metrics.jsonl").read_text()

    mp_full, *_ = load_training_checkpoint(tmp_path / "full" / "last.ckpt")
    mp_cont, *_ = load_training_checkpoint(tmp_path / "cont" / "last.ckpt")
    for k, p in mp_full.named().items():
        np.testing.assert_array_equal(p.data, mp_cont.named()[k].data)


def test_train_resume_rejects_config_mismatch(tmp_path):
    part = tiny_run_config(tmp_path, output_dir=str(tmp_path / "part"))
    train(part, stop_after=2)
    other = tiny_run_config(tmp_path, seed=1, output_dir=str(tmp_path / "other"))
    with pytest.raises(ConfigError):
        train(other, resume=str(tmp_path / "part" / "last.ckpt"))


def test_train_report_and_eval_metrics(tmp_path):
    rc = tiny_run_config(tmp_path)
    report = train(rc)
    assert report["iterations"] == 6
    for key in ("iou", "f1", "apls"):
        assert 0.0 <= report["final"][key] <= 1.0
    lines = [json.loads(l) for l in
             (Path(rc.output_dir) / "metrics.jsonl").read_text().splitlines()]
    assert [l["iteration"] for l in lines] == [1, 2, 3, 4, 5, 6]
    assert all("eval" in l for l in lines if l["iteration"] % 3 == 0)
    assert json.loads((Path(rc.output_dir) / "report.json").read_text()) == report


def test_evaluate_model_keys(tmp_path):
    from roadseg.backbone import build_model
    rc = tiny_run_config(tmp_path)
    ds = build_dataset(rc)
    mp = build_model(rc.backbone, np.random.default_rng(0), dtype=np.float32)
    out = evaluate_model(mp, ds, rc)
    assert len(out["per_image"]) == len(ds.eval_idx)
    assert set(out["mean"]) == {"iou", "f1", "apls"}


def test_build_dataset_split():
    rc = toy_run_config(0)
    ds = build_dataset(rc)
    n = rc.n_scenes
    n_eval = round(n * rc.eval_fraction)
    assert len(ds.images) == n
    assert ds.eval_idx == list(range(n - n_eval, n))
    assert ds.train_idx == list(range(n - n_eval))


# ---------------------------------------------------------------------------
# ablation suites

def test_ablation_suite_layouts():
    rc = toy_run_config(0)
    variants = ablation_suite(rc, "layouts")
    names = [n for n, _ in variants]
    assert names == ["mmmm-aaaa", "ma-ma-ma-ma", "am-am-am-am",
                     "aaaa-mmmm", "mmmmmmm-a"]
    for name, vrc in variants:
        kinds = len(name.replace("-", ""))
        assert vrc.backbone.depths[2] == kinds
        assert vrc.backbone.stage_layouts[2].replace("-", "") == name.replace("-", "")


def test_ablation_suite_ssm_removal():
    rc = toy_run_config(0)
    variants = dict(ablation_suite(rc, "ssm-removal"))
    assert variants["baseline"].backbone.ablate_ssm_stages == frozenset()
    assert variants["stage-1-2"].backbone.ablate_ssm_stages == frozenset({1, 2})
    assert variants["all-stages"].backbone.ablate_ssm_stages == frozenset({1, 2, 3, 4})


def test_ablation_suite_scans_and_stages():
    rc = toy_run_config(0)
    assert [n for n, _ in ablation_suite(rc, "scans")] == ["cross", "bi", "uni", "local"]
    stages = ablation_suite(rc, "stages")
    assert len(stages) == 4
    with pytest.raises(ConfigError):
        ablation_suite(rc, "nonsense")


def test_ablate_runs_variants(tmp_path):
    rc = tiny_run_config(tmp_path, optim=OptimConfig(lr=1e-3, warmup_iters=1,
                                                     total_iters=2),
                         eval_interval=2)
    table = ablate(rc, ablation_suite(rc, "ssm-removal")[:2])
    assert [row["name"] for row in table["rows"]] == ["baseline", "stage-1-2"]
    for row in table["rows"]:
        assert {"iou", "f1", "apls"} <= set(row)
