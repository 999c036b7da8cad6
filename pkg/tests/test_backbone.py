"""Layout parsing, shape contracts, analytic parameter counts, gradients."""

import numpy as np
import pytest

from roadseg import ops
from roadseg.backbone import (BackboneConfig, backbone_forward, build_model,
                              layout_to_string, model_forward,
                              parse_stage_layout, transformer_block,
                              _drop_path_add)
from roadseg.losses import LossConfig, combined_loss
from roadseg.tensor import ConfigError, DimensionError, Tape, Tensor, backward

TABLE_LAYOUTS = ("mmmm-aaaa", "ma-ma-ma-ma", "am-am-am-am", "aaaa-mmmm", "mmmmmmm-a")


def toy_cfg(**overrides):
    base = dict(depths=(1, 1, 1, 1), embed_dim=8,
                stage_layouts=("m", "a", "m", "a"), heads=2, n_state=2,
                decoder_width=8, drop_path_rate=0.1)
    base.update(overrides)
    return BackboneConfig(**base)


# ---------------------------------------------------------------------------
# layout parsing

def test_parse_layout_examples():
    assert parse_stage_layout("mmmm-aaaa") == ["M"] * 4 + ["A"] * 4
    assert parse_stage_layout("ma-ma-ma-ma") == ["M", "A"] * 4
    assert parse_stage_layout("m") == ["M"]
    assert layout_to_string(["M", "A", "M"]) == "mam"


def test_parse_layout_rejects_bad_characters():
    with pytest.raises(ConfigError):
        parse_stage_layout("mxa")
    with pytest.raises(ConfigError):
        parse_stage_layout("---")


def test_config_validates_depth_vs_layout():
    with pytest.raises(ConfigError):
        BackboneConfig(depths=(1, 1, 1, 1), stage_layouts=("mm", "m", "m", "m"))


def test_config_validates_head_divisibility():
    with pytest.raises(ConfigError):
        toy_cfg(embed_dim=9, heads=2, stage_layouts=("a", "m", "m", "m"))


def test_drop_path_schedule_is_linear():
    cfg = BackboneConfig()            # depths (2,2,8,2), rate 0.2
    sched = cfg.drop_path_schedule()
    assert len(sched) == 14
    assert sched[0] == 0.0
    np.testing.assert_allclose(sched[-1], 0.2)
    np.testing.assert_allclose(np.diff(sched), 0.2 / 13.0)


# ---------------------------------------------------------------------------
# analytic parameter counts

def analytic_param_count(cfg):
    """Closed-form parameter count mirroring the module structure."""
    r = cfg.ffn_ratio
    n = cfg.n_state
    p = cfg.patch_size
    c = cfg.embed_dim

    def ffn(d):
        return 2 * r * d * d + (r + 1) * d

    def m_block(d):
        ssm = 3 * d * d + 3 * d * n + 3 * d
        return 4 * d + ssm + ffn(d)

    def a_block(d):
        return 4 * d + 4 * (d * d + d) + ffn(d)

    total = (3 * p * p) * c + c + 2 * c                     # patch embed
    for i in range(4):
        d = cfg.stage_dim(i)
        for kind in cfg.stage_kinds(i):
            total += m_block(d) if kind == "M" else a_block(d)
    for i in range(3):
        d = cfg.stage_dim(i)
        total += (4 * d) * (2 * d) + 2 * d + 2 * (2 * d)    # merge
    wd = cfg.decoder_width
    c4 = cfg.stage_dim(3)
    total += 4 * (c4 * wd + wd)                             # ppm
    total += (c4 + 4 * wd) * wd + wd                        # ppm fuse
    total += sum(cfg.stage_dim(i) * wd + wd for i in range(3))
    total += 4 * wd * 1 + 1                                 # head
    if cfg.aux_head:
        total += cfg.stage_dim(2) + 1
    return total


@pytest.mark.parametrize("layout", TABLE_LAYOUTS)
def test_layout_instantiates_with_analytic_count(layout):
    kinds = parse_stage_layout(layout)
    cfg = BackboneConfig(depths=(2, 2, len(kinds), 2), embed_dim=16,
                         stage_layouts=("mm", "mm", layout, "mm"),
                         heads=2, n_state=2, decoder_width=16)
    mp = build_model(cfg, np.random.default_rng(0))
    assert [b.kind for b in mp.stages[2]] == kinds
    assert mp.param_count() == analytic_param_count(cfg)


def test_param_count_difference_m_vs_a():
    # swapping one M for one A changes the count by the analytic difference
    base = toy_cfg(stage_layouts=("m", "a", "m", "a"))
    swapped = toy_cfg(stage_layouts=("m", "a", "a", "a"))
    d = base.stage_dim(2)
    n, r = base.n_state, base.ffn_ratio
    m_specific = 3 * d * d + 3 * d * n + 3 * d
    a_specific = 4 * (d * d + d)
    delta = a_specific - m_specific
    rng = np.random.default_rng(0)
    assert (build_model(swapped, rng).param_count()
            - build_model(base, rng).param_count()) == delta


# ---------------------------------------------------------------------------
# forward shape contracts

def test_stage_resolutions_64():
    cfg = toy_cfg()
    mp = build_model(cfg, np.random.default_rng(1))
    img = Tensor(np.random.default_rng(2).random((64, 64, 3)), dtype=np.float32)
    features = backbone_forward(img, mp)
    assert [f.shape[0] for f in features] == [16, 8, 4, 2]
    assert [f.shape[2] for f in features] == [8, 16, 32, 64]


def test_model_logits_shape_and_aux():
    cfg = toy_cfg(aux_head=True)
    mp = build_model(cfg, np.random.default_rng(3))
    img = Tensor(np.random.default_rng(4).random((64, 64, 3)), dtype=np.float32)
    logits, aux = model_forward(img, mp)
    assert logits.shape == (64, 64, 1)
    assert aux.shape == (64, 64, 1)


def test_input_must_be_divisible_by_32():
    cfg = toy_cfg()
    mp = build_model(cfg, np.random.default_rng(5))
    img = Tensor(np.zeros((48, 48, 3)), dtype=np.float32)
    with pytest.raises(DimensionError):
        backbone_forward(img, mp)


# ---------------------------------------------------------------------------
# block behavior

def test_drop_path_p1_skips_branch():
    x = Tensor(np.ones((2, 2)), dtype=np.float64)
    branch = Tensor(np.full((2, 2), 7.0), dtype=np.float64)
    out = _drop_path_add(x, branch, 1.0, True, np.random.default_rng(0))
    np.testing.assert_array_equal(out.data, x.data)


def test_drop_path_eval_ignores_probability():
    x = Tensor(np.ones((2, 2)), dtype=np.float64)
    branch = Tensor(np.full((2, 2), 7.0), dtype=np.float64)
    out = _drop_path_add(x, branch, 1.0, False, None)
    np.testing.assert_array_equal(out.data, 8.0)


def test_drop_path_scaling_preserves_expectation():
    x = Tensor(np.zeros((1, 1)), dtype=np.float64)
    branch = Tensor(np.ones((1, 1)), dtype=np.float64)
    rng = np.random.default_rng(6)
    vals = [_drop_path_add(x, branch, 0.3, True, rng).data.item() for _ in range(4000)]
    np.testing.assert_allclose(np.mean(vals), 1.0, atol=0.05)


def test_attention_is_permutation_equivariant():
    # no positional encoding: permuting tokens permutes outputs
    from roadseg.backbone import _init_block
    cfg = toy_cfg()
    blk = _init_block("A", 8, cfg, np.random.default_rng(7), np.float64)
    tokens = np.random.default_rng(8).normal(size=(1, 6, 8))
    perm = np.random.default_rng(9).permutation(6)
    y = transformer_block(Tensor(tokens, dtype=np.float64), blk).data
    y_perm = transformer_block(Tensor(tokens[:, perm], dtype=np.float64), blk).data
    np.testing.assert_allclose(y_perm, y[:, perm], atol=1e-12)


def test_eval_forward_is_deterministic():
    cfg = toy_cfg()
    mp = build_model(cfg, np.random.default_rng(10))
    img = Tensor(np.random.default_rng(11).random((32, 32, 3)), dtype=np.float32)
    a, _ = model_forward(img, mp, train=False)
    b, _ = model_forward(img, mp, train=False)
    np.testing.assert_array_equal(a.data, b.data)


def test_ssm_stage_ablation_changes_output():
    cfg = toy_cfg()
    mp = build_model(cfg, np.random.default_rng(12))
    img = Tensor(np.random.default_rng(13).random((32, 32, 3)), dtype=np.float32)
    full, _ = model_forward(img, mp)
    mp.cfg = toy_cfg(ablate_ssm_stages=frozenset({1, 2, 3, 4}))
    ablated, _ = model_forward(img, mp)
    assert np.abs(full.data - ablated.data).max() > 1e-6


# ---------------------------------------------------------------------------
# end-to-end gradient

def test_end_to_end_gradient_sampled_parameters():
    cfg = toy_cfg()
    mp = build_model(cfg, np.random.default_rng(14), dtype=np.float64)
    img = Tensor(np.random.default_rng(15).random((32, 32, 3)), dtype=np.float64)
    target = np.random.default_rng(16).random((32, 32)) > 0.7
    lc = LossConfig()

    def loss_value():
        logits, _ = model_forward(img, mp, train=False)
        return combined_loss(logits, target, lc)

    named = mp.named()
    for t in named.values():
        t.grad = None
    with Tape():
        backward(loss_value())

    rng = np.random.default_rng(17)
    names = sorted(named)
    h = 1e-6
    worst = 0.0
    for _ in range(20):
        name = names[rng.integers(len(names))]
        t = named[name]
        flat = t.data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + h
        up = loss_value().item()
        flat[i] = orig - h
        down = loss_value().item()
        flat[i] = orig
        numeric = (up - down) / (2 * h)
        analytic = t.grad.reshape(-1)[i]
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(analytic)))
    assert worst < 1e-4
