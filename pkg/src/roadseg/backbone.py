"""Hierarchical hybrid backbone and multi-scale decoder.

Four stages of token-mixing blocks over a patch grid: 'M' blocks mix
tokens with a multi-directional selective SSM, 'A' blocks with global
multi-head self-attention (no positional encoding; attention operates
on features already spatially mixed by earlier stages and the patch
embedding). Spatial resolution halves and channel width doubles between
stages via 2x2 patch merging. The decoder fuses all four stage outputs
with pyramid pooling and a top-down pathway into single-channel logits
at input resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .scan2d import build_orders, multi_directional_ssm
from .ssm import SSMParams, init_ssm_params
from .tensor import ConfigError, DimensionError, Tensor


def parse_stage_layout(s):
    """Layout string -> list of block kinds; dashes are cosmetic.

    'mmmm-aaaa' -> ['M','M','M','M','A','A','A','A'].
    """
    kinds = []
    for ch in s:
        if ch == "-":
            continue
        if ch == "m":
            kinds.append("M")
        elif ch == "a":
            kinds.append("A")
        else:
            raise ConfigError(f"illegal character {ch!r} in layout {s!r}")
    if not kinds:
        raise ConfigError(f"layout {s!r} is empty")
    return kinds


def layout_to_string(kinds):
    return "".join(k.lower() for k in kinds)


@dataclass(frozen=True)
class BackboneConfig:
    depths: tuple = (2, 2, 8, 2)
    embed_dim: int = 96
    stage_layouts: tuple = ("mm", "mm", "mmmm-aaaa", "mm")
    patch_size: int = 4
    drop_path_rate: float = 0.2
    n_state: int = 4
    heads: int = 2
    ffn_ratio: int = 4
    scan: str = "cross"
    local_k: int = 2
    ablate_ssm_stages: frozenset = field(default_factory=frozenset)
    decoder_width: int = 64
    aux_head: bool = False

    def __post_init__(self):
        if len(self.depths) != 4 or len(self.stage_layouts) != 4:
            raise ConfigError("backbone needs exactly 4 stages")
        for i, (depth, layout) in enumerate(zip(self.depths, self.stage_layouts)):
            kinds = parse_stage_layout(layout)
            if len(kinds) != depth:
                raise ConfigError(f"stage {i + 1} layout {layout!r} has {len(kinds)} "
                                  f"blocks but depth is {depth}")
        for i in range(4):
            if "A" in parse_stage_layout(self.stage_layouts[i]) and self.stage_dim(i) % self.heads:
                raise ConfigError(f"stage {i + 1} dim {self.stage_dim(i)} not divisible "
                                  f"by {self.heads} heads")

    def stage_dim(self, i):
        return self.embed_dim * (1 << i)

    def stage_kinds(self, i):
        return parse_stage_layout(self.stage_layouts[i])

    def drop_path_schedule(self):
        """Per-block drop-path probability, linear over the global block index."""
        total = sum(self.depths)
        if total <= 1:
            return [0.0] * total
        return [self.drop_path_rate * i / (total - 1) for i in range(total)]


# ---------------------------------------------------------------------------
# parameter containers

@dataclass
class LinearParams:
    w: Tensor
    b: Tensor

    def named(self, prefix):
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor

    def named(self, prefix):
        return {f"{prefix}.gamma": self.gamma, f"{prefix}.beta": self.beta}


@dataclass
class FFNParams:
    fc1: LinearParams
    fc2: LinearParams

    def named(self, prefix):
        return {**self.fc1.named(f"{prefix}.fc1"), **self.fc2.named(f"{prefix}.fc2")}


@dataclass
class VSSBlockParams:
    norm1: NormParams
    ssm: SSMParams
    norm2: NormParams
    ffn: FFNParams
    kind: str = "M"

    def named(self, prefix):
        out = {}
        out.update(self.norm1.named(f"{prefix}.norm1"))
        out.update(self.ssm.named(f"{prefix}.ssm"))
        out.update(self.norm2.named(f"{prefix}.norm2"))
        out.update(self.ffn.named(f"{prefix}.ffn"))
        return out


@dataclass
class AttnBlockParams:
    norm1: NormParams
    wq: LinearParams
    wk: LinearParams
    wv: LinearParams
    wo: LinearParams
    norm2: NormParams
    ffn: FFNParams
    heads: int = 1
    kind: str = "A"

    def named(self, prefix):
        out = {}
        out.update(self.norm1.named(f"{prefix}.norm1"))
        for name in ("wq", "wk", "wv", "wo"):
            out.update(getattr(self, name).named(f"{prefix}.{name}"))
        out.update(self.norm2.named(f"{prefix}.norm2"))
        out.update(self.ffn.named(f"{prefix}.ffn"))
        return out


@dataclass
class PatchEmbedParams:
    proj: LinearParams
    norm: NormParams

    def named(self, prefix):
        return {**self.proj.named(f"{prefix}.proj"), **self.norm.named(f"{prefix}.norm")}


@dataclass
class PatchMergeParams:
    reduce: LinearParams
    norm: NormParams

    def named(self, prefix):
        return {**self.reduce.named(f"{prefix}.reduce"), **self.norm.named(f"{prefix}.norm")}


@dataclass
class DecoderParams:
    ppm: list                 # per-scale LinearParams, stage-4 dim -> width
    ppm_fuse: LinearParams    # (stage-4 dim + scales*width) -> width
    laterals: list            # stages 1..3 LinearParams, dim_i -> width
    head: LinearParams        # 4*width -> 1
    scales: tuple = (1, 2, 3, 6)

    def named(self, prefix):
        out = {}
        for k, lin in enumerate(self.ppm):
            out.update(lin.named(f"{prefix}.ppm.{k}"))
        out.update(self.ppm_fuse.named(f"{prefix}.ppm_fuse"))
        for i, lin in enumerate(self.laterals):
            out.update(lin.named(f"{prefix}.lateral.{i}"))
        out.update(self.head.named(f"{prefix}.head"))
        return out


@dataclass
class ModelParams:
    cfg: BackboneConfig
    patch_embed: PatchEmbedParams
    stages: list              # list of lists of block params
    merges: list              # 3 PatchMergeParams
    decoder: DecoderParams
    aux: LinearParams | None = None

    def named(self):
        out = self.patch_embed.named("patch_embed")
        for i, blocks in enumerate(self.stages):
            for j, blk in enumerate(blocks):
                out.update(blk.named(f"stages.{i}.blocks.{j}"))
        for i, m in enumerate(self.merges):
            out.update(m.named(f"merges.{i}"))
        out.update(self.decoder.named("decoder"))
        if self.aux is not None:
            out.update(self.aux.named("aux"))
        return out

    def parameters(self):
        return list(self.named().values())

    def param_count(self):
        return sum(t.size for t in self.parameters())


# ---------------------------------------------------------------------------
# initialization

def _init_linear(d_in, d_out, rng, dtype, scale=0.02):
    return LinearParams(
        w=Tensor(rng.normal(0.0, scale, size=(d_in, d_out)), requires_grad=True, dtype=dtype),
        b=Tensor(np.zeros(d_out), requires_grad=True, dtype=dtype),
    )


def _init_norm(d, dtype):
    return NormParams(
        gamma=Tensor(np.ones(d), requires_grad=True, dtype=dtype),
        beta=Tensor(np.zeros(d), requires_grad=True, dtype=dtype),
    )


def _init_ffn(d, ratio, rng, dtype):
    return FFNParams(fc1=_init_linear(d, ratio * d, rng, dtype),
                     fc2=_init_linear(ratio * d, d, rng, dtype))


def _init_block(kind, d, cfg, rng, dtype):
    if kind == "M":
        return VSSBlockParams(
            norm1=_init_norm(d, dtype),
            ssm=init_ssm_params(d, d, cfg.n_state, rng, dtype),
            norm2=_init_norm(d, dtype),
            ffn=_init_ffn(d, cfg.ffn_ratio, rng, dtype),
        )
    return AttnBlockParams(
        norm1=_init_norm(d, dtype),
        wq=_init_linear(d, d, rng, dtype),
        wk=_init_linear(d, d, rng, dtype),
        wv=_init_linear(d, d, rng, dtype),
        wo=_init_linear(d, d, rng, dtype),
        norm2=_init_norm(d, dtype),
        ffn=_init_ffn(d, cfg.ffn_ratio, rng, dtype),
        heads=cfg.heads,
    )


def build_model(cfg, rng, dtype=np.float32):
    """Initialize all parameters of the backbone + decoder."""
    p = cfg.patch_size
    patch_embed = PatchEmbedParams(
        proj=_init_linear(p * p * 3, cfg.embed_dim, rng, dtype),
        norm=_init_norm(cfg.embed_dim, dtype),
    )
    stages = []
    for i in range(4):
        d = cfg.stage_dim(i)
        stages.append([_init_block(kind, d, cfg, rng, dtype) for kind in cfg.stage_kinds(i)])
    merges = []
    for i in range(3):
        d = cfg.stage_dim(i)
        merges.append(PatchMergeParams(reduce=_init_linear(4 * d, 2 * d, rng, dtype),
                                       norm=_init_norm(2 * d, dtype)))
    width = cfg.decoder_width
    c4 = cfg.stage_dim(3)
    scales = (1, 2, 3, 6)
    decoder = DecoderParams(
        ppm=[_init_linear(c4, width, rng, dtype) for _ in scales],
        ppm_fuse=_init_linear(c4 + len(scales) * width, width, rng, dtype),
        laterals=[_init_linear(cfg.stage_dim(i), width, rng, dtype) for i in range(3)],
        head=_init_linear(4 * width, 1, rng, dtype),
        scales=scales,
    )
    aux = _init_linear(cfg.stage_dim(2), 1, rng, dtype) if cfg.aux_head else None
    return ModelParams(cfg=cfg, patch_embed=patch_embed, stages=stages,
                       merges=merges, decoder=decoder, aux=aux)


# ---------------------------------------------------------------------------
# forward passes

def _drop_path_add(x, branch, p, train, rng):
    """Residual add with stochastic depth on the branch."""
    if train and p > 0.0:
        if rng is None:
            raise ConfigError("training-mode forward requires an rng for drop path")
        if rng.random() < p:
            return x
        return ops.add(x, ops.mul(branch, 1.0 / (1.0 - p)))
    return ops.add(x, branch)


def _ffn_forward(tokens, ffn):
    return ops.linear(ops.gelu(ops.linear(tokens, ffn.fc1.w, ffn.fc1.b)), ffn.fc2.w, ffn.fc2.b)


def patch_embed(img, pe, cfg):
    """[H, W, 3] image -> [H/p, W/p, embed_dim] token map."""
    h, w, c = img.shape
    p = cfg.patch_size
    if h % p or w % p:
        raise DimensionError(f"image {h}x{w} not divisible by patch size {p}")
    hp, wp = h // p, w // p
    x = ops.reshape(img, (hp, p, wp, p, c))
    x = ops.transpose(x, (0, 2, 1, 3, 4))
    x = ops.reshape(x, (hp * wp, p * p * c))
    x = ops.linear(x, pe.proj.w, pe.proj.b)
    x = ops.layer_norm(x, pe.norm.gamma, pe.norm.beta)
    return ops.reshape(x, (hp, wp, cfg.embed_dim))


def patch_merge(fm, pm):
    """2x2 neighborhood concat + linear reduction: [H,W,d] -> [H/2,W/2,2d]."""
    h, w, d = fm.shape
    if h % 2 or w % 2:
        raise DimensionError(f"patch_merge requires even dims, got {h}x{w}")
    x = ops.reshape(fm, (h // 2, 2, w // 2, 2, d))
    x = ops.transpose(x, (0, 2, 1, 3, 4))
    x = ops.reshape(x, ((h // 2) * (w // 2), 4 * d))
    x = ops.linear(x, pm.reduce.w, pm.reduce.b)
    x = ops.layer_norm(x, pm.norm.gamma, pm.norm.beta)
    return ops.reshape(x, (h // 2, w // 2, 2 * d))


def vss_block(fm, blk, cfg, drop_path_p=0.0, train=False, rng=None, ablate=False):
    """Pre-norm SSM token mixing + pre-norm FFN, both with drop path."""
    h, w, d = fm.shape
    orders = build_orders(cfg.scan, h, w, cfg.local_k)
    mixed = multi_directional_ssm(ops.layer_norm(fm, blk.norm1.gamma, blk.norm1.beta),
                                  orders, blk.ssm, ablate_identity=ablate)
    fm = _drop_path_add(fm, mixed, drop_path_p, train, rng)
    tokens = ops.reshape(fm, (h * w, d))
    branch = _ffn_forward(ops.layer_norm(tokens, blk.norm2.gamma, blk.norm2.beta), blk.ffn)
    tokens = _drop_path_add(tokens, branch, drop_path_p, train, rng)
    return ops.reshape(tokens, (h, w, d))


def transformer_block(fm, blk, drop_path_p=0.0, train=False, rng=None):
    """Pre-norm global multi-head self-attention + pre-norm FFN."""
    h, w, d = fm.shape
    heads = blk.heads
    if d % heads:
        raise ConfigError(f"dim {d} not divisible by {heads} heads")
    dh = d // heads
    tokens = ops.reshape(fm, (h * w, d))
    y = ops.layer_norm(tokens, blk.norm1.gamma, blk.norm1.beta)

    def split_heads(t):
        return ops.transpose(ops.reshape(t, (h * w, heads, dh)), (1, 0, 2))

    q = split_heads(ops.linear(y, blk.wq.w, blk.wq.b))
    k = split_heads(ops.linear(y, blk.wk.w, blk.wk.b))
    v = split_heads(ops.linear(y, blk.wv.w, blk.wv.b))
    scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    attn = ops.softmax(scores)
    mixed = ops.transpose(ops.matmul(attn, v), (1, 0, 2))
    mixed = ops.linear(ops.reshape(mixed, (h * w, d)), blk.wo.w, blk.wo.b)
    tokens = _drop_path_add(tokens, mixed, drop_path_p, train, rng)

    branch = _ffn_forward(ops.layer_norm(tokens, blk.norm2.gamma, blk.norm2.beta), blk.ffn)
    tokens = _drop_path_add(tokens, branch, drop_path_p, train, rng)
    return ops.reshape(tokens, (h, w, d))


def backbone_forward(img, mp, train=False, rng=None):
    """Run all four stages; returns the four pre-merge feature maps."""
    cfg = mp.cfg
    h, w, _ = img.shape
    if h % 32 or w % 32:
        raise DimensionError(f"input {h}x{w} must be divisible by 32")
    fm = patch_embed(img, mp.patch_embed, cfg)
    schedule = cfg.drop_path_schedule()
    features = []
    block_index = 0
    for i in range(4):
        ablate = (i + 1) in cfg.ablate_ssm_stages
        for blk in mp.stages[i]:
            p = schedule[block_index]
            block_index += 1
            if blk.kind == "M":
                fm = vss_block(fm, blk, cfg, p, train, rng, ablate=ablate)
            else:
                fm = transformer_block(fm, blk, p, train, rng)
        features.append(fm)
        if i < 3:
            fm = patch_merge(fm, mp.merges[i])
    return features


def _pointwise(fm, lin, activate=False):
    h, w, _ = fm.shape
    x = ops.linear(ops.reshape(fm, (h * w, fm.shape[2])), lin.w, lin.b)
    if activate:
        x = ops.gelu(x)
    return ops.reshape(x, (h, w, lin.w.shape[1]))


def decoder_forward(features, dec, out_h, out_w):
    """Pyramid pooling + top-down fusion -> [out_h, out_w, 1] logits."""
    f1, f2, f3, f4 = features
    h4, w4, _ = f4.shape

    pooled = [f4]
    for scale, lin in zip(dec.scales, dec.ppm):
        pool = ops.adaptive_avg_pool(f4, scale, scale)
        pool = _pointwise(pool, lin, activate=True)
        pooled.append(ops.resize_nearest(pool, h4, w4))
    p4 = _pointwise(ops.concat(pooled, axis=2), dec.ppm_fuse, activate=True)

    tops = [p4]
    for fm, lin in ((f3, dec.laterals[2]), (f2, dec.laterals[1]), (f1, dec.laterals[0])):
        lateral = _pointwise(fm, lin)
        up = ops.resize_nearest(tops[-1], fm.shape[0], fm.shape[1])
        tops.append(ops.add(lateral, up))
    p4, p3, p2, p1 = tops

    h1, w1, _ = f1.shape
    fused = ops.concat([p1,
                        ops.resize_nearest(p2, h1, w1),
                        ops.resize_nearest(p3, h1, w1),
                        ops.resize_nearest(p4, h1, w1)], axis=2)
    logits = _pointwise(fused, dec.head)
    return ops.resize_bilinear(logits, out_h, out_w)


def model_forward(img, mp, train=False, rng=None):
    """Image -> (logits [H,W,1], aux logits or None)."""
    h, w, _ = img.shape
    features = backbone_forward(img, mp, train=train, rng=rng)
    logits = decoder_forward(features, mp.decoder, h, w)
    aux = None
    if mp.aux is not None:
        aux = ops.resize_bilinear(_pointwise(features[2], mp.aux), h, w)
    return logits, aux
