"""A small frozen vision transformer serving as both teacher and student
backbone (shared weights), plus a file-backed teacher that serves
precomputed feature maps from disk.

The backbone uses standard pre-norm blocks over patch tokens only (no
CLS/register tokens) with learned position embeddings that are bilinearly
interpolated to the input's token grid, so the same weights run at both the
high (teacher) and low (student) resolution. ``depth=0`` is the pure
patch-embedding configuration used by diagnostics: no position embedding,
no blocks, no final normalization.

Distillation targets the post-final-normalization patch tokens.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DataIOError
from .params import ModelParams
from .tensors import F32, FeatureMap, ImageTensor, load_tensor, require_finite, resize_plane, tokens_to_grid

# grid at which learned position embeddings are stored; interpolated elsewhere
POS_BASE_GRID = 16


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 8
    embed_dim: int = 32
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.patch_size < 1 or self.depth < 0:
            raise ValueError("patch_size must be >= 1 and depth >= 0")

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.mlp_ratio * self.embed_dim))


def init_backbone(cfg: ViTConfig, seed: int, dtype=F32) -> ModelParams:
    """Seeded random frozen backbone weights (stand-in for a pretrained model).

    Plain fan-in init makes a random ViT emit nearly identical tokens: at
    random weights the attention pattern is near-uniform, so every residual
    branch adds one shared vector and the patch signal drowns in a common
    component. Three adjustments keep the dense features spatially diverse,
    which any useful teacher must be: residual-branch projections are damped
    by 1/sqrt(2*depth), query/key weights are scaled up so attention stays
    selective, and position embeddings get an appreciable amplitude.
    """
    rng = np.random.default_rng(seed)
    c = cfg.embed_dim
    hid = cfg.mlp_hidden
    residual_scale = 1.0 / np.sqrt(2.0 * max(cfg.depth, 1))
    w: dict[str, np.ndarray] = {}

    def normal(shape, fan_in, scale=1.0):
        return (scale * rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)

    w["patch_embed.w"] = normal((c, 3, cfg.patch_size, cfg.patch_size),
                                3 * cfg.patch_size ** 2)
    w["patch_embed.b"] = np.zeros(c, dtype=dtype)
    w["pos_embed"] = (0.3 * rng.standard_normal((POS_BASE_GRID, POS_BASE_GRID, c))
                      ).astype(dtype)
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        w[pre + "ln1.g"] = np.ones(c, dtype=dtype)
        w[pre + "ln1.b"] = np.zeros(c, dtype=dtype)
        w[pre + "attn.wq"] = normal((c, c), c, scale=3.0)
        w[pre + "attn.wk"] = normal((c, c), c, scale=3.0)
        w[pre + "attn.wv"] = normal((c, c), c)
        w[pre + "attn.wo"] = normal((c, c), c, scale=residual_scale)
        for name in ("bq", "bk", "bv", "bo"):
            w[pre + "attn." + name] = np.zeros(c, dtype=dtype)
        w[pre + "ln2.g"] = np.ones(c, dtype=dtype)
        w[pre + "ln2.b"] = np.zeros(c, dtype=dtype)
        w[pre + "mlp.w1"] = normal((c, hid), c)
        w[pre + "mlp.b1"] = np.zeros(hid, dtype=dtype)
        w[pre + "mlp.w2"] = normal((hid, c), hid, scale=residual_scale)
        w[pre + "mlp.b2"] = np.zeros(c, dtype=dtype)
    if cfg.depth > 0:
        w["final_norm.g"] = np.ones(c, dtype=dtype)
        w["final_norm.b"] = np.zeros(c, dtype=dtype)
    return ModelParams(w, trainable=False)


def interpolate_pos_embed(pos: np.ndarray, gh: int, gw: int) -> np.ndarray:
    """Resample (base, base, C) learned positions to the (gh*gw, C) token list."""
    base_h, base_w, c = pos.shape
    if (base_h, base_w) == (gh, gw):
        grid = pos
    else:
        grid = np.stack(
            [resize_plane(pos[:, :, ch], gh, gw, antialias=False) for ch in range(c)],
            axis=-1)
    return np.ascontiguousarray(grid.reshape(gh * gw, c))


def _attention(x: ad.Node, w, pre: str, heads: int) -> ad.Node:
    n, c = x.value.shape
    dh = c // heads
    q = ad.matmul(x, w[pre + "attn.wq"]) + w[pre + "attn.bq"]
    k = ad.matmul(x, w[pre + "attn.wk"]) + w[pre + "attn.bk"]
    v = ad.matmul(x, w[pre + "attn.wv"]) + w[pre + "attn.bv"]
    q = ad.transpose(ad.reshape(q, (n, heads, dh)), (1, 0, 2))
    k = ad.transpose(ad.reshape(k, (n, heads, dh)), (1, 2, 0))
    v = ad.transpose(ad.reshape(v, (n, heads, dh)), (1, 0, 2))
    scores = ad.matmul(q, k) * (1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    out = ad.reshape(ad.transpose(ad.matmul(attn, v), (1, 0, 2)), (n, c))
    return ad.matmul(out, w[pre + "attn.wo"]) + w[pre + "attn.bo"]


def vit_tokens(img: ImageTensor, cfg: ViTConfig, weights: ModelParams) -> ad.Node:
    """Forward pass returning the (N, C) token node. Weights stay constants."""
    p = cfg.patch_size
    if img.h % p or img.w % p:
        raise ValueError(f"image sides {(img.h, img.w)} not divisible by patch size {p}")
    if weights["patch_embed.w"].shape != (cfg.embed_dim, 3, p, p):
        raise ValueError("backbone weights do not match the configuration")
    gh, gw = img.h // p, img.w // p
    w = {k: ad.constant(v) for k, v in weights.items()}

    x = ad.conv2d(ad.constant(img.data[None].astype(weights["patch_embed.w"].dtype)),
                  w["patch_embed.w"], w["patch_embed.b"], stride=p)
    tokens = ad.transpose(ad.reshape(x, (cfg.embed_dim, gh * gw)), (1, 0))
    if cfg.depth == 0:
        return tokens

    tokens = tokens + ad.constant(
        interpolate_pos_embed(weights["pos_embed"], gh, gw))
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        h = ad.layer_norm(tokens, w[pre + "ln1.g"], w[pre + "ln1.b"])
        tokens = tokens + _attention(h, w, pre, cfg.heads)
        h = ad.layer_norm(tokens, w[pre + "ln2.g"], w[pre + "ln2.b"])
        h = ad.gelu(ad.matmul(h, w[pre + "mlp.w1"]) + w[pre + "mlp.b1"])
        tokens = tokens + (ad.matmul(h, w[pre + "mlp.w2"]) + w[pre + "mlp.b2"])
    return ad.layer_norm(tokens, w["final_norm.g"], w["final_norm.b"])


def vit_forward(img: ImageTensor, cfg: ViTConfig, weights: ModelParams) -> FeatureMap:
    """Dense features (C, h/p, w/p) for one image. Deterministic; no gradients
    are ever tracked into the frozen weights."""
    p = cfg.patch_size
    gh, gw = img.h // p, img.w // p
    tokens = vit_tokens(img, cfg, weights).value
    require_finite(tokens, "backbone tokens")
    return FeatureMap(tokens_to_grid(tokens, gh, gw))


# ---------------------------------------------------------------------------
# Teacher sources
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LiveTeacher:
    """Teacher = the frozen backbone itself, run at high resolution."""

    cfg: ViTConfig
    weights: ModelParams


@dataclass(frozen=True)
class FileTeacher:
    """Teacher features served from ``<dir>/<sample_id>.brxt`` dumps."""

    directory: Path
    expected_shape: tuple[int, int, int]  # (C, H_t, W_t)


def teacher_features(src, sample_id: str, img: ImageTensor | None) -> FeatureMap:
    """Target feature map for one sample; always detached from any graph."""
    if isinstance(src, LiveTeacher):
        if img is None:
            raise ValueError("live teacher needs the high-resolution image")
        return vit_forward(img, src.cfg, src.weights)
    if isinstance(src, FileTeacher):
        path = Path(src.directory) / f"{sample_id}.brxt"
        if not path.exists():
            raise DataIOError(f"missing teacher feature file: {path}")
        data = load_tensor(path)
        if tuple(data.shape) != tuple(src.expected_shape):
            raise ValueError(
                f"teacher file {path} has shape {data.shape}, run config expects "
                f"{tuple(src.expected_shape)}")
        return FeatureMap(data)
    raise TypeError(f"unknown teacher source {type(src)!r}")
