"""The trainable student-side network.

Two pieces operate on the low-resolution image next to the frozen backbone:

* a convolutional stem pyramid over the image at strides 4/8/16 (the
  "refiner"; it never feeds back into the backbone), and
* a convolutional head that fuses backbone tokens with the pyramid at the
  backbone grid, runs a few residual blocks, upsamples by sub-pixel
  (pixel-shuffle) stages and adds the result onto nearest-upsampled backbone
  features.

The global residual means a zero final projection reproduces the
nearest-upsampled backbone map exactly; initialization scales the final
projection by 0.01 so training starts near that baseline.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .params import ModelParams
from .tensors import F32, FeatureMap, ImageTensor, require_finite
from .vit import ViTConfig, vit_forward

PYRAMID_STRIDES = (4, 8, 16)


@dataclass(frozen=True)
class AdapterConfig:
    pyramid_channels: tuple[int, int, int] = (16, 32, 32)
    fusion_channels: int = 64
    head_blocks: int = 3
    upsample_factor: int = 4

    def __post_init__(self):
        if len(self.pyramid_channels) != len(PYRAMID_STRIDES):
            raise ValueError("pyramid_channels must list one count per stride (4, 8, 16)")
        if self.head_blocks < 1:
            raise ValueError("head_blocks must be >= 1")
        f = self.upsample_factor
        if f < 1 or (f & (f - 1)):
            raise ValueError("upsample_factor must be a positive power of two")

    @property
    def upsample_stages(self) -> int:
        return self.upsample_factor.bit_length() - 1


def init_student(vit_cfg: ViTConfig, cfg: AdapterConfig, seed: int, dtype=F32) -> ModelParams:
    """Fan-in-scaled random init; the final projection gets scale 0.01."""
    rng = np.random.default_rng(seed)
    c = vit_cfg.embed_dim
    p0, p1, p2 = cfg.pyramid_channels
    f = cfg.fusion_channels
    w: dict[str, np.ndarray] = {}

    def conv(name, cout, cin, k, scale=1.0):
        w[name + ".w"] = (scale * rng.standard_normal((cout, cin, k, k))
                          / np.sqrt(cin * k * k)).astype(dtype)
        w[name + ".b"] = np.zeros(cout, dtype=dtype)

    conv("adapter.conv1", p0, 3, 3)
    conv("adapter.conv2", p0, p0, 3)
    conv("adapter.conv3", p1, p0, 3)
    conv("adapter.conv4", p2, p1, 3)

    conv("head.fuse", f, c + p0 + p1 + p2, 1)
    for i in range(cfg.head_blocks):
        conv(f"head.block{i}.conv1", f, f, 3)
        conv(f"head.block{i}.conv2", f, f, 3)
        w[f"head.block{i}.n.g"] = np.ones(f, dtype=dtype)
        w[f"head.block{i}.n.b"] = np.zeros(f, dtype=dtype)
    for j in range(cfg.upsample_stages):
        conv(f"head.up{j}", 4 * f, f, 3)
    conv("head.out", c, f, 1, scale=0.01)
    return ModelParams(w, trainable=True)


def _as_node_dict(params) -> dict[str, ad.Node]:
    if isinstance(params, ModelParams):
        return {k: ad.constant(v) for k, v in params.items()}
    return params


def _channel_norm(x: ad.Node, g: ad.Node, b: ad.Node) -> ad.Node:
    """Layer norm over the channel axis of (N, C, H, W) features."""
    xt = ad.transpose(x, (0, 2, 3, 1))
    return ad.transpose(ad.layer_norm(xt, g, b), (0, 3, 1, 2))


def adapter_forward(img_low: ImageTensor, cfg: AdapterConfig, params) -> list[ad.Node]:
    """Image-branch pyramid. Level l has spatial size (h/s_l, w/s_l) for
    strides 4/8/16 relative to the low-resolution image; the backbone output
    plays no role here."""
    if img_low.h % 16 or img_low.w % 16:
        raise ValueError(f"adapter input sides {(img_low.h, img_low.w)} must be divisible by 16")
    w = _as_node_dict(params)
    dtype = w["adapter.conv1.w"].value.dtype
    x = ad.constant(img_low.data[None].astype(dtype))
    x = ad.gelu(ad.conv2d(x, w["adapter.conv1.w"], w["adapter.conv1.b"], stride=2, padding=1))
    x = ad.gelu(ad.conv2d(x, w["adapter.conv2.w"], w["adapter.conv2.b"], stride=2, padding=1))
    lvl4 = x
    x = ad.gelu(ad.conv2d(x, w["adapter.conv3.w"], w["adapter.conv3.b"], stride=2, padding=1))
    lvl8 = x
    x = ad.gelu(ad.conv2d(x, w["adapter.conv4.w"], w["adapter.conv4.b"], stride=2, padding=1))
    lvl16 = x
    return [ad.reshape(l, l.value.shape[1:]) for l in (lvl4, lvl8, lvl16)]


def _to_grid(level: ad.Node, grid: tuple[int, int]) -> ad.Node:
    """Bring one (C, H, W) pyramid level to the fusion grid by integer
    average-pooling or nearest upsampling."""
    c, h, w = level.value.shape
    gh, gw = grid
    x = ad.reshape(level, (1, c, h, w))
    if h == gh and w == gw:
        return x
    if h > gh:
        if h % gh or w % gw or h // gh != w // gw:
            raise ValueError(f"level size {(h, w)} not an integer multiple of grid {grid}")
        return ad.avg_pool2d(x, h // gh)
    if gh % h or gw % w or gh // h != gw // w:
        raise ValueError(f"grid {grid} not an integer multiple of level size {(h, w)}")
    return ad.upsample_nearest(x, gh // h)


def head_forward(backbone_fm, pyramid: list[ad.Node], cfg: AdapterConfig, params) -> ad.Node:
    """Fuse frozen backbone tokens with the pyramid and emit the upscaled map.

    Output shape is (C, f*H, f*W) for a (C, H, W) backbone map and
    upsample factor f; a constructed zero final projection bypasses the head
    entirely, leaving nearest-upsampled backbone features.
    """
    w = _as_node_dict(params)
    if isinstance(backbone_fm, FeatureMap):
        backbone_fm = ad.constant(backbone_fm.data)
    if backbone_fm.value.ndim != 3:
        raise ValueError(f"backbone map must be (C, H, W), got {backbone_fm.value.shape}")
    c, gh, gw = backbone_fm.value.shape
    if w["head.out.w"].value.shape[0] != c:
        raise ValueError(
            f"head emits {w['head.out.w'].value.shape[0]} channels, backbone has {c}")
    bb = ad.reshape(backbone_fm, (1, c, gh, gw))
    if bb.value.dtype != w["head.fuse.w"].value.dtype:
        bb = ad.constant(bb.value.astype(w["head.fuse.w"].value.dtype))

    base = ad.upsample_nearest(bb, cfg.upsample_factor)
    feats = ad.concat([bb] + [_to_grid(l, (gh, gw)) for l in pyramid], axis=1)
    h = ad.gelu(ad.conv2d(feats, w["head.fuse.w"], w["head.fuse.b"]))
    for i in range(cfg.head_blocks):
        r = ad.conv2d(h, w[f"head.block{i}.conv1.w"], w[f"head.block{i}.conv1.b"], padding=1)
        r = ad.gelu(_channel_norm(r, w[f"head.block{i}.n.g"], w[f"head.block{i}.n.b"]))
        r = ad.conv2d(r, w[f"head.block{i}.conv2.w"], w[f"head.block{i}.conv2.b"], padding=1)
        h = h + r
    for j in range(cfg.upsample_stages):
        h = ad.gelu(ad.pixel_shuffle(
            ad.conv2d(h, w[f"head.up{j}.w"], w[f"head.up{j}.b"], padding=1), 2))
    delta = ad.conv2d(h, w["head.out.w"], w["head.out.b"])
    out = base + delta
    return ad.reshape(out, out.value.shape[1:])


def student_forward(img_low: ImageTensor, vit_cfg: ViTConfig, adapter_cfg: AdapterConfig,
                    frozen_w: ModelParams, params) -> ad.Node:
    """Full student: frozen backbone on the low-res image + refiner + head.

    The backbone branch is computed without gradient tracking (its weights
    are frozen and the image is not trainable), so gradients only ever reach
    the refiner/head parameters.
    """
    bb = vit_forward(img_low, vit_cfg, frozen_w)
    expected = (img_low.h // vit_cfg.patch_size, img_low.w // vit_cfg.patch_size)
    if bb.grid != expected:
        raise ValueError(f"backbone grid {bb.grid} != expected {expected}")
    pyramid = adapter_forward(img_low, adapter_cfg, params)
    return head_forward(bb, pyramid, adapter_cfg, params)


def student_feature_map(img_low: ImageTensor, vit_cfg: ViTConfig,
                        adapter_cfg: AdapterConfig, frozen_w: ModelParams,
                        params: ModelParams) -> FeatureMap:
    """Inference-mode student output as a plain FeatureMap."""
    out = student_forward(img_low, vit_cfg, adapter_cfg, frozen_w, params)
    return FeatureMap(require_finite(out.value, "student features"))
