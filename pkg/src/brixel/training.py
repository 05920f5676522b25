"""The distillation driver.

Per step: teacher features at high resolution (detached), the same images
downsampled 4x per side for the student, a batch-pooled PCA of the teacher
tokens, the weighted L1 + edge + spectral loss, one backward pass and an
Adam update of the refiner/head parameters only. Backbone weights are never
touched; a hash check pins that down in the tests.

Batches and synthetic data are derived statelessly from (seed, iteration),
so a paused-and-resumed run walks the same trajectory as an unpaused one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataIOError, NumericError
from .losses import LossWeights, SpectralConfig, default_r0, fit_pca, loss_breakdown
from .params import ModelParams
from .refiner import AdapterConfig, adapter_forward, head_forward, init_student
from .tensors import FeatureMap, ImageTensor, load_tensor, resize_bilinear, save_tensor
from .vit import FileTeacher, LiveTeacher, ViTConfig, init_backbone, teacher_features, vit_forward

METRICS_COLUMNS = ("iter", "lr", "l1", "edge", "spectral", "total", "gradnorm")


@dataclass(frozen=True)
class DistillConfig:
    """Hyperparameters of one training run (desk-scale defaults)."""

    student_resolution: int = 64
    downsample_factor: int = 4
    lambda_edge: float = 1.0
    lambda_spectral: float = 0.1
    pca_k: int = 8
    lr: float = 1e-3
    warmup_epochs: float = 1.0
    total_iters: int = 2000
    batch_size: int = 8
    dataset_size: int = 8
    seed: int = 0
    teacher_source: str = "live"  # or "file:<dir>"
    r0: int = 0                   # 0 -> half-Nyquist default for the grid
    eps_log: float = 1e-8
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.student_resolution < 16:
            raise ConfigError("student_resolution must be >= 16")
        if self.downsample_factor < 1:
            raise ConfigError("downsample_factor must be >= 1")
        if self.batch_size < 1 or self.total_iters < 0 or self.dataset_size < 1:
            raise ConfigError("batch_size/dataset_size must be >= 1, total_iters >= 0")
        if self.pca_k < 1 or self.lr <= 0:
            raise ConfigError("pca_k must be >= 1 and lr positive")

    @property
    def teacher_resolution(self) -> int:
        return self.student_resolution * self.downsample_factor

    @property
    def epoch_iters(self) -> int:
        return max(1, math.ceil(self.dataset_size / self.batch_size))

    @property
    def warmup_iters(self) -> int:
        return int(round(self.warmup_epochs * self.epoch_iters))

    def loss_weights(self) -> LossWeights:
        return LossWeights(edge=self.lambda_edge, spectral=self.lambda_spectral)

    def spectral_config(self, grid_h: int, grid_w: int) -> SpectralConfig:
        r0 = self.r0 if self.r0 > 0 else default_r0(grid_h, grid_w)
        return SpectralConfig(r0=r0, eps_log=self.eps_log)


# ---------------------------------------------------------------------------
# Adam with warmup
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: ModelParams) -> AdamState:
    return AdamState(m={k: np.zeros_like(p) for k, p in params.items()},
                     v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState,
              lr: float) -> None:
    """Standard bias-corrected Adam update, in place on ``params``."""
    if not params.trainable:
        raise ValueError("refusing to update frozen parameters")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"NaN/Inf gradient for parameter {name}; step aborted")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} "
                             f"shape {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        g = g.astype(p.dtype, copy=False)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * (g * g)
        m_hat = state.m[name] / c1
        v_hat = state.v[name] / c2
        params.tensors[name] = p - (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)


def warmup_lr(iteration: int, cfg: DistillConfig) -> float:
    """Linear 0 -> lr over the first epoch's iterations, constant afterwards."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if cfg.warmup_iters <= 0:
        return cfg.lr
    return cfg.lr * min(1.0, iteration / cfg.warmup_iters)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients to a global-norm cap; returns the pre-clip norm."""
    norm = ad.global_grad_norm(grads.values())
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * scale
    return norm


# ---------------------------------------------------------------------------
# One training step
# ---------------------------------------------------------------------------

def make_teacher_source(cfg: DistillConfig, vit_cfg: ViTConfig, backbone: ModelParams):
    spec = cfg.teacher_source
    if spec == "live":
        return LiveTeacher(vit_cfg, backbone)
    if spec.startswith("file:"):
        grid = cfg.teacher_resolution // vit_cfg.patch_size
        return FileTeacher(Path(spec[5:]), (vit_cfg.embed_dim, grid, grid))
    raise ConfigError(f"unknown teacher_source {spec!r} (expected 'live' or 'file:<dir>')")


def train_step(batch: list[tuple[str, ImageTensor]], student: ModelParams,
               backbone: ModelParams, vit_cfg: ViTConfig, adapter_cfg: AdapterConfig,
               cfg: DistillConfig, adam: AdamState, iteration: int,
               teacher_src=None, sample_cache: dict | None = None) -> dict[str, float]:
    """One optimization step over a batch of teacher-resolution images.

    ``sample_cache`` memoizes the (deterministic, frozen) teacher features
    and downsampled images per sample id across iterations.
    """
    if teacher_src is None:
        teacher_src = make_teacher_source(cfg, vit_cfg, backbone)
    lr = warmup_lr(iteration, cfg)

    teachers: list[FeatureMap] = []
    lows: list[ImageTensor] = []
    for sid, img in batch:
        if sample_cache is not None and sid in sample_cache:
            t_fm, low = sample_cache[sid]
        else:
            t_fm = teacher_features(teacher_src, sid, img)
            low = resize_bilinear(img, img.h // cfg.downsample_factor,
                                  img.w // cfg.downsample_factor, antialias=True)
            if sample_cache is not None:
                sample_cache[sid] = (t_fm, low)
        teachers.append(t_fm)
        lows.append(low)

    pooled = np.concatenate([t.tokens() for t in teachers], axis=0)
    pca = fit_pca(pooled, cfg.pca_k)
    grid_h, grid_w = teachers[0].grid
    spectral_cfg = cfg.spectral_config(grid_h, grid_w)
    weights = cfg.loss_weights()

    sums = {"l1": 0.0, "edge": 0.0, "spectral": 0.0, "total": 0.0}
    with ad.Tape() as tape:
        nodes = student.as_nodes()
        batch_total = None
        for (sid, _), low, t_fm in zip(batch, lows, teachers):
            bb = vit_forward(low, vit_cfg, backbone)
            pyramid = adapter_forward(low, adapter_cfg, nodes)
            s_out = head_forward(bb, pyramid, adapter_cfg, nodes)
            total, parts = loss_breakdown(s_out, t_fm, pca, weights, spectral_cfg)
            if not np.isfinite(total.value):
                raise NumericError(f"non-finite loss for sample {sid!r} at iteration {iteration}")
            for key, node in parts.items():
                sums[key] += float(node.value)
            sums["total"] += float(total.value)
            batch_total = total if batch_total is None else ad.add(batch_total, total)
        batch_mean = ad.mul(batch_total, 1.0 / len(batch))
        tape.backward(batch_mean)

    grads = {name: (node.grad if node.grad is not None else np.zeros_like(node.value))
             for name, node in nodes.items()}
    gradnorm = clip_gradients(grads, cfg.grad_clip)
    adam_step(student, grads, adam, lr)

    n = len(batch)
    return {"iter": float(iteration), "lr": lr, "l1": sums["l1"] / n,
            "edge": sums["edge"] / n, "spectral": sums["spectral"] / n,
            "total": sums["total"] / n, "gradnorm": gradnorm}


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt_dir, student: ModelParams, adam: AdamState, iteration: int) -> None:
    """One .brxt per named parameter plus a text manifest and optimizer state."""
    root = Path(ckpt_dir)
    (root / "params").mkdir(parents=True, exist_ok=True)
    (root / "adam" / "m").mkdir(parents=True, exist_ok=True)
    (root / "adam" / "v").mkdir(parents=True, exist_ok=True)
    lines = []
    for name, tensor in student.items():
        save_tensor(tensor, root / "params" / f"{name}.brxt")
        save_tensor(adam.m[name], root / "adam" / "m" / f"{name}.brxt")
        save_tensor(adam.v[name], root / "adam" / "v" / f"{name}.brxt")
        shape = "x".join(str(d) for d in tensor.shape)
        lines.append(f"{name}\t{shape}\t{tensor.dtype.name}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    (root / "state.txt").write_text(f"iter\t{iteration}\nadam_t\t{adam.t}\n")


def load_checkpoint(ckpt_dir, template: ModelParams) -> tuple[ModelParams, AdamState, int]:
    """Restore parameters + Adam state; shapes are validated name by name."""
    root = Path(ckpt_dir)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise DataIOError(f"no checkpoint manifest at {manifest}")
    names = []
    for line in manifest.read_text().splitlines():
        if line.strip():
            names.append(line.split("\t")[0])
    if set(names) != set(template.names()):
        missing = set(template.names()) - set(names)
        extra = set(names) - set(template.names())
        raise ConfigError(
            f"checkpoint parameters do not match the configuration "
            f"(missing: {sorted(missing)}, unexpected: {sorted(extra)})")
    tensors, m, v = {}, {}, {}
    for name in names:
        tensor = load_tensor(root / "params" / f"{name}.brxt")
        expected = template[name].shape
        if tensor.shape != expected:
            raise ConfigError(
                f"checkpoint parameter {name!r} has shape {tuple(tensor.shape)}, "
                f"configuration expects {tuple(expected)}")
        tensors[name] = tensor
        m[name] = load_tensor(root / "adam" / "m" / f"{name}.brxt")
        v[name] = load_tensor(root / "adam" / "v" / f"{name}.brxt")
    state_lines = dict(line.split("\t") for line in
                       (root / "state.txt").read_text().splitlines() if line.strip())
    adam = AdamState(m=m, v=v, t=int(state_lines["adam_t"]))
    return ModelParams(tensors, trainable=True), adam, int(state_lines["iter"])


# ---------------------------------------------------------------------------
# The run driver
# ---------------------------------------------------------------------------

def format_metrics_line(metrics: dict[str, float]) -> str:
    return "\t".join([str(int(metrics["iter"]))]
                     + [f"{metrics[k]:.10g}" for k in METRICS_COLUMNS[1:]])


def select_batch(dataset, cfg: DistillConfig, iteration: int):
    """Stateless batch choice: derived from (seed, iteration) only."""
    rng = np.random.default_rng([cfg.seed, 1000003, iteration])
    n = len(dataset)
    idx = rng.choice(n, size=cfg.batch_size, replace=cfg.batch_size > n)
    return [dataset[i] for i in idx]


@dataclass
class TrainRun:
    student: ModelParams
    backbone: ModelParams
    adam: AdamState
    start_iter: int
    metrics: list[dict[str, float]] = field(default_factory=list)


def init_run(vit_cfg: ViTConfig, adapter_cfg: AdapterConfig, cfg: DistillConfig) -> TrainRun:
    backbone = init_backbone(vit_cfg, seed=cfg.seed)
    student = init_student(vit_cfg, adapter_cfg, seed=cfg.seed + 1)
    return TrainRun(student=student, backbone=backbone, adam=init_adam(student), start_iter=0)


def run_training(run: TrainRun, dataset, vit_cfg: ViTConfig, adapter_cfg: AdapterConfig,
                 cfg: DistillConfig, iters: int | None = None, log_line=None,
                 teacher_src=None) -> TrainRun:
    """Advance a run by ``iters`` iterations (default: up to total_iters)."""
    if teacher_src is None:
        teacher_src = make_teacher_source(cfg, vit_cfg, run.backbone)
    cache: dict = {}
    end = cfg.total_iters if iters is None else run.start_iter + iters
    for it in range(run.start_iter, end):
        batch = select_batch(dataset, cfg, it)
        metrics = train_step(batch, run.student, run.backbone, vit_cfg, adapter_cfg,
                             cfg, run.adam, it, teacher_src=teacher_src,
                             sample_cache=cache)
        run.metrics.append(metrics)
        if log_line is not None:
            log_line(format_metrics_line(metrics))
    run.start_iter = end
    return run
