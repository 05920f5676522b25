"""The three distillation loss terms and their weighted total.

* plain L1 between student and teacher maps,
* an edge loss comparing Sobel responses of both maps after a token-wise
  projection onto the top-K principal components of the batch teacher
  tokens (computed by SVD, never receiving gradients), and
* a spectral loss comparing log radial amplitude spectra above a cutoff
  radius, so the student is pushed to reproduce the teacher's
  high-frequency content.

All reductions are means over elements, which keeps the loss weights
resolution-independent. Teacher inputs are always detached; gradients flow
into the student map only.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .tensors import FeatureMap

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()

# guards sqrt(0) inside amplitude computation; far below every tolerance in use
_AMP_EPS = 1e-24


@dataclass(frozen=True)
class LossWeights:
    edge: float = 1.0
    spectral: float = 0.1

    def __post_init__(self):
        if self.edge < 0 or self.spectral < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class SpectralConfig:
    """Radial-spectrum comparison above cutoff radius r0 (integer bins)."""

    r0: int
    eps_log: float = 1e-8

    def __post_init__(self):
        if self.r0 < 1:
            raise ValueError("r0 must be >= 1")
        if self.eps_log <= 0:
            raise ValueError("eps_log must be positive")


def r_max_for_grid(h: int, w: int) -> int:
    return min(h, w) // 2


def default_r0(h: int, w: int) -> int:
    """Half-Nyquist split: everything above half the maximum radius is
    treated as high-frequency."""
    return max(1, r_max_for_grid(h, w) // 2)


@dataclass(frozen=True)
class PcaProjection:
    """Token-wise projection onto the K highest-variance directions of a
    token population. Built from teacher tokens only; carries no gradient."""

    mean: np.ndarray   # (C,)
    basis: np.ndarray  # (C, K), orthonormal columns
    k: int
    degenerate: bool = False


def _as_student_node(fm) -> ad.Node:
    if isinstance(fm, ad.Node):
        return fm
    if isinstance(fm, FeatureMap):
        return ad.constant(fm.data)
    return ad.constant(np.asarray(fm))


def _as_teacher_node(fm) -> ad.Node:
    """Teacher maps never carry gradients, whatever the caller hands us."""
    if isinstance(fm, ad.Node):
        return ad.detach(fm)
    if isinstance(fm, FeatureMap):
        return ad.constant(fm.data)
    return ad.constant(np.asarray(fm))


def _check_same_shape(student: ad.Node, teacher: ad.Node):
    if student.value.shape != teacher.value.shape:
        raise ValueError(
            f"student/teacher shape mismatch: {student.value.shape} vs {teacher.value.shape}")


# ---------------------------------------------------------------------------
# L1
# ---------------------------------------------------------------------------

def l1_loss(student, teacher) -> ad.Node:
    """Mean absolute difference over all C*H*W elements."""
    s = _as_student_node(student)
    t = _as_teacher_node(teacher)
    _check_same_shape(s, t)
    return ad.reduce_mean(ad.absolute(ad.sub(t, s)))


# ---------------------------------------------------------------------------
# PCA projection
# ---------------------------------------------------------------------------

def fit_pca(tokens, k: int) -> PcaProjection:
    """Top-K principal directions of a pooled token set (N, C).

    SVD of the mean-centered tokens; columns ordered by singular value
    descending, each sign-fixed so its largest-magnitude component is
    positive. Rank deficiency below K is completed with the orthonormal
    vectors the SVD already provides and flagged with a warning.
    """
    if isinstance(tokens, ad.Node):
        tokens = tokens.value
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (N, C), got {tokens.shape}")
    n, c = tokens.shape
    if not 1 <= k <= min(n, c):
        raise ValueError(f"K={k} must satisfy 1 <= K <= min(N={n}, C={c})")
    dtype = tokens.dtype
    mean = tokens.mean(axis=0)
    centered = (tokens - mean).astype(np.float64)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    tol = max(n, c) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    degenerate = rank < k
    if degenerate:
        warnings.warn(
            f"token set has rank {rank} < K={k}; completing the basis with "
            "arbitrary orthonormal directions", RuntimeWarning, stacklevel=2)
    basis = vt[:k].T.copy()
    for j in range(k):
        col = basis[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            basis[:, j] = -col
    return PcaProjection(mean.astype(dtype), basis.astype(dtype), k, degenerate)


def project(fm, p: PcaProjection) -> ad.Node:
    """Token-wise map t -> V_K^T (t - mu); output (K, H, W). No gradient
    reaches the projection itself."""
    x = fm if isinstance(fm, ad.Node) else _as_student_node(fm)
    if x.value.ndim != 3:
        raise ValueError(f"feature map must be (C, H, W), got {x.value.shape}")
    c, h, w = x.value.shape
    if c != p.basis.shape[0]:
        raise ValueError(f"map has {c} channels, projection expects {p.basis.shape[0]}")
    dtype = x.value.dtype
    tokens = ad.reshape(ad.transpose(x, (1, 2, 0)), (h * w, c))
    centered = ad.sub(tokens, ad.constant(p.mean.astype(dtype)))
    proj = ad.matmul(centered, ad.constant(p.basis.astype(dtype)))
    return ad.transpose(ad.reshape(proj, (h, w, p.k)), (2, 0, 1))


# ---------------------------------------------------------------------------
# Sobel / edge loss
# ---------------------------------------------------------------------------

def sobel(fm) -> tuple[ad.Node, ad.Node]:
    """Channel-wise 3x3 Sobel responses with replicate padding (same size)."""
    x = fm if isinstance(fm, ad.Node) else _as_student_node(fm)
    c, h, w = x.value.shape
    if h < 3 or w < 3:
        raise ValueError(f"grid {(h, w)} too small for a 3x3 Sobel window")
    dtype = x.value.dtype
    planes = ad.pad2d(ad.reshape(x, (c, 1, h, w)), 1, "replicate")
    kx = ad.constant(SOBEL_X.reshape(1, 1, 3, 3).astype(dtype))
    ky = ad.constant(SOBEL_Y.reshape(1, 1, 3, 3).astype(dtype))
    gx = ad.reshape(ad.conv2d(planes, kx), (c, h, w))
    gy = ad.reshape(ad.conv2d(planes, ky), (c, h, w))
    return gx, gy


def edge_loss(student, teacher, p: PcaProjection) -> ad.Node:
    """Mean |sobel_x(P(T)) - sobel_x(P(S))| + mean |sobel_y(...)|."""
    s = _as_student_node(student)
    t = _as_teacher_node(teacher)
    _check_same_shape(s, t)
    gx_s, gy_s = sobel(project(s, p))
    gx_t, gy_t = sobel(project(t, p))
    return ad.add(ad.reduce_mean(ad.absolute(ad.sub(gx_t, gx_s))),
                  ad.reduce_mean(ad.absolute(ad.sub(gy_t, gy_s))))


# ---------------------------------------------------------------------------
# Radial spectrum / spectral loss
# ---------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _dft_matrices(n: int, dtype_name: str):
    idx = np.arange(n)
    phase = 2.0 * np.pi * np.outer(idx, idx) / n
    dt = np.dtype(dtype_name)
    return np.cos(phase).astype(dt), np.sin(phase).astype(dt)


@lru_cache(maxsize=32)
def _radial_bins(h: int, w: int):
    """Integer bin per (u, v) frequency, -1 beyond r_max.

    Frequencies are centered (signed indices); each axis is scaled so its
    Nyquist frequency lands on r_max = floor(min(h, w)/2), which keeps the
    binning circles circular for non-square grids.
    """
    r_max = r_max_for_grid(h, w)
    uu = np.where(np.arange(h) > h // 2, np.arange(h) - h, np.arange(h))
    vv = np.where(np.arange(w) > w // 2, np.arange(w) - w, np.arange(w))
    ru = uu * (2.0 * r_max / h)
    rv = vv * (2.0 * r_max / w)
    r = np.round(np.sqrt(ru[:, None] ** 2 + rv[None, :] ** 2)).astype(np.int64)
    r[r > r_max] = -1
    return r, r_max


@lru_cache(maxsize=32)
def _bin_average_matrix(h: int, w: int, dtype_name: str) -> np.ndarray:
    """(r_max+1, H*W) matrix averaging a flattened amplitude map per radius."""
    bins, r_max = _radial_bins(h, w)
    flat = bins.reshape(-1)
    mat = np.zeros((r_max + 1, h * w), dtype=np.float64)
    for r in range(r_max + 1):
        mask = flat == r
        count = int(mask.sum())
        if count:
            mat[r, mask] = 1.0 / count
    return mat.astype(np.dtype(dtype_name))


def radial_spectrum(fm, cfg: SpectralConfig | None = None) -> ad.Node:
    """One-dimensional amplitude spectrum, shape (r_max + 1,).

    Per channel, the 2-d DFT is evaluated as matrix products against fixed
    cosine/sine matrices (so gradients fall out of the recorded ops),
    amplitudes are normalized by sqrt(H*W) (unitary convention), averaged
    over channels, then averaged within integer-radius annuli of centered
    frequencies.
    """
    x = fm if isinstance(fm, ad.Node) else _as_student_node(fm)
    if x.value.ndim != 3:
        raise ValueError(f"feature map must be (C, H, W), got {x.value.shape}")
    c, h, w = x.value.shape
    dtype = x.value.dtype
    cy, sy = _dft_matrices(h, dtype.name)
    cx, sx = _dft_matrices(w, dtype.name)
    cy_n, sy_n = ad.constant(cy), ad.constant(sy)
    cxt, sxt = ad.constant(cx.T.copy()), ad.constant(sx.T.copy())

    cyx = ad.matmul(cy_n, x)
    syx = ad.matmul(sy_n, x)
    re = ad.sub(ad.matmul(cyx, cxt), ad.matmul(syx, sxt))
    im = ad.neg(ad.add(ad.matmul(cyx, sxt), ad.matmul(syx, cxt)))
    amp = ad.sqrt(ad.add(ad.add(ad.square(re), ad.square(im)), _AMP_EPS))
    amp = ad.mul(amp, 1.0 / np.sqrt(h * w))

    mean_amp = ad.reduce_mean(amp, axis=0)
    binned = ad.matmul(ad.constant(_bin_average_matrix(h, w, dtype.name)),
                       ad.reshape(mean_amp, (h * w, 1)))
    return ad.reshape(binned, (binned.value.shape[0],))


def spectral_loss(student, teacher, cfg: SpectralConfig) -> ad.Node:
    """Mean over r >= r0 of the squared log-spectrum gap."""
    s = _as_student_node(student)
    t = _as_teacher_node(teacher)
    _check_same_shape(s, t)
    _, h, w = s.value.shape
    r_max = r_max_for_grid(h, w)
    if cfg.r0 > r_max:
        raise ValueError(f"r0={cfg.r0} leaves no radii <= r_max={r_max}")
    p_s = radial_spectrum(s, cfg)
    p_t = radial_spectrum(t, cfg)
    n_bins = r_max + 1 - cfg.r0
    hi_s = ad.narrow(p_s, 0, cfg.r0, n_bins)
    hi_t = ad.narrow(p_t, 0, cfg.r0, n_bins)
    diff = ad.sub(ad.log(ad.add(hi_t, cfg.eps_log)), ad.log(ad.add(hi_s, cfg.eps_log)))
    return ad.reduce_mean(ad.square(diff))


# ---------------------------------------------------------------------------
# Total
# ---------------------------------------------------------------------------

def loss_breakdown(student, teacher, p: PcaProjection, weights: LossWeights,
                   cfg: SpectralConfig) -> tuple[ad.Node, dict[str, ad.Node]]:
    """Weighted total plus its three components (for logging)."""
    parts = {
        "l1": l1_loss(student, teacher),
        "edge": edge_loss(student, teacher, p),
        "spectral": spectral_loss(student, teacher, cfg),
    }
    total = ad.add(parts["l1"],
                   ad.add(ad.mul(parts["edge"], weights.edge),
                          ad.mul(parts["spectral"], weights.spectral)))
    return total, parts


def total_loss(student, teacher, p: PcaProjection, weights: LossWeights,
               cfg: SpectralConfig) -> ad.Node:
    """L1 + lambda_edge * edge + lambda_spectral * spectral."""
    total, _ = loss_breakdown(student, teacher, p, weights, cfg)
    return total
