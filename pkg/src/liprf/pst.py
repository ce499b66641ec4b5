"""Classic linear photorealistic color transfer.

The Monge-Kantorovitch linear map is the closed-form matrix transporting
one Gaussian pixel distribution onto another:

    M = S_i^{-1/2} (S_i^{1/2} S_t S_i^{1/2})^{1/2} S_i^{-1/2}

for source/target covariances S_i, S_t.  M is symmetric PSD and, being
linear, its Lipschitz constant is exactly its largest singular value,
which serves as the lower-bound estimate for the stylization network's
Lipschitz budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene_io import SceneDataset


@dataclass
class ColorStats:
    """Pooled pixel statistics (population covariance, divisor N)."""

    mean: np.ndarray  # (3,)
    cov: np.ndarray  # (3, 3)
    count: int


@dataclass
class ColorTransfer:
    """Affine pixel map p -> matrix @ (p - source_mean) + target_mean."""

    matrix: np.ndarray
    source_mean: np.ndarray
    target_mean: np.ndarray
    k_est: float


def color_stats(images) -> ColorStats:
    """Mean and population covariance pooled over all pixels of all images."""
    if isinstance(images, np.ndarray):
        images = [images]
    if not images:
        raise ValueError("need at least one image")
    pixels = np.concatenate([np.asarray(im, dtype=np.float64).reshape(-1, 3)
                             for im in images], axis=0)
    if pixels.shape[0] == 0:
        raise ValueError("need at least one pixel")
    mean = pixels.mean(axis=0)
    centered = pixels - mean
    cov = centered.T @ centered / pixels.shape[0]
    return ColorStats(mean=mean, cov=cov, count=pixels.shape[0])


def _check_symmetric(S, tol=1e-6):
    if np.abs(S - S.T).max() > tol:
        raise ValueError("covariance matrix is not symmetric")


def _sym_power(S, power):
    w, Q = np.linalg.eigh(S)
    w = np.maximum(w, 0.0)
    return (Q * w**power) @ Q.T


def mkl_matrix(cov_source, cov_target, eps: float = 1e-5) -> np.ndarray:
    """Monge-Kantorovitch linear transfer matrix between two covariances.

    Inputs are regularized to be positive definite by adding eps * I
    whenever an eigenvalue falls below eps; matrix square roots use
    symmetric eigendecompositions.
    """
    cov_source = np.asarray(cov_source, dtype=np.float64)
    cov_target = np.asarray(cov_target, dtype=np.float64)
    _check_symmetric(cov_source)
    _check_symmetric(cov_target)

    def regularize(S):
        if np.linalg.eigvalsh(S).min() < eps:
            return S + eps * np.eye(3)
        return S

    cs = regularize(cov_source)
    ct = regularize(cov_target)
    root = _sym_power(cs, 0.5)
    inv_root = _sym_power(cs, -0.5)
    mid = _sym_power(root @ ct @ root, 0.5)
    M = inv_root @ mid @ inv_root
    return 0.5 * (M + M.T)


def estimate_kest(M, tol: float = 1e-8, max_iter: int = 10000) -> float:
    """Largest singular value of M by power iteration on M^T M."""
    M = np.asarray(M, dtype=np.float64)
    if not M.any():
        return 0.0
    v = np.array([1.0, 0.9, 1.1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for _ in range(max_iter):
        w = M.T @ (M @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0
        v = w / nw
        new_sigma = float(np.linalg.norm(M @ v))
        if abs(new_sigma - sigma) <= tol * max(new_sigma, 1e-30):
            return new_sigma
        sigma = new_sigma
    return sigma


def make_transfer(source: ColorStats, target: ColorStats,
                  eps: float = 1e-5, degenerate_tol: float = 1e-8) -> ColorTransfer:
    """Build the affine transfer from source to target statistics.

    A degenerate target (covariance numerically zero, e.g. a flat style
    image) falls back to a pure mean shift with M = I.
    """
    if np.linalg.eigvalsh(np.asarray(target.cov)).max() < degenerate_tol:
        M = np.eye(3)
    else:
        M = mkl_matrix(source.cov, target.cov, eps=eps)
    return ColorTransfer(matrix=M, source_mean=source.mean.copy(),
                         target_mean=target.mean.copy(), k_est=estimate_kest(M))


def apply_transfer(image: np.ndarray, transfer: ColorTransfer) -> np.ndarray:
    """Per-pixel affine map, returned unclamped (clamping happens on write)."""
    img = np.asarray(image, dtype=np.float64)
    flat = img.reshape(-1, 3)
    out = (flat - transfer.source_mean) @ transfer.matrix.T + transfer.target_mean
    return out.reshape(img.shape)


def stylize_views(dataset: SceneDataset, style_image: np.ndarray,
                  mode: str = "global"):
    """Transfer the style image's color statistics onto every view.

    ``global`` pools source statistics over all views so a single map is
    shared (a consistent prior); ``per_view`` fits one map per view (a
    deliberately inconsistent prior used for consistency comparisons).
    Returns (stylized image list, transfer list).
    """
    if dataset.n_views == 0:
        raise ValueError("dataset has no views")
    if mode not in ("global", "per_view"):
        raise ValueError(f"unknown stylization mode {mode!r}")
    target = color_stats(style_image)
    if mode == "global":
        transfer = make_transfer(color_stats(dataset.images), target)
        transfers = [transfer] * dataset.n_views
    else:
        transfers = [make_transfer(color_stats(im), target) for im in dataset.images]
    stylized = [apply_transfer(im, tr) for im, tr in zip(dataset.images, transfers)]
    return stylized, transfers
