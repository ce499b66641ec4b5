"""Quality metrics: PSNR and warped cross-view consistency.

Cross-view consistency compares a view against its neighbor warped into
correspondence.  Correspondences come from rendered depth: each pixel of
the first view is unprojected at its depth and reprojected into the
second view, where the neighbor image is sampled bilinearly.  A pixel is
masked out when it leaves the second frame, when its depth is invalid,
or when the reprojected point lies behind the second view's surface
(depth disagreement beyond tau times the scene scale).  The reported
value is the masked per-scalar mean squared error (mask entries times 3
channels), converted to a PSNR-style decibel score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene_io import Camera


@dataclass
class WarpField:
    """Per-pixel correspondence from one view into another.

    coords : (H, W, 2) continuous pixel coordinates (x, y) in the target
        view, in the pixel-center convention (pixel (u, v) covers
        [u, u+1) x [v, v+1) with center (u+0.5, v+0.5)).
    mask : (H, W) bool, True where the correspondence is valid.
    """

    coords: np.ndarray
    mask: np.ndarray


def bilinear_sample(image: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample (H, W[, C]) data at continuous pixel-center coordinates."""
    h, w = image.shape[:2]
    x = np.clip(coords[..., 0] - 0.5, 0.0, w - 1.0)
    y = np.clip(coords[..., 1] - 0.5, 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(x, dtype=np.int64)
    y0 = np.clip(np.floor(y).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(y, dtype=np.int64)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if image.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    p00 = image[y0, x0]
    p01 = image[y0, x1]
    p10 = image[y1, x0]
    p11 = image[y1, x1]
    return (p00 * (1 - fx) * (1 - fy) + p01 * fx * (1 - fy)
            + p10 * (1 - fx) * fy + p11 * fx * fy)


def analytic_warp(depth_i: np.ndarray, camera_i: Camera, camera_j: Camera,
                  depth_j: np.ndarray, scene_scale: float,
                  tau: float = 1e-2) -> WarpField:
    """Geometric warp from view i into view j using rendered depth.

    Each pixel of view i is unprojected at its depth (distance along the
    unit ray) and reprojected into view j.  Occlusion: the point's
    distance to camera j must not exceed view j's rendered depth at the
    landing position by more than tau * scene_scale.
    """
    h, w = depth_i.shape
    vs, us = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    xs = (us + 0.5 - camera_i.cx) / camera_i.focal
    ys = (vs + 0.5 - camera_i.cy) / camera_i.focal
    d_cam = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
    d_world = d_cam @ camera_i.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    points = camera_i.position[None, None, :] + depth_i[..., None] * d_world

    rel = points - camera_j.position[None, None, :]
    in_j = rel @ camera_j.rotation  # camera-frame coordinates (R^T x)
    z = in_j[..., 2]
    valid = (depth_i > 0) & (z > 1e-9)
    with np.errstate(divide="ignore", invalid="ignore"):
        px = camera_j.focal * in_j[..., 0] / z + camera_j.cx
        py = camera_j.focal * in_j[..., 1] / z + camera_j.cy
    coords = np.stack([px, py], axis=-1)
    coords[~valid] = 0.0

    in_frame = ((px >= 0.5) & (px <= camera_j.width - 0.5)
                & (py >= 0.5) & (py <= camera_j.height - 0.5))
    mask = valid & in_frame
    dist_j = np.linalg.norm(rel, axis=-1)
    depth_at = bilinear_sample(depth_j, coords)
    occluded = dist_j > depth_at + tau * scene_scale
    mask &= ~occluded
    return WarpField(coords=coords, mask=mask)


def temporal_consistency(x_i: np.ndarray, x_j: np.ndarray, warp: WarpField) -> float:
    """Masked mean squared error between view i and the warped view j.

    The comparison lives on view i's pixel lattice: x_j is sampled
    bilinearly at each pixel's correspondence.  Normalization is by mask
    entries times channels, so the result is a per-scalar MSE.
    """
    if x_i.shape != x_j.shape or x_i.shape[:2] != warp.mask.shape:
        raise ValueError("images and warp have mismatched shapes")
    count = int(warp.mask.sum())
    if count == 0:
        raise ValueError("no overlap between the views")
    warped = bilinear_sample(x_j, warp.coords)
    diff = (x_i - warped) * warp.mask[..., None]
    return float(np.sum(diff * diff) / (count * x_i.shape[2]))


def tc_psnr(tc: float) -> float:
    """Consistency in decibels, -10 log10(tc); tc = 0 is capped at 99."""
    if tc < 0:
        raise ValueError("consistency value must be nonnegative")
    if tc == 0.0:
        return 99.0
    return float(-10.0 * np.log10(tc))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """-10 log10 of the mean squared error over [0, 1] images; 99 if equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 99.0
    return float(-10.0 * np.log10(mse))


def consistency_report(images, depths, cameras, scene_scale: float,
                       span: str = "short"):
    """Per-pair and mean warped-consistency PSNR across neighboring views.

    span "short" pairs (i, i+1); "long" pairs (i, i+5).  Returns
    (pairs, mean) where pairs is a list of (i, j, tc_psnr) tuples.
    """
    stride = {"short": 1, "long": 5}.get(span)
    if stride is None:
        raise ValueError(f"unknown span {span!r}")
    if len(images) <= stride:
        raise ValueError(f"need more than {stride} views for span {span!r}")
    pairs = []
    for i in range(len(images) - stride):
        j = i + stride
        warp = analytic_warp(depths[i], cameras[i], cameras[j], depths[j],
                             scene_scale=scene_scale)
        value = tc_psnr(temporal_consistency(images[i], images[j], warp))
        pairs.append((i, j, value))
    mean = float(np.mean([p[2] for p in pairs]))
    return pairs, mean
