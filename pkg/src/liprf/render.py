"""Ray generation and volume rendering over a voxel field.

Rays are marched with T uniform samples between the near and far bounds
given by the ray/box intersection.  Sample i covers the segment
[t_i, t_{i+1}] with t_1 = t_near and t_{T+1} = t_far; density and color
are evaluated at the segment start t_i.  Its compositing weight is

    w_i = (1 - exp(-sigma_i * delta_i)) * exp(-sum_{k<i} sigma_k * delta_k)

and the leftover transmittance exp(-sum_k sigma_k delta_k) is assigned
to a constant background color, so the weights including the background
always sum to exactly 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import VoxelField, eval_color, eval_sh_basis, sample_field, trilinear_setup
from .scene_io import Camera

DEFAULT_SAMPLES = 128
DEFAULT_BACKGROUND = (1.0, 1.0, 1.0)


@dataclass
class Ray:
    """A world-space ray with its sampling range.

    ``n_samples = 0`` marks a ray that misses the scene bounds.
    """

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float
    n_samples: int

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if self.n_samples > 0:
            if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
                raise ValueError("ray direction must be unit length")
            if not self.t_near < self.t_far:
                raise ValueError("t_near must be below t_far")


@dataclass
class RenderCache:
    """Per-sample quantities of one marched ray."""

    t: np.ndarray  # (T+1,) segment boundaries
    sigma: np.ndarray  # (T,)
    colors: np.ndarray  # (T, 3)
    weights: np.ndarray  # (T,)
    w_bg: float


def ray_box_intersection(origin, direction, bounds_min, bounds_max):
    """(t_near, t_far, hit) for a ray against an axis-aligned box.

    t_near is clamped to 0 (segments behind the origin are not marched).
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t0 = (np.asarray(bounds_min) - origin) * inv
        t1 = (np.asarray(bounds_max) - origin) * inv
    t0, t1 = np.where(np.isnan(t0), -np.inf, t0), np.where(np.isnan(t1), np.inf, t1)
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    t_near = max(float(lo.max()), 0.0)
    t_far = float(hi.min())
    return t_near, t_far, t_far > t_near


def ray_box_intersection_batch(origins, directions, bounds_min, bounds_max):
    """Vectorized box intersection, returning (t_near, t_far, hit) arrays."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t0 = (bounds_min[None, :] - origins) * inv
        t1 = (bounds_max[None, :] - origins) * inv
    t0 = np.where(np.isnan(t0), -np.inf, t0)
    t1 = np.where(np.isnan(t1), np.inf, t1)
    lo = np.minimum(t0, t1).max(axis=1)
    hi = np.maximum(t0, t1).min(axis=1)
    t_near = np.maximum(lo, 0.0)
    hit = hi > t_near
    return np.where(hit, t_near, 0.0), np.where(hit, hi, 0.0), hit


def pixel_directions(camera: Camera, us, vs) -> np.ndarray:
    """World-space unit directions through the centers of pixels (u, v)."""
    xs = (np.asarray(us, dtype=np.float64) + 0.5 - camera.cx) / camera.focal
    ys = (np.asarray(vs, dtype=np.float64) + 0.5 - camera.cy) / camera.focal
    d_cam = np.stack([xs, ys, np.ones_like(xs)], axis=-1)
    d_world = d_cam @ camera.rotation.T
    return d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)


def generate_ray(camera: Camera, u, v, bounds_min, bounds_max,
                 n_samples: int = DEFAULT_SAMPLES) -> Ray:
    """Pinhole ray through pixel center (u + 0.5, v + 0.5).

    The sampling range is the intersection with the scene bounds; a miss
    yields a ray with ``n_samples = 0``.
    """
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise ValueError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    direction = pixel_directions(camera, u, v)
    t_near, t_far, hit = ray_box_intersection(camera.position, direction,
                                              bounds_min, bounds_max)
    if not hit:
        return Ray(origin=camera.position.copy(), direction=direction,
                   t_near=0.0, t_far=0.0, n_samples=0)
    return Ray(origin=camera.position.copy(), direction=direction,
               t_near=t_near, t_far=t_far, n_samples=n_samples)


def render_weights(ray: Ray, fld: VoxelField) -> RenderCache:
    """March one ray and return per-sample densities, colors and weights."""
    if ray.n_samples < 1:
        raise ValueError("ray must carry at least one sample")
    T = ray.n_samples
    t = np.linspace(ray.t_near, ray.t_far, T + 1)
    delta = np.diff(t)
    positions = ray.origin[None, :] + t[:T, None] * ray.direction[None, :]
    sample = sample_field(fld, positions)
    sigma = np.maximum(sample.density, 0.0)
    basis = eval_sh_basis(ray.direction, fld.degree)
    colors = sample.sh @ basis + fld.v
    tau = sigma * delta
    acc = np.concatenate([[0.0], np.cumsum(tau)])
    transmittance = np.exp(-acc[:T])
    weights = (1.0 - np.exp(-tau)) * transmittance
    w_bg = float(np.exp(-acc[T]))
    return RenderCache(t=t, sigma=sigma, colors=colors, weights=weights, w_bg=w_bg)


def render_color(ray: Ray, fld: VoxelField,
                 background=DEFAULT_BACKGROUND) -> np.ndarray:
    """Composited ray color including the background term, unclamped."""
    bg = np.asarray(background, dtype=np.float64)
    if ray.n_samples < 1:
        return bg.copy()
    cache = render_weights(ray, fld)
    return cache.weights @ cache.colors + cache.w_bg * bg


def render_depth(ray: Ray, fld: VoxelField) -> float:
    """Expected hit distance: sum of w_i times segment midpoints.

    The background weight contributes t_far.  Rays that miss the bounds
    report depth 0.
    """
    if ray.n_samples < 1:
        return 0.0
    cache = render_weights(ray, fld)
    t_mid = 0.5 * (cache.t[:-1] + cache.t[1:])
    return float(cache.weights @ t_mid + cache.w_bg * ray.t_far)


def vrr(ray1: Ray, ray2: Ray, fld: VoxelField,
        background=DEFAULT_BACKGROUND) -> float:
    """Euclidean distance between the rendered colors of two rays."""
    if ray1.n_samples != ray2.n_samples:
        raise ValueError("sample-count mismatch between rays")
    c1 = render_color(ray1, fld, background)
    c2 = render_color(ray2, fld, background)
    return float(np.linalg.norm(c1 - c2))


def camera_rays(camera: Camera, bounds_min, bounds_max):
    """Batched rays for every pixel of a camera.

    Returns (origins (N,3), directions (N,3), t_near (N,), t_far (N,),
    hit (N,)) in row-major pixel order.
    """
    vs, us = np.meshgrid(np.arange(camera.height), np.arange(camera.width),
                         indexing="ij")
    directions = pixel_directions(camera, us.reshape(-1), vs.reshape(-1))
    origins = np.broadcast_to(camera.position, directions.shape).copy()
    t_near, t_far, hit = ray_box_intersection_batch(
        origins, directions, np.asarray(bounds_min, dtype=np.float64),
        np.asarray(bounds_max, dtype=np.float64))
    return origins, directions, t_near, t_far, hit


def render_view(camera: Camera, fld: VoxelField, n_samples: int = DEFAULT_SAMPLES,
                background=DEFAULT_BACKGROUND, with_depth: bool = False,
                chunk: int = 4096):
    """Render a full view; clamps the image to [0, 1] at this boundary.

    Returns the (H, W, 3) image, or (image, depth) with ``with_depth``.
    """
    bg = np.asarray(background, dtype=np.float64)
    origins, directions, t_near, t_far, hit = camera_rays(
        camera, fld.bounds_min, fld.bounds_max)
    n = origins.shape[0]
    image = np.empty((n, 3))
    depth = np.zeros(n)
    dens_flat = fld.density.reshape(-1)
    sh_flat = fld.sh.reshape(-1, 3 * fld.n_coeffs)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        img_c, dep_c = _render_ray_block(
            fld, dens_flat, sh_flat, origins[sl], directions[sl],
            t_near[sl], t_far[sl], hit[sl], n_samples, bg)
        image[sl] = img_c
        depth[sl] = dep_c
    image = np.clip(image, 0.0, 1.0).reshape(camera.height, camera.width, 3)
    if with_depth:
        return image, depth.reshape(camera.height, camera.width)
    return image


def _render_ray_block(fld, dens_flat, sh_flat, origins, directions,
                      t_near, t_far, hit, T, bg):
    """Vectorized compositing for a block of rays."""
    R = origins.shape[0]
    ell = fld.n_coeffs
    t_edges = t_near[:, None] + (t_far - t_near)[:, None] * (
        np.arange(T + 1)[None, :] / T)
    delta = np.diff(t_edges, axis=1)
    positions = origins[:, None, :] + t_edges[:, :T, None] * directions[:, None, :]
    idx8, wt8 = trilinear_setup(fld, positions.reshape(-1, 3))
    sigma = (dens_flat[idx8] * wt8).sum(axis=1).reshape(R, T)
    sigma = np.maximum(sigma, 0.0) * hit[:, None]
    sh_s = np.einsum("mc,mcj->mj", wt8, sh_flat[idx8])  # (R*T, 27)
    basis = eval_sh_basis(directions, fld.degree)  # (R, ell)
    colors = np.einsum("rtkj,rj->rtk", sh_s.reshape(R, T, 3, ell), basis) + fld.v
    tau = sigma * delta
    acc = np.concatenate([np.zeros((R, 1)), np.cumsum(tau, axis=1)], axis=1)
    transmittance = np.exp(-acc[:, :T])
    weights = (1.0 - np.exp(-tau)) * transmittance
    w_bg = np.exp(-acc[:, T])
    image = np.einsum("rt,rtk->rk", weights, colors) + w_bg[:, None] * bg[None, :]
    t_mid = 0.5 * (t_edges[:, :T] + t_edges[:, 1:])
    depth = np.einsum("rt,rt->r", weights, t_mid) + w_bg * t_far
    return image, depth
