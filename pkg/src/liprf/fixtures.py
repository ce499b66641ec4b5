"""Synthetic multi-view scenes with analytic ground truth.

Scenes are collections of constant-albedo spheres and axis-aligned boxes
ray-traced exactly (nearest hit, no lighting, no anti-aliasing), so the
reconstruction stage is tested against images produced by an independent
renderer.  Ground-truth depth maps (hit distance along the unit ray, 0
where nothing is hit) are written next to the images.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from . import scene_io
from .render import pixel_directions
from .scene_io import Camera, SceneDataset


@dataclass
class Sphere:
    center: np.ndarray
    radius: float
    color: np.ndarray


@dataclass
class Box:
    bmin: np.ndarray
    bmax: np.ndarray
    color: np.ndarray


@dataclass
class ToyScene:
    """Analytic primitives plus a ring of inward-looking cameras."""

    primitives: list
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    cam_radius: float = 2.6
    cam_elevation_deg: float = 18.0
    focal_rel: float = 1.2  # focal length in units of image width
    background: tuple = (1.0, 1.0, 1.0)
    jitter_deg: float = 2.0


def _intersect_sphere(origins, dirs, sphere: Sphere):
    oc = origins - sphere.center[None, :]
    b = np.einsum("nd,nd->n", oc, dirs)
    c = np.einsum("nd,nd->n", oc, oc) - sphere.radius**2
    disc = b * b - c
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = -b - sq
    t = np.where(hit & (t > 1e-9), t, np.inf)
    return t


def _intersect_box(origins, dirs, box: Box):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (box.bmin[None, :] - origins) * inv
        t1 = (box.bmax[None, :] - origins) * inv
    t0 = np.where(np.isnan(t0), -np.inf, t0)
    t1 = np.where(np.isnan(t1), np.inf, t1)
    lo = np.minimum(t0, t1).max(axis=1)
    hi = np.maximum(t0, t1).min(axis=1)
    hit = (hi >= lo) & (hi > 1e-9)
    t = np.where(lo > 1e-9, lo, hi)
    return np.where(hit, t, np.inf)


def trace(origins, dirs, scene: ToyScene):
    """Nearest-hit trace: returns colors (N, 3) and depths (N,), 0 on miss."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    colors = np.tile(np.asarray(scene.background, dtype=np.float64), (n, 1))
    for prim in scene.primitives:
        if isinstance(prim, Sphere):
            t = _intersect_sphere(origins, dirs, prim)
        else:
            t = _intersect_box(origins, dirs, prim)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        colors[closer] = prim.color
    depth = np.where(np.isfinite(best_t), best_t, 0.0)
    return colors, depth


def look_at_pose(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """3x4 camera-to-world pose looking from position toward target.

    Camera frame: x right, y down, z forward.
    """
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / nr
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    return np.concatenate([rot, position[:, None]], axis=1)


def ring_cameras(scene: ToyScene, resolution: int, n_views: int,
                 rng: np.random.Generator) -> list:
    center = 0.5 * (scene.bounds_min + scene.bounds_max)
    focal = scene.focal_rel * resolution
    cams = []
    for i in range(n_views):
        azim = 2.0 * np.pi * i / n_views + np.deg2rad(rng.uniform(-scene.jitter_deg, scene.jitter_deg))
        elev = np.deg2rad(scene.cam_elevation_deg + rng.uniform(-scene.jitter_deg, scene.jitter_deg))
        pos = center + scene.cam_radius * np.array(
            [np.cos(azim) * np.cos(elev), np.sin(azim) * np.cos(elev), np.sin(elev)])
        pose = look_at_pose(pos, center)
        cams.append(Camera(width=resolution, height=resolution, focal=focal,
                           cx=resolution / 2.0, cy=resolution / 2.0, pose=pose))
    return cams


def render_scene_views(scene: ToyScene, cameras: list):
    images, depths = [], []
    for cam in cameras:
        vs, us = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
        dirs = pixel_directions(cam, us.reshape(-1), vs.reshape(-1))
        origins = np.broadcast_to(cam.position, dirs.shape)
        colors, depth = trace(origins, dirs, scene)
        images.append(colors.reshape(cam.height, cam.width, 3))
        depths.append(depth.reshape(cam.height, cam.width))
    return images, depths


def generate_scene(scene: ToyScene, resolution: int, n_views: int, seed: int,
                   out_dir) -> SceneDataset:
    """Trace the scene from a camera ring and write it as a scene directory.

    Writes scene.json, view_###.png and depth_###.npy.  Output is
    byte-identical for identical arguments.
    """
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cameras = ring_cameras(scene, resolution, n_views, rng)
    images, depths = render_scene_views(scene, cameras)

    files = []
    for i, (img, dep) in enumerate(zip(images, depths)):
        name = f"view_{i:03d}.png"
        scene_io.write_image(img, out / name)
        np.save(out / f"depth_{i:03d}.npy", dep)
        files.append(name)
    scene_io.save_scene_manifest(
        out / "scene.json",
        width=resolution, height=resolution,
        focal=cameras[0].focal, cx=cameras[0].cx, cy=cameras[0].cy,
        bounds_min=scene.bounds_min, bounds_max=scene.bounds_max,
        files=files, transforms=[c.pose for c in cameras],
    )
    return scene_io.load_scene(out)


def preset(name: str) -> ToyScene:
    """Named scenes used across the test and acceptance suites."""
    bounds = np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0])
    if name == "two_object":
        return ToyScene(
            primitives=[
                Sphere(center=np.array([-0.38, 0.0, -0.05]), radius=0.34,
                       color=np.array([0.85, 0.18, 0.15])),
                Box(bmin=np.array([0.12, -0.3, -0.34]), bmax=np.array([0.68, 0.26, 0.22]),
                    color=np.array([0.16, 0.3, 0.82])),
            ],
            bounds_min=bounds[0], bounds_max=bounds[1],
        )
    if name == "slab":
        return ToyScene(
            primitives=[
                Box(bmin=np.array([-0.6, -0.6, -0.25]), bmax=np.array([0.6, 0.6, 0.25]),
                    color=np.array([0.2, 0.65, 0.3])),
            ],
            bounds_min=bounds[0], bounds_max=bounds[1],
            cam_elevation_deg=35.0,
        )
    if name == "occluder":
        # a small near plate partially hiding a large far wall
        return ToyScene(
            primitives=[
                Box(bmin=np.array([-0.75, -0.75, -0.7]), bmax=np.array([0.75, 0.75, -0.55]),
                    color=np.array([0.75, 0.65, 0.2])),
                Box(bmin=np.array([-0.3, -0.3, 0.05]), bmax=np.array([0.3, 0.3, 0.2]),
                    color=np.array([0.3, 0.2, 0.7])),
            ],
            bounds_min=bounds[0], bounds_max=bounds[1],
            cam_elevation_deg=60.0,
        )
    raise ValueError(f"unknown preset {name!r}")
