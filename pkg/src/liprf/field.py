"""Dense voxel radiance field with spherical-harmonic appearance.

The field stores a scalar density and a 3 x ell matrix of real
spherical-harmonic coefficients at every grid vertex.  The color emitted
at a point toward a unit direction d is ``sh @ basis(d) + v`` where ``v``
is a fixed offset that centers colors in [0, 1].  Values between vertices
are trilinearly interpolated; queries outside the bounds return zero
density and zero coefficients.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

# Real spherical-harmonic constants up to degree 2.
SH_C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))
SH_C1 = 0.4886025119029199  # sqrt(3) / (2 sqrt(pi))
SH_C2 = (
    1.0925484305920792,  # sqrt(15) / (2 sqrt(pi))
    0.31539156525252005,  # sqrt(5)  / (4 sqrt(pi))
    0.5462742152960396,  # sqrt(15) / (4 sqrt(pi))
)

_CORNER_OFFSETS = np.array(
    [
        [0, 0, 0],
        [0, 0, 1],
        [0, 1, 0],
        [0, 1, 1],
        [1, 0, 0],
        [1, 0, 1],
        [1, 1, 0],
        [1, 1, 1],
    ],
    dtype=np.int64,
)


def n_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree(n_coeffs: int) -> int:
    degree = int(round(np.sqrt(n_coeffs))) - 1
    if n_sh_coeffs(degree) != n_coeffs:
        raise ValueError(f"{n_coeffs} is not a square coefficient count")
    return degree


def eval_sh_basis(direction, degree: int = 2) -> np.ndarray:
    """Real spherical-harmonic basis values for unit directions.

    Parameters
    ----------
    direction : (..., 3) array of unit vectors (norm within 1e-6 of 1).
    degree : maximum band, 0..2; the output has (degree+1)**2 components
        ordered (0,0), (1,-1), (1,0), (1,1), (2,-2), ..., (2,2).

    Component 0 is the constant 1/(2 sqrt(pi)) for every direction.
    """
    d = np.asarray(direction, dtype=np.float64)
    if d.shape[-1] != 3:
        raise ValueError("direction must have 3 components")
    if degree not in (0, 1, 2):
        raise ValueError(f"unsupported basis degree {degree}")
    norms = np.linalg.norm(d, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= 1e-6):
        raise ValueError("direction must be unit length (within 1e-6)")
    out = np.empty(d.shape[:-1] + (n_sh_coeffs(degree),), dtype=np.float64)
    out[..., 0] = SH_C0
    if degree >= 1:
        x, y, z = d[..., 0], d[..., 1], d[..., 2]
        out[..., 1] = SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = SH_C1 * x
    if degree >= 2:
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[0] * y * z
        out[..., 6] = SH_C2[1] * (3.0 * z * z - 1.0)
        out[..., 7] = SH_C2[0] * x * z
        out[..., 8] = SH_C2[2] * (x * x - y * y)
    return out


@dataclass
class VoxelField:
    """Dense vertex grid of (density, SH coefficients).

    resolution : (nx, ny, nz) vertex counts per axis, each >= 2.
    bounds_min / bounds_max : axis-aligned box in world units.
    density : (nx, ny, nz), nonnegative, 1/world-unit.
    sh : (nx, ny, nz, 3, ell) coefficients, ell = (degree+1)**2.
    v : (3,) fixed color offset.
    """

    resolution: tuple
    bounds_min: np.ndarray
    bounds_max: np.ndarray
    density: np.ndarray
    sh: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        self.bounds_min = np.asarray(self.bounds_min, dtype=np.float64)
        self.bounds_max = np.asarray(self.bounds_max, dtype=np.float64)
        if any(n < 2 for n in self.resolution):
            raise ValueError("resolution must be at least 2 vertices per axis")
        if not np.all(self.bounds_max > self.bounds_min):
            raise ValueError("bounds_max must exceed bounds_min")
        if self.density.shape != self.resolution:
            raise ValueError("density shape does not match resolution")
        if self.sh.shape[:3] != self.resolution or self.sh.shape[3] != 3:
            raise ValueError("sh shape does not match resolution")
        sh_degree(self.sh.shape[4])  # raises if not a valid count
        self.v = np.asarray(self.v, dtype=np.float64)

    @property
    def degree(self) -> int:
        return sh_degree(self.sh.shape[4])

    @property
    def n_coeffs(self) -> int:
        return self.sh.shape[4]

    @property
    def n_vertices(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @classmethod
    def zeros(cls, resolution, bounds_min, bounds_max, degree: int = 2,
              v=(0.5, 0.5, 0.5)) -> "VoxelField":
        res = tuple(int(n) for n in resolution)
        ell = n_sh_coeffs(degree)
        return cls(
            resolution=res,
            bounds_min=np.asarray(bounds_min, dtype=np.float64),
            bounds_max=np.asarray(bounds_max, dtype=np.float64),
            density=np.zeros(res),
            sh=np.zeros(res + (3, ell)),
            v=np.asarray(v, dtype=np.float64),
        )

    def copy(self) -> "VoxelField":
        return dataclasses.replace(
            self,
            bounds_min=self.bounds_min.copy(),
            bounds_max=self.bounds_max.copy(),
            density=self.density.copy(),
            sh=self.sh.copy(),
            v=self.v.copy(),
        )

    def vertex_positions(self) -> np.ndarray:
        """World positions of all vertices, shape (n_vertices, 3), x-major."""
        axes = [
            np.linspace(self.bounds_min[a], self.bounds_max[a], self.resolution[a])
            for a in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)


@dataclass
class FieldSample:
    """Interpolated field values at query points.

    ``density`` is 0 and ``sh`` is all-zero wherever ``inside`` is False.
    """

    density: np.ndarray
    sh: np.ndarray
    inside: np.ndarray


def trilinear_setup(fld: VoxelField, points: np.ndarray):
    """Interpolation structure for world points.

    Returns (idx8, wt8) with shapes (N, 8): flat vertex indices of the
    surrounding cell corners and their trilinear weights.  Points outside
    the bounds get all-zero weights.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    res = np.asarray(fld.resolution)
    span = fld.bounds_max - fld.bounds_min
    g = (pts - fld.bounds_min) / span * (res - 1)
    inside = np.all((pts >= fld.bounds_min) & (pts <= fld.bounds_max), axis=1)
    i0 = np.clip(np.floor(g).astype(np.int64), 0, res - 2)
    frac = np.clip(g - i0, 0.0, 1.0)
    nx, ny, nz = fld.resolution
    corners = i0[:, None, :] + _CORNER_OFFSETS[None, :, :]
    idx8 = (corners[..., 0] * ny + corners[..., 1]) * nz + corners[..., 2]
    w = np.where(_CORNER_OFFSETS[None, :, :] == 1, frac[:, None, :], 1.0 - frac[:, None, :])
    wt8 = w.prod(axis=2) * inside[:, None]
    return idx8, wt8


def sample_field(fld: VoxelField, x) -> FieldSample:
    """Trilinear interpolation of density and SH coefficients at ``x``.

    ``x`` may be a single (3,) point or an (N, 3) batch.  Outside the
    bounds the sample is (0, zero matrix, inside=False).
    """
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    idx8, wt8 = trilinear_setup(fld, pts)
    dens_flat = fld.density.reshape(-1)
    sh_flat = fld.sh.reshape(-1, 3, fld.n_coeffs)
    density = (dens_flat[idx8] * wt8).sum(axis=1)
    sh = np.einsum("nc,nckl->nkl", wt8, sh_flat[idx8])
    pts2 = np.atleast_2d(pts)
    inside = np.all((pts2 >= fld.bounds_min) & (pts2 <= fld.bounds_max), axis=1)
    if single:
        return FieldSample(density=float(density[0]), sh=sh[0], inside=bool(inside[0]))
    return FieldSample(density=density, sh=sh, inside=inside)


def eval_color(fld: VoxelField, x, d) -> np.ndarray:
    """Directional color ``sh(x) @ basis(d) + v``, unclamped.

    Supports a single point/direction or (N, 3) batches of both.
    """
    sample = sample_field(fld, x)
    basis = eval_sh_basis(d, fld.degree)
    if np.ndim(sample.density) == 0:
        return sample.sh @ basis + fld.v
    basis = np.broadcast_to(np.atleast_2d(basis), (sample.sh.shape[0], fld.n_coeffs))
    return np.einsum("nkl,nl->nk", sample.sh, basis) + fld.v


def map_sh(fld: VoxelField, fn) -> VoxelField:
    """New field with coefficients replaced vertex-wise by ``fn``.

    ``fn`` receives the batched coefficients (N, 3, ell) and the vertex
    world positions (N, 3) and must return an (N, 3, ell) array.  Density,
    bounds and resolution are copied unchanged; the source field is not
    modified.  Non-finite outputs raise ValueError.
    """
    ell = fld.n_coeffs
    positions = fld.vertex_positions()
    sh_in = fld.sh.reshape(-1, 3, ell)
    sh_out = np.asarray(fn(sh_in, positions), dtype=np.float64)
    if sh_out.shape != sh_in.shape:
        raise ValueError(f"map produced shape {sh_out.shape}, expected {sh_in.shape}")
    if not np.all(np.isfinite(sh_out)):
        raise ValueError("map produced non-finite coefficients")
    out = fld.copy()
    out.sh = sh_out.reshape(fld.sh.shape)
    return out


def lift_affine_color_map(matrix, shift, v, ell: int):
    """Coefficient-space form of the pixel map ``c -> matrix @ c + shift``.

    Returns a function suitable for :func:`map_sh` that produces a field
    whose rendered colors are the affine image of the source colors.  The
    shift lands entirely in coefficient column 0, scaled by 2 sqrt(pi),
    because that column multiplies the constant basis component.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    shift = np.asarray(shift, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    col0 = 2.0 * np.sqrt(np.pi) * (matrix @ v + shift - v)

    def fn(sh, positions):
        out = np.einsum("ij,njl->nil", matrix, sh)
        out[:, :, 0] += col0
        return out

    return fn
