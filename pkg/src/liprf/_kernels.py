"""Numba kernels for the training hot loops.

Single-threaded on purpose: gradient accumulation order is then fixed,
so training is bit-reproducible for a given seed regardless of the host.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def trilinear_cells(points, bmin, span, res, idx8, wt8):
    """Cell corners and weights per point; outside points get zero weights.

    points (M, 3), idx8 (M, 8) int64 out, wt8 (M, 8) out.
    """
    nx, ny, nz = res[0], res[1], res[2]
    for m in range(points.shape[0]):
        inside = True
        for a in range(3):
            p = points[m, a]
            if p < bmin[a] or p > bmin[a] + span[a]:
                inside = False
        if not inside:
            for c in range(8):
                idx8[m, c] = 0
                wt8[m, c] = 0.0
            continue
        gx = (points[m, 0] - bmin[0]) / span[0] * (nx - 1)
        gy = (points[m, 1] - bmin[1]) / span[1] * (ny - 1)
        gz = (points[m, 2] - bmin[2]) / span[2] * (nz - 1)
        ix = int(np.floor(gx))
        iy = int(np.floor(gy))
        iz = int(np.floor(gz))
        if ix > nx - 2:
            ix = nx - 2
        if iy > ny - 2:
            iy = ny - 2
        if iz > nz - 2:
            iz = nz - 2
        if ix < 0:
            ix = 0
        if iy < 0:
            iy = 0
        if iz < 0:
            iz = 0
        fx = gx - ix
        fy = gy - iy
        fz = gz - iz
        if fx < 0.0:
            fx = 0.0
        if fx > 1.0:
            fx = 1.0
        if fy < 0.0:
            fy = 0.0
        if fy > 1.0:
            fy = 1.0
        if fz < 0.0:
            fz = 0.0
        if fz > 1.0:
            fz = 1.0
        c = 0
        for ox in range(2):
            wx = fx if ox == 1 else 1.0 - fx
            for oy in range(2):
                wy = fy if oy == 1 else 1.0 - fy
                for oz in range(2):
                    wz = fz if oz == 1 else 1.0 - fz
                    idx8[m, c] = ((ix + ox) * ny + (iy + oy)) * nz + (iz + oz)
                    wt8[m, c] = wx * wy * wz
                    c += 1


@njit(cache=True)
def gather_scalar(idx8, wt8, grid, out):
    for m in range(idx8.shape[0]):
        acc = 0.0
        for c in range(8):
            acc += wt8[m, c] * grid[idx8[m, c]]
        out[m] = acc


@njit(cache=True)
def scatter_scalar(idx8, wt8, gvals, out):
    for m in range(idx8.shape[0]):
        g = gvals[m]
        if g == 0.0:
            continue
        for c in range(8):
            out[idx8[m, c]] += wt8[m, c] * g


@njit(cache=True)
def gather_colors(idx8, wt8, sh_flat, gamma, T, v, out):
    """Interpolated directional colors at samples.

    sh_flat (Nv, 3*L); gamma (R, L) with sample m belonging to ray m // T;
    out (M, 3) receives sh(x_m) @ gamma[ray] + v.
    """
    L = gamma.shape[1]
    for m in range(idx8.shape[0]):
        r = m // T
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for c in range(8):
            w = wt8[m, c]
            if w == 0.0:
                continue
            vtx = idx8[m, c]
            s0 = 0.0
            s1 = 0.0
            s2 = 0.0
            for j in range(L):
                g = gamma[r, j]
                s0 += sh_flat[vtx, j] * g
                s1 += sh_flat[vtx, L + j] * g
                s2 += sh_flat[vtx, 2 * L + j] * g
            c0 += w * s0
            c1 += w * s1
            c2 += w * s2
        out[m, 0] = c0 + v[0]
        out[m, 1] = c1 + v[1]
        out[m, 2] = c2 + v[2]


@njit(cache=True)
def scatter_colors(idx8, wt8, grad_c, gamma, T, grad_sh):
    """Adjoint of gather_colors into the (Nv, 3*L) coefficient gradient."""
    L = gamma.shape[1]
    for m in range(idx8.shape[0]):
        r = m // T
        g0 = grad_c[m, 0]
        g1 = grad_c[m, 1]
        g2 = grad_c[m, 2]
        if g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
            continue
        for c in range(8):
            w = wt8[m, c]
            if w == 0.0:
                continue
            vtx = idx8[m, c]
            for j in range(L):
                gw = gamma[r, j] * w
                grad_sh[vtx, j] += gw * g0
                grad_sh[vtx, L + j] += gw * g1
                grad_sh[vtx, 2 * L + j] += gw * g2


@njit(cache=True)
def adam_update(param, grad, m, v, lr, beta1, beta2, eps, t):
    """Fused in-place Adam step with bias correction (flat float64 arrays)."""
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for i in range(param.size):
        g = grad[i]
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        param[i] -= lr * (m[i] / c1) / (np.sqrt(v[i] / c2) + eps)


@njit(cache=True)
def op_apply(rows, cols, coeff, sh_t, out):
    """out[rows[k]] += coeff[k] * sh_t[cols[k]] over all entries."""
    width = sh_t.shape[1]
    for k in range(rows.shape[0]):
        r = rows[k]
        cidx = cols[k]
        w = coeff[k]
        for j in range(width):
            out[r, j] += w * sh_t[cidx, j]


@njit(cache=True)
def op_apply_transpose(rows, cols, coeff, grad_rows, out):
    """out[cols[k]] += coeff[k] * grad_rows[rows[k]] over all entries."""
    width = grad_rows.shape[1]
    for k in range(rows.shape[0]):
        r = rows[k]
        cidx = cols[k]
        w = coeff[k]
        for j in range(width):
            out[cidx, j] += w * grad_rows[r, j]
