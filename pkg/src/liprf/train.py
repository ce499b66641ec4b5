"""Two-stage training: field reconstruction, then Lipschitz stylization.

Stage 1 fits per-vertex density and SH coefficients to the posed images
with Adam on a squared reconstruction error, using closed-form gradients
through the volume renderer (the render is linear in the sampled colors,
so color gradients are the compositing weights; density gradients follow
the transmittance chain).

Stage 2 freezes the field and trains the Lipschitz MLP to reproduce
per-view stylization targets.  Because geometry is frozen, each view's
render is a fixed linear operator from transformed vertex coefficients
to pixel colors; that operator is precomputed once per view.  Training
uses gradual gradient aggregation: the full-grid network pass is done
batch-wise without retaining intermediate state, the pixel-space
gradient is pulled back to coefficient space through the render
operator, and each batch is then re-run through the network to
accumulate parameter gradients, scaled by 1/B with B the total vertex
count, plus the adaptive norm regularizer.  One optimizer step follows
per view.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels as kernels
from .field import VoxelField, eval_sh_basis, map_sh
from .lipnet import (LipschitzNet, NetGrads, backward, build_net, forward,
                     grads_as_param_list, lip_reg_loss, lipschitz_constant,
                     net_params, set_net_params, zero_grads)
from .pst import color_stats, make_transfer
from .render import camera_rays
from .scene_io import SceneDataset

logger = logging.getLogger("liprf.train")


@dataclass
class TrainConfig:
    """Hyperparameters for both stages; JSON config files override fields."""

    seed: int = 0
    epochs: int = 300
    lr_start: float = 1e-2
    lr_end: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    background: tuple = (1.0, 1.0, 1.0)
    n_samples: int = 128
    # stage 1
    resolution: int = 64
    degree: int = 2
    rays_per_batch: int = 4096
    density_init: float = 0.0
    lr_density_scale: float = 200.0
    target_psnr: float | None = None
    # stage 2
    lam: float = 2e-4
    k_est: float | None = None
    gga_split: int = 65536
    net_layers: int = 6
    net_width: int = 64
    activation: str = "sine"
    b_sq: float = 1e-12
    weight_prune: float = 0.0
    compute_dtype: str = "float64"

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be nonnegative")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["background"] = list(self.background)
        return d


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    base = base or TrainConfig()
    overrides = json.loads(Path(path).read_text())
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(overrides) - fields
    if unknown:
        raise ValueError(f"unknown config fields: {sorted(unknown)}")
    merged = dataclasses.asdict(base)
    merged.update(overrides)
    merged["background"] = tuple(merged["background"])
    return TrainConfig(**merged)


def cosine_lr(step: int, total: int, lr_start: float, lr_end: float) -> float:
    """Cosine annealing from lr_start (step 0) to lr_end (step == total)."""
    if step > total:
        raise ValueError(f"step {step} beyond schedule length {total}")
    if total == 0:
        return lr_start
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + np.cos(np.pi * step / total))


class Adam:
    """Adam over a list of float64 arrays, with a fused in-place update.

    ``lr_scales`` multiplies the step learning rate per parameter group.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, lr_scales=None):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.lr_scales = lr_scales or [1.0] * len(self.m)
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        for p, g, m, v, scale in zip(params, grads, self.m, self.v, self.lr_scales):
            kernels.adam_update(p.reshape(-1), np.ascontiguousarray(g.reshape(-1)),
                                m.reshape(-1), v.reshape(-1), lr * scale,
                                self.beta1, self.beta2, self.eps, self.t)


# ---------------------------------------------------------------------------
# stage 1: reconstruction


@dataclass
class RayData:
    """Flattened per-pixel rays of a dataset (row-major per view)."""

    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray
    hit: np.ndarray
    gamma: np.ndarray  # (N, ell) basis values per ray
    targets: np.ndarray  # (N, 3)


def dataset_rays(dataset: SceneDataset, degree: int) -> RayData:
    parts = [camera_rays(cam, dataset.bounds_min, dataset.bounds_max)
             for cam in dataset.cameras]
    origins = np.concatenate([p[0] for p in parts])
    directions = np.concatenate([p[1] for p in parts])
    t_near = np.concatenate([p[2] for p in parts])
    t_far = np.concatenate([p[3] for p in parts])
    hit = np.concatenate([p[4] for p in parts])
    gamma = eval_sh_basis(directions, degree)
    targets = np.concatenate([im.reshape(-1, 3) for im in dataset.images])
    return RayData(origins, directions, t_near, t_far, hit, gamma, targets)


def _sample_batch(fld_geom, rays: RayData, sel: np.ndarray, T: int):
    """Trilinear structure for the selected rays: (idx8, wt8, delta, gamma)."""
    bmin, span, res = fld_geom
    o = rays.origins[sel]
    d = rays.directions[sel]
    tn = rays.t_near[sel]
    tf = rays.t_far[sel]
    delta = (tf - tn) / T
    t0 = tn[:, None] + delta[:, None] * np.arange(T)[None, :]
    pos = np.ascontiguousarray(o[:, None, :] + t0[..., None] * d[:, None, :]).reshape(-1, 3)
    m = pos.shape[0]
    idx8 = np.empty((m, 8), dtype=np.int64)
    wt8 = np.empty((m, 8))
    kernels.trilinear_cells(pos, bmin, span, res, idx8, wt8)
    return idx8, wt8, delta, rays.gamma[sel]


def _composite(sigma, delta):
    """Weights, background weight and transmittance for (R, T) densities."""
    tau = sigma * delta[:, None]
    acc = np.concatenate([np.zeros((tau.shape[0], 1)), np.cumsum(tau, axis=1)], axis=1)
    trans = np.exp(-acc[:, :-1])
    weights = (1.0 - np.exp(-tau)) * trans
    w_bg = np.exp(-acc[:, -1])
    return weights, w_bg, trans


def _recon_forward_backward(dens_flat, sh_flat, fld_geom, rays, sel, T, v, bg,
                            grad_dens, grad_sh):
    """Loss and parameter gradients for one ray batch (sum of squared error)."""
    R = sel.shape[0]
    idx8, wt8, delta, gamma = _sample_batch(fld_geom, rays, sel, T)
    sigma_s = np.empty(idx8.shape[0])
    kernels.gather_scalar(idx8, wt8, dens_flat, sigma_s)
    sigma = sigma_s.reshape(R, T)
    colors = np.empty((idx8.shape[0], 3))
    kernels.gather_colors(idx8, wt8, sh_flat, np.ascontiguousarray(gamma), T, v, colors)
    colors = colors.reshape(R, T, 3)
    weights, w_bg, trans = _composite(sigma, delta)
    pred = np.einsum("rt,rtk->rk", weights, colors) + w_bg[:, None] * bg[None, :]
    diff = pred - rays.targets[sel]
    loss = float(np.sum(diff * diff))
    g_pred = 2.0 * diff
    # color path: dC/dc_i = w_i
    g_colors = weights[:, :, None] * g_pred[:, None, :]
    kernels.scatter_colors(idx8, wt8, np.ascontiguousarray(g_colors.reshape(-1, 3)),
                           np.ascontiguousarray(gamma), T, grad_sh)
    # density path through the compositing chain
    g_w = np.einsum("rk,rtk->rt", g_pred, colors)
    g_wbg = g_pred @ bg
    tau = sigma * delta[:, None]
    trans_next = trans * np.exp(-tau)  # transmittance after each segment
    gw_w = g_w * weights
    suffix = np.cumsum(gw_w[:, ::-1], axis=1)[:, ::-1] - gw_w
    g_tau = g_w * trans_next - suffix - (g_wbg * w_bg)[:, None]
    g_sigma = (g_tau * delta[:, None]).reshape(-1)
    kernels.scatter_scalar(idx8, wt8, g_sigma, grad_dens)
    return loss


def train_reconstruction(dataset: SceneDataset, config: TrainConfig) -> VoxelField:
    """Fit a voxel field to the dataset's views; returns the trained field.

    Density is projected to be nonnegative after every step.  Logs the
    per-epoch train PSNR; config.target_psnr stops early once reached.
    """
    if dataset.n_views < 1:
        raise ValueError("dataset has no views")
    rng = np.random.default_rng(config.seed)
    res = (config.resolution,) * 3
    fld = VoxelField.zeros(res, dataset.bounds_min, dataset.bounds_max,
                           degree=config.degree)
    fld.density[:] = config.density_init
    rays = dataset_rays(dataset, config.degree)
    n_rays = rays.origins.shape[0]
    T = config.n_samples
    bg = np.asarray(config.background, dtype=np.float64)
    fld_geom = (fld.bounds_min, fld.bounds_max - fld.bounds_min,
                np.asarray(fld.resolution, dtype=np.int64))

    dens_flat = fld.density.reshape(-1).copy()
    sh_flat = fld.sh.reshape(-1, 3 * fld.n_coeffs).copy()
    adam = Adam([dens_flat, sh_flat], config.beta1, config.beta2, config.adam_eps,
                lr_scales=[config.lr_density_scale, 1.0])
    grad_dens = np.zeros_like(dens_flat)
    grad_sh = np.zeros_like(sh_flat)

    batches_per_epoch = max(1, int(np.ceil(n_rays / config.rays_per_batch)))
    total_steps = config.epochs * batches_per_epoch
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n_rays)
        sq_err = 0.0
        for b in range(batches_per_epoch):
            sel = order[b * config.rays_per_batch : (b + 1) * config.rays_per_batch]
            lr = cosine_lr(step, max(total_steps - 1, 1), config.lr_start, config.lr_end)
            grad_dens[:] = 0.0
            grad_sh[:] = 0.0
            loss = _recon_forward_backward(dens_flat, sh_flat, fld_geom, rays, sel,
                                           T, fld.v, bg, grad_dens, grad_sh)
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged: non-finite loss at step {step}")
            adam.step([dens_flat, sh_flat], [grad_dens, grad_sh], lr)
            np.maximum(dens_flat, 0.0, out=dens_flat)
            sq_err += loss
            step += 1
        psnr = -10.0 * np.log10(max(sq_err / (n_rays * 3), 1e-12))
        logger.info("recon epoch %d: train psnr %.2f dB", epoch, psnr)
        if config.target_psnr is not None and psnr >= config.target_psnr:
            logger.info("recon reached target psnr %.1f dB at epoch %d",
                        config.target_psnr, epoch)
            break
    fld.density = dens_flat.reshape(fld.density.shape)
    fld.sh = sh_flat.reshape(fld.sh.shape)
    return fld


# ---------------------------------------------------------------------------
# stage 2: Lipschitz stylization with gradual gradient aggregation


@dataclass
class ViewOperator:
    """Frozen-geometry render of one view as a linear map on coefficients.

    C[r] = sum_k coeff[k] * sh_t[cols[k]] @ gamma[r] over entries with
    rows[k] == r, plus the constant (sum_i w_i) * v and w_bg * background
    terms.  cols index the active vertex list, not the full grid.
    """

    rows: np.ndarray
    cols: np.ndarray
    coeff: np.ndarray
    gamma: np.ndarray
    w_sum: np.ndarray
    w_bg: np.ndarray
    targets: np.ndarray

    @property
    def n_rays(self) -> int:
        return self.gamma.shape[0]

    def render(self, sh_t: np.ndarray, v: np.ndarray, bg: np.ndarray) -> np.ndarray:
        ell = self.gamma.shape[1]
        y = np.zeros((self.n_rays, 3 * ell))
        kernels.op_apply(self.rows, self.cols, self.coeff,
                         np.ascontiguousarray(sh_t, dtype=np.float64), y)
        c = np.einsum("rkj,rj->rk", y.reshape(-1, 3, ell), self.gamma)
        return c + self.w_sum[:, None] * v[None, :] + self.w_bg[:, None] * bg[None, :]

    def backward(self, grad_c: np.ndarray, n_active: int) -> np.ndarray:
        ell = self.gamma.shape[1]
        gy = np.einsum("rk,rj->rkj", grad_c, self.gamma).reshape(-1, 3 * ell)
        out = np.zeros((n_active, 3 * ell))
        kernels.op_apply_transpose(self.rows, self.cols, self.coeff,
                                   np.ascontiguousarray(gy), out)
        return out


def build_view_operators(fld: VoxelField, dataset: SceneDataset, targets,
                         config: TrainConfig):
    """Precompute per-view render operators over the active vertex set.

    Entries whose total weight (compositing weight times trilinear
    weight) does not exceed config.weight_prune are dropped; the active
    set is the union of surviving vertices.  Returns (ops, active_idx,
    net_inputs) where net_inputs stacks each active vertex's flattened
    coefficients and [0, 1]-normalized position.
    """
    T = config.n_samples
    ell = fld.n_coeffs
    bmin = fld.bounds_min
    span = fld.bounds_max - fld.bounds_min
    res = np.asarray(fld.resolution, dtype=np.int64)
    dens_flat = fld.density.reshape(-1)
    rays_per_view = dataset.cameras[0].width * dataset.cameras[0].height

    raw_ops = []
    for view, cam in enumerate(dataset.cameras):
        origins, dirs, t_near, t_far, hit = camera_rays(cam, bmin, fld.bounds_max)
        delta = (t_far - t_near) / T
        t0 = t_near[:, None] + delta[:, None] * np.arange(T)[None, :]
        pos = np.ascontiguousarray(
            origins[:, None, :] + t0[..., None] * dirs[:, None, :]).reshape(-1, 3)
        idx8 = np.empty((pos.shape[0], 8), dtype=np.int64)
        wt8 = np.empty((pos.shape[0], 8))
        kernels.trilinear_cells(pos, bmin, span, res, idx8, wt8)
        sigma_s = np.empty(pos.shape[0])
        kernels.gather_scalar(idx8, wt8, dens_flat, sigma_s)
        weights, w_bg, _ = _composite(sigma_s.reshape(-1, T), delta)
        entry_w = weights.reshape(-1, 1) * wt8  # (R*T, 8)
        keep = entry_w > config.weight_prune
        sample_rows = np.repeat(np.arange(rays_per_view), T)
        rows = np.repeat(sample_rows, 8)[keep.reshape(-1)]
        cols = idx8.reshape(-1)[keep.reshape(-1)]
        vals = entry_w.reshape(-1)[keep.reshape(-1)]
        # merge duplicate (ray, vertex) entries
        key = rows * fld.n_vertices + cols
        uniq, inv = np.unique(key, return_inverse=True)
        vals = np.bincount(inv, weights=vals, minlength=uniq.shape[0])
        rows = (uniq // fld.n_vertices).astype(np.int64)
        cols = (uniq % fld.n_vertices).astype(np.int64)
        gamma = eval_sh_basis(dirs, fld.degree)
        raw_ops.append((rows, cols, vals, gamma, weights.sum(axis=1), w_bg,
                        targets[view].reshape(-1, 3)))

    active = np.unique(np.concatenate([op[1] for op in raw_ops]))
    ops = []
    for rows, cols, vals, gamma, w_sum, w_bg, tgt in raw_ops:
        local = np.searchsorted(active, cols)
        ops.append(ViewOperator(rows=rows, cols=local, coeff=vals, gamma=gamma,
                                w_sum=w_sum, w_bg=w_bg, targets=tgt))
    positions = fld.vertex_positions()[active]
    pos_norm = (positions - bmin) / span
    sh_active = fld.sh.reshape(-1, 3 * ell)[active]
    net_inputs = np.concatenate([sh_active, pos_norm], axis=1)
    return ops, active, net_inputs


def make_partition(n: int, split: int):
    """Half-open index ranges covering [0, n) in chunks of ``split``."""
    if split < 1:
        raise ValueError("split must be positive")
    return [(i, min(i + split, n)) for i in range(0, n, split)]


def _check_partition(idx, n):
    pos = 0
    for i, j in idx:
        if i != pos or j <= i:
            raise ValueError("idx is not a partition of the vertex range")
        pos = j
    if pos != n:
        raise ValueError("idx is not a partition of the vertex range")


@dataclass
class GgaState:
    """Detached transformed coefficients, their gradients, and the split."""

    sh_t: np.ndarray
    sh_grad: np.ndarray
    idx: list


def gga_grads(net: LipschitzNet, op: ViewOperator, net_inputs, idx, n_total_vertices,
              lam, k_est, v, bg):
    """Aggregated parameter gradients for one view, without stepping.

    Phases: (0) batched gradient-free forward producing sh_t, then the
    view render; (1) reconstruction-loss gradient in pixel space; (2)
    pull-back to sh_t through the render operator; (3) per batch, re-run
    the network forward and backpropagate the sh_t gradient scaled by
    1/B, then add the weighted norm-regularizer gradient.
    """
    n_active = net_inputs.shape[0]
    _check_partition(idx, n_active)
    # phase 0: forward without retaining per-layer state
    if idx:
        sh_t = np.concatenate([forward(net, net_inputs[i:j])[0] for i, j in idx])
    else:
        sh_t = np.zeros((0, net.n_outputs))
    pred = op.render(sh_t, v, bg)
    # phase 1: loss gradient in image space
    diff = pred - op.targets
    rec_loss = float(np.sum(diff * diff))
    g_pred = 2.0 * diff
    # phase 2: image gradient back to the transformed coefficients
    sh_grad = op.backward(g_pred, n_active)
    # phase 3: batch-wise backprop into the network, aggregated
    grads = zero_grads(net)
    inv_b = 1.0 / float(n_total_vertices)
    for i, j in idx:
        _, cache = forward(net, net_inputs[i:j], want_cache=True)
        grads.add_(backward(net, cache, sh_grad[i:j] * inv_b))
    lip_loss, d_k = lip_reg_loss(net, k_est)
    grads.dK += lam * d_k
    total = rec_loss * inv_b + lam * lip_loss
    return total, rec_loss, grads, GgaState(sh_t=sh_t, sh_grad=sh_grad, idx=list(idx))


def reference_grads(net: LipschitzNet, op: ViewOperator, net_inputs, n_total_vertices,
                    lam, k_est, v, bg):
    """Monolithic single-graph gradients, the oracle for gga_grads."""
    n_active = net_inputs.shape[0]
    sh_t, cache = forward(net, net_inputs, want_cache=True)
    pred = op.render(sh_t, v, bg)
    diff = pred - op.targets
    rec_loss = float(np.sum(diff * diff))
    sh_grad = op.backward(2.0 * diff, n_active)
    grads = backward(net, cache, sh_grad / float(n_total_vertices))
    lip_loss, d_k = lip_reg_loss(net, k_est)
    grads.dK += lam * d_k
    return rec_loss / float(n_total_vertices) + lam * lip_loss, rec_loss, grads


def gga_step(net: LipschitzNet, op: ViewOperator, net_inputs, idx, adam: Adam,
             lr, n_total_vertices, lam, k_est, v, bg) -> float:
    """One optimization step on one view: refresh norms, aggregate, step."""
    net.refresh_norms(1)
    total, rec_loss, grads, _ = gga_grads(net, op, net_inputs, idx,
                                          n_total_vertices, lam, k_est, v, bg)
    params = net_params(net)
    adam.step(params, grads_as_param_list(net, grads), lr)
    set_net_params(net, params)
    return total


def estimate_dataset_kest(images, stylized) -> float:
    """Spectral norm of the linear color map between scene and targets."""
    return make_transfer(color_stats(images), color_stats(stylized)).k_est


def train_liprf(fld: VoxelField, dataset: SceneDataset,
                config: TrainConfig) -> LipschitzNet:
    """Train the Lipschitz MLP that stylizes the frozen field.

    Requires index-aligned stylized views on the dataset.  Only network
    parameters are optimized; the field is never modified.  Logs the
    norm lower bound and the trained network's Lipschitz constant.
    """
    if dataset.stylized is None:
        raise ValueError("missing stylized views on the dataset")
    if len(dataset.stylized) != dataset.n_views:
        raise ValueError("stylized views are not index-aligned with the views")
    rng = np.random.default_rng(config.seed)
    k_est = config.k_est
    if k_est is None:
        k_est = estimate_dataset_kest(dataset.images, dataset.stylized)
    logger.info("stage 2: k_est %.4f", k_est)

    ops, active, net_inputs = build_view_operators(fld, dataset, dataset.stylized,
                                                   config)
    logger.info("stage 2: %d active vertices of %d", active.shape[0], fld.n_vertices)
    k_init = k_est ** (1.0 / config.net_layers) if k_est > 0 else 0.0
    net = build_net(net_inputs.shape[1], 3 * fld.n_coeffs, width=config.net_width,
                    n_layers=config.net_layers, activation=config.activation,
                    k_init=k_init, b_sq=config.b_sq, rng=rng)
    net.compute_dtype = np.float32 if config.compute_dtype == "float32" else np.float64
    adam = Adam(net_params(net), config.beta1, config.beta2, config.adam_eps)
    idx = make_partition(net_inputs.shape[0], config.gga_split)
    bg = np.asarray(config.background, dtype=np.float64)
    total_steps = config.epochs * dataset.n_views
    step = 0
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        for view in rng.permutation(dataset.n_views):
            lr = cosine_lr(step, max(total_steps - 1, 1), config.lr_start, config.lr_end)
            loss = gga_step(net, ops[view], net_inputs, idx, adam, lr,
                            fld.n_vertices, config.lam, k_est, fld.v, bg)
            if not np.isfinite(loss):
                raise RuntimeError(f"training diverged: non-finite loss at step {step}")
            epoch_loss += loss
            step += 1
        logger.info("liprf epoch %d: loss %.3e", epoch, epoch_loss / dataset.n_views)
    net.refresh_norms(50)
    logger.info("stage 2 done: k_est %.4f, lipschitz constant %.4f",
                k_est, lipschitz_constant(net))
    return net


def bake_field(fld: VoxelField, net: LipschitzNet) -> VoxelField:
    """Apply the network once per vertex, producing the stylized field.

    Geometry (density) is copied unchanged; positions are normalized to
    [0, 1]^3 by the grid bounds before entering the network.
    """
    span = fld.bounds_max - fld.bounds_min
    ell = fld.n_coeffs

    def fn(sh, positions):
        pos_norm = (positions - fld.bounds_min) / span
        inputs = np.concatenate([sh.reshape(-1, 3 * ell), pos_norm], axis=1)
        out, _ = forward(net, inputs)
        return np.asarray(out, dtype=np.float64).reshape(-1, 3, ell)

    return map_sh(fld, fn)


def interpolate_fields(f_src: VoxelField, f_sty: VoxelField, alpha: float) -> VoxelField:
    """Vertex-wise blend of coefficients; endpoints are returned bit-exactly."""
    if f_src.resolution != f_sty.resolution or f_src.sh.shape != f_sty.sh.shape:
        raise ValueError("fields have mismatched shapes")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must be in [0, 1]")
    out = f_src.copy()
    if alpha == 0.0:
        return out
    if alpha == 1.0:
        out.sh = f_sty.sh.copy()
        return out
    out.sh = alpha * f_sty.sh + (1.0 - alpha) * f_src.sh
    return out
