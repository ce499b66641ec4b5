"""Numerical certification of the variance bounds behind the pipeline.

Each suite samples random instances and checks an inequality or identity
exactly as stated:

* prop1 — an affine pixel map f(c) = A c + b applied to per-sample colors
  changes the two-ray render distance by at most the spectral norm of A,
  given weights that sum to 1.
* prop2 — a bias-free ReLU chain with a final affine layer obeys the same
  kind of bound, with constant prod ||A_i||, under the premise that the
  per-sample weighted-color differences stay below eps / T.
* prop3 — an affine map on coefficient matrices obeys a two-term bound
  (coefficient distance plus basis distance), collapsing to the one-term
  bound when the bias lives only in the constant-basis column.
* lemma1 — the product of effective spectral norms bounds empirical
  Lipschitz ratios of the reparameterized MLP.
* lemma2 — the exchange identity between pixel-space affine maps and
  coefficient-space maps (shift folded into the constant column).
* grad — hand-written network and renderer gradients against central
  finite differences.
* gga — batched gradient aggregation against a monolithic reference.

Reports are deterministic for a given seed.  ``max_ratio`` is the worst
observed value relative to its bound (bound suites) or to the tolerance
(identity and gradient suites); at most 1 + tolerance on a passing run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import lipnet
from .field import eval_sh_basis
from .lipnet import build_net, effective_weight, forward
from .render import Ray, render_color
from .scene_io import Camera, SceneDataset
from .train import TrainConfig, build_view_operators, gga_grads, make_partition, reference_grads

SUITE_NAMES = ("prop1", "prop2", "prop3", "lemma1", "lemma2", "grad", "gga")


@dataclass
class TrialReport:
    suite: str
    trials: int
    violations: int
    max_ratio: float
    tolerance: float
    seed: int

    @property
    def passed(self) -> bool:
        return self.violations == 0


def _simplex_weights(rng, n, t_max, t_real):
    """Rows of nonnegative weights summing to 1, padded beyond each row's T."""
    w = rng.exponential(1.0, size=(n, t_max))
    cols = np.arange(t_max)[None, :]
    w[cols >= t_real[:, None]] = 0.0
    return w / w.sum(axis=1, keepdims=True)


def _spectral_norms(mats):
    return np.linalg.svd(mats, compute_uv=False)[..., 0]


def check_prop1(trials: int = 100000, seed: int = 0) -> TrialReport:
    """Affine color maps: render distance scales by at most ||A||_2."""
    rng = np.random.default_rng(seed)
    tol = 1e-9
    t_max = 16
    t_real = rng.integers(2, t_max + 1, size=trials)
    w1 = _simplex_weights(rng, trials, t_max, t_real)
    w2 = _simplex_weights(rng, trials, t_max, t_real)
    c1 = rng.random((trials, t_max, 3))
    c2 = rng.random((trials, t_max, 3))
    A = rng.standard_normal((trials, 3, 3))
    b = rng.standard_normal((trials, 3))

    base = np.einsum("nt,ntc->nc", w1, c1) - np.einsum("nt,ntc->nc", w2, c2)
    f1 = np.einsum("nij,ntj->nti", A, c1) + b[:, None, :]
    f2 = np.einsum("nij,ntj->nti", A, c2) + b[:, None, :]
    mapped = np.einsum("nt,ntc->nc", w1, f1) - np.einsum("nt,ntc->nc", w2, f2)
    dist = np.linalg.norm(base, axis=1)
    dist_mapped = np.linalg.norm(mapped, axis=1)
    bound = _spectral_norms(A) * dist
    violations = int(np.sum(dist_mapped > bound + tol))
    ok = bound > 0
    max_ratio = float((dist_mapped[ok] / bound[ok]).max()) if ok.any() else 0.0
    return TrialReport("prop1", trials, violations, max_ratio, tol, seed)


_PROP2_ARCHS = ((3, 8, 3), (3, 16, 3), (3, 8, 8, 3), (3, 4, 16, 3),
                (3, 16, 8, 4, 3), (3, 8, 8, 8, 3))


def _batched_power_norms(mats, rng, steps=50):
    """Power-iteration spectral norms for a (G, out, in) stack."""
    g, out, _ = mats.shape
    u = rng.standard_normal((g, out))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    for _ in range(steps):
        v = np.einsum("goi,go->gi", mats, u)
        v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
        u = np.einsum("goi,gi->go", mats, v)
        u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)
    return np.einsum("go,goi,gi->g", u, mats, v)


def check_prop2(trials: int = 100000, seed: int = 0) -> TrialReport:
    """ReLU chains under the per-sample premise, 50-step spectral norms."""
    rng = np.random.default_rng(seed)
    tol = 1e-9
    t_max = 16
    arch_of = rng.integers(0, len(_PROP2_ARCHS), size=trials)
    violations = 0
    max_ratio = 0.0
    count = 0
    for a, arch in enumerate(_PROP2_ARCHS):
        g = int(np.sum(arch_of == a))
        if g == 0:
            continue
        count += g
        t_real = rng.integers(2, t_max + 1, size=g)
        w1 = _simplex_weights(rng, g, t_max, t_real)
        w2 = _simplex_weights(rng, g, t_max, t_real)
        c1 = rng.random((g, t_max, 3))
        c2 = rng.random((g, t_max, 3))
        mats = [rng.standard_normal((g, arch[i + 1], arch[i])) / np.sqrt(arch[i])
                for i in range(len(arch) - 1)]
        bias = rng.standard_normal((g, 3))
        norms = [_batched_power_norms(m, rng) for m in mats]
        k = np.prod(norms, axis=0)

        def net_apply(colors):
            h = colors
            for li, m in enumerate(mats):
                h = np.einsum("goi,gti->gto", m, h)
                if li < len(mats) - 1:
                    h = np.maximum(h, 0.0)
            return h + bias[:, None, :]

        mapped = (np.einsum("gt,gtc->gc", w1, net_apply(c1))
                  - np.einsum("gt,gtc->gc", w2, net_apply(c2)))
        dist_mapped = np.linalg.norm(mapped, axis=1)
        prod_diff = w1[..., None] * c1 - w2[..., None] * c2
        premise_max = np.linalg.norm(prod_diff, axis=2).max(axis=1)
        eps = t_real * premise_max / rng.uniform(0.5, 0.999, size=g)
        bound = k * eps
        violations += int(np.sum(dist_mapped > bound + tol))
        ok = bound > 0
        if ok.any():
            max_ratio = max(max_ratio, float((dist_mapped[ok] / bound[ok]).max()))
    return TrialReport("prop2", count, violations, max_ratio, tol, seed)


def check_prop3(trials: int = 100000, seed: int = 0) -> TrialReport:
    """Coefficient-space affine maps: two-term and constant-column bounds."""
    rng = np.random.default_rng(seed)
    tol = 1e-9
    t_max = 16
    ell = 9
    violations = 0
    max_ratio = 0.0
    done = 0
    while done < trials:
        n = min(5000, trials - done)
        done += n
        t_real = rng.integers(2, t_max + 1, size=n)
        w1 = _simplex_weights(rng, n, t_max, t_real)
        w2 = _simplex_weights(rng, n, t_max, t_real)
        sh1 = rng.uniform(-1.0, 1.0, size=(n, t_max, 3, ell))
        sh2 = rng.uniform(-1.0, 1.0, size=(n, t_max, 3, ell))
        d1 = rng.standard_normal((n, 3))
        d1 /= np.linalg.norm(d1, axis=1, keepdims=True)
        d2 = rng.standard_normal((n, 3))
        d2 /= np.linalg.norm(d2, axis=1, keepdims=True)
        g1 = eval_sh_basis(d1, 2)
        g2 = eval_sh_basis(d2, 2)
        v = rng.random((n, 3))
        A = rng.standard_normal((n, 3, 3))
        b = rng.standard_normal((n, 3, ell))

        def render(w, sh, gamma):
            return np.einsum("nt,ntcj,nj->nc", w, sh, gamma) + v

        dist = np.linalg.norm(render(w1, sh1, g1) - render(w2, sh2, g2), axis=1)
        eps2 = np.linalg.norm(g1 - g2, axis=1)
        norm_a = _spectral_norms(A)
        norm_b = _spectral_norms(b)
        for constant_column_only in (False, True):
            bias = b.copy()
            if constant_column_only:
                bias[:, :, 1:] = 0.0
            m1 = np.einsum("nij,ntjl->ntil", A, sh1) + bias[:, None]
            m2 = np.einsum("nij,ntjl->ntil", A, sh2) + bias[:, None]
            dist_mapped = np.linalg.norm(render(w1, m1, g1) - render(w2, m2, g2), axis=1)
            bound = norm_a * dist + (0.0 if constant_column_only else norm_b * eps2)
            violations += int(np.sum(dist_mapped > bound + tol))
            ok = bound > 0
            if ok.any():
                max_ratio = max(max_ratio, float((dist_mapped[ok] / bound[ok]).max()))
    return TrialReport("prop3", trials, violations, max_ratio, tol, seed)


def check_lemma2(trials: int = 100000, seed: int = 0) -> TrialReport:
    """Exchange identity between pixel affine maps and coefficient maps."""
    rng = np.random.default_rng(seed)
    tol = 1e-10
    ell = 9
    two_sqrt_pi = 2.0 * np.sqrt(np.pi)
    sh = rng.standard_normal((trials, 3, ell))
    v = rng.standard_normal((trials, 3))
    A = rng.standard_normal((trials, 3, 3))
    b = rng.standard_normal((trials, 3))
    d = rng.standard_normal((trials, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    gamma = eval_sh_basis(d, 2)

    color = np.einsum("ncj,nj->nc", sh, gamma) + v
    lhs = np.einsum("nij,nj->ni", A, color) + b
    coeffs = np.einsum("nij,njl->nil", A, sh)
    coeffs[:, :, 0] += two_sqrt_pi * (np.einsum("nij,nj->ni", A, v) + b - v)
    rhs = np.einsum("ncj,nj->nc", coeffs, gamma) + v
    dev = np.abs(lhs - rhs).max(axis=1)

    # remark: coefficient-space shift in the constant column only
    coeffs2 = np.einsum("nij,njl->nil", A, sh)
    coeffs2[:, :, 0] += b
    lhs2 = np.einsum("ncj,nj->nc", coeffs2, gamma) + v
    rhs2 = (np.einsum("nij,nj->ni", A, color) + b / two_sqrt_pi
            + v - np.einsum("nij,nj->ni", A, v))
    dev2 = np.abs(lhs2 - rhs2).max(axis=1)

    worst = np.maximum(dev, dev2)
    violations = int(np.sum(worst > tol))
    return TrialReport("lemma2", trials, violations, float(worst.max() / tol), tol, seed)


def check_lemma1(trials: int = 100000, seed: int = 0) -> TrialReport:
    """Empirical Lipschitz ratios never exceed the product of layer norms."""
    rng = np.random.default_rng(seed)
    tol = 1e-6
    pairs_per_net = 10000
    n_nets = max(1, trials // pairs_per_net)
    violations = 0
    max_ratio = 0.0
    total = 0
    for _ in range(n_nets):
        in_dim = int(rng.integers(4, 17))
        out_dim = int(rng.integers(3, 9))
        net = build_net(in_dim, out_dim, width=int(rng.integers(8, 33)),
                        n_layers=int(rng.integers(2, 5)), activation="relu",
                        k_init=1.0, rng=rng)
        for layer in net.layers:
            layer.K = float(rng.uniform(0.3, 2.5))
        net.refresh_norms(50)
        k_true = float(np.prod([
            np.linalg.svd(effective_weight(layer, net.b_sq), compute_uv=False)[0]
            for layer in net.layers]))
        x = rng.standard_normal((pairs_per_net, in_dim)) * 2.0
        y = rng.standard_normal((pairs_per_net, in_dim)) * 2.0
        gaps = np.linalg.norm(x - y, axis=1)
        keep = gaps > 1e-12
        fx, _ = forward(net, x)
        fy, _ = forward(net, y)
        ratios = np.linalg.norm(fx - fy, axis=1)[keep] / gaps[keep]
        violations += int(np.sum(ratios > k_true + tol))
        max_ratio = max(max_ratio, float(ratios.max() / k_true))
        total += int(keep.sum())
    return TrialReport("lemma1", total, violations, max_ratio, tol, seed)


# ---------------------------------------------------------------------------
# gradient and aggregation oracles


def _relative_error(a, b, floor=1e-7):
    scale = max(abs(a), abs(b))
    if scale < floor:
        return 0.0
    return abs(a - b) / scale


def _fd_check_net(rng, activation: str):
    """Central finite differences over every parameter of a small net."""
    net = build_net(6, 5, width=8, n_layers=3, activation=activation,
                    k_init=float(rng.uniform(0.8, 1.6)), rng=rng)
    x = rng.standard_normal((7, 6))
    if activation == "relu":
        # keep pre-activations away from the kink so central differences hold
        out, caches = forward(net, x, want_cache=True)
        for _ in range(50):
            bad = any(np.abs(c.z).min() < 1e-3 for c in caches)
            if not bad:
                break
            x = rng.standard_normal((7, 6))
            out, caches = forward(net, x, want_cache=True)
    g0 = rng.standard_normal((7, 5))

    def loss_value():
        out, _ = forward(net, x)
        return float(np.sum(out * g0))

    _, caches = forward(net, x, want_cache=True)
    grads = lipnet.backward(net, caches, g0)
    h = 1e-4
    errors = []

    def fd_entry(arr, index, analytic):
        old = arr[index]
        arr[index] = old + h
        up = loss_value()
        arr[index] = old - h
        down = loss_value()
        arr[index] = old
        return _relative_error((up - down) / (2 * h), analytic)

    for li, layer in enumerate(net.layers):
        for index in np.ndindex(layer.W.shape):
            errors.append(fd_entry(layer.W, index, grads.dW[li][index]))
        old_k = layer.K
        layer.K = old_k + h
        up = loss_value()
        layer.K = old_k - h
        down = loss_value()
        layer.K = old_k
        errors.append(_relative_error((up - down) / (2 * h), grads.dK[li]))
    bias = net.layers[-1].bias
    for index in np.ndindex(bias.shape):
        errors.append(fd_entry(bias, index, grads.dbias[index]))
    return np.array(errors)


def _random_box_ray(rng, bounds_min, bounds_max, n_samples):
    center = 0.5 * (bounds_min + bounds_max)
    origin = center + 3.0 * _random_unit(rng)
    target = rng.uniform(bounds_min + 0.2, bounds_max - 0.2)
    direction = target - origin
    direction /= np.linalg.norm(direction)
    from .render import ray_box_intersection

    t_near, t_far, hit = ray_box_intersection(origin, direction, bounds_min, bounds_max)
    return Ray(origin=origin, direction=direction, t_near=t_near, t_far=t_far,
               n_samples=n_samples)


def _random_unit(rng):
    d = rng.standard_normal(3)
    return d / np.linalg.norm(d)


def _fd_check_render(rng):
    """Closed-form render gradients against finite differences.

    The analytic gradients come from the batched training path; the
    finite-difference evaluations go through the per-ray renderer, so
    this also pins the two implementations to each other.
    """
    from .field import VoxelField
    from .train import RayData, _recon_forward_backward

    res = 5
    fld = VoxelField.zeros((res, res, res), np.array([-1.0, -1.0, -1.0]),
                           np.array([1.0, 1.0, 1.0]))
    fld.density[:] = rng.uniform(0.05, 1.5, size=fld.density.shape)
    fld.sh[:] = rng.normal(0.0, 0.3, size=fld.sh.shape)
    bg = np.array([1.0, 1.0, 1.0])
    n_samples = 16
    rays = [_random_box_ray(rng, fld.bounds_min, fld.bounds_max, n_samples)
            for _ in range(4)]
    g0 = rng.standard_normal((4, 3))

    base = np.stack([render_color(r, fld, bg) for r in rays])
    targets = base - 0.5 * g0  # so the loss gradient in color space is g0

    ray_data = RayData(
        origins=np.stack([r.origin for r in rays]),
        directions=np.stack([r.direction for r in rays]),
        t_near=np.array([r.t_near for r in rays]),
        t_far=np.array([r.t_far for r in rays]),
        hit=np.ones(4, dtype=bool),
        gamma=eval_sh_basis(np.stack([r.direction for r in rays]), fld.degree),
        targets=targets,
    )
    dens_flat = fld.density.reshape(-1).copy()
    sh_flat = fld.sh.reshape(-1, 3 * fld.n_coeffs).copy()
    grad_dens = np.zeros_like(dens_flat)
    grad_sh = np.zeros_like(sh_flat)
    geom = (fld.bounds_min, fld.bounds_max - fld.bounds_min,
            np.asarray(fld.resolution, dtype=np.int64))
    _recon_forward_backward(dens_flat, sh_flat, geom, ray_data,
                            np.arange(4), n_samples, fld.v, bg,
                            grad_dens, grad_sh)

    def loss_value():
        total = 0.0
        for r, tgt in zip(rays, targets):
            diff = render_color(r, fld, bg) - tgt
            total += float(diff @ diff)
        return total

    h = 1e-4
    errors = []
    flat_sh_view = fld.sh.reshape(-1, 3 * fld.n_coeffs)
    entries = np.argwhere(np.abs(grad_sh) > 1e-8)
    rng.shuffle(entries)
    for vi, ci in entries[:120]:
        old = flat_sh_view[vi, ci]
        flat_sh_view[vi, ci] = old + h
        up = loss_value()
        flat_sh_view[vi, ci] = old - h
        down = loss_value()
        flat_sh_view[vi, ci] = old
        errors.append(_relative_error((up - down) / (2 * h), grad_sh[vi, ci]))
    flat_dens_view = fld.density.reshape(-1)
    dens_entries = np.flatnonzero(np.abs(grad_dens) > 1e-8)
    rng.shuffle(dens_entries)
    for vi in dens_entries[:60]:
        old = flat_dens_view[vi]
        flat_dens_view[vi] = old + h
        up = loss_value()
        flat_dens_view[vi] = old - h
        down = loss_value()
        flat_dens_view[vi] = old
        errors.append(_relative_error((up - down) / (2 * h), grad_dens[vi]))
    return np.array(errors)


def check_gradients(seed: int = 0) -> TrialReport:
    """Finite-difference certification of net and renderer gradients."""
    rng = np.random.default_rng(seed)
    tol = 1e-4
    errors = np.concatenate([
        _fd_check_net(rng, "sine"),
        _fd_check_net(rng, "relu"),
        _fd_check_render(rng),
    ])
    violations = int(np.sum(errors >= tol))
    return TrialReport("grad", errors.size, violations, float(errors.max() / tol),
                       tol, seed)


def _toy_gga_setup(rng):
    from .field import VoxelField

    res = 8
    fld = VoxelField.zeros((res, res, res), np.array([-1.0, -1.0, -1.0]),
                           np.array([1.0, 1.0, 1.0]))
    fld.density[:] = rng.uniform(0.05, 2.0, size=fld.density.shape)
    fld.sh[:] = rng.normal(0.0, 0.4, size=fld.sh.shape)
    pose = np.concatenate([np.eye(3), np.array([[0.0], [0.0], [-3.0]])], axis=1)
    cam = Camera(width=4, height=4, focal=5.0, cx=2.0, cy=2.0, pose=pose)
    image = rng.random((4, 4, 3))
    target = rng.random((4, 4, 3))
    dataset = SceneDataset(cameras=[cam], images=[image],
                           bounds_min=fld.bounds_min, bounds_max=fld.bounds_max,
                           stylized=[target])
    config = TrainConfig(n_samples=24, weight_prune=0.0)
    ops, active, net_inputs = build_view_operators(fld, dataset, [target], config)
    net = build_net(net_inputs.shape[1], 3 * fld.n_coeffs, width=16, n_layers=3,
                    k_init=1.1, rng=rng)
    return fld, ops[0], net_inputs, net


def check_gga(seed: int = 0) -> TrialReport:
    """Aggregated gradients equal the monolithic reference for any split."""
    rng = np.random.default_rng(seed)
    tol = 1e-5
    fld, op, net_inputs, net = _toy_gga_setup(rng)
    net.refresh_norms(1)
    lam, k_est = 2e-4, 1.3
    v = fld.v
    bg = np.array([1.0, 1.0, 1.0])
    _, _, ref = reference_grads(net, op, net_inputs, fld.n_vertices, lam, k_est, v, bg)
    ref_flat = _flatten_grads(ref)
    n = net_inputs.shape[0]
    errors = []
    split_grads = []
    for parts in (1, 2, 7):
        idx = make_partition(n, int(np.ceil(n / parts)))
        _, _, grads, _ = gga_grads(net, op, net_inputs, idx, fld.n_vertices,
                                   lam, k_est, v, bg)
        flat = _flatten_grads(grads)
        split_grads.append(flat)
        denom = max(float(np.abs(ref_flat).max()), 1e-12)
        errors.append(float(np.abs(flat - ref_flat).max()) / denom)
    cross = float(np.abs(split_grads[1] - split_grads[2]).max()) / max(
        float(np.abs(split_grads[1]).max()), 1e-12)
    violations = int(sum(e >= tol for e in errors)) + int(cross >= 1e-10)
    max_ratio = max(max(errors) / tol, cross / 1e-10)
    return TrialReport("gga", len(errors) + 1, violations, float(max_ratio), tol, seed)


def _flatten_grads(grads):
    parts = [g.reshape(-1) for g in grads.dW]
    parts.append(np.asarray(grads.dK).reshape(-1))
    if grads.dbias is not None:
        parts.append(grads.dbias.reshape(-1))
    return np.concatenate(parts)


_CHECKS = {
    "prop1": lambda trials, seed: check_prop1(trials, seed),
    "prop2": lambda trials, seed: check_prop2(trials, seed),
    "prop3": lambda trials, seed: check_prop3(trials, seed),
    "lemma1": lambda trials, seed: check_lemma1(trials, seed),
    "lemma2": lambda trials, seed: check_lemma2(trials, seed),
    "grad": lambda trials, seed: check_gradients(seed),
    "gga": lambda trials, seed: check_gga(seed),
}


def run_suites(suites, trials: int = 100000, seed: int = 0) -> dict:
    """Run the named suites (or all of them) and return their reports."""
    if isinstance(suites, str):
        suites = SUITE_NAMES if suites == "all" else (suites,)
    reports = {}
    for name in suites:
        if name not in _CHECKS:
            raise ValueError(f"unknown suite {name!r}")
        reports[name] = _CHECKS[name](trials, seed)
    return reports
