"""Lipschitz-constrained MLP over flattened SH coefficients.

Each linear layer stores a raw weight matrix W and a scalar parameter K.
The effective weight is ``squareplus(K, b) * W / sigma_hat`` where
sigma_hat estimates the spectral norm of W via power iteration with
persistent singular-vector state.  Under this reparameterization the
spectral norm of every effective weight equals squareplus(K, b), so the
product of those values bounds (and, with 1-Lipschitz activations,
equals) the network's Lipschitz constant.

Hidden layers are bias-free; only the output layer carries a bias.  The
forward/backward passes are written by hand so gradients are exact for
the function actually evaluated: sigma_hat is treated as u . W v with
the stored vectors held constant, whose gradient in W is the rank-1
matrix u v^T.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np


def squareplus(x, b):
    """Smooth positive ReLU surrogate 0.5 * (x + sqrt(x^2 + b))."""
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (x + np.sqrt(x * x + b))


def squareplus_grad(x, b):
    """Derivative of squareplus in x; the b = 0, x = 0 subgradient is 0.5."""
    x = np.asarray(x, dtype=np.float64)
    root = np.sqrt(x * x + b)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = 0.5 * (1.0 + np.where(root > 0, x / np.where(root > 0, root, 1.0), 0.0))
    return g


def inverse_squareplus(y, b):
    """The x with squareplus(x, b) = y, for y > 0."""
    return y - b / (4.0 * y)


def power_iter_norm(W, u, steps: int = 1):
    """Spectral-norm estimate of W by power iteration.

    Runs ``steps`` rounds of v = normalize(W^T u), u = normalize(W v) and
    returns (sigma, u, v) with sigma = u . W v.  A zero matrix yields
    sigma 0 with u unchanged.
    """
    W = np.asarray(W)
    u = np.asarray(u, dtype=np.float64).copy()
    if not W.any():
        return 0.0, u, np.zeros(W.shape[1])
    v = None
    for _ in range(steps):
        v = W.T @ u
        nv = np.linalg.norm(v)
        if nv == 0.0:
            # u fell in the left null space; restart from a fixed vector
            u = np.ones(W.shape[0]) / np.sqrt(W.shape[0])
            v = W.T @ u
            nv = np.linalg.norm(v)
        v = v / nv
        u = W @ v
        u = u / np.linalg.norm(u)
    sigma = float(u @ W @ v)
    return sigma, u, v


@dataclass
class LipLayer:
    """One reparameterized linear layer.

    W : raw weight matrix (out, in).
    K : raw scalar; squareplus(K, b) is the layer's effective spectral norm.
    u, v : persistent power-iteration singular-vector estimates.
    bias : output-layer bias, None on hidden layers.
    """

    W: np.ndarray
    K: float
    u: np.ndarray
    v: np.ndarray
    bias: np.ndarray | None = None

    @property
    def out_dim(self) -> int:
        return self.W.shape[0]

    @property
    def in_dim(self) -> int:
        return self.W.shape[1]

    def refresh(self, steps: int = 1) -> float:
        """Advance the persistent power iteration; returns the estimate."""
        sigma, self.u, self.v = power_iter_norm(self.W, self.u, steps)
        return sigma

    def sigma_hat(self) -> float:
        """u . W v with the current stored vectors."""
        return float(self.u @ self.W @ self.v)


@dataclass
class LipschitzNet:
    layers: list
    activation: str = "sine"
    b_sq: float = 1e-12
    compute_dtype: np.dtype = dataclass_field(default=np.float64, repr=False)

    @property
    def n_inputs(self) -> int:
        return self.layers[0].in_dim

    @property
    def n_outputs(self) -> int:
        return self.layers[-1].out_dim

    def refresh_norms(self, steps: int = 1):
        for layer in self.layers:
            layer.refresh(steps)


_ACTIVATIONS = {
    "sine": (np.sin, np.cos),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0.0).astype(z.dtype)),
}


def build_net(in_dim: int, out_dim: int, width: int = 64, n_layers: int = 6,
              activation: str = "sine", k_init: float = 1.0, b_sq: float = 1e-12,
              rng=None, norm_steps: int = 50) -> LipschitzNet:
    """Random net with uniform(-sqrt(6/in), sqrt(6/in)) weights.

    K is set to ``k_init`` on every layer and the power-iteration state is
    converged with ``norm_steps`` steps so training starts from accurate
    spectral-norm estimates.
    """
    if activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    if n_layers < 1:
        raise ValueError("need at least one layer")
    rng = np.random.default_rng() if rng is None else rng
    dims = [in_dim] + [width] * (n_layers - 1) + [out_dim]
    layers = []
    for i in range(n_layers):
        fan_in, fan_out = dims[i], dims[i + 1]
        limit = np.sqrt(6.0 / fan_in)
        W = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        u = rng.standard_normal(fan_out)
        u /= np.linalg.norm(u)
        v = rng.standard_normal(fan_in)
        v /= np.linalg.norm(v)
        bias = np.zeros(fan_out) if i == n_layers - 1 else None
        layer = LipLayer(W=W, K=float(k_init), u=u, v=v, bias=bias)
        layer.refresh(norm_steps)
        layers.append(layer)
    return LipschitzNet(layers=layers, activation=activation, b_sq=b_sq)


def effective_weight(layer: LipLayer, b_sq: float = 1e-12) -> np.ndarray:
    """squareplus(K, b) * W / sigma_hat with the layer's current state.

    An all-zero W maps to the zero matrix; a vanishing estimate for a
    non-zero W is an error (stale power-iteration state).
    """
    if not layer.W.any():
        return np.zeros_like(layer.W)
    sigma = layer.sigma_hat()
    if sigma <= 0.0:
        raise ValueError("power-iteration estimate is zero for a non-zero weight")
    return (squareplus(layer.K, b_sq) / sigma) * layer.W


@dataclass
class LayerCache:
    x: np.ndarray  # layer input (N, in)
    z: np.ndarray  # pre-activation (N, out)
    coeff: float  # squareplus(K, b) / sigma_hat
    sigma: float


def forward(net: LipschitzNet, inputs, want_cache: bool = False):
    """Batched forward pass.

    inputs : (N, in_dim).  Returns (outputs (N, out_dim), caches) where
    caches is None unless requested.
    """
    x = np.asarray(inputs, dtype=net.compute_dtype)
    if x.ndim != 2 or x.shape[1] != net.n_inputs:
        raise ValueError(f"expected inputs (N, {net.n_inputs}), got {x.shape}")
    act, _ = _ACTIVATIONS[net.activation]
    caches = [] if want_cache else None
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        A = effective_weight(layer, net.b_sq).astype(net.compute_dtype)
        z = x @ A.T
        if layer.bias is not None:
            z = z + layer.bias.astype(net.compute_dtype)
        if want_cache:
            sigma = layer.sigma_hat()
            coeff = squareplus(layer.K, net.b_sq) / sigma if sigma > 0 else 0.0
            caches.append(LayerCache(x=x, z=z, coeff=float(coeff), sigma=float(sigma)))
        x = z if i == last else act(z)
    return x, caches


@dataclass
class NetGrads:
    dW: list
    dK: np.ndarray
    dbias: np.ndarray | None

    def scale(self, c: float) -> "NetGrads":
        return NetGrads(
            dW=[g * c for g in self.dW],
            dK=self.dK * c,
            dbias=None if self.dbias is None else self.dbias * c,
        )

    def add_(self, other: "NetGrads"):
        for a, b in zip(self.dW, other.dW):
            a += b
        self.dK += other.dK
        if self.dbias is not None:
            self.dbias += other.dbias


def zero_grads(net: LipschitzNet) -> NetGrads:
    return NetGrads(
        dW=[np.zeros_like(layer.W) for layer in net.layers],
        dK=np.zeros(len(net.layers)),
        dbias=np.zeros_like(net.layers[-1].bias) if net.layers[-1].bias is not None else None,
    )


def backward(net: LipschitzNet, caches, grad_outputs) -> NetGrads:
    """Reverse-mode gradients for a forward pass with caches.

    grad_outputs : (N, out_dim) upstream gradient on the net outputs.
    Returns gradients for every W, K and the output bias.  The spectral
    estimate is differentiated through its rank-1 form, d sigma / dW =
    u v^T.
    """
    if caches is None or len(caches) != len(net.layers):
        raise ValueError("stale or missing forward cache")
    _, act_grad = _ACTIVATIONS[net.activation]
    grads = zero_grads(net)
    g = np.asarray(grad_outputs, dtype=net.compute_dtype)
    last = len(net.layers) - 1
    for i in range(last, -1, -1):
        layer = net.layers[i]
        cache = caches[i]
        gz = g if i == last else g * act_grad(cache.z)
        if layer.bias is not None:
            grads.dbias += gz.sum(axis=0, dtype=np.float64)
        gA = gz.T @ cache.x  # (out, in) gradient on the effective weight
        gA64 = gA.astype(np.float64)
        if cache.sigma > 0.0:
            dot = float(np.sum(gA64 * layer.W))
            grads.dW[i] += cache.coeff * (
                gA64 - (dot / cache.sigma) * np.outer(layer.u, layer.v)
            )
            grads.dK[i] += squareplus_grad(layer.K, net.b_sq) * dot / cache.sigma
        if i > 0:
            A = cache.coeff * layer.W
            g = gz @ A.astype(net.compute_dtype)
    return grads


def lipschitz_constant(net: LipschitzNet) -> float:
    """Product of the layers' effective spectral norms squareplus(K_i, b)."""
    return float(np.prod([squareplus(layer.K, net.b_sq) for layer in net.layers]))


def lip_reg_loss(net: LipschitzNet, k_est: float):
    """Adaptive norm regularizer and its K gradients.

    Pulls every layer's raw K toward the l-th root of ``k_est`` through a
    one-sided smooth penalty: sum_i squareplus(K_i - k_est**(1/l), b).
    Returns (loss, dloss/dK as an (l,) vector).
    """
    if k_est < 0:
        raise ValueError("k_est must be nonnegative")
    n = len(net.layers)
    target = k_est ** (1.0 / n)
    ks = np.array([layer.K for layer in net.layers])
    terms = squareplus(ks - target, net.b_sq)
    return float(terms.sum()), squareplus_grad(ks - target, net.b_sq)


def identity_layer(in_dim: int, out_dim: int, b_sq: float = 1e-12,
                   bias: bool = True) -> LipLayer:
    """Layer whose effective weight is [I | 0] exactly.

    Useful for constructing nets that pass the first ``out_dim`` inputs
    through unchanged.  Requires in_dim >= out_dim.
    """
    W = np.zeros((out_dim, in_dim))
    W[:, :out_dim] = np.eye(out_dim)
    u = np.zeros(out_dim)
    u[0] = 1.0
    layer = LipLayer(
        W=W,
        K=float(inverse_squareplus(1.0, b_sq)),
        u=u,
        v=np.zeros(in_dim),
        bias=np.zeros(out_dim) if bias else None,
    )
    layer.refresh(steps=2)
    return layer


def net_params(net: LipschitzNet) -> list:
    """Flat parameter list [W_0..W_l, K vector, bias] for optimizers."""
    params = [layer.W for layer in net.layers]
    params.append(np.array([layer.K for layer in net.layers]))
    if net.layers[-1].bias is not None:
        params.append(net.layers[-1].bias)
    return params


def set_net_params(net: LipschitzNet, params: list):
    n = len(net.layers)
    for layer, W in zip(net.layers, params[:n]):
        layer.W = W
    for i, layer in enumerate(net.layers):
        layer.K = float(params[n][i])
    if net.layers[-1].bias is not None:
        net.layers[-1].bias = params[n + 1]


def grads_as_param_list(net: LipschitzNet, grads: NetGrads) -> list:
    out = list(grads.dW)
    out.append(grads.dK)
    if net.layers[-1].bias is not None:
        out.append(grads.dbias)
    return out
