"""Coordinate MLP with sinusoidal (or ablation) activations.

The network maps a point to ``out_dim`` values: positional encoding,
optionally concatenated with a shape code, then a chain of fully connected
layers with an activation between them and a linear head.

Gradients are hand-written. ``forward_with_input_grad`` propagates
tangents forward for the input Jacobian of any head; the training pass in
:mod:`.losses` differentiates through the input gradient itself, which the
Eikonal and normal terms require.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .posenc import PosEncConfig, posenc_with_derivative

DEFAULT_WIDTHS = (256, 256, 256, 256)
DEFAULT_OMEGA = 30.0

_SELU_LAMBDA = 1.0507009873554805
_SELU_ALPHA = 1.6732632423543772

ACTIVATIONS = ("sine", "relu", "selu", "linear")


class Activation:
    """Elementwise nonlinearity with its first two derivatives."""

    def __init__(self, name: str, omega: float = DEFAULT_OMEGA):
        if name not in ACTIVATIONS:
            raise ValueError(f"unknown activation {name!r}")
        self.name = name
        self.omega = omega

    def __call__(self, z):
        if self.name == "sine":
            return np.sin(self.omega * z)
        if self.name == "relu":
            return np.maximum(z, 0.0)
        if self.name == "selu":
            return _SELU_LAMBDA * np.where(z > 0, z, _SELU_ALPHA * np.expm1(np.minimum(z, 0.0)))
        return z

    def d1(self, z):
        if self.name == "sine":
            return self.omega * np.cos(self.omega * z)
        if self.name == "relu":
            return (z > 0).astype(z.dtype)
        if self.name == "selu":
            return _SELU_LAMBDA * np.where(z > 0, 1.0, _SELU_ALPHA * np.exp(np.minimum(z, 0.0)))
        return np.ones_like(z)

    def with_derivatives(self, z):
        """``(sigma, sigma', sigma'')`` sharing one sin/cos evaluation for sine."""
        if self.name == "sine":
            s, c = np.sin(self.omega * z), np.cos(self.omega * z)
            return s, self.omega * c, (-self.omega ** 2) * s
        return self(z), self.d1(z), self.d2(z)

    def d2(self, z):
        if self.name == "sine":
            return -self.omega ** 2 * np.sin(self.omega * z)
        if self.name == "selu":
            return _SELU_LAMBDA * np.where(z > 0, 0.0, _SELU_ALPHA * np.exp(np.minimum(z, 0.0)))
        return np.zeros_like(z)


@dataclass
class ImplicitNet:
    widths: tuple = DEFAULT_WIDTHS
    out_dim: int = 1
    omega: float = DEFAULT_OMEGA
    posenc: PosEncConfig = field(default_factory=PosEncConfig)
    activation: str = "sine"
    latent_dim: int = 0
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.omega <= 0 or self.out_dim < 1:
            raise ValueError("need omega > 0 and out_dim >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not self.weights:
            self.weights = [np.zeros((o, i)) for i, o in self.layer_shapes]
            self.biases = [np.zeros(o) for _, o in self.layer_shapes]
        for W, b, (i, o) in zip(self.weights, self.biases, self.layer_shapes):
            if W.shape != (o, i) or b.shape != (o,):
                raise ValueError("weight shapes do not chain")

    @property
    def in_dim(self) -> int:
        return self.posenc.dim + self.latent_dim

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = (self.in_dim,) + self.widths + (self.out_dim,)
        return list(zip(dims[:-1], dims[1:]))

    @property
    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases

    @property
    def act(self) -> Activation:
        return Activation(self.activation, self.omega)

    def astype(self, dtype) -> "ImplicitNet":
        return ImplicitNet(self.widths, self.out_dim, self.omega, self.posenc, self.activation,
                           self.latent_dim, [w.astype(dtype) for w in self.weights],
                           [b.astype(dtype) for b in self.biases])

    def copy(self) -> "ImplicitNet":
        return ImplicitNet(self.widths, self.out_dim, self.omega, self.posenc, self.activation,
                           self.latent_dim, [w.copy() for w in self.weights],
                           [b.copy() for b in self.biases])

    def __call__(self, p, latent=None) -> np.ndarray:
        return forward(self, p, latent)


def siren_init(net: ImplicitNet, seed=0) -> ImplicitNet:
    """Fresh weights: SIREN scheme for sine nets, He/LeCun-style uniform otherwise."""
    rng = np.random.default_rng(seed)
    weights = []
    for layer, (fan_in, fan_out) in enumerate(net.layer_shapes):
        if net.activation == "sine":
            bound = 1.0 / fan_in if layer == 0 else np.sqrt(6.0 / fan_in) / net.omega
        elif net.activation == "relu":
            bound = np.sqrt(6.0 / fan_in)
        else:
            bound = np.sqrt(3.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
    return ImplicitNet(net.widths, net.out_dim, net.omega, net.posenc, net.activation,
                       net.latent_dim, weights, [np.zeros(o) for _, o in net.layer_shapes])


def network_input(net: ImplicitNet, pts: np.ndarray, latent=None) -> tuple[np.ndarray, np.ndarray]:
    """Encoded input rows and the posenc derivative (see ``posenc_with_derivative``)."""
    feats, dfeats = posenc_with_derivative(pts, net.posenc)
    dtype = net.weights[0].dtype
    feats, dfeats = feats.astype(dtype, copy=False), dfeats.astype(dtype, copy=False)
    if net.latent_dim:
        if latent is None:
            raise ValueError("conditioned net needs a latent code")
        code = np.broadcast_to(np.asarray(latent, dtype=feats.dtype), (len(pts), net.latent_dim))
        feats = np.concatenate([feats, code], axis=1)
    return feats, dfeats


def _points(p) -> tuple[np.ndarray, bool]:
    pts = np.asarray(p, dtype=np.float64)
    return np.atleast_2d(pts), pts.ndim == 1


def forward(net: ImplicitNet, p, latent=None, chunk: int = 65536) -> np.ndarray:
    pts, single = _points(p)
    act = net.act
    out = np.empty((len(pts), net.out_dim))
    for s in range(0, len(pts), chunk):
        h, _ = network_input(net, pts[s:s + chunk], latent)
        for W, b in zip(net.weights[:-1], net.biases[:-1]):
            h = act(h @ W.T + b)
        out[s:s + chunk] = h @ net.weights[-1].T + net.biases[-1]
    return out[0] if single else out


def forward_with_input_grad(net: ImplicitNet, p, latent=None) -> tuple[np.ndarray, np.ndarray]:
    """Values ``(N, out)`` and Jacobians ``(N, 3, out)`` by forward-mode tangents."""
    pts, single = _points(p)
    act = net.act
    h, dfeats = network_input(net, pts, latent)
    n = len(pts)
    tangent = np.zeros((n, 3, net.in_dim))
    coord = net.posenc.coord_index()
    for c in range(3):
        cols = np.flatnonzero(coord == c)
        tangent[:, c, cols] = dfeats[:, cols]
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        z = h @ W.T + b
        tangent = (tangent @ W.T) * act.d1(z)[:, None, :]
        h = act(z)
    y = h @ net.weights[-1].T + net.biases[-1]
    jac = tangent @ net.weights[-1].T
    if single:
        return y[0], jac[0]
    return y, jac


def param_count(net: ImplicitNet) -> int:
    return sum(p.size for p in net.params)


def flatten_params(params: list[np.ndarray]) -> np.ndarray:
    return np.concatenate([p.ravel() for p in params])


def unflatten_into(params: list[np.ndarray], flat: np.ndarray) -> None:
    off = 0
    for p in params:
        p[...] = flat[off:off + p.size].reshape(p.shape)
        off += p.size


def empty_like_params(net: ImplicitNet) -> list[np.ndarray]:
    return [np.zeros_like(p) for p in net.params]


def latent_slice(net: ImplicitNet) -> Optional[slice]:
    return slice(net.posenc.dim, net.in_dim) if net.latent_dim else None
