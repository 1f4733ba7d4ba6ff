"""Minimal permutation-invariant point-set encoder and conditioned decoder fitting.

A shared per-point ReLU MLP acts on the positional encoding of each point
and the features are max-pooled into one code. The decoder receives the
code concatenated to its own encoding (39 + 256 = 295 inputs by default).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..geometry import SphereField
from ..sampling import make_training_set, surface_pool
from .losses import sdf_losses
from .network import ImplicitNet
from .optim import AdamState, adam_step
from .posenc import PosEncConfig, posenc
from .train import FitConfig, FitResult, _batches, _check, new_net

CODE_DIM = 256


class EncoderError(ValueError):
    pass


@dataclass
class PointEncoder:
    widths: tuple = (128, CODE_DIM)
    posenc: PosEncConfig = field(default_factory=PosEncConfig)
    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    @property
    def code_dim(self) -> int:
        return self.widths[-1]

    @property
    def params(self) -> list[np.ndarray]:
        return self.weights + self.biases


def init_encoder(enc: PointEncoder, seed=0) -> PointEncoder:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    dims = [enc.posenc.dim, *enc.widths]
    weights = [rng.uniform(-np.sqrt(6.0 / i), np.sqrt(6.0 / i), (o, i)) for i, o in zip(dims[:-1], dims[1:])]
    return replace(enc, weights=weights, biases=[np.zeros(o) for o in dims[1:]])


def _forward(enc: PointEncoder, points) -> tuple[np.ndarray, list]:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise EncoderError("empty point set")
    hs = [posenc(pts, enc.posenc)]
    for W, b in zip(enc.weights, enc.biases):
        hs.append(np.maximum(hs[-1] @ W.T + b, 0.0))
    return hs[-1].max(axis=0), hs


def encode_pointset(enc: PointEncoder, points) -> np.ndarray:
    """Code of a point set; invariant to point order and duplicates."""
    return _forward(enc, points)[0]


def encoder_gradients(enc: PointEncoder, points, dcode) -> tuple[np.ndarray, list]:
    """Code and the parameter gradients of ``dcode . code``.

    The max-pool routes each channel's gradient to the first point attaining it.
    """
    code, hs = _forward(enc, points)
    hbar = np.zeros_like(hs[-1])
    hbar[np.argmax(hs[-1], axis=0), np.arange(hs[-1].shape[1])] = dcode
    n = len(enc.weights)
    dW, db = [None] * n, [None] * n
    for l in range(n, 0, -1):
        zbar = hbar * (hs[l] > 0)
        dW[l - 1] = zbar.T @ hs[l - 1]
        db[l - 1] = zbar.sum(axis=0)
        hbar = zbar @ enc.weights[l - 1]
    return code, dW + db


def fit_conditioned(fields: list[SphereField], cfg: FitConfig = FitConfig(),
                    n_code_points: int = 512, encoder: Optional[PointEncoder] = None
                    ) -> tuple[ImplicitNet, PointEncoder, FitResult]:
    """Jointly train one decoder and the encoder over several shapes.

    Each step takes one point batch per shape, conditions the decoder on the
    shape's encoded surface points and averages the gradients over shapes.
    Runs in float64; meant for small smoke-scale problems.
    """
    if not fields:
        raise ValueError("no shapes to fit")
    enc = encoder if encoder is not None else init_encoder(PointEncoder(posenc=cfg.posenc), cfg.seed + 7)
    net = new_net(cfg, latent_dim=enc.code_dim)
    rng = np.random.default_rng(cfg.seed + 1)
    data = [make_training_set(f, replace(cfg.sampling, seed=cfg.sampling.seed + i)) for i, f in enumerate(fields)]
    clouds = []
    for f in fields:
        pool, _ = surface_pool(f, 2)
        pick = rng.choice(len(pool), size=min(n_code_points, len(pool)), replace=False)
        clouds.append(pool[np.sort(pick)])
    params = net.params + enc.params
    opt = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)

    def step(batches) -> tuple[float, list]:
        total = 0.0
        grads = [np.zeros_like(p) for p in params]
        for batch, cloud in zip(batches, clouds):
            code = encode_pointset(enc, cloud)
            terms, g_net, dcode = sdf_losses(net, batch, cfg.weights, code, want_latent_grad=True)
            _, g_enc = encoder_gradients(enc, cloud, dcode)
            for acc, g in zip(grads, g_net + g_enc):
                acc += g / len(fields)
            total += terms.total / len(fields)
        _check(total)
        return total, grads

    result = FitResult(net, initial_loss=step(data)[0])
    for _ in range(cfg.epochs):
        orders = [list(_batches(len(d), cfg.batch_size, rng)) for d in data]
        losses = []
        for parts in zip(*orders):
            loss, grads = step([d.subset(i) for d, i in zip(data, parts)])
            adam_step(params, grads, opt)
            losses.append(loss)
        result.history.append(float(np.mean(losses)))
    return net, enc, result
