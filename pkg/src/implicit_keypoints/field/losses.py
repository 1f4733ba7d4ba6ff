"""Training objectives and their parameter gradients.

SDF head::

    L_sdf    = mean_i |f(p_i) - s_i|
    L_grad   = mean_i | ||grad f(p_i)|| - 1 |
    L_normal = mean_{i on surface} (1 - cos(grad f(p_i), n_i))
    L        = l1 * L_sdf + l2 * L_grad + l3 * L_normal

Each term is a batch mean so the weights do not depend on batch size.
The stacked-UDF head uses a plain L1 over all channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..sampling import TrainingSet
from .network import ImplicitNet, network_input


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 0.05

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class LossTerms:
    sdf: float
    grad: float
    normal: float
    total: float


def loss_terms(values, grads, batch: TrainingSet, w: LossWeights = LossWeights()):
    """Loss terms for given predictions, plus d(total)/d(values) and d(total)/d(grads).

    ``values`` is ``(B,)`` and ``grads`` is ``(B, 3)``; they may come from the
    network or from any other field, e.g. the analytic one.
    """
    n = len(batch)
    if n == 0:
        raise LossError("empty batch")
    values = np.asarray(values, dtype=np.float64).reshape(n)
    grads = np.asarray(grads, dtype=np.float64).reshape(n, 3)

    resid = values - batch.sdf
    l_sdf = np.abs(resid).mean()
    d_values = w.lambda1 * np.sign(resid) / n

    gnorm = np.sqrt(np.einsum("bc,bc->b", grads, grads))
    safe = np.where(gnorm > 0, gnorm, 1.0)
    l_grad = np.abs(gnorm - 1.0).mean()
    unit = np.where(gnorm[:, None] > 0, grads / safe[:, None], 0.0)
    d_grads = (w.lambda2 / n) * np.sign(gnorm - 1.0)[:, None] * unit

    surf = batch.surface
    n_surf = int(surf.sum())
    l_normal = 0.0
    if n_surf:
        nrm = batch.normals[surf]
        g, u, gn = grads[surf], unit[surf], safe[surf]
        cos = np.einsum("bc,bc->b", u, nrm)
        l_normal = float((1.0 - cos).mean())
        dcos = (nrm - cos[:, None] * u) / gn[:, None]
        dcos[gnorm[surf] == 0] = 0.0
        d_grads[surf] -= (w.lambda3 / n_surf) * dcos
    total = w.lambda1 * l_sdf + w.lambda2 * l_grad + w.lambda3 * l_normal
    return LossTerms(float(l_sdf), float(l_grad), l_normal, float(total)), d_values, d_grads


def sdf_losses(net: ImplicitNet, batch: TrainingSet, w: LossWeights = LossWeights(),
               latent=None, want_latent_grad: bool = False):
    """Loss terms and parameter gradients for the SDF head.

    Returns ``(terms, grads)`` where ``grads`` mirrors ``net.params``; with
    ``want_latent_grad`` a third item holds d(total)/d(latent).

    The input gradient ``J = df/dp`` is computed by a backward sweep, and
    the loss gradient is then pulled back through both that sweep and the
    forward pass.
    """
    if net.out_dim != 1:
        raise LossError("SDF losses need a single-output head")
    if len(batch) == 0:
        raise LossError("empty batch")
    act = net.act
    Ws, bs = net.weights, net.biases
    nh = len(Ws) - 1

    h, dfeats = network_input(net, batch.points, latent)
    hs, d1, d2 = [h], [], []
    for W, b in zip(Ws[:-1], bs[:-1]):
        s0, s1, s2 = act.with_derivatives(hs[-1] @ W.T + b)
        hs.append(s0)
        d1.append(s1)
        d2.append(s2)
    y = (hs[-1] @ Ws[-1].T + bs[-1])[:, 0]

    # backward sweep: g[l] = dy/dh_l, a[l] = dy/dz_{l+1}
    g = [None] * (nh + 1)
    a = [None] * nh
    g[nh] = np.broadcast_to(Ws[-1][0], hs[-1].shape)
    for l in range(nh, 0, -1):
        a[l - 1] = g[l] * d1[l - 1]
        g[l - 1] = a[l - 1] @ Ws[l - 1]
    npe = dfeats.shape[1]
    coord = net.posenc.coord_index()
    contrib = g[0][:, :npe] * dfeats
    J = np.stack([contrib[:, coord == c].sum(axis=1) for c in range(3)], axis=1)

    terms, dy, dJ = loss_terms(y, J, batch, w)
    dy, dJ = dy.astype(y.dtype), dJ.astype(y.dtype)

    dW = [np.zeros_like(W) for W in Ws]
    db = [np.zeros_like(b) for b in bs]

    # pull dJ back through the backward sweep
    gbar = np.zeros_like(g[0])
    gbar[:, :npe] = dJ[:, coord] * dfeats
    zbar_from_J = [None] * nh
    for l in range(1, nh + 1):
        dW[l - 1] += a[l - 1].T @ gbar
        abar = gbar @ Ws[l - 1].T
        zbar_from_J[l - 1] = abar * g[l] * d2[l - 1]
        gbar = abar * d1[l - 1]
    dW[-1][0] += gbar.sum(axis=0)

    # ordinary reverse pass through the forward computation
    ybar = dy[:, None]
    dW[-1] += ybar.T @ hs[-1]
    db[-1] += ybar.sum(axis=0)
    hbar = ybar @ Ws[-1]
    for l in range(nh, 0, -1):
        zbar = hbar * d1[l - 1] + zbar_from_J[l - 1]
        dW[l - 1] += zbar.T @ hs[l - 1]
        db[l - 1] += zbar.sum(axis=0)
        if l > 1 or want_latent_grad:
            hbar = zbar @ Ws[l - 1]
    grads = dW + db
    if want_latent_grad:
        dlatent = hbar[:, npe:].sum(axis=0) if net.latent_dim else None
        return terms, grads, dlatent
    return terms, grads


def udf_losses(net: ImplicitNet, batch: TrainingSet, latent=None) -> tuple[float, list]:
    """Mean absolute error over all samples and channels, with parameter gradients."""
    if batch.udf is None:
        raise LossError("batch has no UDF targets")
    if len(batch) == 0:
        raise LossError("empty batch")
    if batch.udf.shape[1] != net.out_dim:
        raise LossError("UDF channel count does not match the head")
    act = net.act
    h, _ = network_input(net, batch.points, latent)
    hs, zs = [h], []
    for W, b in zip(net.weights[:-1], net.biases[:-1]):
        z = hs[-1] @ W.T + b
        zs.append(z)
        hs.append(act(z))
    y = hs[-1] @ net.weights[-1].T + net.biases[-1]
    resid = y - batch.udf
    loss = float(np.abs(resid).mean())
    ybar = np.sign(resid) / resid.size
    dW = [None] * len(net.weights)
    db = [None] * len(net.biases)
    dW[-1] = ybar.T @ hs[-1]
    db[-1] = ybar.sum(axis=0)
    hbar = ybar @ net.weights[-1]
    for l in range(len(zs), 0, -1):
        zbar = hbar * act.d1(zs[l - 1])
        dW[l - 1] = zbar.T @ hs[l - 1]
        db[l - 1] = zbar.sum(axis=0)
        if l > 1:
            hbar = zbar @ net.weights[l - 1]
    return loss, dW + db


def evaluate_sdf_losses(net: ImplicitNet, batch: TrainingSet, w: LossWeights = LossWeights(),
                        latent: Optional[np.ndarray] = None) -> LossTerms:
    return sdf_losses(net, batch, w, latent)[0]
