"""Per-shape fitting of SDF and stacked-UDF heads."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from ..geometry import KeypointSet, SphereField
from ..sampling import SampleConfig, TrainingSet, make_training_set, make_udf_training_set
from .losses import LossTerms, LossWeights, sdf_losses, udf_losses
from .network import DEFAULT_OMEGA, DEFAULT_WIDTHS, ImplicitNet, siren_init
from .optim import AdamState, adam_step
from .posenc import PosEncConfig

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class FitConfig:
    widths: tuple = DEFAULT_WIDTHS
    omega: float = DEFAULT_OMEGA
    posenc: PosEncConfig = field(default_factory=PosEncConfig)
    activation: str = "sine"
    weights: LossWeights = field(default_factory=LossWeights)
    epochs: int = 300
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 2048
    sampling: SampleConfig = field(default_factory=SampleConfig)
    resample_per_epoch: bool = False
    seed: int = 0
    # dtype of the per-step passes; weights and Adam moments stay float64
    compute_dtype: str = "float32"


@dataclass
class FitResult:
    net: ImplicitNet
    history: list = field(default_factory=list)
    initial_loss: float = float("nan")

    @property
    def final_loss(self) -> float:
        return self.history[-1] if self.history else float("nan")


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, size):
        yield order[s:s + size]


def _check(value: float) -> None:
    if not np.isfinite(value):
        raise TrainingDiverged("training diverged")


def _run(net: ImplicitNet, data_fn, step_fn, cfg: FitConfig) -> FitResult:
    rng = np.random.default_rng(cfg.seed + 1)
    opt = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    data = data_fn(0)
    result = FitResult(net, initial_loss=step_fn(data)[0])
    for epoch in range(cfg.epochs):
        if cfg.resample_per_epoch and epoch:
            data = data_fn(epoch)
        total, count = 0.0, 0
        for idx in _batches(len(data), cfg.batch_size, rng):
            loss, grads = step_fn(data.subset(idx))
            _check(loss)
            adam_step(net.params, grads, opt)
            total += loss * len(idx)
            count += len(idx)
        result.history.append(total / count)
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            log.debug("epoch %d loss %.6g", epoch, result.history[-1])
    return result


def new_net(cfg: FitConfig, out_dim: int = 1, latent_dim: int = 0) -> ImplicitNet:
    net = ImplicitNet(cfg.widths, out_dim, cfg.omega, cfg.posenc, cfg.activation, latent_dim)
    return siren_init(net, cfg.seed)


def fit_sdf(field_: SphereField, cfg: FitConfig = FitConfig(),
            init: Optional[ImplicitNet] = None) -> FitResult:
    net = init.copy() if init is not None else new_net(cfg)

    def data_fn(epoch: int) -> TrainingSet:
        return make_training_set(field_, replace(cfg.sampling, seed=cfg.sampling.seed + epoch))

    def step_fn(batch: TrainingSet):
        terms, grads = sdf_losses(net.astype(cfg.compute_dtype), batch, cfg.weights)
        return terms.total, [g.astype(np.float64) for g in grads]

    return _run(net, data_fn, step_fn, cfg)


def fit_stacked_udf(keypoints: KeypointSet, cfg: FitConfig = FitConfig(), radius: float = 0.08,
                    init: Optional[ImplicitNet] = None) -> FitResult:
    if not keypoints.labeled:
        raise ValueError("unlabeled keypoints")
    net = init.copy() if init is not None else new_net(cfg, out_dim=keypoints.label_count)

    def data_fn(epoch: int) -> TrainingSet:
        return make_udf_training_set(keypoints, replace(cfg.sampling, seed=cfg.sampling.seed + epoch),
                                     radius)

    def step_fn(batch: TrainingSet):
        loss, grads = udf_losses(net.astype(cfg.compute_dtype), batch)
        return loss, [g.astype(np.float64) for g in grads]

    return _run(net, data_fn, step_fn, cfg)


def sdf_terms(net: ImplicitNet, data: TrainingSet, weights: LossWeights = LossWeights()) -> LossTerms:
    return sdf_losses(net, data, weights)[0]
