"""Run configuration: one JSON document holding every hyper-parameter of a run.

Missing keys take their defaults, unknown keys are rejected. The sphere
radius lives at the top level only and is handed to sampling, fitting and
extraction from there, so the stages cannot disagree about it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

from .extraction import ExtractionConfig
from .field.losses import LossWeights
from .field.posenc import PosEncConfig
from .field.train import FitConfig
from .geometry import DEFAULT_RADIUS
from .keypoint_io import ValidationError, read_json, write_json
from .metrics import DEFAULT_THRESHOLDS
from .sampling import Box, SampleConfig


@dataclass(frozen=True)
class DatasetSection:
    n_shapes: int = 10
    k: int = 8
    # None means three radii, so default spheres never touch
    min_separation: Optional[float] = None
    keypoint_half: float = 0.85
    label_count: int = 10
    category: str = "synthetic"
    normalize_half: float = 0.85


@dataclass(frozen=True)
class SamplingSection:
    n_volume: int = 10000
    n_surface: int = 10000
    icosphere_level: int = 4
    half: float = 1.0


@dataclass(frozen=True)
class NetworkSection:
    widths: tuple = (256, 256, 256, 256)
    omega: float = 30.0
    bands: int = 6
    include_raw: bool = True
    activation: str = "sine"
    loss_weights: tuple = (1.0, 0.1, 0.05)
    epochs: int = 120
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 2048
    resample_per_epoch: bool = True
    compute_dtype: str = "float32"
    udf_epochs: int = 60


@dataclass(frozen=True)
class ExtractionSection:
    grid_resolution: int = 128
    grid_size: float = 1.0 / 32.0
    epsilon: float = 0.01
    n_vote: int = 80
    n_max: int = 10
    max_merge_rounds: int = 10
    voting: str = "annulus"
    density_normalize: bool = False
    split_peaks: bool = True
    peak_ratio: float = 0.5


@dataclass(frozen=True)
class MetricsSection:
    thresholds: tuple = DEFAULT_THRESHOLDS
    one_to_one: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    radius: float = DEFAULT_RADIUS
    dataset: DatasetSection = field(default_factory=DatasetSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    extraction: ExtractionSection = field(default_factory=ExtractionSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)
    input: str = ""
    output: str = ""

    def __post_init__(self):
        problems = []
        if self.radius <= 0:
            problems.append("radius must be positive")
        if self.dataset.k < 1 or self.dataset.n_shapes < 1:
            problems.append("dataset.k and dataset.n_shapes must be positive")
        if self.dataset.label_count and self.dataset.label_count < self.dataset.k:
            problems.append("dataset.label_count must be 0 or at least dataset.k")
        if self.network.activation not in ("sine", "relu", "selu", "linear"):
            problems.append(f"unknown activation {self.network.activation!r}")
        if len(self.network.loss_weights) != 3:
            problems.append("network.loss_weights needs three entries")
        if self.network.compute_dtype not in ("float32", "float64"):
            problems.append("network.compute_dtype must be float32 or float64")
        if min(self.network.epochs, self.network.batch_size) < 1:
            problems.append("network.epochs and network.batch_size must be positive")
        if self.extraction.grid_resolution < 2:
            problems.append("extraction.grid_resolution must be at least 2")
        ts = list(self.metrics.thresholds)
        if not ts or min(ts) < 0 or ts != sorted(ts):
            problems.append("metrics.thresholds must be nonnegative and ascending")
        if problems:
            raise ValidationError("invalid config: " + "; ".join(problems), problems)

    @property
    def min_separation(self) -> float:
        sep = self.dataset.min_separation
        return 3.0 * self.radius if sep is None else sep

    def sample_config(self, seed: int) -> SampleConfig:
        s = self.sampling
        return SampleConfig(s.n_volume, s.n_surface, Box.cube(s.half), s.icosphere_level, seed)

    def fit_config(self, seed: int, epochs: Optional[int] = None, **overrides) -> FitConfig:
        n = self.network
        cfg = FitConfig(
            widths=tuple(n.widths), omega=n.omega, posenc=PosEncConfig(n.bands, n.include_raw),
            activation=n.activation, weights=LossWeights(*n.loss_weights),
            epochs=n.epochs if epochs is None else epochs, lr=n.lr, beta1=n.beta1, beta2=n.beta2,
            batch_size=n.batch_size, sampling=self.sample_config(seed),
            resample_per_epoch=n.resample_per_epoch, seed=seed, compute_dtype=n.compute_dtype,
        )
        return dataclasses.replace(cfg, **overrides)

    def extraction_config(self, radius: Optional[float] = None) -> ExtractionConfig:
        e = self.extraction
        return ExtractionConfig(e.grid_size, self.radius if radius is None else radius, e.epsilon,
                                e.n_vote, e.n_max, e.max_merge_rounds, e.voting,
                                e.density_normalize, e.split_peaks, e.peak_ratio)

    @property
    def grid_box(self) -> Box:
        return Box.cube(self.sampling.half)

    def to_dict(self) -> dict:
        return _to_dict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_dict(cls, d, "")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def _to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = _to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _coerce(default, value, where: str):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float) or default is None:
        if value is None:
            ok = default is None
        else:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(
            isinstance(x, (int, float)) and not isinstance(x, bool) for x in value)
        if ok:
            kind = type(default[0]) if default else float
            ok = all(kind(x) == x for x in value)
            value = tuple(kind(x) for x in value)
    else:
        ok = False
    if not ok:
        raise ValidationError(f"config key {where!r} has an invalid value {value!r}")
    return value


def _from_dict(cls, d, prefix: str):
    if not isinstance(d, dict):
        raise ValidationError(f"config section {prefix or '<root>'!r} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ValidationError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    base = cls()
    kwargs = {}
    for name, value in d.items():
        default = getattr(base, name)
        where = prefix + name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _from_dict(type(default), value, where + ".")
        else:
            kwargs[name] = _coerce(default, value, where)
    return cls(**kwargs)


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(read_json(path))


def save_config(path, cfg: RunConfig) -> None:
    write_json(path, cfg.to_dict())
