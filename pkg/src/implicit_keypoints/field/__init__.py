"""The neural field: positional encoding, sinusoidal MLP, losses and training."""

from .network import ImplicitNet, forward, forward_with_input_grad, siren_init
from .posenc import PosEncConfig, posenc
from .train import FitConfig, FitResult, TrainingDiverged, fit_sdf, fit_stacked_udf

__all__ = [
    "FitConfig",
    "FitResult",
    "ImplicitNet",
    "PosEncConfig",
    "TrainingDiverged",
    "fit_sdf",
    "fit_stacked_udf",
    "forward",
    "forward_with_input_grad",
    "posenc",
    "siren_init",
]
