"""Generative convolution layers, a small autodiff engine and GAN tooling."""
from .errors import (AuditError, ContractError, DimensionError, GConvLabError,
                     NonFiniteError, NormalizationError, TrainingError)
from .tensor import Tape, Tensor, backward, grad_check

__version__ = "0.1.0"
