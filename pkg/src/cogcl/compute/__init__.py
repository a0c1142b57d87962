"""Numerical substrate: kernels, reverse-mode tape, parameters and Adam."""
from cogcl.compute.gradcheck import grad_check
from cogcl.compute.params import (
    CheckpointError,
    NonFiniteGradientError,
    ParameterStore,
    adam_step,
    load_checkpoint,
    save_checkpoint,
)
from cogcl.compute.tape import Tape, Var, diagnostics

__all__ = [
    "CheckpointError", "NonFiniteGradientError", "ParameterStore", "Tape", "Var",
    "adam_step", "diagnostics", "grad_check", "load_checkpoint", "save_checkpoint",
]
