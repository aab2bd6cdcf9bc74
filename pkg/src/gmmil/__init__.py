"""Gaussian-mixture multiple instance learning."""

from .bmle import EmOptions, MomentInit, ProvidedInit, RandomRestart, fit_bmle
from .imle import fit_imle
from .model import BagDataset, FitResult, ModelParams, validate
from .simulate import SimConfig, default_config, simulate
from .smle import fit_smle

__version__ = "0.1.0"

__all__ = [
    "BagDataset", "EmOptions", "FitResult", "ModelParams", "MomentInit", "ProvidedInit",
    "RandomRestart", "SimConfig", "default_config", "fit_bmle", "fit_imle", "fit_smle",
    "simulate", "validate",
]
