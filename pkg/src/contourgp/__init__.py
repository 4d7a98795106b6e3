"""Gaussian-process surrogates and sequential designs for contour (level-set) finding."""
from .acquisition import AcquisitionSpec, DomainSpec, optimize_acquisition
from .benchmarks import ExperimentConfig, macroreplicate, run_sequential
from .bermudan import BermudanConfig, macroreplicate_bermudan
from .gp_core import KernelParams, TrainingSet, build_gaussian_posterior, fit_gaussian_gp

__all__ = [
    "AcquisitionSpec",
    "BermudanConfig",
    "DomainSpec",
    "ExperimentConfig",
    "KernelParams",
    "TrainingSet",
    "build_gaussian_posterior",
    "fit_gaussian_gp",
    "macroreplicate",
    "macroreplicate_bermudan",
    "optimize_acquisition",
    "run_sequential",
]
