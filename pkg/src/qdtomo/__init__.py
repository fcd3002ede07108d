"""Detector tomography of threshold single-photon detectors.

Estimates the external efficiency and the photon-number-resolved internal
efficiencies of a detector from click probabilities measured with attenuated
coherent light, by ensemble MCMC on an orthogonal-distance likelihood.
"""
from .likelihood import DataPoint, Dataset, ExperimentMeta, PriorSpec
from .model import CoherentInput, DetectorModel, click_probability, inverse_click_probability
from .sampler import Chain, PosteriorSummary, SamplerSettings, run_sampler, summarize

__version__ = "0.1.0"

__all__ = [
    "Chain",
    "CoherentInput",
    "DataPoint",
    "Dataset",
    "DetectorModel",
    "ExperimentMeta",
    "PosteriorSummary",
    "PriorSpec",
    "SamplerSettings",
    "click_probability",
    "inverse_click_probability",
    "run_sampler",
    "summarize",
]
