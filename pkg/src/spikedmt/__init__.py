"""Simulation and analysis toolkit for the non-symmetric spiked matrix-tensor model."""

from .errors import CapacityError, ConfigurationError, DimensionError, DivergenceError
from .model import (Dimensions, EstimateSet, Metrics, ModelParams, PlantedInstance,
                    PlantedSignals, contract_tensor, generate_observations,
                    make_instance, overlaps_and_mse, sample_planted)

__version__ = "0.1.0"

__all__ = [
    "CapacityError", "ConfigurationError", "DimensionError", "DivergenceError",
    "Dimensions", "EstimateSet", "Metrics", "ModelParams", "PlantedInstance",
    "PlantedSignals", "contract_tensor", "generate_observations", "make_instance",
    "overlaps_and_mse", "sample_planted",
]
