"""Graph-ODE forecasting of station inflow/outflow on multi-relational graphs."""

from .config import RunConfig
from .graphs import RelationGraph, Selection, TriGraph
from .model import ModelConfig, ModelParams, forecast
from .training import TrainConfig, fit

__all__ = [
    "RunConfig", "RelationGraph", "Selection", "TriGraph",
    "ModelConfig", "ModelParams", "forecast", "TrainConfig", "fit",
]
__version__ = "0.1.0"
