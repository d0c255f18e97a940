"""Demand estimation and counterfactual dynamic pricing for fare-class revenue management."""

__version__ = "0.1.0"

from .alpha import (  # noqa: E402
    AlphaTable,
    FullDynamic,
    IntermediateK,
    Numerics,
    Regime,
    StoppingTime,
    StoppingTimeM,
    Uniform,
    alpha_coefficient,
    expected_load,
)
from .demand import ArrivalShape, City, DemandPrimitives, TrainInstance  # noqa: E402
from .estimation import SalesPanel, estimate  # noqa: E402
from .synthetic import SyntheticConfig, generate  # noqa: E402

__all__ = [
    "AlphaTable",
    "ArrivalShape",
    "City",
    "DemandPrimitives",
    "FullDynamic",
    "IntermediateK",
    "Numerics",
    "Regime",
    "SalesPanel",
    "StoppingTime",
    "StoppingTimeM",
    "SyntheticConfig",
    "TrainInstance",
    "Uniform",
    "alpha_coefficient",
    "estimate",
    "expected_load",
    "generate",
]
