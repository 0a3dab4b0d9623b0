"""Higher-order influence function estimators for doubly robust functionals."""

from hoifkit.model import (
    Dataset,
    FunctionalSpec,
    Observation,
    SmoothnessConfig,
    h_value,
    make_functional,
    residuals,
)

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FunctionalSpec",
    "Observation",
    "SmoothnessConfig",
    "h_value",
    "make_functional",
    "residuals",
]
