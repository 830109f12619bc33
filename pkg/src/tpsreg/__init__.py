"""Structure-guided thin-plate-spline initialisation for deformable CT registration."""
from .errors import (ConfigError, ContractError, DegenerateInputError, FormatError, StageError, TpsRegError,
                     UnsupportedFormatError)
from .tps import ControlPointSet, DisplacementField, TpsModel, tps_evaluate, tps_field_on_grid, tps_fit
from .volume import GridGeometry, IntensityKind, Volume

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DegenerateInputError", "FormatError", "StageError", "TpsRegError",
    "UnsupportedFormatError", "ControlPointSet", "DisplacementField", "TpsModel", "tps_evaluate",
    "tps_field_on_grid", "tps_fit", "GridGeometry", "IntensityKind", "Volume",
]
