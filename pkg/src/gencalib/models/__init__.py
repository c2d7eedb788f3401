"""Camera models: generic B-spline grids, parametric baselines, synthetic ground truth."""

from .bspline import DomainError, bspline_surface_eval
from .generic import (
    CalibratedArea,
    CentralGenericModel,
    NoncentralGenericModel,
    ProjectionError,
    generic_from_dict,
    grid_size_for_resolution,
)
from .parametric import (
    CentralRadial,
    ModelDomainError,
    ParametricModel,
    Polynomial12,
    ThinPrismFisheye,
    parametric_from_dict,
    project_parametric,
)
from .synthetic import NoncentralWavyCamera, PinholeCamera, WavyCamera

__all__ = [
    "CalibratedArea",
    "CentralGenericModel",
    "CentralRadial",
    "DomainError",
    "ModelDomainError",
    "NoncentralGenericModel",
    "NoncentralWavyCamera",
    "ParametricModel",
    "PinholeCamera",
    "Polynomial12",
    "ProjectionError",
    "ThinPrismFisheye",
    "WavyCamera",
    "bspline_surface_eval",
    "generic_from_dict",
    "grid_size_for_resolution",
    "parametric_from_dict",
    "project_parametric",
]
