"""Registration of shapes carrying points and unit normals.

Shapes are compared through L2 distances between kernel density estimates
built with Gaussian kernels on positions and von Mises-Fisher (or Dirac)
kernels on normals. Rotations and thin-plate splines are estimated by an
annealed quasi-Newton search.
"""

from .costs import CorrespondenceSet, CostSpec, cost_u, cost_value, cost_x, cost_xu
from .errors import DirregError, RegistrationError, ValidationError
from .geometry import OrientedPointSet, bounding_box, normalize_to_unit_box, subsample
from .kernels import KernelParams, log_c3, log_cd
from .optimize import AnnealingSchedule, CorrespondenceOptions, OptimizeReport, register
from .transforms import Rotation2D, Rotation3D, Tps, apply_to_normals, apply_to_points, interpolate

__version__ = "0.1.0"

__all__ = [
    "AnnealingSchedule",
    "CorrespondenceOptions",
    "CorrespondenceSet",
    "CostSpec",
    "DirregError",
    "KernelParams",
    "OptimizeReport",
    "OrientedPointSet",
    "RegistrationError",
    "Rotation2D",
    "Rotation3D",
    "Tps",
    "ValidationError",
    "apply_to_normals",
    "apply_to_points",
    "bounding_box",
    "cost_u",
    "cost_value",
    "cost_x",
    "cost_xu",
    "interpolate",
    "log_c3",
    "log_cd",
    "normalize_to_unit_box",
    "register",
    "subsample",
]
