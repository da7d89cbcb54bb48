"""Structure-embedding attention for point clouds, at desk scale.

The package provides a small float64 autodiff core, point-cloud geometry
kernels (voxelization, farthest-point sampling, grid virtual-key
interpolation), displacement-keyed attention units, a miniature two-stage
3D detection network, and an experiment harness with a CLI.
"""

from .autodiff import Tensor, Tape, backward, grad_check, no_grad
from .optim import Adam, OptimizerState, adam_step

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "no_grad",
    "Adam",
    "OptimizerState",
    "adam_step",
]

__version__ = "0.1.0"
