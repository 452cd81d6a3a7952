"""Learned convex regularizers and iterated network Tikhonov reconstruction for sparse-view CT."""
from .network import NetworkSpec, ParamSet, Regularizer, load_checkpoint, save_checkpoint
from .solvers import GeometricSchedule, InnerGDConfig, SolveResult, inett_solve, nett_solve, sit_solve
from .tomo import ProjectionOperator, build_projector
from .unet import UnetConfig, build_convex_unet, build_regularizer, build_unet

__version__ = "0.1.0"
