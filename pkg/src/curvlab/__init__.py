"""Exact subsampled natural gradients, KFAC and FOOF on small MLPs."""

from .net import Network, BatchTrace, LabelSample, init_network, forward, backward
from .curvature import ImplicitCurvature, build_curvature, natural_gradient
from .optim import OptimizerConfig, make_optimizer

__version__ = "0.1.0"
