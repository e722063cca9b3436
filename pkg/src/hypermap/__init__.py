"""Unified CNN representations for settlement mapping on single-band overhead imagery."""

from .errors import FormatError, InputError, NumericError, ShapeError, SpecError, StateError
from .net import ArchitectureSpec, Network, TrainConfig, build_network, default_spec, reduced_spec

__version__ = "0.1.0"
