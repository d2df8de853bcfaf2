"""Simulation and analysis of electron-heralded photon detection streams."""

__version__ = "0.1.0"

from .events import EventStream, PixelHitStream  # noqa: F401
from .model import CouplingSpec, SidebandPopulations, SpectrumParams  # noqa: F401
from .simgen import ChannelConfig, ElectronChainConfig, ExperimentConfig  # noqa: F401
