"""Dual-view attention BEV feature generation at desk scale."""

__version__ = "0.1.0"

from . import baselines, config, geometry, heads, kernel, synth, trainer  # noqa: F401
