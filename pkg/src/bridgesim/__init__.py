"""Coarse-grained simulation of spin dynamics under classical stochastic control noise.

The package propagates quantum states on a coarse time grid.  Noise
trajectories are sampled only at the coarse grid points; the unresolved
high-frequency noise content between grid points is integrated out
analytically, conditioned on the sampled values, and enters through a
second-order noise propagator attached to each coarse segment.
"""

__version__ = "0.1.0"

from . import analysis, circuits, cli, coarse_grain, config, liouville, stochastic

__all__ = [
    "analysis",
    "circuits",
    "cli",
    "coarse_grain",
    "config",
    "liouville",
    "stochastic",
    "__version__",
]
