"""Slow-fast degradation inference lab.

Simulates run-to-failure trajectories of a degrading simply supported beam
under traffic and thermal loading, and trains/evaluates a hierarchical
controlled-differential-equation model that separates slow latent
degradation from fast operational dynamics, against a residual baseline.

Submodules are imported explicitly (``from hcdelab import beamsim``, ...);
the command-line entry point lives in :mod:`hcdelab.cli`.
"""

__version__ = "0.1.0"
