"""Simulator and verification harness for two-layer ReLU patch-network training.

Minibatch SGD and sharpness-aware minimization on a signal-plus-noise patch
data model, with exact tracking of the signal/noise weight decomposition,
structural-invariant checkers, and phase-transition grid experiments.
"""

__version__ = "0.1.0"
