"""Gridded-LPV model predictive airpath control with feedforward.

Rate-based feedback MPC, look-up-table and MPC feedforward, a synthetic
two-state engine surrogate, and a closed-loop simulation harness.
"""

__version__ = "0.1.0"
