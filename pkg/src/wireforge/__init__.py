"""wireforge: multi-view wire art synthesis by gradient descent.

Optimizes a set of 3D piecewise-cubic Bezier wires so that their orthographic
projections onto three mutually orthogonal planes each match a 2D target, with
a minimum-spanning-tree regularizer pulling the wires into one connectable
structure.
"""

__version__ = "0.1.0"
