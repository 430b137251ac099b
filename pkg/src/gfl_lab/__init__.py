"""Numeric laboratory for joint classification-quality losses and
distributional bounding-box regression on a small synthetic detection
benchmark.

Everything is plain NumPy with hand-derived gradients; there is no autodiff
anywhere. The test suite cross-checks every analytic gradient against central
finite differences.
"""

__version__ = "0.1.0"
