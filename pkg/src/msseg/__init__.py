"""msseg: variational multi-phase image segmentation.

A library and CLI around one relaxed piecewise-smooth segmentation energy,
solved three ways: single-grid alternating minimization, FAS multigrid
V-cycles, and an unrolled trainable network with exact reverse-mode
gradients.
"""

__version__ = "0.1.0"
