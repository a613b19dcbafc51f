"""Distance-density neural field toolkit.

A distance field whose gradient magnitude encodes volume density, plus the
machinery around it: a jet-based differentiation engine, a volume renderer
with the auxiliary-gradient and blank-region penalties, a brute-force
verification oracle on analytic scenes, a training pipeline, and a camera
localizer driven by pseudo-correspondence reprojection.
"""

__version__ = "0.1.0"
