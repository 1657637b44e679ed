"""Differentiable depth, ego-motion, and residual 3D translation recovery
from monocular frame pairs, with a procedural scene generator for exact
ground-truth verification."""

__version__ = "0.1.0"
