"""Deformable point-cloud hand rendering via differentiable 3D point splatting."""

__version__ = "0.1.0"
