"""Uncertainty-guided Gaussian splatting at desk scale.

A numpy implementation of differentiable 3D Gaussian splatting in which a
small MLP predicts a view-dependent uncertainty per Gaussian.  The
uncertainty gates opacity and drives a concrete-relaxation soft dropout.
Every backward pass is written by hand and checked against finite
differences in the test suite.
"""

from ugsplat.scene import Camera, GaussianSet, ImageBuffer, Scene

__version__ = "0.1.0"

__all__ = ["Camera", "GaussianSet", "ImageBuffer", "Scene", "__version__"]
