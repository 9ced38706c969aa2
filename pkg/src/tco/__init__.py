"""Test-time constrained optimization for multiview reconstruction, in numpy.

A toy multiview transformer predicts per-view depth, confidence, pose and
intrinsics.  At test time its LoRA adapters are optimized so the outputs
agree with known priors and with each other, via a differentiable 2D
Gaussian surfel renderer.
"""
__version__ = "0.1.0"
