"""RoI-aware 3D localization + segmentation pipeline on CPU.

A compact U-Net-style network with a shared encoder, a coarse lesion
locator and an RoI-cropped decoder, built on a small numpy autodiff core,
plus static receptive-field/memory analysis, preprocessing, metrics and a
command-line pipeline over synthetic phantom volumes.
"""
from .volume import Scalar, ShapeError, Volume
from .tape import Tape, backward, grad_of

__version__ = "0.1.0"

__all__ = ["Volume", "Scalar", "ShapeError", "Tape", "backward", "grad_of", "__version__"]
