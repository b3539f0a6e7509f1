"""Attribute-centered metric learning for sketch-photo retrieval."""

__version__ = "0.1.0"

from attrcenter.autodiff import DiffTensor, Tape, backward, gradcheck

__all__ = ["DiffTensor", "Tape", "backward", "gradcheck", "__version__"]
