"""Video-text retrieval with masked visual modeling on a numpy autodiff core."""

__version__ = "0.1.0"
