"""Sparse-view deblurring radiance fields on a numpy autodiff tape."""

__version__ = "0.1.0"
