"""Expansion-mechanism encoder-decoder image captioning on a numpy autodiff core."""

__version__ = "0.1.0"
