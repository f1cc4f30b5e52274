"""Debiasing variational autoencoder for imbalanced facial-expression data, on a numpy autodiff core."""

__version__ = "0.1.0"
