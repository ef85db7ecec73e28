"""Lipschitz-regularized surrogates for transferable adversarial examples."""

__version__ = "0.1.0"
