"""Bilevel generative learning: hypergradient estimators, solvers and a toy low-light pipeline."""

__version__ = "0.1.0"
