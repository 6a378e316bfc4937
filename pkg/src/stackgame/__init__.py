"""Nested gradient descent ascent for min-max problems with coupled constraints,
policy-gradient training for zero-sum Markov Stackelberg games, and a reach-avoid
pursuit game with an evaluation harness."""
from ._backend import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
