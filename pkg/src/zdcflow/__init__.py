"""Flow-matching surrogates for zero degree calorimeter responses."""

__version__ = "0.1.0"
