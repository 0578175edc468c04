"""Future-activity prediction from present feature vectors with multiple hypotheses and uncertainties."""

__version__ = "0.1.0"
