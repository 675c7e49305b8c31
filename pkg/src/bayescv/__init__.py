"""Cross-validation, WAIC and related Bayesian criteria on tempered posteriors."""

__version__ = "0.1.0"
