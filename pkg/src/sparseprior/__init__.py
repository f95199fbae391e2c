"""Learning analysis and synthesis sparse priors by bi-level optimisation."""

__version__ = "0.1.0"
