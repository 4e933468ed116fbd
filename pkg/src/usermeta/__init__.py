"""Meta-learning for fast adaptation of human-motion predictors to new users."""

__version__ = "0.1.0"
