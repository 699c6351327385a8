"""Scene-graph predicate classification with category encoders and shuffle fusion."""

__version__ = "0.1.0"
