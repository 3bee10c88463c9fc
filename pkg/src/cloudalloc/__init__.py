"""Cloud resource allocation for deadline-constrained vehicular tasks."""

__version__ = "0.1.0"
