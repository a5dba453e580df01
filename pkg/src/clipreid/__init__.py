"""Two-stage prompt-anchored re-identification training at desk scale."""

__version__ = "0.1.0"
