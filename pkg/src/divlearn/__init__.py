"""Two-stage representation transfer learning on synthetic multitask data."""

__version__ = "0.1.0"
