"""Physics-informed learned dynamics and model-predictive attitude control for a
reaction-wheel spacecraft."""

__version__ = "0.1.0"
