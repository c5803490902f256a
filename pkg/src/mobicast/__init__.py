"""mobicast: forecasting daily epidemic case counts from mobility graphs."""

__version__ = "0.1.0"
