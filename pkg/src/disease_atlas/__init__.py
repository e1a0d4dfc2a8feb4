"""Joint longitudinal and time-to-event forecasting with a multitask recurrent network."""

__version__ = "0.1.0"
