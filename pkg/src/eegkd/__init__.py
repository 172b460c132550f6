"""Teacher-student distillation into a stacked bidirectional LSTM for
multichannel time-series classification."""

__version__ = "0.1.0"
