"""Component freezing and parameter-movement analysis for continued training of LSTM translation models."""

__version__ = "0.1.0"
