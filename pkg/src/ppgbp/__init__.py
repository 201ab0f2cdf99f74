"""Blood-pressure estimation from single-channel PPG windows with a CNN-LSTM."""

__version__ = "0.1.0"
