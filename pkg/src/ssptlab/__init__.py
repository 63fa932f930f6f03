"""Stock-series pre-training, selection, backtesting, and simulation lab."""

__version__ = "0.1.0"
