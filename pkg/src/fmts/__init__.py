"""Rectified-flow generation, imputation and forecasting for multichannel time series."""

__version__ = "0.1.0"
