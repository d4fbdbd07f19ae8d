"""Next-day POI visit forecasting with prompt-based sequence-to-sequence models."""

__version__ = "0.1.0"
