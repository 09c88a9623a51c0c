"""Multi-view graph convolutional crowd-flow forecasting."""
