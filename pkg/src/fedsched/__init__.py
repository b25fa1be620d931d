"""Joint wireless/compute scheduling and hyper-parameter selection for federated learning."""

__version__ = "0.1.0"
