"""Self-explainable two-tower social recommender with ego-path explanations."""

__version__ = "0.1.0"
