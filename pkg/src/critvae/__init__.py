"""Multimodal VAE recommender with keyphrase explanations and critiquing."""

__version__ = "0.1.0"
