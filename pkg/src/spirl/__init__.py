"""Salient-patch reinforcement learning at desk scale.

A small masked autoencoder is pre-trained on game frames; patches it cannot
predict from their neighbours are treated as salient, and a transformer
aggregates their embeddings for a Q-learning agent.
"""

__version__ = "0.1.0"
