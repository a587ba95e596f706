"""Event-enhanced knowledge graph embeddings with a convolutional triple scorer."""

__version__ = "0.1.0"
