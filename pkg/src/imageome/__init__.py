"""Phylogeny-structured quantized embeddings."""
__version__ = "0.1.0"
