"""Tokenizers, the unified MDT model and its baselines."""
