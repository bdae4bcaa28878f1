"""Partial optimal transport alignment of 3D volume embeddings with frozen 2D embeddings."""

__version__ = "0.1.0"

from .errors import PotAlignError  # noqa: E402,F401  (re-exported)
