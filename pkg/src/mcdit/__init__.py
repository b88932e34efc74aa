"""Toy multi-conditional diffusion transformer.

A self-contained pixel-space implementation of a two-stream diffusion
transformer with branch-scoped joint attention, per-condition low-rank
adapters behind a one-hot type switch, rectified-flow training, and a
procedural multi-conditional dataset.
"""

__version__ = "0.1.0"
