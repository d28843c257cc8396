"""Rankformer: a graph encoder whose layers follow gradient steps of a
pairwise ranking objective, with training, evaluation and verification
tooling for implicit-feedback recommendation."""

__version__ = "0.1.0"

from .graph import InteractionGraph, build_graph, split_dataset  # noqa: E402
from .layers import RankformerConfig, forward, rankformer_layer  # noqa: E402

__all__ = [
    "__version__",
    "InteractionGraph",
    "RankformerConfig",
    "build_graph",
    "forward",
    "rankformer_layer",
    "split_dataset",
]
