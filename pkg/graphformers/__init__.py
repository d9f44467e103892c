"""GNN-nested transformers for textual-graph representation learning."""

__version__ = "0.1.0"
