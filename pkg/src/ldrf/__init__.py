"""Neuron pruning via layer decomposition and recomposition.

Pipeline: SVD-factorize each layer into an embedding and a pointwise
factor, prune output channels while compensating the lost information in
embedding space by per-layer gradient descent, then merge the factors
back into a slim network of the original depth.  A conventional
layer-by-layer least-squares pruner is included for comparison.
"""

from .errors import (
    DegenerateLayerError,
    DivergenceError,
    FormatError,
    InvalidArgumentError,
    LdrfError,
    UnsupportedStructureError,
)
from .netcore import LayerSpec, Network

__version__ = "0.1.0"

__all__ = [
    "DegenerateLayerError",
    "DivergenceError",
    "FormatError",
    "InvalidArgumentError",
    "LayerSpec",
    "LdrfError",
    "Network",
    "UnsupportedStructureError",
    "__version__",
]
