"""Desk-scale one-shot federated learning with tiny Vision Transformers.

Clients train locally and upload once; the server synthesizes images by
sparse model inversion of the client models, relabels low-information
tokens with the client ensemble, and distills a global model. Diagnostics
measure the gradient-norm and stability quantities the approach relies on.
"""

from .tensor import Tensor, Graph, backward_pass, finite_difference_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "Graph",
    "backward_pass",
    "finite_difference_check",
    "no_grad",
    "__version__",
]
