"""Static-graph reverse-mode engine on numpy arrays."""
from .autodiff import (GradientSet, backward, finite_diff_check, forward_eval,
                       forward_named, gradient_error, numeric_gradients)
from .graph import Graph, GraphBuilder, Node, Sym
from .ops import OPS, ShapeError
from .tensor import DTYPES, Tensor, as_array, resolve_dtype

__all__ = [
    "DTYPES", "GradientSet", "Graph", "GraphBuilder", "Node", "OPS",
    "ShapeError", "Sym", "Tensor", "as_array", "backward",
    "finite_diff_check", "forward_eval", "forward_named", "gradient_error",
    "numeric_gradients", "resolve_dtype",
]
