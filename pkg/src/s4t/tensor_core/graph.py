"""Static computation graphs.

A graph is a Wengert list: nodes are appended in the order they are built,
so the list itself is a valid topological order for evaluation and its
reverse a valid order for the backward sweep. Shapes are inferred while the
graph is constructed; a shape mismatch fails at build time with the node
name in the message, not at run time.

``GraphBuilder`` hands out ``Sym`` handles that overload the arithmetic
operators, so model code reads like numpy while recording the graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .ops import OPS, ShapeError


@dataclass(frozen=True)
class Node:
    idx: int
    op: str                      # "param" | "input" | "const" | primitive name
    name: Optional[str]          # leaf name, or an auto label for interior nodes
    inputs: tuple[int, ...]
    attrs: dict
    shape: tuple[int, ...]

    @property
    def is_leaf(self) -> bool:
        return self.op in ("param", "input", "const")


class Graph:
    """Immutable list of nodes plus leaf and output lookup tables."""

    def __init__(self, nodes: Sequence[Node], outputs: Optional[dict] = None):
        self.nodes = tuple(nodes)
        self.outputs: dict[str, int] = dict(outputs or {})
        self.params: dict[str, int] = {}
        self.inputs: dict[str, int] = {}
        self.consts: dict[int, np.ndarray] = {}
        for n in self.nodes:
            if n.op == "param":
                self.params[n.name] = n.idx
            elif n.op == "input":
                self.inputs[n.name] = n.idx
            elif n.op == "const":
                self.consts[n.idx] = n.attrs["value"]

    def __len__(self) -> int:
        return len(self.nodes)

    def shape_of(self, idx: int) -> tuple[int, ...]:
        return self.nodes[idx].shape

    def describe(self, idx: int) -> str:
        n = self.nodes[idx]
        label = n.name if n.name else f"{n.op}#{n.idx}"
        return f"{label}{list(n.shape)}"


class Sym:
    """Handle to a graph node during construction, with operator sugar."""

    __slots__ = ("builder", "idx")

    def __init__(self, builder: "GraphBuilder", idx: int):
        self.builder = builder
        self.idx = idx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.builder._nodes[self.idx].shape

    def _lift(self, other) -> "Sym":
        if isinstance(other, Sym):
            return other
        return self.builder.const(np.asarray(other, dtype=np.float64))

    def __add__(self, other):
        return self.builder.apply("add", [self, self._lift(other)])

    def __radd__(self, other):
        return self._lift(other).__add__(self)

    def __sub__(self, other):
        return self.builder.apply("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        return self.builder.apply("mul", [self, self._lift(other)])

    def __rmul__(self, other):
        return self._lift(other).__mul__(self)

    def __truediv__(self, other):
        return self.builder.apply("div", [self, self._lift(other)])

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __matmul__(self, other):
        return self.builder.apply("matmul", [self, self._lift(other)])

    def __neg__(self):
        return self.builder.apply("neg", [self])

    def reshape(self, *shape) -> "Sym":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self.builder.apply("reshape", [self], shape=tuple(int(s) for s in shape))

    def transpose(self, *perm) -> "Sym":
        if len(perm) == 1 and isinstance(perm[0], (tuple, list)):
            perm = tuple(perm[0])
        return self.builder.apply("transpose", [self], perm=tuple(int(p) for p in perm))

    def sum(self, axes=None, keepdims=False) -> "Sym":
        return self.builder.apply("sum", [self], axes=_axes_tuple(axes), keepdims=keepdims)

    def mean(self, axes=None, keepdims=False) -> "Sym":
        return self.builder.apply("mean", [self], axes=_axes_tuple(axes), keepdims=keepdims)


def _axes_tuple(axes):
    if axes is None:
        return None
    if isinstance(axes, int):
        return (axes,)
    return tuple(int(ax) for ax in axes)


class GraphBuilder:
    """Records nodes and infers shapes; finalize() freezes into a Graph."""

    def __init__(self):
        self._nodes: list[Node] = []
        self._names: set[str] = set()
        self._outputs: dict[str, int] = {}

    def _add(self, op: str, name: Optional[str], inputs: tuple[int, ...],
             attrs: dict, shape: tuple[int, ...]) -> Sym:
        node = Node(len(self._nodes), op, name, inputs, attrs, tuple(int(s) for s in shape))
        self._nodes.append(node)
        return Sym(self, node.idx)

    def _leaf(self, op: str, name: str, shape) -> Sym:
        if name in self._names:
            raise ValueError(f"duplicate leaf name {name!r}")
        self._names.add(name)
        return self._add(op, name, (), {}, tuple(int(s) for s in shape))

    def param(self, name: str, shape) -> Sym:
        """Trainable leaf; value supplied per call through a ParamStore."""
        return self._leaf("param", name, shape)

    def input(self, name: str, shape) -> Sym:
        """Non-trainable leaf bound at evaluation time (data, masks, labels)."""
        return self._leaf("input", name, shape)

    def const(self, value) -> Sym:
        arr = np.asarray(value, dtype=np.float64)
        return self._add("const", None, (), {"value": arr}, arr.shape)

    def apply(self, op: str, inputs: Iterable[Sym], **attrs) -> Sym:
        if op not in OPS:
            raise KeyError(f"unknown primitive {op!r}")
        syms = list(inputs)
        idxs = tuple(s.idx for s in syms)
        shapes = [self._nodes[i].shape for i in idxs]
        try:
            out_shape = OPS[op].infer(attrs, shapes)
        except ShapeError as exc:
            ctx = ", ".join(self._describe(i) for i in idxs)
            raise ShapeError(f"{op}({ctx}): {exc}") from exc
        return self._add(op, None, idxs, attrs, out_shape)

    def _describe(self, idx: int) -> str:
        n = self._nodes[idx]
        label = n.name if n.name else f"{n.op}#{n.idx}"
        return f"{label}{list(n.shape)}"

    def output(self, name: str, sym: Sym) -> Sym:
        """Give a node a stable name for named-output evaluation."""
        if name in self._outputs:
            raise ValueError(f"duplicate output name {name!r}")
        self._outputs[name] = sym.idx
        return sym

    def finalize(self) -> Graph:
        return Graph(self._nodes, self._outputs)

    # convenience wrappers so model code avoids raw apply() strings

    def abs(self, x: Sym) -> Sym:
        return self.apply("abs", [x])

    def square(self, x: Sym) -> Sym:
        return self.apply("square", [x])

    def sqrt(self, x: Sym) -> Sym:
        return self.apply("sqrt", [x])

    def log(self, x: Sym) -> Sym:
        return self.apply("log", [x])

    def exp(self, x: Sym) -> Sym:
        return self.apply("exp", [x])

    def relu(self, x: Sym) -> Sym:
        return self.apply("relu", [x])

    def softmax(self, x: Sym) -> Sym:
        return self.apply("softmax", [x])

    def log_softmax(self, x: Sym) -> Sym:
        return self.apply("log_softmax", [x])

    def layer_norm(self, x: Sym, eps: float = 1e-5) -> Sym:
        return self.apply("layer_norm", [x], eps=float(eps))

    def patchify(self, x: Sym, size: int) -> Sym:
        return self.apply("patchify", [x], size=int(size))

    def unpatchify(self, x: Sym, size: int) -> Sym:
        return self.apply("unpatchify", [x], size=int(size))

    def upsample_nearest(self, x: Sym, size: int) -> Sym:
        return self.apply("upsample_nearest", [x], size=int(size))

    def concat(self, xs: Sequence[Sym], axis: int) -> Sym:
        return self.apply("concat", list(xs), axis=int(axis))

    def slice_axis(self, x: Sym, axis: int, start: int, stop: int) -> Sym:
        return self.apply("slice", [x], axis=int(axis), start=int(start), stop=int(stop))
