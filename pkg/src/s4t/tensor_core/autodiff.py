"""Evaluation and reverse-mode differentiation of static graphs.

``forward_eval`` walks the node list once and returns every intermediate
value; ``backward`` sweeps the same list in reverse accumulating adjoints.
Because the node list is already topologically ordered there is no graph
search in either direction.

``numeric_gradients`` and ``finite_diff_check`` provide the independent
check: central differences evaluated entirely in float64, compared against
the analytic gradients with a per-tensor normalized max error
``max|a - n| / max(max|a|, max|n|, 1e-12)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .graph import Graph, Sym
from .ops import OPS, ShapeError
from .tensor import Tensor, resolve_dtype


def _idx_of(graph: Graph, ref) -> int:
    if isinstance(ref, Sym):
        return ref.idx
    if isinstance(ref, (int, np.integer)):
        return int(ref)
    if isinstance(ref, str):
        try:
            return graph.outputs[ref]
        except KeyError:
            raise KeyError(f"no output named {ref!r}") from None
    idx = getattr(ref, "idx", None)
    if idx is None:
        raise TypeError(f"expected node reference, got {type(ref).__name__}")
    return int(idx)


def _bound_value(bindings: dict, name: str) -> np.ndarray:
    try:
        v = bindings[name]
    except KeyError:
        raise KeyError(f"no binding for leaf {name!r}") from None
    if isinstance(v, Tensor):
        return v.data
    return np.asarray(v)


def forward_eval(graph: Graph, bindings: Optional[dict] = None, dtype=None,
                 check_finite: bool = True, *, inputs: Optional[dict] = None,
                 params: Optional[dict] = None) -> list:
    """Evaluate every node; returns the list of values indexed by node id.

    Leaf values come from ``bindings`` or from the ``inputs``/``params``
    dicts (they are merged; either style works). The whole evaluation runs
    in one dtype: ``dtype`` ('f32'/'f64') when given, otherwise the dtype
    of the first parameter leaf (falling back to the first input leaf, then
    float64). With ``check_finite`` any non-finite node value raises
    ``FloatingPointError`` naming the node.
    """
    if inputs or params:
        bindings = {**(bindings or {}), **(inputs or {}), **(params or {})}
    elif bindings is None:
        bindings = {}
    if dtype is not None:
        dt = resolve_dtype(dtype)
    else:
        dt = None
        for table in (graph.params, graph.inputs):
            for name in table:
                leaf_dt = _bound_value(bindings, name).dtype
                if leaf_dt == np.float32:
                    dt = np.dtype(np.float32)
                break
            if dt is not None:
                break
        if dt is None:
            dt = np.dtype(np.float64)
    vals: list = [None] * len(graph)
    with np.errstate(all="ignore"):
        for node in graph.nodes:
            if node.op in ("param", "input"):
                v = _bound_value(bindings, node.name)
                if tuple(v.shape) != node.shape:
                    raise ShapeError(
                        f"binding for {node.name!r} has shape {v.shape}, "
                        f"graph expects {node.shape}")
                if v.dtype != dt:
                    v = v.astype(dt)
            elif node.op == "const":
                v = node.attrs["value"]
                if v.dtype != dt:
                    v = v.astype(dt)
            else:
                xs = [vals[i] for i in node.inputs]
                v = OPS[node.op].fwd(node.attrs, xs)
            if check_finite and not np.all(np.isfinite(v)):
                raise FloatingPointError(
                    f"non-finite value at node {graph.describe(node.idx)}")
            vals[node.idx] = v
    return vals


def forward_named(graph: Graph, bindings: Optional[dict] = None, dtype=None,
                  check_finite: bool = True, **kw) -> dict:
    """forward_eval, but returns only the graph's named outputs."""
    vals = forward_eval(graph, bindings, dtype=dtype,
                        check_finite=check_finite, **kw)
    return {name: vals[idx] for name, idx in graph.outputs.items()}


@dataclass
class GradientSet:
    """Gradients keyed by leaf name, with reachability flags.

    A leaf the loss does not depend on gets an all-zero gradient and
    ``reached[name] == False``; callers relying on structural detachment
    can assert on ``unreachable()`` instead of testing for zeros.
    """
    grads: dict
    reached: dict

    def __getitem__(self, name: str) -> np.ndarray:
        return self.grads[name]

    def __contains__(self, name: str) -> bool:
        return name in self.grads

    def unreachable(self) -> list:
        return sorted(n for n, r in self.reached.items() if not r)


def backward(graph: Graph, values, loss, wrt: Optional[Iterable[str]] = None
             ) -> GradientSet:
    """Reverse sweep from a scalar node.

    ``values`` is the list returned by forward_eval, or a bindings dict
    (the forward pass then runs here first). ``wrt`` selects leaf names
    (params by default). Gradients match the dtype the forward pass ran in.
    """
    if isinstance(values, dict):
        values = forward_eval(graph, values)
    lidx = _idx_of(graph, loss)
    lnode = graph.nodes[lidx]
    if lnode.shape != ():
        raise ValueError(
            f"backward target must be scalar, got {graph.describe(lidx)}")
    if wrt is None:
        names = list(graph.params)
    else:
        names = list(wrt)
    leaf_idx = {}
    for name in names:
        if name in graph.params:
            leaf_idx[name] = graph.params[name]
        elif name in graph.inputs:
            leaf_idx[name] = graph.inputs[name]
        else:
            raise KeyError(f"no leaf named {name!r}")

    adj: dict = {lidx: np.ones((), dtype=values[lidx].dtype)}
    with np.errstate(all="ignore"):
        for node in reversed(graph.nodes[: lidx + 1]):
            if node.is_leaf:
                continue
            g = adj.pop(node.idx, None)
            if g is None:
                continue
            xs = [values[i] for i in node.inputs]
            gs = OPS[node.op].vjp(node.attrs, g, xs, values[node.idx])
            for i, gi in zip(node.inputs, gs):
                if gi is None:
                    continue
                if i in adj:
                    adj[i] = adj[i] + gi
                else:
                    adj[i] = gi

    grads, reached = {}, {}
    for name, idx in leaf_idx.items():
        g = adj.get(idx)
        if g is None:
            grads[name] = np.zeros_like(values[idx])
            reached[name] = False
        else:
            grads[name] = np.asarray(g, dtype=values[idx].dtype)
            reached[name] = True
    return GradientSet(grads, reached)


def _f64_bindings(graph: Graph, bindings: dict) -> dict:
    out = {}
    for name in list(graph.params) + list(graph.inputs):
        out[name] = np.array(_bound_value(bindings, name), dtype=np.float64)
    return out


def numeric_gradients(graph: Graph, bindings: dict, loss,
                      wrt: Optional[Iterable[str]] = None,
                      step: float = 1e-5) -> dict:
    """Central-difference gradients, evaluated entirely in float64."""
    if not 0.0 < step <= 1e-2:
        raise ValueError(f"step must lie in (0, 1e-2], got {step}")
    lidx = _idx_of(graph, loss)
    names = list(wrt) if wrt is not None else list(graph.params)
    work = _f64_bindings(graph, bindings)

    def loss_at() -> float:
        vals = forward_eval(graph, work, dtype="f64", check_finite=False)
        v = float(vals[lidx])
        if not np.isfinite(v):
            raise FloatingPointError("non-finite loss at perturbed point")
        return v

    out = {}
    for name in names:
        v = work[name]
        g = np.zeros_like(v)
        flat_v, flat_g = v.ravel(), g.ravel()
        for j in range(v.size):
            orig = flat_v[j]
            flat_v[j] = orig + step
            fp = loss_at()
            flat_v[j] = orig - step
            fm = loss_at()
            flat_v[j] = orig
            flat_g[j] = (fp - fm) / (2.0 * step)
        out[name] = g
    return out


def gradient_error(analytic: dict, numeric: dict) -> float:
    """Max over tensors of normalized infinity-norm disagreement."""
    worst = 0.0
    for name, n in numeric.items():
        a = np.asarray(analytic[name], dtype=np.float64)
        scale = max(float(np.max(np.abs(a), initial=0.0)),
                    float(np.max(np.abs(n), initial=0.0)), 1e-12)
        err = float(np.max(np.abs(a - n), initial=0.0)) / scale
        worst = max(worst, err)
    return worst


def finite_diff_check(graph: Graph, bindings: dict, loss,
                      wrt: Optional[Iterable[str]] = None,
                      step: float = 1e-5) -> float:
    """Compare analytic float64 gradients against central differences.

    Returns the worst per-tensor normalized error. For a 32-bit check,
    run backward at 'f32' yourself and compare with numeric_gradients
    through gradient_error; the reference side is always float64.
    """
    work = _f64_bindings(graph, bindings)
    vals = forward_eval(graph, work, dtype="f64", check_finite=True)
    gset = backward(graph, vals, loss, wrt=wrt)
    num = numeric_gradients(graph, work, loss, wrt=wrt, step=step)
    return gradient_error(gset.grads, num)
