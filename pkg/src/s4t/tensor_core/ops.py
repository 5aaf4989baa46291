"""Primitive operations of the computation graph.

Each primitive carries a shape rule, a forward kernel and a vector-Jacobian
product. The set is deliberately small: matrix multiply, elementwise
arithmetic, rectifier, (log-)softmax, layer normalization, reductions,
patch extraction/reassembly, nearest-neighbor upsampling, concatenation,
slicing and the pure data movements (reshape/transpose). Attention and every
model block compose from these.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate a primitive's rule."""


Arrays = list  # list[np.ndarray]


@dataclass(frozen=True)
class OpDef:
    name: str
    infer: Callable[[dict, list[tuple]], tuple]
    fwd: Callable[[dict, Arrays], np.ndarray]
    # vjp(attrs, grad_out, inputs, output) -> per-input gradients (None = no flow)
    vjp: Optional[Callable[[dict, np.ndarray, Arrays, np.ndarray], list]]


OPS: dict[str, OpDef] = {}


def _register(op: OpDef) -> None:
    OPS[op.name] = op


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape its input had before broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_infer(attrs, shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {shapes[0]} with {shapes[1]}") from exc


# -- elementwise binary ------------------------------------------------------

_register(OpDef(
    "add", _broadcast_infer,
    lambda a, xs: xs[0] + xs[1],
    lambda a, g, xs, out: [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)],
))

_register(OpDef(
    "sub", _broadcast_infer,
    lambda a, xs: xs[0] - xs[1],
    lambda a, g, xs, out: [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)],
))

_register(OpDef(
    "mul", _broadcast_infer,
    lambda a, xs: xs[0] * xs[1],
    lambda a, g, xs, out: [_unbroadcast(g * xs[1], xs[0].shape),
                           _unbroadcast(g * xs[0], xs[1].shape)],
))

_register(OpDef(
    "div", _broadcast_infer,
    lambda a, xs: xs[0] / xs[1],
    lambda a, g, xs, out: [_unbroadcast(g / xs[1], xs[0].shape),
                           _unbroadcast(-g * out / xs[1], xs[1].shape)],
))


# -- elementwise unary -------------------------------------------------------

def _unary_infer(attrs, shapes):
    return shapes[0]


_register(OpDef("neg", _unary_infer, lambda a, xs: -xs[0],
                lambda a, g, xs, out: [-g]))
_register(OpDef("abs", _unary_infer, lambda a, xs: np.abs(xs[0]),
                lambda a, g, xs, out: [g * np.sign(xs[0])]))
_register(OpDef("square", _unary_infer, lambda a, xs: np.square(xs[0]),
                lambda a, g, xs, out: [g * (2.0 * xs[0])]))
_register(OpDef("sqrt", _unary_infer, lambda a, xs: np.sqrt(xs[0]),
                lambda a, g, xs, out: [g * (0.5 / out)]))
_register(OpDef("log", _unary_infer, lambda a, xs: np.log(xs[0]),
                lambda a, g, xs, out: [g / xs[0]]))
_register(OpDef("exp", _unary_infer, lambda a, xs: np.exp(xs[0]),
                lambda a, g, xs, out: [g * out]))
_register(OpDef("relu", _unary_infer, lambda a, xs: np.maximum(xs[0], 0),
                lambda a, g, xs, out: [g * (xs[0] > 0)]))


# -- matrix multiply ---------------------------------------------------------

def _matmul_infer(attrs, shapes):
    sa, sb = shapes
    if len(sa) < 2 or len(sb) < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {sa} @ {sb}")
    if sa[-1] != sb[-2]:
        raise ShapeError(f"matmul inner extents differ: {sa} @ {sb}")
    try:
        batch = np.broadcast_shapes(sa[:-2], sb[:-2])
    except ValueError as exc:
        raise ShapeError(f"matmul batch dims incompatible: {sa} @ {sb}") from exc
    return batch + (sa[-2], sb[-1])


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def _matmul_vjp(attrs, g, xs, out):
    a, b = xs
    ga = _unbroadcast(g @ _swap(b), a.shape)
    gb = _unbroadcast(_swap(a) @ g, b.shape)
    return [ga, gb]


_register(OpDef("matmul", _matmul_infer, lambda a, xs: xs[0] @ xs[1], _matmul_vjp))


# -- softmax family (last axis) ----------------------------------------------

def _softmax_fwd(attrs, xs):
    x = xs[0]
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    e /= e.sum(axis=-1, keepdims=True)
    return e


def _softmax_vjp(attrs, g, xs, out):
    return [out * (g - (g * out).sum(axis=-1, keepdims=True))]


_register(OpDef("softmax", _unary_infer, _softmax_fwd, _softmax_vjp))


def _log_softmax_fwd(attrs, xs):
    x = xs[0]
    shifted = x - x.max(axis=-1, keepdims=True)
    shifted -= np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted


def _log_softmax_vjp(attrs, g, xs, out):
    return [g - np.exp(out) * g.sum(axis=-1, keepdims=True)]


_register(OpDef("log_softmax", _unary_infer, _log_softmax_fwd, _log_softmax_vjp))


# -- layer normalization (last axis, no affine) ------------------------------

def _layer_norm_fwd(attrs, xs):
    x = xs[0]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt(np.square(xc).mean(axis=-1, keepdims=True) + attrs["eps"])
    return xc * inv


def _layer_norm_vjp(attrs, g, xs, out):
    x = xs[0]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt(np.square(xc).mean(axis=-1, keepdims=True) + attrs["eps"])
    gm = g.mean(axis=-1, keepdims=True)
    gym = (g * out).mean(axis=-1, keepdims=True)
    return [inv * (g - gm - out * gym)]


_register(OpDef("layer_norm", _unary_infer, _layer_norm_fwd, _layer_norm_vjp))


# -- reductions ---------------------------------------------------------------

def _norm_axes(attrs, ndim):
    axes = attrs["axes"]
    if axes is None:
        return tuple(range(ndim))
    return tuple(ax % ndim for ax in axes)


def _reduce_infer(attrs, shapes):
    s = shapes[0]
    axes = _norm_axes(attrs, len(s))
    if len(set(axes)) != len(axes) or any(ax >= len(s) for ax in axes):
        raise ShapeError(f"bad reduction axes {attrs['axes']} for shape {s}")
    if attrs["keepdims"]:
        return tuple(1 if i in axes else d for i, d in enumerate(s))
    return tuple(d for i, d in enumerate(s) if i not in axes)


def _reduce_restore(g, attrs, in_shape):
    axes = _norm_axes(attrs, len(in_shape))
    if not attrs["keepdims"]:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, in_shape)


def _sum_vjp(attrs, g, xs, out):
    return [_reduce_restore(g, attrs, xs[0].shape).copy()]


def _mean_vjp(attrs, g, xs, out):
    axes = _norm_axes(attrs, xs[0].ndim)
    count = int(np.prod([xs[0].shape[ax] for ax in axes])) or 1
    return [_reduce_restore(g, attrs, xs[0].shape) / count]


_register(OpDef("sum", _reduce_infer,
                lambda a, xs: xs[0].sum(axis=_norm_axes(a, xs[0].ndim) or None,
                                        keepdims=a["keepdims"]),
                _sum_vjp))
_register(OpDef("mean", _reduce_infer,
                lambda a, xs: xs[0].mean(axis=_norm_axes(a, xs[0].ndim) or None,
                                         keepdims=a["keepdims"]),
                _mean_vjp))


# -- patch extraction / reassembly / upsampling ------------------------------

def _patchify_infer(attrs, shapes):
    s = shapes[0]
    p = attrs["size"]
    if len(s) != 4:
        raise ShapeError(f"patchify expects (batch, H, W, C), got {s}")
    b, h, w, c = s
    if h % p or w % p:
        raise ShapeError(f"spatial extent {h}x{w} not divisible by patch size {p}")
    return (b, h // p, w // p, p * p * c)


def _patchify_fwd(attrs, xs):
    p = attrs["size"]
    b, h, w, c = xs[0].shape
    x = xs[0].reshape(b, h // p, p, w // p, p, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, h // p, w // p, p * p * c)


def _patchify_vjp(attrs, g, xs, out):
    p = attrs["size"]
    b, h, w, c = xs[0].shape
    g = g.reshape(b, h // p, w // p, p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return [g.reshape(b, h, w, c)]


_register(OpDef("patchify", _patchify_infer, _patchify_fwd, _patchify_vjp))


def _unpatchify_infer(attrs, shapes):
    s = shapes[0]
    p = attrs["size"]
    if len(s) != 4:
        raise ShapeError(f"unpatchify expects (batch, h, w, C), got {s}")
    b, h, w, c = s
    if c % (p * p):
        raise ShapeError(f"channel extent {c} not divisible by {p}x{p}")
    return (b, h * p, w * p, c // (p * p))


def _unpatchify_fwd(attrs, xs):
    p = attrs["size"]
    b, h, w, c = xs[0].shape
    x = xs[0].reshape(b, h, w, p, p, c // (p * p)).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h * p, w * p, c // (p * p))


def _unpatchify_vjp(attrs, g, xs, out):
    p = attrs["size"]
    b, h, w, c = xs[0].shape
    g = g.reshape(b, h, p, w, p, c // (p * p)).transpose(0, 1, 3, 2, 4, 5)
    return [g.reshape(b, h, w, c)]


_register(OpDef("unpatchify", _unpatchify_infer, _unpatchify_fwd, _unpatchify_vjp))


def _upsample_infer(attrs, shapes):
    s = shapes[0]
    if len(s) != 4:
        raise ShapeError(f"upsample_nearest expects (batch, h, w, C), got {s}")
    p = attrs["size"]
    return (s[0], s[1] * p, s[2] * p, s[3])


def _upsample_fwd(attrs, xs):
    p = attrs["size"]
    return xs[0].repeat(p, axis=1).repeat(p, axis=2)


def _upsample_vjp(attrs, g, xs, out):
    p = attrs["size"]
    b, h, w, c = xs[0].shape
    return [g.reshape(b, h, p, w, p, c).sum(axis=(2, 4))]


_register(OpDef("upsample_nearest", _upsample_infer, _upsample_fwd, _upsample_vjp))


# -- concatenation / slicing / data movement ---------------------------------

def _concat_infer(attrs, shapes):
    ax = attrs["axis"] % len(shapes[0])
    base = list(shapes[0])
    total = 0
    for s in shapes:
        if len(s) != len(base) or any(d != base[i] for i, d in enumerate(s) if i != ax):
            raise ShapeError(f"concat operands disagree off axis {ax}: {shapes}")
        total += s[ax]
    base[ax] = total
    return tuple(base)


def _concat_vjp(attrs, g, xs, out):
    ax = attrs["axis"] % xs[0].ndim
    sizes = [x.shape[ax] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return list(np.split(g, splits, axis=ax))


_register(OpDef("concat", _concat_infer,
                lambda a, xs: np.concatenate(xs, axis=a["axis"]),
                _concat_vjp))


def _slice_infer(attrs, shapes):
    s = list(shapes[0])
    ax = attrs["axis"] % len(s)
    start, stop = attrs["start"], attrs["stop"]
    if not (0 <= start < stop <= s[ax]):
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis {ax} of {shapes[0]}")
    s[ax] = stop - start
    return tuple(s)


def _slice_fwd(attrs, xs):
    ax = attrs["axis"] % xs[0].ndim
    idx = [slice(None)] * xs[0].ndim
    idx[ax] = slice(attrs["start"], attrs["stop"])
    return xs[0][tuple(idx)]


def _slice_vjp(attrs, g, xs, out):
    full = np.zeros_like(xs[0])
    ax = attrs["axis"] % xs[0].ndim
    idx = [slice(None)] * xs[0].ndim
    idx[ax] = slice(attrs["start"], attrs["stop"])
    full[tuple(idx)] = g
    return [full]


_register(OpDef("slice", _slice_infer, _slice_fwd, _slice_vjp))


def _reshape_infer(attrs, shapes):
    s = shapes[0]
    new = attrs["shape"]
    if int(np.prod(s)) != int(np.prod(new)):
        raise ShapeError(f"cannot reshape {s} to {new}")
    return tuple(new)


_register(OpDef("reshape", _reshape_infer,
                lambda a, xs: xs[0].reshape(a["shape"]),
                lambda a, g, xs, out: [g.reshape(xs[0].shape)]))


def _transpose_infer(attrs, shapes):
    s = shapes[0]
    perm = attrs["perm"]
    if sorted(perm) != list(range(len(s))):
        raise ShapeError(f"perm {perm} is not a permutation of rank {len(s)}")
    return tuple(s[p] for p in perm)


def _transpose_vjp(attrs, g, xs, out):
    inv = np.argsort(attrs["perm"])
    return [g.transpose(tuple(inv))]


_register(OpDef("transpose", _transpose_infer,
                lambda a, xs: xs[0].transpose(a["perm"]),
                _transpose_vjp))
