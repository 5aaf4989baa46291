"""Dense tensor values exchanged with the computation-graph engine.

Internally everything is plain numpy; ``Tensor`` is the immutable wrapper
used at the public boundary (graph bindings, outputs, gradients). Only
32-bit and 64-bit reals are supported.
"""
from __future__ import annotations

from typing import Union

import numpy as np

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}

DTypeLike = Union[str, np.dtype, type]


def resolve_dtype(dtype: DTypeLike) -> np.dtype:
    """Map 'f32'/'f64' (or a numpy float dtype) to the numpy dtype."""
    if isinstance(dtype, str):
        if dtype not in DTYPES:
            raise ValueError(f"unsupported dtype {dtype!r}; expected 'f32' or 'f64'")
        return DTYPES[dtype]
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


class Tensor:
    """Immutable dense array of reals.

    The backing array is copied on construction and marked read-only, so a
    Tensor can be shared freely between concurrent evaluations.
    """

    __slots__ = ("_data",)

    def __init__(self, data, dtype: DTypeLike | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = np.array(arr, dtype=resolve_dtype(dtype))
        elif arr.dtype == np.float32:
            arr = arr.copy()
        else:
            arr = np.array(arr, dtype=np.float64)
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def all_finite(self) -> bool:
        return bool(np.isfinite(self._data).all())

    def __array__(self, dtype=None, copy=None):
        if dtype is not None:
            return self._data.astype(dtype)
        return self._data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name})"


def as_array(value, dtype: np.dtype | None = None) -> np.ndarray:
    """Unwrap a Tensor or array-like to ndarray, optionally casting."""
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if dtype is not None and arr.dtype != dtype:
        arr = arr.astype(dtype)
    return arr
