"""Losses for source training and test-time adaptation, two comparison
baselines, and the masked-prediction triangle-inequality check.

Each loss exists twice: as a graph builder (used inside the model, so it is
differentiable) and as a plain numpy function with the same formula. The
test suite pins the two routes against each other.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax as _np_log_softmax
from scipy.special import softmax as _np_softmax

from .model.masking import MaskPlan, empty_plan
from .model.tasks import TaskSpec

VEC_EPS = 1e-12
# heads normalize raw activations that can pass near zero; a larger eps
# bounds the gradient there (||dnorm|| <= 1/sqrt(eps))
HEAD_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Loss mixing weights; the test-time weight is deliberately small."""
    lambda_tbs_train: float = 1.0
    lambda_tp_train: float = 1.0
    lambda_tbs_test: float = 0.01

    def __post_init__(self):
        for name in ("lambda_tbs_train", "lambda_tp_train", "lambda_tbs_test"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")


@dataclass
class SourceStats:
    """Per-layer channel activation statistics recorded on source data."""
    layers: dict = field(default_factory=dict)   # name -> (mu, sd) arrays

    def __post_init__(self):
        for name, (mu, sd) in self.layers.items():
            if np.any(np.asarray(sd) < 0):
                raise ValueError(f"negative std in layer {name!r}")

    def names(self) -> list:
        return list(self.layers)


# -- graph-side builders -------------------------------------------------

def normalize_sym(b, v, eps: float = VEC_EPS):
    """Unit vectors along the last axis, safe at zero."""
    norm = b.sqrt(b.square(v).sum(axes=(-1,), keepdims=True) + eps)
    return v / norm


def build_task_loss(b, spec: TaskSpec, pred, target):
    """Scalar loss node: pred is the raw head output, target is a dense
    label field (one-hot for categorical tasks)."""
    if spec.kind == "categorical-map":
        lsm = b.log_softmax(pred)
        return -((lsm * target).sum(axes=(-1,))).mean()
    if spec.kind == "scalar-map":
        return b.abs(pred - target).mean()
    cos = (normalize_sym(b, pred) * normalize_sym(b, target)).sum(axes=(-1,))
    return (1.0 - cos).mean()


def build_entropy(b, logits):
    """Mean per-pixel Shannon entropy of softmax scores."""
    lsm = b.log_softmax(logits)
    return -((b.exp(lsm) * lsm).sum(axes=(-1,))).mean()


# -- numpy-side reference implementations --------------------------------

def one_hot(indices: np.ndarray, n_classes: int) -> np.ndarray:
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("categorical targets must be class indices")
    if idx.min(initial=0) < 0 or idx.max(initial=0) >= n_classes:
        raise ValueError(
            f"class index out of range [0, {n_classes}): "
            f"min {idx.min()}, max {idx.max()}")
    return np.eye(n_classes, dtype=np.float64)[idx]


def _np_normalize(v: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.square(v).sum(axis=-1, keepdims=True) + VEC_EPS)
    return v / norm


def task_loss(spec: TaskSpec, pred: np.ndarray, target: np.ndarray) -> float:
    """Per-task supervision: cross-entropy / L1 / one-minus-cosine.

    Categorical targets are class-index maps; continuous targets match the
    prediction shape (scalar maps may omit the trailing channel axis).
    """
    pred = np.asarray(pred, dtype=np.float64)
    if spec.kind == "categorical-map":
        t = one_hot(target, spec.n_classes)
        lsm = _np_log_softmax(pred, axis=-1)
        return float(-np.mean((lsm * t).sum(axis=-1)))
    target = np.asarray(target, dtype=np.float64)
    if spec.kind == "scalar-map":
        if target.shape == pred.shape[:-1]:
            target = target[..., None]
        return float(np.mean(np.abs(pred - target)))
    cos = (_np_normalize(pred) * _np_normalize(target)).sum(axis=-1)
    return float(np.mean(1.0 - cos))


def loss_train(specs: list, preds_main: dict, preds_tp: dict,
               preds_tbs: dict, targets: dict, weights: LossWeights) -> float:
    """Weighted total: main + tbs + tp summed per-task losses."""
    main = sum(task_loss(s, preds_main[s.name], targets[s.name]) for s in specs)
    tp = sum(task_loss(s, preds_tp[s.name], targets[s.name]) for s in specs)
    tbs = sum(task_loss(s, preds_tbs[s.name], targets[s.name]) for s in specs)
    return float(main + weights.lambda_tbs_train * tbs
                 + weights.lambda_tp_train * tp)


def pseudo_targets(specs: list, preds_main: dict) -> dict:
    """Main predictions as constants: argmax maps for categorical tasks,
    raw arrays otherwise."""
    out = {}
    for s in specs:
        p = np.asarray(preds_main[s.name])
        if s.kind == "categorical-map":
            out[s.name] = p.argmax(axis=-1)
        else:
            out[s.name] = p.copy()
    return out


def loss_ttt(specs: list, preds_tbs: dict, preds_main: dict,
             weights: LossWeights) -> float:
    """Adaptation loss: TBS outputs against detached main predictions."""
    targets = pseudo_targets(specs, preds_main)
    total = sum(task_loss(s, preds_tbs[s.name], targets[s.name])
                for s in specs)
    return float(weights.lambda_tbs_test * total)


def loss_entropy_baseline(specs: list, preds_main: dict) -> float:
    """Mean per-pixel prediction entropy, summed over categorical tasks."""
    cats = [s for s in specs if s.kind == "categorical-map"]
    if not cats:
        raise ValueError("entropy objective needs a categorical task")
    total = 0.0
    for s in cats:
        lsm = _np_log_softmax(np.asarray(preds_main[s.name], dtype=np.float64),
                              axis=-1)
        total += float(-np.mean((np.exp(lsm) * lsm).sum(axis=-1)))
    return total


def loss_actalign_baseline(live: SourceStats, src: SourceStats) -> float:
    """L1 distance between live and source activation statistics."""
    if live.names() != src.names():
        raise ValueError(
            f"layer mismatch: {live.names()} vs {src.names()}")
    total = 0.0
    for name in src.names():
        mu_l, sd_l = live.layers[name]
        mu_s, sd_s = src.layers[name]
        total += float(np.abs(np.asarray(mu_l) - np.asarray(mu_s)).sum())
        total += float(np.abs(np.asarray(sd_l) - np.asarray(sd_s)).sum())
    return total


def label_bindings(specs: list, labels: dict, prefix: str = "label",
                   dtype=np.float32) -> dict:
    """Dense float label fields keyed for graph inputs.

    Categorical labels arrive as class-index maps and leave one-hot;
    scalar maps gain a trailing channel axis when missing.
    """
    out = {}
    for s in specs:
        v = labels[s.name]
        if s.kind == "categorical-map":
            v = one_hot(v, s.n_classes)
        else:
            v = np.asarray(v)
            if s.kind == "scalar-map" and v.ndim == 3:
                v = v[..., None]
        out[f"{prefix}.{s.name}"] = np.ascontiguousarray(v, dtype=dtype)
    return out


def pseudo_bindings(specs: list, preds_main: dict, dtype=np.float32) -> dict:
    """Detached main predictions as adaptation targets."""
    return label_bindings(specs, pseudo_targets(specs, preds_main),
                          prefix="pseudo", dtype=dtype)


# -- masked-prediction bound ----------------------------------------------

def canonical_prediction(spec: TaskSpec, arr: np.ndarray) -> np.ndarray:
    """Comparable dense array: probabilities / raw / unit vectors."""
    arr = np.asarray(arr, dtype=np.float64)
    if spec.kind == "categorical-map":
        return _np_softmax(arr, axis=-1)
    if spec.kind == "unit-vector-map":
        return _np_normalize(arr)
    return arr


def canonical_target(spec: TaskSpec, arr: np.ndarray) -> np.ndarray:
    if spec.kind == "categorical-map":
        return one_hot(arr, spec.n_classes)
    arr = np.asarray(arr, dtype=np.float64)
    if spec.kind == "scalar-map" and arr.ndim == 3:
        arr = arr[..., None]
    if spec.kind == "unit-vector-map":
        arr = _np_normalize(arr)
    return arr


def l1_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Per-sample mean absolute difference, averaged over the batch.

    A true metric on arrays, so the triangle inequality holds exactly."""
    return float(np.mean(np.abs(np.asarray(a) - np.asarray(b))))


@dataclass(frozen=True)
class BoundRecord:
    lhs: float
    rhs_term1: float
    rhs_term2: float
    holds: bool


def bound_check(model, params: dict, batch: dict, plan: MaskPlan,
                tol: float = 1e-9) -> BoundRecord:
    """Full-latent prediction error vs masked error plus full-masked gap.

    lhs sums, over tasks, the distance between the joint predictor's
    unmasked output and ground truth; the right side decomposes through
    the masked output. Holds for any metric distance by the triangle
    inequality; evaluating it validates the implementation.
    """
    x = batch["image"]
    labels = batch["labels"]
    full = model.tbs_outputs(params, x, empty_plan(model.grid_hw(x.shape[1:3]),
                                                   len(model.tasks)))
    masked = model.tbs_outputs(params, x, plan)
    lhs = rhs1 = rhs2 = 0.0
    for spec in model.tasks:
        pf = canonical_prediction(spec, full[spec.name])
        pm = canonical_prediction(spec, masked[spec.name])
        gt = canonical_target(spec, labels[spec.name])
        lhs += l1_distance(pf, gt)
        rhs1 += l1_distance(pm, gt)
        rhs2 += l1_distance(pf, pm)
    return BoundRecord(lhs, rhs1, rhs2, bool(lhs <= rhs1 + rhs2 + tol))
