"""Source training loop, online adaptation protocol, and evaluation.

Adaptation is online: each incoming batch is evaluated, then updated for
K steps of plain gradient descent on the configured objective, and the
parameters carry over to the next batch. Metrics are logged after every
step so the step-synchronization measures have full trajectories to
work with.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model.masking import STRATEGIES, make_mask, mask_bindings
from .model.net import S4TModel
from .model.tasks import TaskSpec, task_by_name
from .objectives import (LossWeights, SourceStats, label_bindings,
                         pseudo_bindings, task_loss)
from .optim import OptimConfig, Optimizer
from .tensor_core import backward, forward_eval

OBJECTIVES = ("s4t", "entropy", "actalign", "none")
MAX_ADAPT_STEPS = 40
TRAIN_MASK_STRATEGY = "random"
TRAIN_MASK_RATIO = 0.7


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite training loss at step {step}"
                         + (f": {detail}" if detail else ""))
        self.step = step


class AdaptationDiverged(RuntimeError):
    """Carries the trajectory collected before the loss went non-finite."""

    def __init__(self, trajectory, batch: int, step: int, detail: str = ""):
        super().__init__(f"non-finite adaptation loss at batch {batch} "
                         f"step {step}" + (f": {detail}" if detail else ""))
        self.trajectory = trajectory
        self.batch = batch
        self.step = step


@dataclass(frozen=True)
class AdaptConfig:
    objective: str = "s4t"
    k_steps: int = 40
    scope: str = "encoder+proj+tbs"
    mask_strategy: str = "random"
    mask_ratio: float = 0.7
    single_task: str = ""  # empty: multi-task adaptation loss
    seed: int = 0

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if not 0 <= self.k_steps <= MAX_ADAPT_STEPS:
            raise ValueError(
                f"steps per batch must be in [0, {MAX_ADAPT_STEPS}]")
        if self.mask_strategy not in STRATEGIES:
            raise ValueError(f"unknown mask strategy {self.mask_strategy!r}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValueError("mask ratio must be in [0, 1]")
        if self.single_task and self.objective == "actalign":
            raise ValueError(
                "single-task mode has no meaning for activation alignment")


@dataclass(frozen=True)
class Record:
    step: int        # global tau, strictly increasing over the whole run
    batch: int
    inner_step: int  # 0 is the pre-update evaluation of the arriving batch
    metrics: dict    # task name -> value
    losses: dict     # {"total": supervised main loss, "ttt": objective}


@dataclass
class Trajectory:
    tasks: list
    records: list = field(default_factory=list)

    def append(self, rec: Record) -> None:
        if set(rec.metrics) != set(self.tasks):
            raise ValueError("record does not cover all configured tasks")
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError("global step must increase")
        self.records.append(rec)

    def metric_series(self, task: str) -> np.ndarray:
        return np.array([r.metrics[task] for r in self.records])

    def loss_series(self, name: str) -> np.ndarray:
        return np.array([r.losses[name] for r in self.records])

    def n_batches(self) -> int:
        return len({r.batch for r in self.records})

    def inner_series(self, task: str) -> np.ndarray:
        """Metric averaged over batches at each within-batch step; this is
        the per-task adaptation trajectory y_i(tau)."""
        inner = sorted({r.inner_step for r in self.records})
        out = []
        for s in inner:
            vals = [r.metrics[task] for r in self.records if r.inner_step == s]
            out.append(float(np.mean(vals)))
        return np.array(out)


# -- task metrics -----------------------------------------------------------

def miou(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> float:
    """Mean IoU over the classes present in the ground truth."""
    ious = []
    for c in range(n_classes):
        gt_c = gt == c
        if not gt_c.any():
            continue
        pred_c = pred == c
        inter = np.logical_and(pred_c, gt_c).sum()
        union = pred_c.sum() + gt_c.sum() - inter
        ious.append(inter / union)
    if not ious:
        raise ValueError("ground truth contains no classes")
    return float(np.mean(ious))


def rmse(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if gt.shape != pred.shape:
        gt = gt.reshape(pred.shape)
    return float(np.sqrt(np.mean((pred - gt) ** 2)))


def angular_error_deg(pred: np.ndarray, gt: np.ndarray) -> float:
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    p = p / np.maximum(np.linalg.norm(p, axis=-1, keepdims=True), 1e-12)
    g = g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
    dot = np.clip((p * g).sum(axis=-1), -1.0, 1.0)
    return float(np.degrees(np.arccos(dot)).mean())


def batch_metrics(specs: list, preds: dict, labels: dict) -> dict:
    out = {}
    for s in specs:
        p = np.asarray(preds[s.name])
        g = labels[s.name]
        if s.metric == "miou":
            out[s.name] = miou(p.argmax(axis=-1), g, s.n_classes)
        elif s.metric == "rmse":
            out[s.name] = rmse(p[..., 0], g.reshape(p[..., 0].shape))
        else:
            out[s.name] = angular_error_deg(p, g)
    return out


def evaluate(model: S4TModel, params: dict, dataset, split: str = "val",
             batch_size: int = 8) -> dict:
    """Whole-split metrics: IoU counts pool globally, errors pool by pixel."""
    sp = dataset.splits[split]
    n = len(sp)
    if n == 0:
        raise ValueError(f"split {split!r} is empty")
    h, w = sp.images.shape[1:3]
    batch_size = min(batch_size, n)
    inter = {s.name: np.zeros(s.n_classes) for s in model.tasks
             if s.metric == "miou"}
    union = {k: np.zeros_like(v) for k, v in inter.items()}
    gt_seen = {k: np.zeros_like(v) for k, v in inter.items()}
    sq = {s.name: 0.0 for s in model.tasks if s.metric == "rmse"}
    ang = {s.name: 0.0 for s in model.tasks if s.metric == "angular_deg"}
    count = 0
    for i in range(n // batch_size):
        batch = dataset.batch_at(split, batch_size, i)
        preds = _main_predictions(model, params, batch["image"])
        labels = batch["labels"]
        b = batch["image"].shape[0]
        count += b
        for s in model.tasks:
            p = preds[s.name]
            g = labels[s.name]
            if s.metric == "miou":
                pc = p.argmax(axis=-1)
                for c in range(s.n_classes):
                    pred_c, gt_c = pc == c, g == c
                    i_c = np.logical_and(pred_c, gt_c).sum()
                    inter[s.name][c] += i_c
                    union[s.name][c] += pred_c.sum() + gt_c.sum() - i_c
                    gt_seen[s.name][c] += gt_c.sum()
            elif s.metric == "rmse":
                sq[s.name] += float(((p[..., 0] - g.reshape(p[..., 0].shape))
                                     ** 2).sum())
            else:
                ang[s.name] += angular_error_deg(p, g) * b
    px = count * h * w
    out = {}
    for s in model.tasks:
        if s.metric == "miou":
            present = gt_seen[s.name] > 0
            out[s.name] = float(np.mean(inter[s.name][present]
                                        / union[s.name][present]))
        elif s.metric == "rmse":
            out[s.name] = float(np.sqrt(sq[s.name] / px))
        else:
            out[s.name] = ang[s.name] / count
    return out


def _main_predictions(model: S4TModel, params: dict, x: np.ndarray) -> dict:
    mg = model.graph("light", *x.shape[:3])
    vals = forward_eval(mg.graph, {**model.zero_bindings(mg), **params,
                                   "x": x})
    return {t.name: mg.value(vals, f"main.{t.name}") for t in model.tasks}


# -- source training ---------------------------------------------------------

def _mask_seed(seed: int, batch: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, batch, step])
               .generate_state(1)[0])


def _stat_layers(model: S4TModel) -> list:
    return [f"enc.s{k + 1}" for k in range(len(model.cfg.stage_strides))]


def train_source(model: S4TModel, dataset, optim: OptimConfig,
                 weights: LossWeights, seed: int,
                 mask_strategy: str = TRAIN_MASK_STRATEGY,
                 mask_ratio: float = TRAIN_MASK_RATIO,
                 mask_ratio_jitter: bool = False,
                 log_every: int = 50):
    """Minimize the weighted total loss on the source split.

    With mask_ratio_jitter the per-iteration ratio is drawn uniformly from
    [0, mask_ratio], which keeps the synchronizer's reconstruction quality
    a non-decreasing function of the ratio instead of a funnel around the
    single ratio it trained on. mask_ratio stays the upper bound, so the
    non-overlap feasibility limit is unchanged.

    Returns (params, SourceStats, log); the statistics come from one final
    pass over the train split with the trained parameters.
    """
    sp = dataset.splits["train"]
    h, w = sp.images.shape[1:3]
    bs = optim.batch_size
    n_batches = dataset.n_batches("train", bs)
    if n_batches == 0:
        raise ValueError("train split smaller than one batch")
    params = model.init_params(seed, spatial=(h, w))
    mg = model.graph("full", bs, h, w)
    names = [t.name for t in model.tasks]
    grid = model.grid_hw((h, w))
    opt = Optimizer(optim)
    base = {**model.zero_bindings(mg),
            "lam.tbs": np.float32(weights.lambda_tbs_train),
            "lam.tp": np.float32(weights.lambda_tp_train)}
    log = []
    order = None
    for it in range(optim.iterations):
        epoch, pos = divmod(it, n_batches)
        if pos == 0:
            order = dataset.epoch_order("train", seed + epoch)
        batch = dataset.batch_at("train", bs, pos, order)
        bind = {**base, **params, "x": batch["image"]}
        bind.update(label_bindings(model.tasks, batch["labels"]))
        if model.cfg.use_masking and model.cfg.use_tbs:
            ms = _mask_seed(seed, it, 0)
            r = mask_ratio
            if mask_ratio_jitter:
                r = float(np.random.default_rng([ms, 1]).uniform(0, mask_ratio))
            plan = make_mask(mask_strategy, r, grid, len(model.tasks), ms)
            bind.update(mask_bindings(plan, names))
        try:
            vals = forward_eval(mg.graph, bind)
        except FloatingPointError as e:
            raise TrainingDiverged(it, str(e)) from None
        total = float(mg.value(vals, "loss.total"))
        if not np.isfinite(total):
            raise TrainingDiverged(it)
        if it % log_every == 0 or it == optim.iterations - 1:
            log.append({"step": it, "total": total,
                        "main": float(mg.value(vals, "loss.main")),
                        "tbs": float(mg.value(vals, "loss.tbs_label")),
                        "tp": float(mg.value(vals, "loss.tp"))})
        grads = backward(mg.graph, vals, "loss.total")
        params = opt.step(params, grads, list(params))
    stats = source_statistics(model, params, dataset, split="train",
                              batch_size=bs)
    return params, stats, log


def source_statistics(model: S4TModel, params: dict, dataset,
                      split: str = "train", batch_size: int = 8
                      ) -> SourceStats:
    """Per-channel encoder activation statistics averaged over batches."""
    sp = dataset.splits[split]
    h, w = sp.images.shape[1:3]
    mg = model.graph("light", batch_size, h, w)
    layers = _stat_layers(model)
    mus = {k: [] for k in layers}
    sds = {k: [] for k in layers}
    nb = dataset.n_batches(split, batch_size)
    if nb == 0:
        raise ValueError(f"split {split!r} smaller than one batch")
    for i in range(nb):
        batch = dataset.batch_at(split, batch_size, i)
        vals = forward_eval(mg.graph, {**model.zero_bindings(mg), **params,
                                       "x": batch["image"]})
        for k in layers:
            mus[k].append(mg.value(vals, f"stats.mu.{k}"))
            sds[k].append(mg.value(vals, f"stats.sd.{k}"))
    return SourceStats({k: (np.mean(mus[k], axis=0), np.mean(sds[k], axis=0))
                        for k in layers})


# -- online adaptation --------------------------------------------------------

def adapt_online(model: S4TModel, params: dict, dataset,
                 cfg: AdaptConfig, optim: OptimConfig,
                 weights: LossWeights = None,
                 source_stats: SourceStats = None,
                 batch_size: int = 8) -> Trajectory:
    """Run the online protocol over the target stream.

    Per batch: log metrics at arrival, then K objective steps, logging
    after each; parameters persist across batches. Objective "none" only
    evaluates. Raises AdaptationDiverged (carrying the partial trajectory)
    on a non-finite loss.
    """
    weights = weights or LossWeights()
    if cfg.objective == "actalign" and source_stats is None:
        raise ValueError("activation alignment needs source statistics")
    if cfg.single_task:
        task_by_name(model.tasks, cfg.single_task)
    if cfg.objective == "entropy" and not any(
            t.kind == "categorical-map" for t in model.tasks):
        raise ValueError("entropy objective needs a categorical task")
    scope = model.scope_params(cfg.scope)
    params = dict(params)
    names = [t.name for t in model.tasks]
    traj = Trajectory(tasks=names)
    opt = Optimizer(optim)
    tau = 1

    sp = dataset.splits["stream"]
    h, w = sp.images.shape[1:3]
    grid = model.grid_hw((h, w))
    light = model.graph("light", batch_size, h, w)
    full = model.graph("full", batch_size, h, w) if cfg.objective == "s4t" \
        else None
    if cfg.objective == "s4t":
        ttt_out = f"loss.ttt.{cfg.single_task}" if cfg.single_task \
            else "loss.ttt"
    elif cfg.objective == "entropy":
        ttt_out = "loss.entropy"
    elif cfg.objective == "actalign":
        ttt_out = "loss.actalign"
    stat_bind = {}
    if cfg.objective == "actalign":
        for k in _stat_layers(model):
            mu, sd = source_stats.layers[k]
            stat_bind[f"src_mu.{k}"] = np.asarray(mu, dtype=np.float32)
            stat_bind[f"src_sd.{k}"] = np.asarray(sd, dtype=np.float32)

    def light_pass(p, x):
        bind = {**model.zero_bindings(light), **stat_bind, **p, "x": x}
        return bind, forward_eval(light.graph, bind)

    for b, batch in enumerate(dataset.stream_batches(batch_size)):
        x, labels = batch["image"], batch["labels"]
        try:
            _, lvals = light_pass(params, x)
        except FloatingPointError as e:
            raise AdaptationDiverged(traj, b, 0, str(e)) from None
        preds = {t: light.value(lvals, f"main.{t}") for t in names}
        met = batch_metrics(model.tasks, preds, labels)
        sup = sum(task_loss(s, preds[s.name], labels[s.name])
                  for s in model.tasks)
        traj.append(Record(step=tau, batch=b, inner_step=0, metrics=met,
                           losses={"total": float(sup), "ttt": 0.0}))
        tau += 1

        for s in range(1, cfg.k_steps + 1):
            if cfg.objective == "none":
                traj.append(Record(step=tau, batch=b, inner_step=s,
                                   metrics=dict(met),
                                   losses={"total": float(sup), "ttt": 0.0}))
                tau += 1
                continue
            try:
                if cfg.objective == "s4t":
                    bind = {**model.zero_bindings(full), **params, "x": x}
                    bind.update(pseudo_bindings(model.tasks, preds))
                    if model.cfg.use_masking:
                        plan = make_mask(cfg.mask_strategy, cfg.mask_ratio,
                                         grid, len(names),
                                         _mask_seed(cfg.seed, b, s))
                        bind.update(mask_bindings(plan, names))
                    vals = forward_eval(full.graph, bind)
                    obj = float(full.value(vals, ttt_out))
                    grads = backward(full.graph, vals, ttt_out)
                    gnames = [n for n in scope if n in full.graph.params]
                else:
                    bind, vals = light_pass(params, x)
                    obj = float(light.value(vals, ttt_out))
                    grads = backward(light.graph, vals, ttt_out)
                    gnames = [n for n in scope if n in light.graph.params]
                if not np.isfinite(obj):
                    raise AdaptationDiverged(traj, b, s)
                params = opt.step(params, grads, gnames)
                _, lvals = light_pass(params, x)
            except FloatingPointError as e:
                raise AdaptationDiverged(traj, b, s, str(e)) from None
            preds = {t: light.value(lvals, f"main.{t}") for t in names}
            met = batch_metrics(model.tasks, preds, labels)
            sup = sum(task_loss(t, preds[t.name], labels[t.name])
                      for t in model.tasks)
            traj.append(Record(step=tau, batch=b, inner_step=s, metrics=met,
                               losses={"total": float(sup), "ttt": obj}))
            tau += 1
    return traj
