"""Improvement and synchronization measures over adaptation trajectories.

Delta_TTT is the mean signed relative per-task improvement over the
unadapted baseline. The three synchronization measures (step variance of
the per-task peaks, mean pairwise dynamic-time-warping distance, mean
pairwise cosine of step-to-step changes) quantify whether tasks improve
in lockstep. Trajectories with incommensurable units are first converted
to signed relative improvement versus their first value, oriented so
higher is always better.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from itertools import combinations

import numpy as np

from .model.tasks import TaskSpec

NORM_EPS = 1e-12


def delta_ttt(m_ttt: dict, m_base: dict, specs: list) -> float:
    """Percent improvement: (1/n) sum (-1)^l_i (M_i - B_i) / B_i * 100."""
    if not specs:
        raise ValueError("need at least one task")
    total = 0.0
    for s in specs:
        base = float(m_base[s.name])
        if base == 0.0:
            raise ValueError(f"baseline metric for {s.name!r} is zero")
        sign = -1.0 if s.l else 1.0
        total += sign * (float(m_ttt[s.name]) - base) / base
    return 100.0 * total / len(specs)


def oriented(series: np.ndarray, spec: TaskSpec) -> np.ndarray:
    """Flip lower-is-better series so larger always means better."""
    arr = np.asarray(series, dtype=np.float64)
    return arr if spec.higher_better else -arr


def peak_step(series: np.ndarray, spec: TaskSpec) -> int:
    """1-based step of the best value; earliest step wins ties."""
    arr = oriented(series, spec)
    if arr.size == 0:
        raise ValueError("empty trajectory")
    return int(np.argmax(arr)) + 1


def step_variance(trajectories: dict, specs: list) -> float:
    """Population standard deviation of the per-task peak steps."""
    peaks = np.array([peak_step(trajectories[s.name], s) for s in specs],
                     dtype=np.float64)
    return float(np.sqrt(np.mean((peaks - peaks.mean()) ** 2)))


def normalize_trajectories(trajectories: dict, specs: list) -> dict:
    """Signed relative improvement versus the first value, oriented by l_i.

    Scale-free, so mIoU and RMSE trajectories become comparable. A zero
    first value is stabilized with a tiny epsilon rather than rejected.
    """
    out = {}
    for s in specs:
        y = np.asarray(trajectories[s.name], dtype=np.float64)
        if y.size == 0:
            raise ValueError(f"empty trajectory for {s.name!r}")
        rel = (y - y[0]) / max(abs(y[0]), NORM_EPS)
        out[s.name] = rel if s.higher_better else -rel
    return out


def dtw_pair(a: np.ndarray, b: np.ndarray) -> float:
    """Alignment cost: DC(t,k) = |a_t - b_k| + min of the three
    predecessors, with DC(1,1) = |a_1 - b_1| and out-of-range = +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty trajectory")
    ta, tb = a.size, b.size
    dc = np.full((ta, tb), np.inf)
    for i in range(ta):
        for j in range(tb):
            d = abs(a[i] - b[j])
            if i == 0 and j == 0:
                dc[i, j] = d
                continue
            prev = np.inf
            if i > 0:
                prev = min(prev, dc[i - 1, j])
            if j > 0:
                prev = min(prev, dc[i, j - 1])
            if i > 0 and j > 0:
                prev = min(prev, dc[i - 1, j - 1])
            dc[i, j] = d + prev
    return float(dc[ta - 1, tb - 1])


def dtw_sync(trajectories: dict) -> float:
    """Mean pairwise alignment cost over all unordered task pairs."""
    names = list(trajectories)
    pairs = list(combinations(names, 2))
    if not pairs:
        return 0.0
    total = sum(dtw_pair(trajectories[i], trajectories[j]) for i, j in pairs)
    return float(total / len(pairs))


def cosine_pair(a: np.ndarray, b: np.ndarray) -> float:
    """Mean directional agreement of step-to-step changes; a flat step on
    either side contributes 0. Result lies in [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size != b.size:
        raise ValueError("trajectory lengths differ")
    if a.size < 2:
        raise ValueError("need at least two steps for step deltas")
    prod = np.sign(np.diff(a)) * np.sign(np.diff(b))
    return float(prod.sum() / (a.size - 1))


def cosine_sync(trajectories: dict) -> float:
    names = list(trajectories)
    pairs = list(combinations(names, 2))
    if not pairs:
        return 0.0
    total = sum(cosine_pair(trajectories[i], trajectories[j])
                for i, j in pairs)
    return float(total / len(pairs))


def affinity_gap(src: np.ndarray, tgt: np.ndarray) -> float:
    """Frobenius norm of the difference of two task-affinity matrices."""
    a = np.asarray(src, dtype=np.float64)
    b = np.asarray(tgt, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"affinity shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


@dataclass(frozen=True)
class MethodReport:
    """Summary of one adaptation run against a fixed baseline."""
    best_metrics: dict      # task -> value at that task's own peak step
    final_metrics: dict     # task -> value at the last step
    peak_steps: dict        # task -> 1-based peak step
    delta_best: float       # Delta_TTT at the single best shared step
    delta_final: float
    best_step: int          # 1-based shared step achieving delta_best
    sv: float
    dtw: float
    cs: float
    n_steps: int

    def to_dict(self) -> dict:
        return asdict(self)


def method_report(trajectory, base_metrics: dict, specs: list
                  ) -> MethodReport:
    """Aggregate a trajectory (per-task metric vs within-batch step,
    averaged over batches) against unadapted baseline metrics."""
    series = {s.name: trajectory.inner_series(s.name) for s in specs}
    t_len = len(next(iter(series.values())))
    if any(v.size != t_len for v in series.values()):
        raise ValueError("per-task trajectories differ in length")
    deltas = [delta_ttt({s.name: series[s.name][i] for s in specs},
                        base_metrics, specs) for i in range(t_len)]
    best_i = int(np.argmax(deltas))
    peaks = {s.name: peak_step(series[s.name], s) for s in specs}
    norm = normalize_trajectories(series, specs)
    cs = cosine_sync(norm) if t_len >= 2 else 0.0
    return MethodReport(
        best_metrics={s.name: float(series[s.name][peaks[s.name] - 1])
                      for s in specs},
        final_metrics={s.name: float(series[s.name][-1]) for s in specs},
        peak_steps=peaks,
        delta_best=float(deltas[best_i]),
        delta_final=float(deltas[-1]),
        best_step=best_i + 1,
        sv=step_variance(series, specs),
        dtw=dtw_sync(norm),
        cs=cs,
        n_steps=t_len,
    )
