"""Mask plans over the latent patch lattice.

Four strategies: per-task random patches, pairwise-disjoint patches,
one shared patch set, and hiding whole tasks. A plan is a boolean grid per
task (true = replace that patch with the mask token).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STRATEGIES = ("random", "non-overlap", "same-for-all", "hide-tasks")


class InfeasibleMaskError(ValueError):
    """Requested plan cannot satisfy the strategy invariant."""


@dataclass(frozen=True)
class MaskPlan:
    strategy: str
    ratio: float
    grids: np.ndarray          # (n_tasks, h, w) bool, read-only
    seed: int

    @property
    def n_tasks(self) -> int:
        return self.grids.shape[0]

    @property
    def grid_hw(self) -> tuple:
        return self.grids.shape[1:]

    def counts(self) -> np.ndarray:
        return self.grids.reshape(self.n_tasks, -1).sum(axis=1)


def make_mask(strategy: str, ratio: float, grid_hw: tuple, n_tasks: int,
              seed: int) -> MaskPlan:
    """Sample a plan; reproducible from seed.

    random / non-overlap / same-for-all mask exactly floor(ratio*P) patches
    per task (disjoint across tasks for non-overlap, identical for
    same-for-all). hide-tasks sets max(1, round(ratio*n_tasks)) whole grids
    to true.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    if n_tasks < 1:
        raise ValueError("need at least one task")
    h, w = (int(v) for v in grid_hw)
    p = h * w
    k = int(np.floor(ratio * p))
    rng = np.random.default_rng(seed)
    flat = np.zeros((n_tasks, p), dtype=bool)

    if strategy == "random":
        for i in range(n_tasks):
            flat[i, rng.choice(p, size=k, replace=False)] = True
    elif strategy == "non-overlap":
        if n_tasks * k > p:
            raise InfeasibleMaskError(
                f"non-overlap infeasible: n_tasks * floor(ratio * P) = "
                f"{n_tasks} * {k} = {n_tasks * k} > P = {p}")
        picks = rng.choice(p, size=n_tasks * k, replace=False)
        for i in range(n_tasks):
            flat[i, picks[i * k:(i + 1) * k]] = True
    elif strategy == "same-for-all":
        shared = rng.choice(p, size=k, replace=False)
        flat[:, shared] = True
    else:  # hide-tasks
        m = max(1, int(np.floor(ratio * n_tasks + 0.5)))
        m = min(m, n_tasks)
        hidden = rng.choice(n_tasks, size=m, replace=False)
        flat[hidden, :] = True

    grids = flat.reshape(n_tasks, h, w)
    grids.setflags(write=False)
    return MaskPlan(strategy, float(ratio), grids, int(seed))


def empty_plan(grid_hw: tuple, n_tasks: int) -> MaskPlan:
    """All-false grids: nothing masked."""
    grids = np.zeros((n_tasks, *grid_hw), dtype=bool)
    grids.setflags(write=False)
    return MaskPlan("random", 0.0, grids, 0)


def mask_bindings(plan: MaskPlan, task_names: list, dtype=np.float32) -> dict:
    """Per-task (h, w, 1) float arrays for graph inputs."""
    if len(task_names) != plan.n_tasks:
        raise ValueError(f"plan covers {plan.n_tasks} tasks, "
                         f"got {len(task_names)} names")
    return {f"mask.{name}": plan.grids[i].astype(dtype)[:, :, None]
            for i, name in enumerate(task_names)}


def apply_mask(latents: dict, plan: MaskPlan, mask_token: np.ndarray) -> dict:
    """Replace masked patches with the token (broadcast over channels)."""
    names = list(latents)
    if len(names) != plan.n_tasks:
        raise ValueError(f"plan covers {plan.n_tasks} tasks, "
                         f"got {len(names)} latents")
    out = {}
    token = np.asarray(mask_token)
    for i, name in enumerate(names):
        z = latents[name]
        if z.shape[1:3] != plan.grid_hw:
            raise ValueError(
                f"latent {name!r} spatial extent {z.shape[1:3]} does not "
                f"match plan grid {plan.grid_hw}")
        m = plan.grids[i][None, :, :, None]
        out[name] = np.where(m, token.astype(z.dtype), z)
    return out
