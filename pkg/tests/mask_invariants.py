"""Shared checker for mask-plan strategy invariants."""
import numpy as np


def check_plan(plan, strategy, ratio, p, n_tasks):
    flat = plan.grids.reshape(n_tasks, -1)
    assert flat.shape == (n_tasks, p)
    k = int(np.floor(ratio * p))
    counts = flat.sum(axis=1)
    if strategy == "random":
        assert np.all(counts == k), f"random: counts {counts} != {k}"
    elif strategy == "non-overlap":
        assert np.all(counts == k), f"non-overlap: counts {counts} != {k}"
        assert flat.sum(axis=0).max(initial=0) <= 1, "overlapping masks"
    elif strategy == "same-for-all":
        assert np.all(counts == k)
        assert np.all(flat == flat[0]), "grids differ across tasks"
    elif strategy == "hide-tasks":
        whole = np.all(flat, axis=1)
        none = ~np.any(flat, axis=1)
        assert np.all(whole | none), "partial grid in hide-tasks"
        want = max(1, int(np.floor(ratio * n_tasks + 0.5)))
        want = min(want, n_tasks)
        assert whole.sum() == want, f"hidden {whole.sum()} != {want}"
    else:
        raise AssertionError(f"unknown strategy {strategy}")
