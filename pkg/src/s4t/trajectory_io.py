"""Trajectory persistence as CSV.

Layout is one row per (record, task): a version comment, the header, then
data rows with values at 6 significant digits, UTF-8, LF line endings.
The version comment gates schema evolution; readers accept any file whose
major version matches.
"""
from __future__ import annotations

import csv
import re

from .runner import Record, Trajectory

SCHEMA_MAJOR = 1
VERSION_LINE = f"# s4t-trajectory v{SCHEMA_MAJOR}"
HEADER = ("step", "batch", "inner_step", "task", "metric", "value",
          "loss_total", "loss_ttt")


def _fmt(v: float) -> str:
    return f"{float(v):.6g}"


def write_trajectory_csv(traj: Trajectory, path, specs) -> None:
    metric_of = {s.name: s.metric for s in specs}
    for t in traj.tasks:
        if t not in metric_of:
            raise ValueError(f"no metric known for task {t!r}")
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(VERSION_LINE + "\n")
        f.write(",".join(HEADER) + "\n")
        for r in traj.records:
            for t in traj.tasks:
                f.write(f"{r.step},{r.batch},{r.inner_step},{t},"
                        f"{metric_of[t]},{_fmt(r.metrics[t])},"
                        f"{_fmt(r.losses['total'])},"
                        f"{_fmt(r.losses['ttt'])}\n")


def read_trajectory_csv(path):
    """Returns (Trajectory, task -> metric name). Inverse of the writer up
    to the 6-significant-digit rounding."""
    with open(path, encoding="utf-8", newline="") as f:
        first = f.readline().strip()
        m = re.fullmatch(r"#\s*s4t-trajectory v(\d+)", first)
        if not m:
            raise ValueError(
                f"{path}: not a trajectory file (missing version comment)")
        if int(m.group(1)) != SCHEMA_MAJOR:
            raise ValueError(
                f"{path}: unsupported trajectory schema v{m.group(1)}, "
                f"this reader handles v{SCHEMA_MAJOR}")
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        groups = {}   # (step, batch, inner) -> {task: value, ...}
        losses = {}
        metric_of = {}
        order = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(HEADER):
                raise ValueError(f"{path}: malformed row {row}")
            step, batch, inner = (int(row[0]), int(row[1]), int(row[2]))
            task, metric = row[3], row[4]
            key = (step, batch, inner)
            if key not in groups:
                groups[key] = {}
                losses[key] = {"total": float(row[6]), "ttt": float(row[7])}
                order.append(key)
            groups[key][task] = float(row[5])
            if metric_of.setdefault(task, metric) != metric:
                raise ValueError(
                    f"{path}: task {task!r} changes metric mid-file")
    tasks = list(groups[order[0]]) if order else []
    traj = Trajectory(tasks=tasks)
    for key in order:
        step, batch, inner = key
        traj.append(Record(step=step, batch=batch, inner_step=inner,
                           metrics=groups[key], losses=losses[key]))
    return traj, metric_of
