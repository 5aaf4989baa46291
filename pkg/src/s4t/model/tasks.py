"""Task descriptions: output kind, loss/metric pairing, orientation."""
from __future__ import annotations

from dataclasses import dataclass

KINDS = ("categorical-map", "scalar-map", "unit-vector-map")

LOSS_FOR_KIND = {
    "categorical-map": "cross_entropy",
    "scalar-map": "l1",
    "unit-vector-map": "one_minus_cos",
}
METRIC_FOR_KIND = {
    "categorical-map": "miou",
    "scalar-map": "rmse",
    "unit-vector-map": "angular_deg",
}


@dataclass(frozen=True)
class TaskSpec:
    """One dense prediction task.

    higher_better is the orientation bit: True means a larger metric is
    better (l=0 in the improvement formula), False means smaller is better
    (l=1).
    """
    name: str
    kind: str
    n_classes: int = 0
    loss: str = ""
    metric: str = ""
    higher_better: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.kind == "categorical-map" and self.n_classes < 2:
            raise ValueError(
                f"categorical task {self.name!r} needs n_classes >= 2")
        if not self.loss:
            object.__setattr__(self, "loss", LOSS_FOR_KIND[self.kind])
        elif self.loss != LOSS_FOR_KIND[self.kind]:
            raise ValueError(
                f"loss {self.loss!r} illegal for kind {self.kind!r}")
        if not self.metric:
            object.__setattr__(self, "metric", METRIC_FOR_KIND[self.kind])
        elif self.metric != METRIC_FOR_KIND[self.kind]:
            raise ValueError(
                f"metric {self.metric!r} illegal for kind {self.kind!r}")

    @property
    def l(self) -> int:
        return 0 if self.higher_better else 1

    @property
    def out_channels(self) -> int:
        if self.kind == "categorical-map":
            return self.n_classes
        if self.kind == "scalar-map":
            return 1
        return 3


def default_tasks() -> list[TaskSpec]:
    """The four-task set: segmentation, depth, surface normals, edges."""
    return [
        TaskSpec("semseg", "categorical-map", n_classes=6, higher_better=True),
        TaskSpec("depth", "scalar-map"),
        TaskSpec("normal", "unit-vector-map"),
        TaskSpec("edge", "scalar-map"),
    ]


def task_by_name(tasks: list[TaskSpec], name: str) -> TaskSpec:
    for t in tasks:
        if t.name == name:
            return t
    raise KeyError(f"no task named {name!r}")
