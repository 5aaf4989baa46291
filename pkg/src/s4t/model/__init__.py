"""Architecture, masking and parameter persistence."""
from .checkpoint import load_checkpoint, save_checkpoint, stable_hash
from .masking import (STRATEGIES, InfeasibleMaskError, MaskPlan, apply_mask,
                      empty_plan, make_mask, mask_bindings)
from .net import FLAVORS, ModelConfig, ModelGraph, S4TModel, build_graph, param_table
from .tasks import KINDS, TaskSpec, default_tasks, task_by_name

__all__ = [
    "FLAVORS", "InfeasibleMaskError", "KINDS", "MaskPlan", "ModelConfig",
    "ModelGraph", "S4TModel", "STRATEGIES", "TaskSpec", "apply_mask",
    "build_graph", "default_tasks", "empty_plan", "load_checkpoint",
    "make_mask", "mask_bindings", "param_table", "save_checkpoint",
    "stable_hash", "task_by_name",
]
