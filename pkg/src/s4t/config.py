"""Run configuration: one JSON document drives data generation, training,
and adaptation. New documents validate against the shipped schema, unknown
keys are rejected at every level, and everything except the seeds and the
output directory has a default.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from importlib import resources
from math import floor, prod

import jsonschema

from .bench import DEFAULT_SIZES, GenConfig, ShiftSpec, dataset_tasks
from .model import ModelConfig, TaskSpec
from .model.checkpoint import stable_hash
from .objectives import LossWeights
from .optim import OptimConfig
from .runner import AdaptConfig

SCHEMA_FILE = "run_config.schema.json"


class ConfigError(ValueError):
    pass


def schema() -> dict:
    text = resources.files("s4t").joinpath(SCHEMA_FILE).read_text("utf-8")
    return json.loads(text)


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple
    output_dir: str
    model: ModelConfig
    tasks: tuple
    weights: LossWeights
    train_optim: OptimConfig
    test_optim: OptimConfig
    adapt: AdaptConfig
    gen: GenConfig
    shift: ShiftSpec
    data_sizes: dict
    data_seed: int
    train_mask_strategy: str
    train_mask_ratio: float
    train_mask_jitter: bool
    eval_batch_size: int


def _defaults_of(section: str) -> dict:
    props = schema()["properties"][section]["properties"]
    return {k: v["default"] for k, v in props.items()}


def default_document() -> dict:
    """The fully spelled-out configuration, minus seeds and output_dir."""
    doc = {
        "data_seed": 0,
        "data_sizes": dict(DEFAULT_SIZES),
        "eval_batch_size": 8,
        "tasks": None,
    }
    for section in ("train_mask", "model", "weights", "train_optim",
                    "test_optim", "adapt", "gen", "shift"):
        doc[section] = _defaults_of(section)
    return doc


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def config_from_dict(doc: dict) -> RunConfig:
    try:
        jsonschema.validate(doc, schema())
    except jsonschema.ValidationError as e:
        where = e.json_path.replace("$.", "").replace("$", "config root")
        raise ConfigError(f"{where}: {e.message}") from None
    full = _merge(default_document(), doc)
    if os.environ.get("S4T_OUT"):
        full["output_dir"] = os.environ["S4T_OUT"]

    gen = GenConfig(**full["gen"])
    derived = dataset_tasks(gen)
    if full["tasks"] is None:
        tasks = derived
    else:
        tasks = [TaskSpec(**t) for t in full["tasks"]]
        if tasks != derived:
            want = [(t.name, t.kind, t.n_classes) for t in derived]
            raise ConfigError(
                f"tasks: does not match the generator's task set {want}")
    cfg = RunConfig(
        seeds=tuple(full["seeds"]),
        output_dir=full["output_dir"],
        model=ModelConfig(**{k: tuple(v) if isinstance(v, list) else v
                             for k, v in full["model"].items()}),
        tasks=tuple(tasks),
        weights=LossWeights(**full["weights"]),
        train_optim=OptimConfig(**full["train_optim"]),
        test_optim=OptimConfig(**full["test_optim"]),
        adapt=AdaptConfig(**full["adapt"]),
        gen=gen,
        shift=ShiftSpec(**full["shift"]),
        data_sizes=dict(full["data_sizes"]),
        data_seed=full["data_seed"],
        train_mask_strategy=full["train_mask"]["strategy"],
        train_mask_ratio=full["train_mask"]["ratio"],
        train_mask_jitter=full["train_mask"]["jitter"],
        eval_batch_size=full["eval_batch_size"],
    )
    _cross_checks(cfg)
    return cfg


def _cross_checks(cfg: RunConfig) -> None:
    stride = cfg.model.stride
    if cfg.gen.height % stride or cfg.gen.width % stride:
        raise ConfigError(
            f"gen.height/gen.width ({cfg.gen.height}x{cfg.gen.width}) must be "
            f"divisible by the encoder stride {stride} (model.stage_strides)")
    patches = (cfg.gen.height // stride) * (cfg.gen.width // stride)
    n = len(cfg.tasks)
    for field_name, strategy, ratio in (
            ("adapt.mask_strategy", cfg.adapt.mask_strategy,
             cfg.adapt.mask_ratio),
            ("train_mask.strategy", cfg.train_mask_strategy,
             cfg.train_mask_ratio)):
        if strategy == "non-overlap" and n * floor(ratio * patches) > patches:
            raise ConfigError(
                f"{field_name}: non-overlap is infeasible at ratio {ratio} "
                f"with {n} tasks and {patches} grid positions")
    if cfg.adapt.single_task and \
            cfg.adapt.single_task not in [t.name for t in cfg.tasks]:
        raise ConfigError(
            f"adapt.single_task: no task named {cfg.adapt.single_task!r}")


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return config_from_dict(doc)


def to_dict(cfg: RunConfig) -> dict:
    def opt(o: OptimConfig) -> dict:
        return {"algorithm": o.algorithm, "lr": o.lr,
                "weight_decay": o.weight_decay, "schedule": o.schedule,
                "iterations": o.iterations, "batch_size": o.batch_size,
                "beta1": o.beta1, "beta2": o.beta2, "eps": o.eps,
                "poly_power": o.poly_power}

    m = cfg.model
    a = cfg.adapt
    g = cfg.gen
    s = cfg.shift
    return {
        "seeds": list(cfg.seeds),
        "output_dir": cfg.output_dir,
        "data_seed": cfg.data_seed,
        "data_sizes": dict(cfg.data_sizes),
        "eval_batch_size": cfg.eval_batch_size,
        "train_mask": {"strategy": cfg.train_mask_strategy,
                       "ratio": cfg.train_mask_ratio,
                       "jitter": cfg.train_mask_jitter},
        "model": {"in_channels": m.in_channels,
                  "stage_strides": list(m.stage_strides),
                  "stage_channels": list(m.stage_channels),
                  "task_channels": m.task_channels,
                  "decoder_hidden": m.decoder_hidden,
                  "tbs_width": m.tbs_width, "tbs_blocks": m.tbs_blocks,
                  "tbs_heads": m.tbs_heads, "tbs_mlp_ratio": m.tbs_mlp_ratio,
                  "use_tbs": m.use_tbs, "use_projection": m.use_projection,
                  "use_masking": m.use_masking, "ln_eps": m.ln_eps},
        "tasks": [{"name": t.name, "kind": t.kind, "n_classes": t.n_classes,
                   "higher_better": t.higher_better} for t in cfg.tasks],
        "weights": {"lambda_tbs_train": cfg.weights.lambda_tbs_train,
                    "lambda_tp_train": cfg.weights.lambda_tp_train,
                    "lambda_tbs_test": cfg.weights.lambda_tbs_test},
        "train_optim": opt(cfg.train_optim),
        "test_optim": opt(cfg.test_optim),
        "adapt": {"objective": a.objective, "k_steps": a.k_steps,
                  "scope": a.scope, "mask_strategy": a.mask_strategy,
                  "mask_ratio": a.mask_ratio, "single_task": a.single_task},
        "gen": {"height": g.height, "width": g.width,
                "n_classes": g.n_classes, "min_prims": g.min_prims,
                "max_prims": g.max_prims, "max_slant_deg": g.max_slant_deg,
                "divisible_by": g.divisible_by},
        "shift": {"alpha": s.alpha, "blur_radius": s.blur_radius,
                  "hue": s.hue, "contrast": s.contrast, "seed": s.seed},
    }


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(to_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def train_fingerprint(cfg: RunConfig, seed: int) -> str:
    """Hash of everything that determines the trained parameters, so a
    checkpoint refuses to load under a config it was not produced by.
    Adaptation-only settings are deliberately excluded."""
    d = to_dict(cfg)
    keep = {k: d[k] for k in ("model", "tasks", "weights", "train_optim",
                              "gen", "shift", "data_sizes", "data_seed",
                              "train_mask")}
    keep["seed"] = seed
    return stable_hash(keep)


def adapt_for_seed(cfg: RunConfig, seed: int, objective: str = "") -> AdaptConfig:
    over = {"seed": seed}
    if objective:
        over["objective"] = objective
    return replace(cfg.adapt, **over)
