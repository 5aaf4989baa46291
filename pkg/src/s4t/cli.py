"""Command line entry points.

Every run rewrites its resolved configuration next to its outputs, so the
exact experiment can be replayed from the artifact directory alone.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .bench import make_dataset, save_dataset
from .config import (ConfigError, RunConfig, adapt_for_seed, load_config,
                     save_config, train_fingerprint)
from .model import S4TModel, TaskSpec
from .model.checkpoint import load_checkpoint, save_checkpoint
from .objectives import SourceStats
from .runner import adapt_online, evaluate, train_source
from .svgplot import render_plot
from .sync_metrics import method_report
from .trajectory_io import read_trajectory_csv, write_trajectory_csv

# reporting only needs the orientation bit, so a placeholder class count
# is fine when specs are being rebuilt from a CSV's metric column
KIND_FOR_METRIC = {"miou": ("categorical-map", True),
                   "rmse": ("scalar-map", False),
                   "angular_deg": ("unit-vector-map", False)}


def specs_from_metrics(metric_of: dict) -> list:
    specs = []
    for name, metric in metric_of.items():
        if metric not in KIND_FOR_METRIC:
            raise ValueError(f"unknown metric {metric!r} for task {name!r}")
        kind, hb = KIND_FOR_METRIC[metric]
        specs.append(TaskSpec(name, kind, n_classes=2, higher_better=hb))
    return specs


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.resolved.json")
    return out


def _build(cfg: RunConfig):
    ds = make_dataset(cfg.gen, cfg.shift, sizes=cfg.data_sizes,
                      base_seed=cfg.data_seed)
    return S4TModel(cfg.model, list(cfg.tasks)), ds


def _ck_path(out: Path, seed: int) -> Path:
    return out / f"checkpoint_seed{seed}.npz"


def _stats_path(out: Path, seed: int) -> Path:
    return out / f"stats_seed{seed}.npz"


def _save_stats(path, stats: SourceStats) -> None:
    arrays = {}
    for layer, (mu, sd) in stats.layers.items():
        arrays[f"mu.{layer}"] = np.asarray(mu)
        arrays[f"sd.{layer}"] = np.asarray(sd)
    np.savez(path, **arrays)


def _load_stats(path) -> SourceStats:
    with np.load(path) as data:
        layers = {}
        for key in data.files:
            kind, layer = key.split(".", 1)
            layers.setdefault(layer, [None, None])
            layers[layer][0 if kind == "mu" else 1] = data[key]
    return SourceStats({k: tuple(v) for k, v in layers.items()})


def _seeds(cfg: RunConfig, args) -> list:
    return [args.seed] if args.seed is not None else list(cfg.seeds)


def _load_params(cfg: RunConfig, out: Path, seed: int, override: str):
    path = Path(override) if override else _ck_path(out, seed)
    if not path.exists():
        raise FileNotFoundError(
            f"no checkpoint at {path}; run `s4t train` first")
    expect = None if override else train_fingerprint(cfg, seed)
    params, _ = load_checkpoint(path, expect_hash=expect)
    return params


def _report_dict(traj, specs) -> dict:
    base = {t: float(traj.inner_series(t)[0]) for t in traj.tasks}
    return method_report(traj, base, specs).to_dict()


# -- subcommands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    out = _outdir(cfg)
    _, ds = _build(cfg)
    prefix = out / "bench"
    save_dataset(prefix, ds)
    print(f"wrote {prefix}.json and {prefix}.npz "
          f"(sigma_img {ds.sigma_img:.4f})")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = _outdir(cfg)
    model, ds = _build(cfg)
    for seed in _seeds(cfg, args):
        params, stats, log = train_source(
            model, ds, cfg.train_optim, cfg.weights, seed,
            mask_strategy=cfg.train_mask_strategy,
            mask_ratio=cfg.train_mask_ratio,
            mask_ratio_jitter=cfg.train_mask_jitter)
        save_checkpoint(_ck_path(out, seed), params,
                        train_fingerprint(cfg, seed))
        _save_stats(_stats_path(out, seed), stats)
        with open(out / f"train_log_seed{seed}.json", "w",
                  encoding="utf-8") as f:
            json.dump(log, f, indent=2)
        print(f"seed {seed}: loss {log[0]['total']:.4f} -> "
              f"{log[-1]['total']:.4f} over {cfg.train_optim.iterations} "
              f"iterations; wrote {_ck_path(out, seed).name}")
    return 0


def cmd_adapt(args) -> int:
    cfg = load_config(args.config)
    out = _outdir(cfg)
    model, ds = _build(cfg)
    specs = list(cfg.tasks)
    for seed in _seeds(cfg, args):
        params = _load_params(cfg, out, seed, args.checkpoint)
        acfg = adapt_for_seed(cfg, seed, args.objective or "")
        stats = _load_stats(_stats_path(out, seed)) \
            if acfg.objective == "actalign" else None
        traj = adapt_online(model, params, ds, acfg, cfg.test_optim,
                            weights=cfg.weights, source_stats=stats,
                            batch_size=cfg.test_optim.batch_size)
        tag = f"{acfg.objective}_seed{seed}"
        write_trajectory_csv(traj, out / f"trajectory_{tag}.csv", specs)
        rep = _report_dict(traj, specs)
        with open(out / f"report_{tag}.json", "w", encoding="utf-8") as f:
            json.dump(rep, f, indent=2)
        print(f"seed {seed} [{acfg.objective}]: delta_best "
              f"{rep['delta_best']:+.3f}% at step {rep['best_step']}, "
              f"delta_final {rep['delta_final']:+.3f}%")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    out = _outdir(cfg)
    model, ds = _build(cfg)
    results = {}
    for seed in _seeds(cfg, args):
        params = _load_params(cfg, out, seed, args.checkpoint)
        results[str(seed)] = evaluate(model, params, ds, split=args.split,
                                      batch_size=cfg.eval_batch_size)
    path = out / f"eval_{args.split}.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(results, f, indent=2)
    print(json.dumps(results, indent=2))
    return 0


def cmd_sweep_mask(args) -> int:
    cfg = load_config(args.config)
    out = _outdir(cfg)
    model, ds = _build(cfg)
    specs = list(cfg.tasks)
    ratios = [float(r) for r in args.ratios.split(",")] if args.ratios \
        else [cfg.adapt.mask_ratio]
    strategies = args.strategies.split(",") if args.strategies \
        else [cfg.adapt.mask_strategy]
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    params = _load_params(cfg, out, seed, args.checkpoint)
    summary = []
    for strategy in strategies:
        for ratio in ratios:
            acfg = dataclasses.replace(cfg.adapt, seed=seed,
                                       mask_strategy=strategy,
                                       mask_ratio=ratio)
            traj = adapt_online(model, params, ds, acfg, cfg.test_optim,
                                weights=cfg.weights,
                                batch_size=cfg.test_optim.batch_size)
            name = f"sweep_{strategy}_r{ratio:g}_seed{seed}.csv"
            write_trajectory_csv(traj, out / name, specs)
            rep = _report_dict(traj, specs)
            ttt = traj.loss_series("ttt")
            inner = np.array([r.inner_step for r in traj.records])
            rep.update(strategy=strategy, ratio=ratio, trajectory=name,
                       mean_loss_ttt=float(ttt[inner > 0].mean())
                       if (inner > 0).any() else 0.0)
            summary.append(rep)
            print(f"{strategy} r={ratio:g}: delta_best "
                  f"{rep['delta_best']:+.3f}%")
    path = out / f"sweep_summary_seed{seed}.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2)
    print(f"wrote {path.name} ({len(summary)} runs)")
    return 0


def cmd_metrics(args) -> int:
    traj, metric_of = read_trajectory_csv(args.csv)
    if not traj.records:
        raise ValueError(f"{args.csv}: trajectory is empty")
    specs = specs_from_metrics(metric_of)
    if args.baseline:
        base_traj, base_metrics = read_trajectory_csv(args.baseline)
        if set(base_metrics) != set(metric_of):
            raise ValueError("baseline trajectory covers different tasks")
        base = {t: float(base_traj.inner_series(t)[0])
                for t in base_traj.tasks}
    else:
        base = {t: float(traj.inner_series(t)[0]) for t in traj.tasks}
    rep = method_report(traj, base, specs).to_dict()
    text = json.dumps(rep, indent=2)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(text + "\n")
    print(text)
    return 0


def cmd_plot(args) -> int:
    svg = render_plot(args.csv, title=args.title)
    out = Path(args.out) if args.out else Path(args.csv).with_suffix(".svg")
    with open(out, "w", encoding="utf-8", newline="\n") as f:
        f.write(svg + "\n")
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="s4t",
        description="Multi-task test-time training on procedural scenes")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, checkpoint=False):
        sp.add_argument("--config", required=True, help="run config JSON")
        sp.add_argument("--seed", type=int, default=None,
                        help="restrict to one seed from the config")
        if checkpoint:
            sp.add_argument("--checkpoint", default="",
                            help="explicit checkpoint path (skips the "
                                 "config-hash check)")

    sp = sub.add_parser("gen-data", help="materialize the dataset to disk")
    sp.add_argument("--config", required=True)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="source training")
    with_config(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("adapt", help="online test-time adaptation")
    with_config(sp, checkpoint=True)
    sp.add_argument("--objective", default="",
                    choices=["", "s4t", "entropy", "actalign", "none"],
                    help="override the configured objective")
    sp.set_defaults(func=cmd_adapt)

    sp = sub.add_parser("eval", help="whole-split metrics")
    with_config(sp, checkpoint=True)
    sp.add_argument("--split", default="val",
                    choices=["train", "val", "stream"])
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep-mask",
                        help="adaptation across mask ratios and strategies")
    with_config(sp, checkpoint=True)
    sp.add_argument("--ratios", default="", help="comma-separated ratios")
    sp.add_argument("--strategies", default="",
                    help="comma-separated strategies")
    sp.set_defaults(func=cmd_sweep_mask)

    sp = sub.add_parser("metrics",
                        help="recompute synchronization metrics from a CSV")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--baseline", default="",
                    help="trajectory CSV whose pre-update metrics serve as "
                         "the no-adaptation baseline")
    sp.add_argument("--out", default="")
    sp.set_defaults(func=cmd_metrics)

    sp = sub.add_parser("plot", help="render a trajectory CSV to SVG")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--out", default="")
    sp.add_argument("--title", default="")
    sp.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
