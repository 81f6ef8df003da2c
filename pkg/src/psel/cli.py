"""Command line front end for the selection pipeline.

Each subcommand runs its stage and everything it depends on; finished
stages are picked up from the run directory instead of being recomputed,
so the commands compose like make targets.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import autodiff as ad
from . import model as mdl
from . import pipeline as pl
from . import solver_embed as se
from . import zoo as zoo_mod
from .instances import ConfigError, DomainError, ParseError


def _load_config(args) -> pl.ExperimentConfig:
    cfg = pl.load_config(args.config) if args.config else pl.ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "jobs", None) is not None:
        cfg.jobs = args.jobs
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    if getattr(args, "strategy", None):
        cfg.strategies = list(args.strategy)
    return cfg.validate()


def _through_tables(cfg, seed):
    splits = pl.stage_datasets(cfg, seed)
    handles = cfg.zoo_handles()
    tables = pl.stage_tables(cfg, seed, splits, handles)
    if cfg.eliminate:
        kept = pl.stage_elimination(cfg, seed, tables)
        handles = [h for h in handles if h.id in kept]
        tables = {k: t.subset_columns(kept) for k, t in tables.items()}
    return splits, handles, tables


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    for seed in cfg.seeds:
        splits = pl.stage_datasets(cfg, seed)
        sizes = {k: len(v) for k, v in splits.items()}
        print(f"seed {seed}: datasets {sizes} under "
              f"{os.path.join(pl.data_root(cfg), f'seed{seed}')}")
    return 0


def cmd_run_zoo(args) -> int:
    cfg = _load_config(args)
    for seed in cfg.seeds:
        splits, handles, tables = _through_tables(cfg, seed)
        for name, table in tables.items():
            gaps = table.gaps()
            print(f"seed {seed} {name}: {len(table.instance_ids)} x "
                  f"{len(table.solver_ids)} table, "
                  f"oracle gap {gaps.min(axis=1).mean():.4f}%")
    return 0


def cmd_eliminate(args) -> int:
    if args.zoo:
        table = zoo_mod.PerformanceTable.load(args.zoo)
        report = zoo_mod.eliminate_zoo(table, delta=args.delta)
        print(json.dumps({"kept": report.final_zoo,
                          "removed": [list(r) for r in report.removed],
                          "delta": report.delta}, indent=2, sort_keys=True))
        return 0
    cfg = _load_config(args)
    for seed in cfg.seeds:
        splits = pl.stage_datasets(cfg, seed)
        tables = pl.stage_tables(cfg, seed, splits, cfg.zoo_handles())
        kept = pl.stage_elimination(cfg, seed, tables)
        print(f"seed {seed}: kept {kept}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    for seed in cfg.seeds:
        splits, handles, tables = _through_tables(cfg, seed)
        pl.stage_train(cfg, seed, splits, tables, [h.id for h in handles])
        print(f"seed {seed}: model at "
              f"{os.path.join(cfg.out_dir, f'seed{seed}', 'model.ckpt')}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    for seed in cfg.seeds:
        splits, handles, tables = _through_tables(cfg, seed)
        model = pl.stage_train(cfg, seed, splits, tables,
                               [h.id for h in handles])
        rows = pl.solver_rows(tables["test"])
        rows += pl.stage_evaluate(cfg, seed, splits, tables, model)
        prefix = os.path.join(cfg.out_dir, f"seed{seed}", "report")
        pl.emit_report(rows, prefix)
        print(f"seed {seed}: report at {prefix}.csv")
        for row in rows:
            print(f"  {row['method']:>28s}  gap {row['mean_gap_pct']:7.4f}%  "
                  f"time {row['mean_time_s']:.4f}s  acc {row['accuracy_pct']:.1f}%")
    return 0


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    for seed in cfg.seeds:
        splits, handles, tables = _through_tables(cfg, seed)
        model = pl.stage_train(cfg, seed, splits, tables,
                               [h.id for h in handles])
        rows, sweep = pl.compare_strategies(model, splits["test"],
                                            tables["test"], cfg.strategies)
        sdir = os.path.join(cfg.out_dir, f"seed{seed}")
        pl.emit_report(rows, os.path.join(sdir, "compare"))
        pl.emit_sweep(sweep, os.path.join(sdir, "sweep.csv"))
        print(f"seed {seed}: strategy table and sweep grid under {sdir}")
    return 0


def cmd_portfolio_baseline(args) -> int:
    if args.zoo:
        table = zoo_mod.PerformanceTable.load(args.zoo)
        subset, gap = pl.portfolio_baseline(table, args.k)
        print(json.dumps({"k": args.k, "subset": list(subset),
                          "mean_gap_pct": gap}, sort_keys=True))
        return 0
    cfg = _load_config(args)
    for seed in cfg.seeds:
        splits, handles, tables = _through_tables(cfg, seed)
        subset, gap = pl.portfolio_baseline(tables["test"], args.k)
        print(json.dumps({"seed": seed, "k": args.k, "subset": list(subset),
                          "mean_gap_pct": gap}, sort_keys=True))
    return 0


def cmd_embed_solvers(args) -> int:
    cfg = _load_config(args)
    if cfg.encoder_mode == "manual":
        raise ConfigError("embed-solvers needs a neural encoder mode")
    for seed in cfg.seeds:
        splits, handles, tables = _through_tables(cfg, seed)
        # a solver with no wins has no representative instances to embed
        obj = tables["train"].objective
        rowmin = np.where(np.isfinite(obj), obj, np.inf).min(axis=1)
        winners = [sid for j, sid in enumerate(tables["train"].solver_ids)
                   if np.any(obj[:, j] <= rowmin + 1e-9)]
        if len(winners) < len(tables["train"].solver_ids):
            dropped = sorted(set(tables["train"].solver_ids) - set(winners))
            print(f"seed {seed}: excluding never-winning solvers {dropped}")
            tables = {k: t.subset_columns(winners) for k, t in tables.items()}
        system = se.init_embedding_system(cfg.kind, cfg.encoder_cfg(),
                                          seed=seed,
                                          head_hidden=cfg.head_hidden)
        tcfg = cfg.train_cfg(seed)
        tcfg.loss = "ranking"      # pair scoring trains on ranking only
        fit_table = pl.concat_tables(tables["train"], tables["val"])
        trained, history = se.train_embedding_system(
            system, splits["train"], fit_table, tcfg,
            val_set=splits["val"])
        sdir = os.path.join(cfg.out_dir, f"seed{seed}")
        os.makedirs(sdir, exist_ok=True)
        path = os.path.join(sdir, "solver_features.ckpt")
        se.save_solver_features(
            path, [trained.solver_features[s] for s in trained.solver_order])
        mdl.export_history_csv(history,
                               os.path.join(sdir, "embed_history.csv"))
        print(f"seed {seed}: solver features at {path}")
    return 0


def cmd_report(args) -> int:
    cfg = _load_config(args)
    per_seed = []
    for seed in cfg.seeds:
        path = os.path.join(cfg.out_dir, f"seed{seed}", "report.json")
        if not os.path.exists(path):
            raise DomainError(f"missing per-seed report {path}; "
                              "run `evaluate` first")
        with open(path) as fh:
            per_seed.append(json.load(fh))
    aggregate = pl.aggregate_reports(per_seed)
    prefix = os.path.join(cfg.out_dir, "aggregate")
    pl.emit_report(aggregate, prefix)
    print(f"aggregate over seeds {cfg.seeds} at {prefix}.csv")
    for row in aggregate:
        print(f"  {row['method']:>28s}  gap {row['mean_gap_pct']:7.4f}% "
              f"(std {row['std_gap_pct']:.4f})  time {row['mean_time_s']:.4f}s")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="psel",
        description="per-instance solver selection for routing problems")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, jobs=False, strategy=False, zoo=False):
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--seed", type=int, help="run a single seed")
        p.add_argument("--out", help="output directory override")
        if jobs:
            p.add_argument("--jobs", type=int, help="parallel solver workers")
        if strategy:
            p.add_argument("--strategy", action="append",
                           help="strategy syntax, e.g. greedy, topk:2, "
                                "topp:0.8, reject:0.3,2 (repeatable)")
        if zoo:
            p.add_argument("--zoo", help="saved performance table (JSONL)")
        return p

    common(sub.add_parser("gen-data", help="generate dataset splits"))
    common(sub.add_parser("run-zoo", help="build performance tables"),
           jobs=True)
    p = common(sub.add_parser("eliminate", help="drop redundant solvers"),
               zoo=True)
    p.add_argument("--delta", type=float, default=0.01,
                   help="contribution threshold in percentage points")
    common(sub.add_parser("train", help="train the selection model"),
           jobs=True)
    common(sub.add_parser("evaluate", help="evaluate strategies on test"),
           jobs=True, strategy=True)
    common(sub.add_parser("compare", help="strategy table plus sweep grids"),
           jobs=True, strategy=True)
    p = common(sub.add_parser("portfolio-baseline",
                              help="best fixed size-k portfolio"),
               jobs=True, zoo=True)
    p.add_argument("--k", type=int, required=True)
    common(sub.add_parser("embed-solvers",
                          help="train pair scorer and export solver features"),
           jobs=True)
    common(sub.add_parser("report", help="aggregate per-seed reports"))
    return parser


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "run-zoo": cmd_run_zoo,
    "eliminate": cmd_eliminate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "portfolio-baseline": cmd_portfolio_baseline,
    "embed-solvers": cmd_embed_solvers,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, DomainError, ParseError, pl.PipelineError,
            mdl.LabelError, ad.TrainingError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
