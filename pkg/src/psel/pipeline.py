"""Experiment pipeline: data, zoo tables, training, evaluation, reports.

Stages write their artifacts under the run directory and are skipped on
rerun when the artifacts already exist, so a finished run re-emits
byte-identical reports and an aborted run resumes at the failed stage.
Executed portfolio costs come from the per-split performance tables; the
per-cell rng seeding makes direct execution reproduce those cells, so
the lookup is exact, not an approximation.
"""

from __future__ import annotations

import itertools
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import checkpoint as ck
from . import model as mdl
from . import strategies as stg
from . import zoo as zoo_mod
from .encoder import EncoderConfig
from .instances import (ConfigError, DomainError, GeneratorConfig,
                        generate_dataset, read_dataset, write_dataset)

REPORT_COLUMNS = ["method", "mean_gap_pct", "std_gap_pct", "mean_time_s",
                  "accuracy_pct"]
SWEEP_COLUMNS = ["family", "param", "k", "mean_gap_pct", "mean_time_s"]

REJECTION_GRID = [round(0.05 * i, 2) for i in range(1, 18)]     # 0.05 .. 0.85
REJECTION_KS = (2, 3, 4)
TOPP_GRID = [round(0.40 + 0.01 * i, 2) for i in range(56)]      # 0.40 .. 0.95


class PipelineError(RuntimeError):
    """Stage failure; carries the stage name and artifact directory."""


@dataclass
class ExperimentConfig:
    kind: str = "TSP"
    train_count: int = 2000
    val_count: int = 500
    test_count: int = 500
    n_range: tuple = (50, 150)
    max_components: int = 15
    capacity_mode: str = "mixed"
    zoo: Optional[list] = None          # solver names; None = full builtin zoo
    eliminate: bool = False
    elimination_delta: float = 0.01
    encoder_mode: str = "hierarchical"
    embed_dim: int = 16
    heads: int = 4
    ff_hidden: int = 32
    flat_layers: int = 2
    hier_blocks: int = 2
    layers_per_block: int = 2
    pool_ratio: float = 0.8
    head_hidden: int = 256
    loss: str = "ranking"
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 1e-6
    augment: bool = False
    strategies: list = field(default_factory=lambda: ["greedy", "topk:2"])
    seeds: list = field(default_factory=lambda: [0])
    out_dir: str = "runs/exp"
    jobs: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.kind not in ("TSP", "CVRP"):
            raise ConfigError(f"unknown problem kind {self.kind!r}")
        for name in ("train_count", "val_count", "test_count"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.encoder_mode not in ("flat", "hierarchical", "manual"):
            raise ConfigError(f"unknown encoder mode {self.encoder_mode!r}")
        for text in self.strategies:
            stg.parse_strategy(text)
        self.encoder_cfg()
        self.train_cfg()
        return self

    def encoder_cfg(self) -> Optional[EncoderConfig]:
        if self.encoder_mode == "manual":
            return None
        return EncoderConfig(
            embed_dim=self.embed_dim, heads=self.heads,
            ff_hidden=self.ff_hidden, flat_layers=self.flat_layers,
            hier_blocks=self.hier_blocks,
            layers_per_block=self.layers_per_block,
            pool_ratio=self.pool_ratio, mode=self.encoder_mode).validate()

    def train_cfg(self, seed: int = 0) -> mdl.TrainConfig:
        return mdl.TrainConfig(
            lr=self.lr, weight_decay=self.weight_decay, epochs=self.epochs,
            batch_size=self.batch_size, seed=seed, loss=self.loss,
            augment=self.augment).validate()

    def generator(self, seed: int) -> GeneratorConfig:
        return GeneratorConfig(
            n_range=tuple(self.n_range), max_components=self.max_components,
            capacity_mode=self.capacity_mode, seed=seed, kind=self.kind)

    def zoo_handles(self) -> list:
        handles = zoo_mod.builtin_zoo(self.kind)
        if self.zoo is None:
            return handles
        by_name = {h.id: h for h in handles}
        missing = [s for s in self.zoo if s not in by_name]
        if missing:
            raise ConfigError(f"unknown solvers for {self.kind}: {missing}")
        return [by_name[s] for s in self.zoo]


def load_config(path: str) -> ExperimentConfig:
    """Read an ExperimentConfig from a TOML file (flat keys or [experiment])."""
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    raw = raw.get("experiment", raw)
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown}")
    cfg = ExperimentConfig(**raw)
    if isinstance(cfg.n_range, list):
        cfg.n_range = tuple(cfg.n_range)
    return cfg.validate()


def config_fingerprint(cfg: ExperimentConfig) -> str:
    body = asdict(cfg)
    body["n_range"] = list(body["n_range"])
    return json.dumps(body, sort_keys=True, separators=(",", ":"))


def data_root(cfg: ExperimentConfig) -> str:
    return os.environ.get("PS_DATA_DIR", os.path.join(cfg.out_dir, "data"))


def _seed_dir(cfg: ExperimentConfig, seed: int) -> str:
    return os.path.join(cfg.out_dir, f"seed{seed}")


def _stage(name: str, where: str):
    """Annotate stage failures with a resume pointer."""
    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, PipelineError):
                raise PipelineError(
                    f"stage {name!r} failed in {where}: {exc}") from exc
            return False
    return _Ctx()


# ---------------------------------------------------------------------------
# stages

def stage_datasets(cfg: ExperimentConfig, seed: int) -> dict:
    root = os.path.join(data_root(cfg), f"seed{seed}")
    splits = {}
    counts = {"train": cfg.train_count, "val": cfg.val_count,
              "test": cfg.test_count}
    with _stage("gen-data", root):
        paths = {s: os.path.join(root, s) for s in counts}
        if all(os.path.exists(os.path.join(p, "manifest.json"))
               for p in paths.values()):
            return {s: read_dataset(p) for s, p in paths.items()}
        total = sum(counts.values())
        full = generate_dataset(cfg.generator(seed), total)
        start = 0
        for name in ("train", "val", "test"):
            chunk = full[start:start + counts[name]]
            start += counts[name]
            write_dataset(chunk, paths[name])
            splits[name] = chunk
    return splits


def stage_tables(cfg: ExperimentConfig, seed: int, splits: dict,
                 handles: list) -> dict:
    tdir = os.path.join(_seed_dir(cfg, seed), "tables")
    os.makedirs(tdir, exist_ok=True)
    tables = {}
    with _stage("run-zoo", tdir):
        for name, data in splits.items():
            path = os.path.join(tdir, f"{name}.jsonl")
            if os.path.exists(path) and os.path.exists(path + ".meta"):
                tables[name] = zoo_mod.PerformanceTable.load(path)
                continue
            table = zoo_mod.build_performance_table(
                handles, data, parallelism=cfg.jobs, seed=seed)
            table.save(path)
            tables[name] = table
    return tables


def stage_elimination(cfg: ExperimentConfig, seed: int, tables: dict) -> list:
    """Trim the zoo on the train table; returns the surviving solver ids."""
    path = os.path.join(_seed_dir(cfg, seed), "elimination.json")
    with _stage("eliminate", path):
        if os.path.exists(path):
            with open(path) as fh:
                return json.load(fh)["kept"]
        report = zoo_mod.eliminate_zoo(tables["train"],
                                       delta=cfg.elimination_delta)
        body = {"kept": report.final_zoo,
                "removed": [list(r) for r in report.removed],
                "delta": cfg.elimination_delta}
        with open(path, "w") as fh:
            json.dump(body, fh, sort_keys=True, indent=2)
        return report.final_zoo


def concat_tables(a: zoo_mod.PerformanceTable,
                  b: zoo_mod.PerformanceTable) -> zoo_mod.PerformanceTable:
    """Stack rows of two tables built over the same zoo."""
    if a.solver_ids != b.solver_ids:
        raise DomainError("tables cover different zoos")
    return zoo_mod.PerformanceTable(
        instance_ids=list(a.instance_ids) + list(b.instance_ids),
        solver_ids=list(a.solver_ids),
        objective=np.vstack([a.objective, b.objective]),
        time_ms=np.vstack([a.time_ms, b.time_ms]),
        reference=np.concatenate([a.reference, b.reference]),
        failed=np.vstack([a.failed, b.failed]),
        failures=list(a.failures) + list(b.failures))


def stage_train(cfg: ExperimentConfig, seed: int, splits: dict,
                tables: dict, solver_ids: list):
    sdir = _seed_dir(cfg, seed)
    model_path = os.path.join(sdir, "model.ckpt")
    hist_path = os.path.join(sdir, "history.csv")
    with _stage("train", sdir):
        if os.path.exists(model_path) and os.path.exists(hist_path):
            return ck.load_model(model_path)
        norm = (mdl.fit_feature_norm(splits["train"])
                if cfg.encoder_mode == "manual" else None)
        init = mdl.init_selection_model(
            solver_ids, cfg.kind, encoder_mode=cfg.encoder_mode,
            encoder_cfg=cfg.encoder_cfg(), head_hidden=cfg.head_hidden,
            seed=seed, feature_norm=norm)
        fit_table = concat_tables(tables["train"], tables["val"])
        trained, history = mdl.train(
            init, splits["train"], fit_table, cfg.train_cfg(seed),
            val_set=splits["val"])
        ck.save_model(model_path, trained)
        mdl.export_history_csv(history, hist_path)
        return trained


def _slug(label: str) -> str:
    return label.replace(":", "-").replace(",", "_").replace("=", "")


def _portfolio_stats(table: zoo_mod.PerformanceTable, dataset, decisions):
    """Mean gap, mean solver seconds, and win accuracy for chosen sets."""
    gaps = table.gaps()
    idx = table.row_index()
    gsum = tsum = hits = 0.0
    for it, d in zip(dataset, decisions):
        i = idx[it.id]
        cols = np.asarray(d.chosen)
        gsum += gaps[i, cols].min()
        tsum += table.time_ms[i, cols].sum() / 1000.0
        hits += bool(table.objective[i, cols].min()
                     <= table.objective[i].min() + 1e-9)
    n = len(dataset)
    return gsum / n, tsum / n, 100.0 * hits / n


def stage_evaluate(cfg: ExperimentConfig, seed: int, splits: dict,
                   tables: dict, model) -> list:
    """Per-strategy decisions and report rows on the test split."""
    sdir = _seed_dir(cfg, seed)
    timing_path = os.path.join(sdir, "selection_seconds.json")
    rows = []
    timings = {}
    if os.path.exists(timing_path):
        with open(timing_path) as fh:
            timings = json.load(fh)
    test = splits["test"]
    table = tables["test"]
    with _stage("evaluate", sdir):
        for text in cfg.strategies:
            name, params = stg.parse_strategy(text)
            label = stg.strategy_label(name, params)
            dpath = os.path.join(sdir, f"decisions_{_slug(label)}.jsonl")
            if os.path.exists(dpath) and label in timings:
                decisions = stg.read_decisions(dpath)
            else:
                t0 = time.perf_counter()
                decisions = stg.decide_all(model, test, name, params)
                timings[label] = time.perf_counter() - t0
                stg.write_decisions(dpath, decisions)
            gap, solver_s, acc = _portfolio_stats(table, test, decisions)
            mean_time = solver_s + timings[label] / len(test)
            rows.append({"method": label, "mean_gap_pct": gap,
                         "std_gap_pct": None, "mean_time_s": mean_time,
                         "accuracy_pct": acc})
        with open(timing_path, "w") as fh:
            json.dump(timings, fh, sort_keys=True, indent=2)
    return rows


def solver_rows(table: zoo_mod.PerformanceTable) -> list:
    """One report row per zoo member plus the per-instance oracle."""
    gaps = table.gaps()
    finite = np.where(np.isfinite(gaps), gaps, np.nan)
    rows = []
    for j, sid in enumerate(table.solver_ids):
        col = finite[:, j]
        mean_gap = float(np.nanmean(col)) if np.any(np.isfinite(col)) else float("inf")
        wins = 100.0 * float(np.mean(
            table.objective[:, j] <= table.objective.min(axis=1) + 1e-9))
        rows.append({"method": f"solver:{sid}",
                     "mean_gap_pct": mean_gap,
                     "std_gap_pct": None,
                     "mean_time_s": float(np.mean(table.time_ms[:, j])) / 1000.0,
                     "accuracy_pct": wins})
    best_j = np.argmin(np.where(np.isfinite(table.objective),
                                table.objective, np.inf), axis=1)
    oracle_gap = float(np.mean(gaps[np.arange(len(best_j)), best_j]))
    oracle_time = float(np.mean(
        table.time_ms[np.arange(len(best_j)), best_j])) / 1000.0
    rows.append({"method": "oracle", "mean_gap_pct": oracle_gap,
                 "std_gap_pct": None, "mean_time_s": oracle_time,
                 "accuracy_pct": 100.0})
    return rows


# ---------------------------------------------------------------------------
# reporting

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_report(rows: list, out_prefix: str) -> tuple:
    """Write rows as CSV and JSON with fixed columns; deterministic bytes."""
    if not rows:
        raise DomainError("cannot emit an empty report")
    csv_path, json_path = out_prefix + ".csv", out_prefix + ".json"
    os.makedirs(os.path.dirname(csv_path) or ".", exist_ok=True)
    lines = [",".join(REPORT_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in REPORT_COLUMNS))
    with open(csv_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(json_path, "w") as fh:
        fh.write(json.dumps(rows, sort_keys=True, indent=2) + "\n")
    return csv_path, json_path


def aggregate_reports(per_seed: list) -> list:
    """Mean/std over seeds, grouped by method; order follows the first seed."""
    if not per_seed:
        raise DomainError("no per-seed reports to aggregate")
    order = [row["method"] for row in per_seed[0]]
    rows = []
    for method in order:
        entries = [row for report in per_seed for row in report
                   if row["method"] == method]
        gaps = np.array([e["mean_gap_pct"] for e in entries])
        rows.append({
            "method": method,
            "mean_gap_pct": float(gaps.mean()),
            "std_gap_pct": float(gaps.std()),
            "mean_time_s": float(np.mean([e["mean_time_s"] for e in entries])),
            "accuracy_pct": float(np.mean([e["accuracy_pct"] for e in entries])),
        })
    return rows


# ---------------------------------------------------------------------------
# baselines and sweeps

def portfolio_baseline(table: zoo_mod.PerformanceTable, k: int) -> tuple:
    """Best fixed size-k portfolio by exhaustive enumeration.

    Ties resolve to the lexicographically first subset in column order.
    """
    m = len(table.solver_ids)
    if not (1 <= k <= m):
        raise ConfigError(f"k={k} outside [1, {m}]")
    if math.comb(m, k) > 10 ** 6:
        raise ConfigError(f"C({m},{k}) subsets exceed the enumeration cap")
    gaps = table.gaps()
    best_subset, best_gap = None, math.inf
    for subset in itertools.combinations(range(m), k):
        g = float(np.mean(gaps[:, subset].min(axis=1)))
        if g < best_gap - 1e-15:
            best_subset, best_gap = subset, g
    ids = tuple(table.solver_ids[j] for j in best_subset)
    return ids, best_gap


def compare_strategies(model, dataset, table: zoo_mod.PerformanceTable,
                       strategy_texts: list) -> tuple:
    """Report rows per strategy plus the rejection/top-p sweep grids."""
    rows = []
    for text in strategy_texts:
        name, params = stg.parse_strategy(text)
        decisions = stg.decide_all(model, dataset, name, params)
        gap, solver_s, acc = _portfolio_stats(table, dataset, decisions)
        rows.append({"method": stg.strategy_label(name, params),
                     "mean_gap_pct": gap, "std_gap_pct": None,
                     "mean_time_s": solver_s, "accuracy_pct": acc})

    scores = [(it.id, mdl.score(model, it)) for it in dataset]
    confidences = [stg._confidence(s) for _, s in scores]
    sweep = []
    for ratio in REJECTION_GRID:
        tau = stg.calibrate_rejection_threshold(confidences, ratio)
        for k in REJECTION_KS:
            decisions = [stg.select_rejection(s, tau, k, iid)
                         for iid, s in scores]
            gap, solver_s, _ = _portfolio_stats(table, dataset, decisions)
            sweep.append({"family": "reject", "param": ratio, "k": k,
                          "mean_gap_pct": gap, "mean_time_s": solver_s})
    for p in TOPP_GRID:
        decisions = [stg.select_topp(s, p, iid) for iid, s in scores]
        gap, solver_s, _ = _portfolio_stats(table, dataset, decisions)
        sweep.append({"family": "topp", "param": p, "k": None,
                      "mean_gap_pct": gap, "mean_time_s": solver_s})
    return rows, sweep


def emit_sweep(sweep: list, path: str) -> str:
    lines = [",".join(SWEEP_COLUMNS)]
    for row in sweep:
        lines.append(",".join(_fmt(row.get(c)) for c in SWEEP_COLUMNS))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# the full pipeline

def run_seed(cfg: ExperimentConfig, seed: int) -> list:
    """All stages for one seed; returns this seed's report rows."""
    splits = stage_datasets(cfg, seed)
    handles = cfg.zoo_handles()
    tables = stage_tables(cfg, seed, splits, handles)
    if cfg.eliminate:
        kept = stage_elimination(cfg, seed, tables)
        handles = [h for h in handles if h.id in kept]
        tables = {name: t.subset_columns(kept) for name, t in tables.items()}
    model = stage_train(cfg, seed, splits, tables,
                        [h.id for h in handles])
    rows = solver_rows(tables["test"])
    rows += stage_evaluate(cfg, seed, splits, tables, model)
    emit_report(rows, os.path.join(_seed_dir(cfg, seed), "report"))
    return rows


def run_pipeline(cfg: ExperimentConfig) -> dict:
    """Run every configured seed and write per-seed plus aggregate reports."""
    cfg.validate()
    os.makedirs(cfg.out_dir, exist_ok=True)
    fp_path = os.path.join(cfg.out_dir, "config.json")
    fingerprint = config_fingerprint(cfg)
    if os.path.exists(fp_path):
        with open(fp_path) as fh:
            stored = fh.read()
        if stored != fingerprint:
            raise PipelineError(
                f"{cfg.out_dir} holds artifacts for a different config; "
                "use a fresh output directory")
    else:
        with open(fp_path, "w") as fh:
            fh.write(fingerprint)
    per_seed = [run_seed(cfg, seed) for seed in cfg.seeds]
    aggregate = aggregate_reports(per_seed)
    emit_report(aggregate, os.path.join(cfg.out_dir, "aggregate"))
    return {"per_seed": per_seed, "aggregate": aggregate}
