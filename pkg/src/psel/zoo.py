"""Solver zoo: uniform interface, built-in heuristics, performance tables,
win statistics, and contribution-based zoo elimination."""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import cvrp_heuristics as cvrp
from . import tsp_heuristics as tsp
from .instances import (DomainError, RoutingInstance, Solution,
                        pairwise_distances, tour_cost)


class SolverFailure(RuntimeError):
    """A solver could not produce a valid solution for an instance."""


@dataclass
class SolverHandle:
    id: str
    kind: str = "builtin"              # "builtin" | "external"
    name: str = ""                     # builtin algorithm key
    params: dict = field(default_factory=dict)
    command: Optional[list] = None     # external: argv
    timeout: float = 60.0
    supported_kind: str = "both"       # "TSP" | "CVRP" | "both"

    def supports(self, instance_kind: str) -> bool:
        return self.supported_kind in ("both", instance_kind)


TSP_BUILTINS = {
    "nn-2opt": tsp.nn_two_opt,
    "greedy-edge": tsp.greedy_edge,
    "farthest-insertion": tsp.farthest_insertion,
    "hull-cheapest-insertion": tsp.hull_cheapest_insertion,
    "space-filling-curve": tsp.space_filling_curve,
    "multi-start-2opt": tsp.multi_start_two_opt,
}

CVRP_BUILTINS = {
    "clarke-wright": cvrp.clarke_wright,
    "sweep-2opt": cvrp.sweep_two_opt,
    "nn-routes-2opt": cvrp.nn_routes_two_opt,
    "savings-or-opt": cvrp.savings_or_opt,
}


def builtin_zoo(kind: str) -> list[SolverHandle]:
    if kind == "TSP":
        names = TSP_BUILTINS
    elif kind == "CVRP":
        names = CVRP_BUILTINS
    else:
        raise DomainError(f"unknown problem kind {kind!r}")
    return [SolverHandle(id=name, kind="builtin", name=name, supported_kind=kind)
            for name in names]


def solve(handle: SolverHandle, instance: RoutingInstance,
          rng: Optional[np.random.Generator] = None) -> Solution:
    if not handle.supports(instance.kind):
        raise DomainError(
            f"solver {handle.id} does not support {instance.kind} instances")
    if rng is None:
        rng = np.random.default_rng(0)
    if handle.kind == "external":
        from .external import external_solve
        return external_solve(handle.command, instance, handle.timeout)
    t0 = time.perf_counter()
    dm = pairwise_distances(instance.cost_coords(),
                            rounded=instance.metric == "rounded")
    if instance.kind == "TSP":
        fn = TSP_BUILTINS.get(handle.name)
        if fn is None:
            raise DomainError(f"unknown builtin TSP solver {handle.name!r}")
        tour = fn(instance.coords, dm, rng, handle.params)
        sol = Solution(tour=np.asarray(tour, dtype=np.intp))
    else:
        fn = CVRP_BUILTINS.get(handle.name)
        if fn is None:
            raise DomainError(f"unknown builtin CVRP solver {handle.name!r}")
        routes = fn(instance, dm, rng, handle.params)
        sol = Solution(routes=[list(map(int, r)) for r in routes])
    sol.objective = tour_cost(instance, sol)
    sol.wall_time = time.perf_counter() - t0
    return sol


# ---------------------------------------------------------------------------
# Performance table

@dataclass
class PerformanceTable:
    instance_ids: list
    solver_ids: list
    objective: np.ndarray          # (M, S); +inf marks failures
    time_ms: np.ndarray            # (M, S)
    reference: np.ndarray          # (M,)
    failed: np.ndarray             # (M, S) bool
    failures: list = field(default_factory=list)   # (instance_id, solver_id, reason)

    def gaps(self) -> np.ndarray:
        """Percent above reference, row-wise; +inf where the solver failed."""
        return 100.0 * (self.objective - self.reference[:, None]) / self.reference[:, None]

    def row_index(self) -> dict:
        return {iid: i for i, iid in enumerate(self.instance_ids)}

    def subset_rows(self, indices) -> "PerformanceTable":
        idx = np.asarray(indices)
        return PerformanceTable(
            instance_ids=[self.instance_ids[i] for i in idx],
            solver_ids=list(self.solver_ids),
            objective=self.objective[idx].copy(),
            time_ms=self.time_ms[idx].copy(),
            reference=self.reference[idx].copy(),
            failed=self.failed[idx].copy(),
            failures=list(self.failures))

    def subset_columns(self, solver_ids) -> "PerformanceTable":
        """Restrict to the named solvers; references stay as recorded so gaps
        against the original best-known values remain comparable."""
        col = {sid: j for j, sid in enumerate(self.solver_ids)}
        missing = [s for s in solver_ids if s not in col]
        if missing:
            raise DomainError(f"unknown solver ids {missing}")
        idx = [col[s] for s in solver_ids]
        keep = set(solver_ids)
        return PerformanceTable(
            instance_ids=list(self.instance_ids),
            solver_ids=list(solver_ids),
            objective=self.objective[:, idx].copy(),
            time_ms=self.time_ms[:, idx].copy(),
            reference=self.reference.copy(),
            failed=self.failed[:, idx].copy(),
            failures=[f for f in self.failures if f[1] in keep])

    def save(self, path: str) -> None:
        meta = {
            "instance_ids": list(self.instance_ids),
            "solver_ids": list(self.solver_ids),
            "reference": [float(x) for x in self.reference],
            "failures": [list(f) for f in self.failures],
        }
        with open(str(path) + ".meta", "w") as fh:
            json.dump(meta, fh, sort_keys=True, indent=1)
            fh.write("\n")
        with open(path, "w") as fh:
            for i, iid in enumerate(self.instance_ids):
                for j, sid in enumerate(self.solver_ids):
                    rec = {"instance_id": iid, "solver_id": sid,
                           "objective": float(self.objective[i, j]),
                           "time_ms": float(self.time_ms[i, j]),
                           "failed": bool(self.failed[i, j])}
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str) -> "PerformanceTable":
        with open(str(path) + ".meta") as fh:
            meta = json.load(fh)
        iindex = {iid: i for i, iid in enumerate(meta["instance_ids"])}
        sindex = {sid: j for j, sid in enumerate(meta["solver_ids"])}
        m, s = len(iindex), len(sindex)
        objective = np.full((m, s), np.nan)
        time_ms = np.zeros((m, s))
        failed = np.zeros((m, s), dtype=bool)
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                i, j = iindex[rec["instance_id"]], sindex[rec["solver_id"]]
                objective[i, j] = rec["objective"]
                time_ms[i, j] = rec["time_ms"]
                failed[i, j] = rec["failed"]
        if np.isnan(objective).any():
            raise DomainError("performance table has holes")
        return cls(instance_ids=meta["instance_ids"], solver_ids=meta["solver_ids"],
                   objective=objective, time_ms=time_ms,
                   reference=np.array(meta["reference"], dtype=float),
                   failed=failed, failures=[tuple(f) for f in meta["failures"]])


def cell_rng(seed: int, instance_id: str, solver_id: str) -> np.random.Generator:
    """Stable per-cell stream independent of submission order and parallelism."""
    digest = hashlib.sha256(f"{seed}|{instance_id}|{solver_id}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _solve_row(args):
    instance, handles, seed = args
    objs, times, fails, reasons = [], [], [], []
    for h in handles:
        rng = cell_rng(seed, instance.id, h.id)
        try:
            sol = solve(h, instance, rng)
            objs.append(sol.objective)
            times.append(sol.wall_time * 1000.0)
            fails.append(False)
            reasons.append(None)
        except SolverFailure as exc:
            objs.append(np.inf)
            times.append(0.0)
            fails.append(True)
            reasons.append(str(exc))
    return instance.id, objs, times, fails, reasons


def build_performance_table(zoo: list, dataset: list, parallelism: int = 1,
                            references: Optional[dict] = None,
                            seed: int = 0) -> PerformanceTable:
    for inst_ in dataset:
        for h in zoo:
            if not h.supports(inst_.kind):
                raise DomainError(
                    f"solver {h.id} incompatible with instance {inst_.id}")
    ids = [h.id for h in zoo]
    if len(set(ids)) != len(ids):
        raise DomainError("solver ids must be unique within a zoo")
    jobs = [(inst_, zoo, seed) for inst_ in dataset]
    if parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            rows = list(pool.map(_solve_row, jobs, chunksize=8))
    else:
        rows = [_solve_row(j) for j in jobs]
    by_id = {r[0]: r for r in rows}
    m, s = len(dataset), len(zoo)
    objective = np.zeros((m, s))
    time_ms = np.zeros((m, s))
    failed = np.zeros((m, s), dtype=bool)
    failures = []
    for i, inst_ in enumerate(dataset):
        _, objs, times, fails, reasons = by_id[inst_.id]
        objective[i] = objs
        time_ms[i] = times
        failed[i] = fails
        for j, reason in enumerate(reasons):
            if reason is not None:
                failures.append((inst_.id, ids[j], reason))
    finite = np.where(np.isfinite(objective), objective, np.inf)
    rowmin = finite.min(axis=1)
    if references is None:
        reference = rowmin
    else:
        reference = np.array([references.get(inst_.id, rowmin[i])
                              for i, inst_ in enumerate(dataset)])
        if np.any(reference > rowmin + 1e-9):
            bad = int(np.argmax(reference - rowmin))
            raise DomainError(
                f"reference for {dataset[bad].id} exceeds best observed objective")
    return PerformanceTable(instance_ids=[d.id for d in dataset], solver_ids=ids,
                            objective=objective, time_ms=time_ms,
                            reference=reference, failed=failed, failures=failures)


def zoo_statistics(table: PerformanceTable) -> dict:
    m = len(table.instance_ids)
    s = len(table.solver_ids)
    if m == 0 or s == 0:
        raise DomainError("empty performance table")
    gaps = table.gaps()
    mean_gap = gaps.mean(axis=0)
    rowmin = table.objective.min(axis=1)
    wins = (table.objective <= rowmin[:, None] + 1e-9).sum(axis=0)
    best = int(np.argmin(mean_gap))   # ties resolve to the lower index
    oracle = float(gaps.min(axis=1).mean())
    return {
        "mean_gap": {sid: float(mean_gap[j]) for j, sid in enumerate(table.solver_ids)},
        "oracle_gap": oracle,
        "single_best": table.solver_ids[best],
        "single_best_gap": float(mean_gap[best]),
        "win_counts": {sid: int(wins[j]) for j, sid in enumerate(table.solver_ids)},
        "win_share": {sid: float(wins[j]) / m for j, sid in enumerate(table.solver_ids)},
        "rows": m,
    }


@dataclass
class ZooEliminationReport:
    removed: list          # (solver_id, contribution at removal), in removal order
    final_zoo: list
    delta: float


def portfolio_gap(gaps: np.ndarray, columns) -> float:
    """Mean over rows of the best gap among the given solver columns."""
    cols = np.asarray(list(columns))
    if cols.size == 0:
        raise DomainError("portfolio must contain at least one solver")
    return float(gaps[:, cols].min(axis=1).mean())


def solver_contributions(gaps: np.ndarray, active: list) -> np.ndarray:
    """A(s) = meanGap(active minus s) - meanGap(active), for each s in active."""
    g = gaps[:, active]
    part = np.partition(g, 1, axis=1) if g.shape[1] > 1 else g
    rowmin = part[:, 0]
    second = part[:, 1] if g.shape[1] > 1 else np.full(g.shape[0], np.inf)
    base = rowmin.mean()
    out = np.empty(len(active))
    for k in range(len(active)):
        drop_min = np.where(g[:, k] <= rowmin, second, rowmin)
        out[k] = drop_min.mean() - base
    return out


def eliminate_zoo(table: PerformanceTable, delta: float = 0.01) -> ZooEliminationReport:
    if len(table.solver_ids) < 2:
        raise DomainError("elimination needs a zoo of at least 2 solvers")
    if delta < 0:
        raise DomainError("delta must be nonnegative")
    gaps = table.gaps()
    active = list(range(len(table.solver_ids)))
    removed = []
    while len(active) > 1:
        contrib = solver_contributions(gaps, active)
        k = int(np.argmin(contrib))   # ties resolve to the lower solver index
        if contrib[k] <= delta:
            removed.append((table.solver_ids[active[k]], float(contrib[k])))
            active.pop(k)
        else:
            break
    return ZooEliminationReport(
        removed=removed,
        final_zoo=[table.solver_ids[j] for j in active],
        delta=delta)
