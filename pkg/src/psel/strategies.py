"""Score-to-portfolio strategies and portfolio execution.

Strategies turn one score vector into an ordered solver subset: greedy
(argmax), top-k, top-p over softmax mass, or confidence-gated rejection
that widens to top-k only on low-confidence instances. Executing a
decision runs the chosen solvers and keeps the cheapest valid solution.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .instances import ConfigError, DomainError, RoutingInstance, Solution
from .model import SelectionModel, score
from .zoo import SolverFailure, cell_rng, solve

CUM_TOL = 1e-12     # inclusive boundary for cumulative softmax mass


@dataclass
class SelectionDecision:
    instance_id: str
    chosen: list                    # solver indices, descending score
    confidence: float               # max softmax probability
    strategy: str
    params: dict = field(default_factory=dict)

    def validate(self, zoo_size: int) -> "SelectionDecision":
        if not self.chosen:
            raise DomainError("decision must choose at least one solver")
        if len(set(self.chosen)) != len(self.chosen):
            raise DomainError("decision contains duplicate solvers")
        if any(not (0 <= j < zoo_size) for j in self.chosen):
            raise DomainError(f"solver index outside zoo of size {zoo_size}")
        return self


def _softmax(scores: np.ndarray) -> np.ndarray:
    e = np.exp(scores - scores.max())
    return e / e.sum()


def _descending(scores: np.ndarray) -> np.ndarray:
    # ties broken toward the lower index
    return np.lexsort((np.arange(len(scores)), -scores))


def _confidence(scores: np.ndarray) -> float:
    return float(_softmax(scores).max())


def select_greedy(scores, instance_id: str = "") -> SelectionDecision:
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise DomainError("cannot select from an empty score vector")
    best = int(_descending(scores)[0])
    return SelectionDecision(instance_id, [best], _confidence(scores), "greedy")


def select_topk(scores, k: int, instance_id: str = "") -> SelectionDecision:
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise DomainError("cannot select from an empty score vector")
    if not (1 <= k <= scores.size):
        raise ConfigError(f"k={k} outside [1, {scores.size}]")
    chosen = [int(j) for j in _descending(scores)[:k]]
    return SelectionDecision(instance_id, chosen, _confidence(scores),
                             "topk", {"k": k})


def select_topp(scores, p: float, instance_id: str = "") -> SelectionDecision:
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise DomainError("cannot select from an empty score vector")
    if not (0.0 < p <= 1.0):
        raise ConfigError(f"p={p} outside (0, 1]")
    probs = _softmax(scores)
    order = _descending(scores)
    chosen = []
    cum = 0.0
    for j in order:
        chosen.append(int(j))
        cum += probs[j]
        if cum >= p - CUM_TOL:
            break
    return SelectionDecision(instance_id, chosen, float(probs.max()),
                             "topp", {"p": p})


def calibrate_rejection_threshold(confidences, reject_ratio: float) -> float:
    """Lower-interpolation quantile with infinite sentinels at the ends.

    Under distinct confidences exactly floor(ratio * n) of them fall
    strictly below the returned threshold.
    """
    conf = np.asarray(confidences, dtype=float)
    if conf.size == 0:
        raise DomainError("cannot calibrate on an empty confidence list")
    if not (0.0 <= reject_ratio <= 1.0):
        raise ConfigError(f"reject ratio {reject_ratio} outside [0, 1]")
    idx = int(np.floor(reject_ratio * conf.size))
    if idx <= 0:
        return -np.inf
    if idx >= conf.size:
        return np.inf
    return float(np.sort(conf)[idx])


def select_rejection(scores, tau: float, k: int,
                     instance_id: str = "") -> SelectionDecision:
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise DomainError("cannot select from an empty score vector")
    if not (1 <= k <= scores.size):
        raise ConfigError(f"k={k} outside [1, {scores.size}]")
    conf = _confidence(scores)
    if conf >= tau:
        chosen = [int(_descending(scores)[0])]
    else:
        chosen = [int(j) for j in _descending(scores)[:k]]
    return SelectionDecision(instance_id, chosen, conf,
                             "reject", {"tau": tau, "k": k})


# ---------------------------------------------------------------------------
# strategy parsing and batch application

def parse_strategy(text: str):
    """CLI syntax: greedy | topk:K | reject:RATIO,K | topp:P."""
    head, _, arg = text.partition(":")
    try:
        if head == "greedy":
            if arg:
                raise ConfigError(f"greedy takes no parameters, got {arg!r}")
            return "greedy", {}
        if head == "topk":
            return "topk", {"k": int(arg)}
        if head == "topp":
            return "topp", {"p": float(arg)}
        if head == "reject":
            first, _, k = arg.partition(",")
            if first.startswith("tau="):
                return "reject", {"tau": float(first[4:]), "k": int(k)}
            return "reject", {"ratio": float(first), "k": int(k)}
    except ValueError as exc:
        raise ConfigError(f"bad strategy {text!r}: {exc}") from None
    raise ConfigError(f"unknown strategy {text!r}")


def strategy_label(name: str, params: dict) -> str:
    if name == "greedy":
        return "greedy"
    if name == "topk":
        return f"topk:{params['k']}"
    if name == "topp":
        return f"topp:{params['p']:g}"
    if name == "reject":
        ratio = params.get("ratio")
        head = f"{ratio:g}" if ratio is not None else f"tau={params['tau']:g}"
        return f"reject:{head},{params['k']}"
    raise ConfigError(f"unknown strategy {name!r}")


def decide_all(model: SelectionModel, dataset, name: str,
               params: Optional[dict] = None) -> list:
    """Apply one strategy across a dataset.

    Rejection calibrates its threshold on this dataset's own confidence
    distribution unless params carries a frozen "tau".
    """
    params = dict(params or {})
    rows = [(it.id, score(model, it)) for it in dataset]
    if name == "greedy":
        return [select_greedy(s, iid) for iid, s in rows]
    if name == "topk":
        return [select_topk(s, params["k"], iid) for iid, s in rows]
    if name == "topp":
        return [select_topp(s, params["p"], iid) for iid, s in rows]
    if name == "reject":
        if "tau" in params:
            tau = params["tau"]
        else:
            tau = calibrate_rejection_threshold(
                [_confidence(s) for _, s in rows], params["ratio"])
        return [select_rejection(s, tau, params["k"], iid) for iid, s in rows]
    raise ConfigError(f"unknown strategy {name!r}")


# ---------------------------------------------------------------------------
# execution

def execute_decision(instance: RoutingInstance, decision: SelectionDecision,
                     zoo: list, seed: int = 0, selection_ms: float = 0.0):
    """Run the chosen solvers; return (best Solution or None, records).

    Per-cell rng seeding matches the performance-table build, so the same
    seed reproduces table cells exactly. The winner is the cheapest valid
    solution, ties broken by lower solver index; its wall_time aggregates
    selection time plus every chosen solver's time.
    """
    decision.validate(len(zoo))
    records = []
    best: Optional[Solution] = None
    total_s = selection_ms / 1000.0
    for j in sorted(decision.chosen):
        handle = zoo[j]
        rng = cell_rng(seed, instance.id, handle.id)
        t0 = time.perf_counter()
        try:
            sol = solve(handle, instance, rng)
        except SolverFailure as exc:
            records.append({"solver_id": handle.id, "objective": None,
                            "time_ms": (time.perf_counter() - t0) * 1000.0,
                            "failed": True, "reason": str(exc)})
            total_s += time.perf_counter() - t0
            continue
        records.append({"solver_id": handle.id, "objective": sol.objective,
                        "time_ms": sol.wall_time * 1000.0, "failed": False,
                        "reason": None})
        total_s += sol.wall_time
        if best is None or sol.objective < best.objective - 1e-12:
            best = sol
    if best is not None:
        best.wall_time = total_s
    return best, records


# ---------------------------------------------------------------------------
# decision persistence

def write_decisions(path: str, decisions: list) -> None:
    with open(path, "w") as fh:
        for d in decisions:
            fh.write(json.dumps({
                "instance_id": d.instance_id,
                "strategy": strategy_label(d.strategy, d.params),
                "chosen": list(map(int, d.chosen)),
                "confidence": d.confidence,
            }, sort_keys=True) + "\n")


def read_decisions(path: str) -> list:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            name, params = parse_strategy(row["strategy"])
            out.append(SelectionDecision(
                instance_id=row["instance_id"], chosen=row["chosen"],
                confidence=row["confidence"], strategy=name, params=params))
    return out
