"""Routing instances: synthetic generation, augmentation, TSPLIB-style IO, costs.

Instances carry coordinates normalized to the unit square for model input.
File-loaded instances additionally keep their raw coordinates because the
classic file formats define cost on raw coordinates with integer rounding;
synthetic instances use exact float distances on the normalized coordinates.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np


class ConfigError(ValueError):
    pass


class DomainError(ValueError):
    pass


class ParseError(ValueError):
    pass


class UnsupportedFormatError(ParseError):
    pass


class SolutionValidationError(ValueError):
    pass


CAPACITY_MODES = ("scale_related", "triangular", "mixed")


@dataclass
class GeneratorConfig:
    n_range: tuple[int, int] = (50, 150)
    max_components: int = 15
    capacity_mode: str = "mixed"
    seed: int = 0
    kind: str = "TSP"

    def validate(self):
        lo, hi = self.n_range
        if not (2 <= lo <= hi):
            raise ConfigError(f"invalid n_range {self.n_range}: need 2 <= n_min <= n_max")
        if self.max_components < 0:
            raise ConfigError(f"max_components must be >= 0, got {self.max_components}")
        if self.capacity_mode not in CAPACITY_MODES:
            raise ConfigError(f"capacity_mode must be one of {CAPACITY_MODES}")
        if self.kind not in ("TSP", "CVRP"):
            raise ConfigError(f"kind must be TSP or CVRP, got {self.kind!r}")
        return self


@dataclass(eq=False)
class RoutingInstance:
    id: str
    kind: str                      # "TSP" | "CVRP"
    coords: np.ndarray             # (N, 2) float64 in [0,1]^2
    demands: Optional[np.ndarray] = None   # (N,) normalized by capacity; demands[0] == 0
    capacity: float = 1.0
    provenance: dict = field(default_factory=dict)
    raw_coords: Optional[np.ndarray] = None    # original file coordinates
    metric: str = "exact"          # "exact" | "rounded"

    @property
    def scale(self) -> int:
        return int(self.coords.shape[0])

    def cost_coords(self) -> np.ndarray:
        return self.coords if self.raw_coords is None else self.raw_coords


@dataclass
class Solution:
    tour: Optional[np.ndarray] = None      # TSP: permutation of range(N)
    routes: Optional[list] = None          # CVRP: list of customer-index lists
    objective: float = math.nan
    wall_time: float = 0.0


def instance_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-instance stream: child `index` of the root seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _minmax_unit_square(pts: np.ndarray) -> np.ndarray:
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = hi - lo
    out = np.empty_like(pts)
    for axis in range(2):
        if span[axis] <= 0:
            out[:, axis] = 0.5
        else:
            out[:, axis] = (pts[:, axis] - lo[axis]) / span[axis]
    return out


def _sample_coords(n: int, max_components: int, rng) -> np.ndarray:
    c = int(rng.integers(0, max_components + 1))
    if c == 0:
        return rng.random((n, 2))
    mus = rng.random((c, 2))
    var_x = rng.uniform(1.0, 100.0, c)
    var_y = rng.uniform(1.0, 100.0, c)
    bound = np.sqrt(var_x * var_y)
    cov = rng.uniform(-bound, bound)
    assign = rng.integers(0, c, n)
    z = rng.standard_normal((n, 2))
    # Cholesky factors of [[vx, cov], [cov, vy]]; vx >= 1 so no degenerate pivot
    l11 = np.sqrt(var_x)
    l21 = cov / l11
    l22 = np.sqrt(np.maximum(var_y - l21 ** 2, 0.0))
    pts = np.empty((n, 2))
    pts[:, 0] = mus[assign, 0] + l11[assign] * z[:, 0]
    pts[:, 1] = mus[assign, 1] + l21[assign] * z[:, 0] + l22[assign] * z[:, 1]
    return _minmax_unit_square(pts)


def _sample_capacity(n: int, mode: str, rng) -> float:
    if mode == "mixed":
        mode = "scale_related" if rng.random() < 0.5 else "triangular"
    if mode == "scale_related":
        return float(30 + math.ceil(n / 5))
    ub = rng.uniform(20.0, max(n / 2, 20.0 + 1e-9))
    m = rng.uniform(5.0, ub)
    lb = rng.uniform(3.0, m)
    return float(rng.triangular(lb, m, ub))


def generate_instance(cfg: GeneratorConfig, rng, instance_id: str = "synthetic",
                      index: Optional[int] = None) -> RoutingInstance:
    cfg.validate()
    lo, hi = cfg.n_range
    n = int(rng.integers(lo, hi + 1))
    coords = _sample_coords(n, cfg.max_components, rng)
    prov = {"source": "synthetic", "seed": cfg.seed, "index": index,
            "n_range": list(cfg.n_range), "max_components": cfg.max_components}
    if cfg.kind == "TSP":
        return RoutingInstance(id=instance_id, kind="TSP", coords=coords,
                               provenance=prov)
    q = _sample_capacity(n, cfg.capacity_mode, rng)
    raw_demand = np.minimum(rng.uniform(1.0, 10.0, n - 1), q)  # feasibility clamp
    demands = np.zeros(n)
    demands[1:] = raw_demand / q
    prov["capacity_raw"] = q
    return RoutingInstance(id=instance_id, kind="CVRP", coords=coords,
                           demands=demands, capacity=1.0, provenance=prov)


def generate_dataset(cfg: GeneratorConfig, count: int,
                     id_prefix: Optional[str] = None) -> list[RoutingInstance]:
    cfg.validate()
    prefix = id_prefix or cfg.kind.lower()
    out = []
    for i in range(count):
        rng = instance_rng(cfg.seed, i)
        out.append(generate_instance(cfg, rng, f"{prefix}_{cfg.seed}_{i:05d}", index=i))
    return out


_AUG = (
    lambda x, y: (x, y),
    lambda x, y: (y, x),
    lambda x, y: (x, 1 - y),
    lambda x, y: (y, 1 - x),
    lambda x, y: (1 - x, y),
    lambda x, y: (1 - y, x),
    lambda x, y: (1 - x, 1 - y),
    lambda x, y: (1 - y, 1 - x),
)


def augment_8fold(instance: RoutingInstance) -> list[RoutingInstance]:
    """The 8 symmetries of the unit square; view 0 is the identity."""
    c = instance.coords
    if c.min() < -1e-12 or c.max() > 1 + 1e-12:
        raise DomainError("augmentation requires coordinates inside the unit square")
    views = []
    for i, t in enumerate(_AUG):
        x, y = t(c[:, 0], c[:, 1])
        vid = instance.id if i == 0 else f"{instance.id}~{i}"
        prov = dict(instance.provenance)
        if i > 0:
            prov["augmented_from"] = instance.id
            prov["view"] = i
        views.append(RoutingInstance(
            id=vid, kind=instance.kind, coords=np.column_stack([x, y]),
            demands=None if instance.demands is None else instance.demands.copy(),
            capacity=instance.capacity, provenance=prov, metric=instance.metric))
    return views


def pairwise_distances(coords: np.ndarray, rounded: bool = False) -> np.ndarray:
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1))
    if rounded:
        d = np.floor(d + 0.5)
    return d


def _edge_length(a, b, rounded: bool) -> float:
    d = math.hypot(a[0] - b[0], a[1] - b[1])
    return math.floor(d + 0.5) if rounded else d


def validate_solution(instance: RoutingInstance, solution) -> None:
    tour, routes = _route_data(solution)
    n = instance.scale
    if instance.kind == "TSP":
        if tour is None:
            raise SolutionValidationError("TSP solution must provide a tour")
        t = np.asarray(tour)
        if t.shape != (n,) or not np.array_equal(np.sort(t), np.arange(n)):
            raise SolutionValidationError(f"tour is not a permutation of 0..{n - 1}")
        return
    if routes is None:
        raise SolutionValidationError("CVRP solution must provide routes")
    seen = np.zeros(n, dtype=bool)
    for ri, route in enumerate(routes):
        if len(route) == 0:
            raise SolutionValidationError(f"route {ri} is empty")
        load = 0.0
        for cust in route:
            if cust == 0:
                raise SolutionValidationError("depot may not appear inside a route")
            if not (1 <= cust < n):
                raise SolutionValidationError(f"customer {cust} out of range")
            if seen[cust]:
                raise SolutionValidationError(f"customer {cust} visited twice")
            seen[cust] = True
            load += instance.demands[cust]
        if load > instance.capacity + 1e-9:
            raise SolutionValidationError(
                f"capacity exceeded on route {ri}: load {load:.6f} > {instance.capacity}")
    missing = np.flatnonzero(~seen[1:]) + 1
    if missing.size:
        raise SolutionValidationError(f"customer {missing[0]} missing from routes")


def _route_data(solution):
    if isinstance(solution, Solution):
        return solution.tour, solution.routes
    if isinstance(solution, (list, tuple)) and solution and isinstance(solution[0], (list, tuple, np.ndarray)):
        return None, list(solution)
    return np.asarray(solution), None


def tour_cost(instance: RoutingInstance, solution) -> float:
    """Total route length; validates the solution first."""
    validate_solution(instance, solution)
    tour, routes = _route_data(solution)
    pts = instance.cost_coords()
    rounded = instance.metric == "rounded"
    if instance.kind == "TSP":
        t = np.asarray(tour)
        total = 0.0
        for i in range(len(t)):
            total += _edge_length(pts[t[i]], pts[t[(i + 1) % len(t)]], rounded)
        return total
    total = 0.0
    for route in routes:
        prev = 0
        for cust in route:
            total += _edge_length(pts[prev], pts[cust], rounded)
            prev = cust
        total += _edge_length(pts[prev], pts[0], rounded)
    return total


def optimality_gap(cost: float, reference_cost: float) -> float:
    """Percent above the reference objective."""
    if reference_cost <= 0:
        raise DomainError(f"reference cost must be positive, got {reference_cost}")
    if cost < reference_cost - 1e-9:
        raise DomainError(f"cost {cost} below reference {reference_cost}")
    return 100.0 * (cost - reference_cost) / reference_cost


# ---------------------------------------------------------------------------
# TSPLIB-style text format

EXACT_METRIC_COMMENT = "exact-metric"


def serialize_instance(instance: RoutingInstance) -> str:
    lines = [f"NAME : {instance.id}", f"TYPE : {instance.kind}"]
    if instance.metric == "exact":
        lines.append(f"COMMENT : {EXACT_METRIC_COMMENT}")
    n = instance.scale
    lines.append(f"DIMENSION : {n}")
    lines.append("EDGE_WEIGHT_TYPE : EUC_2D")
    if instance.kind == "CVRP":
        lines.append(f"CAPACITY : {float(instance.capacity)!r}")
    lines.append("NODE_COORD_SECTION")
    pts = instance.cost_coords()
    for i in range(n):
        lines.append(f"{i + 1} {float(pts[i, 0])!r} {float(pts[i, 1])!r}")
    if instance.kind == "CVRP":
        lines.append("DEMAND_SECTION")
        for i in range(n):
            d = float(instance.demands[i] * instance.capacity)
            lines.append(f"{i + 1} {d!r}")
        lines.append("DEPOT_SECTION")
        lines.append("1")
        lines.append("-1")
    lines.append("EOF")
    return "\n".join(lines) + "\n"


def _require_dimension(header, lineno, fail):
    if "DIMENSION" not in header:
        fail("section before DIMENSION header", lineno)
    return int(header["DIMENSION"])


def parse_instance_file(text: str, path: Optional[str] = None) -> RoutingInstance:
    lines = text.splitlines()
    header: dict[str, str] = {}
    coords_raw: list[tuple[float, float]] = []
    demands_map: dict[int, float] = {}
    depot_ids: list[int] = []
    i = 0

    def fail(msg, lineno):
        raise ParseError(f"line {lineno + 1}: {msg}")

    while i < len(lines):
        line = lines[i].strip()
        if not line:
            i += 1
            continue
        key = line.split(":")[0].strip().upper()
        if key == "EOF":
            break
        if key == "NODE_COORD_SECTION":
            dim = _require_dimension(header, i, fail)
            for j in range(dim):
                i += 1
                if i >= len(lines) or not lines[i].strip() or lines[i].strip().split(":")[0].strip().upper() in (
                        "DEMAND_SECTION", "DEPOT_SECTION", "EOF"):
                    fail(f"expected {dim} coordinate lines, found {j}", i if i < len(lines) else len(lines) - 1)
                parts = lines[i].split()
                if len(parts) < 3:
                    fail(f"malformed coordinate line {lines[i]!r}", i)
                try:
                    coords_raw.append((float(parts[1]), float(parts[2])))
                except ValueError:
                    fail(f"malformed coordinate line {lines[i]!r}", i)
        elif key == "DEMAND_SECTION":
            dim = _require_dimension(header, i, fail)
            for j in range(dim):
                i += 1
                parts = lines[i].split() if i < len(lines) else []
                if len(parts) < 2:
                    fail(f"expected {dim} demand lines, found {j}", min(i, len(lines) - 1))
                demands_map[int(parts[0])] = float(parts[1])
        elif key == "DEPOT_SECTION":
            while True:
                i += 1
                if i >= len(lines):
                    fail("unterminated DEPOT_SECTION", len(lines) - 1)
                tok = lines[i].strip()
                if tok == "-1":
                    break
                if tok:
                    depot_ids.append(int(tok))
        elif ":" in line:
            header[key] = line.split(":", 1)[1].strip()
        else:
            fail(f"unrecognized line {line!r}", i)
        i += 1

    ewt = header.get("EDGE_WEIGHT_TYPE", "").split()[0] if header.get("EDGE_WEIGHT_TYPE") else ""
    if ewt != "EUC_2D":
        raise UnsupportedFormatError(f"unsupported EDGE_WEIGHT_TYPE {ewt or '<missing>'}; only EUC_2D")
    kind = header.get("TYPE", "TSP").split()[0].upper()
    if kind not in ("TSP", "CVRP"):
        raise UnsupportedFormatError(f"unsupported TYPE {kind}")
    if "DIMENSION" not in header:
        raise ParseError("missing DIMENSION header")
    dim = int(header["DIMENSION"])
    if len(coords_raw) != dim:
        raise ParseError(f"DIMENSION {dim} but {len(coords_raw)} coordinates parsed")
    raw = np.array(coords_raw)
    exact = EXACT_METRIC_COMMENT in header.get("COMMENT", "")
    name = header.get("NAME", path or "unnamed")
    prov = {"source": "file", "path": path or "<string>"}

    demands = None
    capacity = 1.0
    if kind == "CVRP":
        if "CAPACITY" not in header:
            raise ParseError("CVRP file missing CAPACITY")
        if not demands_map:
            raise ParseError("CVRP file missing DEMAND_SECTION")
        if not depot_ids:
            raise ParseError("CVRP file missing DEPOT_SECTION")
        q = float(header["CAPACITY"])
        if q <= 0:
            raise ParseError(f"CAPACITY must be positive, got {q}")
        demands = np.zeros(dim)
        for node_id, d in demands_map.items():
            if not (1 <= node_id <= dim):
                raise ParseError(f"demand for unknown node {node_id}")
            demands[node_id - 1] = d / q
        depot = depot_ids[0] - 1
        if not (0 <= depot < dim):
            raise ParseError(f"depot id {depot_ids[0]} out of range")
        if depot != 0:
            # rotate nodes so the depot sits at index 0
            order = np.r_[depot, np.arange(0, depot), np.arange(depot + 1, dim)]
            raw = raw[order]
            demands = demands[order]
        if abs(demands[0]) > 1e-12:
            raise ParseError("depot demand must be zero")
        if demands[1:].max(initial=0.0) > 1 + 1e-9:
            raise ParseError("demand exceeds capacity")

    if exact:
        return RoutingInstance(id=name, kind=kind, coords=raw, demands=demands,
                               capacity=capacity, provenance=prov, metric="exact")
    return RoutingInstance(id=name, kind=kind, coords=_minmax_unit_square(raw),
                           demands=demands, capacity=capacity, provenance=prov,
                           raw_coords=raw, metric="rounded")


# ---------------------------------------------------------------------------
# Dataset directories: one file per instance plus a JSON manifest

def write_dataset(instances: list[RoutingInstance], dirpath: str,
                  cfg: Optional[GeneratorConfig] = None) -> str:
    os.makedirs(dirpath, exist_ok=True)
    files = {}
    for inst in instances:
        ext = "vrp" if inst.kind == "CVRP" else "tsp"
        fname = f"{inst.id}.{ext}"
        with open(os.path.join(dirpath, fname), "w") as fh:
            fh.write(serialize_instance(inst))
        files[inst.id] = fname
    manifest = {
        "format": 1,
        "count": len(instances),
        "ids": [inst.id for inst in instances],
        "files": files,
        "generator": asdict(cfg) if cfg is not None else None,
    }
    mpath = os.path.join(dirpath, "manifest.json")
    with open(mpath, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return mpath


def read_dataset(dirpath: str) -> list[RoutingInstance]:
    with open(os.path.join(dirpath, "manifest.json")) as fh:
        manifest = json.load(fh)
    out = []
    for iid in manifest["ids"]:
        fname = manifest["files"][iid]
        fpath = os.path.join(dirpath, fname)
        with open(fpath) as fh:
            out.append(parse_instance_file(fh.read(), path=fpath))
    return out
