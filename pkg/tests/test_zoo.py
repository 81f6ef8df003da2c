import itertools
import json
import math
import os
import sys
import textwrap
import time

import numpy as np
import pytest

from psel import external, instances as inst, zoo
from psel.instances import GeneratorConfig, RoutingInstance


def make_table(gaps, solver_ids=None, ref=100.0):
    """Table whose gap matrix equals `gaps` exactly (reference fixed at 100)."""
    g = np.asarray(gaps, dtype=float)
    m, s = g.shape
    ids = solver_ids or [chr(ord("a") + j) for j in range(s)]
    return zoo.PerformanceTable(
        instance_ids=[f"i{r}" for r in range(m)],
        solver_ids=ids,
        objective=ref + g * ref / 100.0,
        time_ms=np.zeros((m, s)),
        reference=np.full(m, ref),
        failed=np.zeros((m, s), dtype=bool))


def square_instance():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    return RoutingInstance(id="sq", kind="TSP", coords=coords)


class TestBuiltinSolvers:
    def test_nn_perimeter(self):
        h = next(h for h in zoo.builtin_zoo("TSP") if h.name == "nn-2opt")
        sol = zoo.solve(h, square_instance())
        assert sol.objective == pytest.approx(4.0)

    def test_single_customer_route(self):
        coords = np.array([[0.2, 0.2], [0.2, 0.7]])
        it = RoutingInstance(id="one", kind="CVRP", coords=coords,
                             demands=np.array([0.0, 0.4]), capacity=1.0)
        for h in zoo.builtin_zoo("CVRP"):
            sol = zoo.solve(h, it)
            assert sol.routes == [[1]]
            assert sol.objective == pytest.approx(1.0)

    def test_all_solvers_beat_nothing_below_optimum(self):
        # exhaustive enumeration on small instances bounds every heuristic
        handles = zoo.builtin_zoo("TSP")
        for seed in range(12):
            rng = np.random.default_rng(seed)
            n = int(rng.integers(4, 9))
            coords = rng.random((n, 2))
            it = RoutingInstance(id=f"s{seed}", kind="TSP", coords=coords)
            dm = inst.pairwise_distances(coords)
            opt = min(
                sum(dm[t[i], t[(i + 1) % n]] for i in range(n))
                for t in ((0,) + p for p in itertools.permutations(range(1, n))))
            for h in handles:
                sol = zoo.solve(h, it, np.random.default_rng(seed))
                assert sol.objective >= opt - 1e-9, h.id

    def test_solutions_valid_on_fuzzed_instances(self):
        for seed in range(120):
            kind = "CVRP" if seed % 2 else "TSP"
            rng = inst.instance_rng(seed, 0)
            it = inst.generate_instance(
                GeneratorConfig(n_range=(2, 25), seed=seed, kind=kind), rng,
                f"f{seed}")
            for h in zoo.builtin_zoo(kind):
                sol = zoo.solve(h, it, np.random.default_rng(seed))
                inst.validate_solution(it, sol)   # raises on any violation
                assert math.isfinite(sol.objective)

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(3)
        it = inst.generate_instance(GeneratorConfig(n_range=(30, 30), seed=3), rng)
        h = next(h for h in zoo.builtin_zoo("TSP") if h.name == "multi-start-2opt")
        a = zoo.solve(h, it, np.random.default_rng(11))
        b = zoo.solve(h, it, np.random.default_rng(11))
        assert np.array_equal(a.tour, b.tour)

    def test_kind_mismatch_rejected(self):
        h = zoo.builtin_zoo("CVRP")[0]
        with pytest.raises(inst.DomainError, match="support"):
            zoo.solve(h, square_instance())


class TestPerformanceTable:
    def dataset(self, kind="TSP", count=8, seed=0, n=(10, 20)):
        return inst.generate_dataset(
            GeneratorConfig(n_range=n, seed=seed, kind=kind), count)

    def test_single_solver_reference(self):
        data = self.dataset(count=5)
        table = zoo.build_performance_table(zoo.builtin_zoo("TSP")[:1], data)
        assert np.allclose(table.reference, table.objective[:, 0])
        assert np.allclose(table.gaps(), 0.0)

    def test_submission_order_independence(self):
        data = self.dataset(count=6)
        handles = zoo.builtin_zoo("TSP")
        t1 = zoo.build_performance_table(handles, data, seed=5)
        t2 = zoo.build_performance_table(handles, data[::-1], seed=5)
        idx = t2.row_index()
        for i, iid in enumerate(t1.instance_ids):
            assert np.array_equal(t1.objective[i], t2.objective[idx[iid]])

    def test_parallel_matches_serial(self):
        data = self.dataset(count=6)
        handles = zoo.builtin_zoo("TSP")
        t1 = zoo.build_performance_table(handles, data, parallelism=1, seed=2)
        t2 = zoo.build_performance_table(handles, data, parallelism=2, seed=2)
        assert np.array_equal(t1.objective, t2.objective)

    def test_oracle_below_every_solver(self):
        data = self.dataset(count=20, kind="CVRP", n=(8, 25))
        table = zoo.build_performance_table(zoo.builtin_zoo("CVRP"), data)
        stats = zoo.zoo_statistics(table)
        for g in stats["mean_gap"].values():
            assert stats["oracle_gap"] <= g + 1e-12

    def test_save_load_roundtrip(self, tmp_path):
        data = self.dataset(count=4)
        table = zoo.build_performance_table(zoo.builtin_zoo("TSP"), data)
        p = str(tmp_path / "perf.jsonl")
        table.save(p)
        back = zoo.PerformanceTable.load(p)
        assert back.instance_ids == table.instance_ids
        assert back.solver_ids == table.solver_ids
        assert np.array_equal(back.objective, table.objective)
        assert np.array_equal(back.reference, table.reference)

    def test_external_reference_validated(self):
        data = self.dataset(count=3)
        handles = zoo.builtin_zoo("TSP")[:2]
        with pytest.raises(inst.DomainError, match="reference"):
            zoo.build_performance_table(
                handles, data, references={data[0].id: 1e9})


class TestZooStatistics:
    def test_dominating_solver(self):
        t = make_table([[0.0, 2.0], [0.0, 1.0], [0.0, 3.0]])
        stats = zoo.zoo_statistics(t)
        assert stats["win_share"]["a"] == 1.0
        assert stats["single_best"] == "a"
        assert stats["oracle_gap"] == pytest.approx(stats["mean_gap"]["a"])

    def test_symmetric_split(self):
        t = make_table([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        stats = zoo.zoo_statistics(t)
        assert stats["win_share"] == {"a": 0.5, "b": 0.5}

    def test_hand_table_win_counts(self):
        # rows: (1,2), (4,2), (3,3); ties award both solvers
        t = make_table([[1.0, 2.0], [4.0, 2.0], [3.0, 3.0]])
        stats = zoo.zoo_statistics(t)
        assert stats["win_counts"] == {"a": 2, "b": 2}
        assert stats["single_best"] == "b"   # mean gaps: a = 8/3, b = 7/3

    def test_empty_rejected(self):
        t = make_table(np.zeros((0, 2)))
        with pytest.raises(inst.DomainError):
            zoo.zoo_statistics(t)


class TestElimination:
    def test_hand_table(self):
        t = make_table([[1.0, 2.0, 3.0], [4.0, 2.0, 5.0]])
        contrib = zoo.solver_contributions(t.gaps(), [0, 1, 2])
        assert contrib == pytest.approx([0.5, 1.0, 0.0])
        report = zoo.eliminate_zoo(t, delta=0.01)
        assert report.removed[0][0] == "c"
        assert report.removed[0][1] == pytest.approx(0.0)

    def test_never_winning_removed_first(self):
        rng = np.random.default_rng(0)
        g = rng.uniform(1.0, 5.0, (30, 4))
        g[:, 2] = g.min(axis=1) + rng.uniform(0.5, 1.0, 30)  # strictly dominated
        report = zoo.eliminate_zoo(make_table(g), delta=0.01)
        assert report.removed[0][0] == "c"

    def test_unique_winners_keep_zoo(self):
        # each solver uniquely best on one row by a wide margin
        g = np.full((3, 3), 5.0)
        np.fill_diagonal(g, 0.0)
        report = zoo.eliminate_zoo(make_table(g), delta=0.01)
        assert report.removed == []
        assert report.final_zoo == ["a", "b", "c"]

    def test_contributions_nonnegative_property(self):
        for seed in range(25):
            rng = np.random.default_rng(seed)
            g = rng.uniform(0.0, 10.0, (12, 5))
            contrib = zoo.solver_contributions(g, list(range(5)))
            assert np.all(contrib >= -1e-12)

    def test_subset_min_monotonicity(self):
        rng = np.random.default_rng(1)
        g = rng.uniform(0.0, 10.0, (15, 4))
        full = zoo.portfolio_gap(g, range(4))
        for r in (1, 2, 3):
            for sub in itertools.combinations(range(4), r):
                sub_gap = zoo.portfolio_gap(g, sub)
                assert full <= sub_gap + 1e-12
                for sid in sub:
                    assert sub_gap <= g[:, sid].mean() + 1e-12

    def test_stops_at_single_solver(self):
        g = np.zeros((4, 3))   # everyone identical: all contributions zero
        report = zoo.eliminate_zoo(make_table(g), delta=0.01)
        assert len(report.final_zoo) == 1
        assert report.final_zoo == ["c"]   # a then b removed (lowest index first)


MOCK_IDENTITY = """
import json, sys
for line in sys.stdin:
    req = json.loads(line)
    n = len(req["coords"])
    if req["problem"] == "tsp":
        print(json.dumps({"id": req["id"], "tour": list(range(n))}))
    else:
        print(json.dumps({"id": req["id"], "routes": [[i] for i in range(1, n)]}))
    sys.stdout.flush()
    break
"""

MOCK_REPEAT = """
import json, sys
line = sys.stdin.readline()
req = json.loads(line)
n = len(req["coords"])
tour = list(range(n)); tour[-1] = 0
print(json.dumps({"id": req["id"], "tour": tour}))
"""

MOCK_SLEEPER = """
import time
time.sleep(30)
"""


def mock_cmd(tmp_path, code, name):
    p = tmp_path / name
    p.write_text(textwrap.dedent(code))
    return [sys.executable, str(p)]


class TestExternalAdapter:
    def test_identity_mock_accepted(self, tmp_path):
        it = square_instance()
        cmd = mock_cmd(tmp_path, MOCK_IDENTITY, "ok.py")
        sol = external.external_solve(cmd, it, timeout=20)
        assert sol.objective == pytest.approx(inst.tour_cost(it, [0, 1, 2, 3]))

    def test_repeated_node_rejected(self, tmp_path):
        cmd = mock_cmd(tmp_path, MOCK_REPEAT, "bad.py")
        with pytest.raises(external.SolverInvalidSolution):
            external.external_solve(cmd, square_instance(), timeout=20)

    def test_timeout_enforced(self, tmp_path):
        cmd = mock_cmd(tmp_path, MOCK_SLEEPER, "slow.py")
        t0 = time.perf_counter()
        with pytest.raises(external.SolverTimeout):
            external.external_solve(cmd, square_instance(), timeout=1.0)
        assert time.perf_counter() - t0 < 1.5

    def test_external_failure_lands_in_table(self, tmp_path):
        data = [square_instance()]
        cmd = mock_cmd(tmp_path, MOCK_REPEAT, "bad.py")
        handles = [zoo.SolverHandle(id="ext", kind="external", command=cmd,
                                    timeout=10, supported_kind="TSP"),
                   zoo.builtin_zoo("TSP")[0]]
        table = zoo.build_performance_table(handles, data)
        assert table.failed[0, 0]
        assert table.objective[0, 0] == np.inf
        assert table.failures and table.failures[0][1] == "ext"
        # reference ignores the failed cell
        assert np.isfinite(table.reference[0])
