"""Classical TSP construction and local-search heuristics.

All functions take a precomputed distance matrix and return a tour as an
index array. They are deterministic given the rng argument; purely
constructive heuristics ignore it.
"""

from __future__ import annotations

import numpy as np


def _descend(dm: np.ndarray, t: np.ndarray, max_moves: int):
    """Best-improvement 2-opt; returns (tour, improving moves applied)."""
    n = len(t)
    if n < 4 or max_moves <= 0:
        return t, 0
    iu = np.triu_indices(n, k=1)
    used = 0
    while used < max_moves:
        nxt = np.roll(t, -1)
        d_cur = dm[t, nxt]
        # move (i, j): reverse t[i+1..j]; new edges (t[i],t[j]), (t[i+1],t[j+1])
        delta = dm[np.ix_(t, t)] + dm[np.ix_(nxt, nxt)] \
            - d_cur[:, None] - d_cur[None, :]
        flat = delta[iu]
        k = int(flat.argmin())
        if flat[k] >= -1e-12:
            break
        i, j = int(iu[0][k]), int(iu[1][k])
        t[i + 1:j + 1] = t[i + 1:j + 1][::-1]
        used += 1
    return t, used


def two_opt(dm: np.ndarray, tour, max_moves: int = 100_000) -> np.ndarray:
    t = np.asarray(tour, dtype=np.intp).copy()
    return _descend(dm, t, max_moves)[0]


def tour_length(dm: np.ndarray, tour) -> float:
    t = np.asarray(tour, dtype=np.intp)
    return float(dm[t, np.roll(t, -1)].sum())


def nearest_neighbor(dm: np.ndarray, start: int = 0) -> np.ndarray:
    n = dm.shape[0]
    visited = np.zeros(n, dtype=bool)
    tour = np.empty(n, dtype=np.intp)
    tour[0] = start
    visited[start] = True
    cur = start
    for i in range(1, n):
        d = np.where(visited, np.inf, dm[cur])
        cur = int(d.argmin())
        tour[i] = cur
        visited[cur] = True
    return tour


def nn_two_opt(coords, dm, rng, params) -> np.ndarray:
    t = nearest_neighbor(dm, start=int(params.get("start", 0)))
    return two_opt(dm, t, max_moves=int(params.get("max_moves", 3 * dm.shape[0])))


def greedy_edge(coords, dm, rng, params) -> np.ndarray:
    """Shortest-edge-first matching into a Hamiltonian cycle."""
    n = dm.shape[0]
    if n < 3:
        return np.arange(n, dtype=np.intp)
    iu = np.triu_indices(n, k=1)
    order = np.argsort(dm[iu], kind="stable")
    parent = np.arange(n)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    deg = np.zeros(n, dtype=np.intp)
    adj = [[] for _ in range(n)]
    added = 0
    for k in order:
        i, j = int(iu[0][k]), int(iu[1][k])
        if deg[i] >= 2 or deg[j] >= 2:
            continue
        ri, rj = find(i), find(j)
        if ri == rj:
            continue
        parent[ri] = rj
        adj[i].append(j)
        adj[j].append(i)
        deg[i] += 1
        deg[j] += 1
        added += 1
        if added == n - 1:
            break
    ends = [i for i in range(n) if deg[i] < 2]
    adj[ends[0]].append(ends[1])
    adj[ends[1]].append(ends[0])
    tour = np.empty(n, dtype=np.intp)
    tour[0] = 0
    prev = -1
    cur = 0
    for i in range(1, n):
        nxt = adj[cur][0] if adj[cur][0] != prev else adj[cur][1]
        tour[i] = nxt
        prev, cur = cur, nxt
    return tour


def farthest_insertion(coords, dm, rng, params) -> np.ndarray:
    n = dm.shape[0]
    if n < 4:
        return np.arange(n, dtype=np.intp)
    i0, j0 = np.unravel_index(int(dm.argmax()), dm.shape)
    tour = [int(i0), int(j0)]
    in_tour = np.zeros(n, dtype=bool)
    in_tour[[i0, j0]] = True
    mind = np.minimum(dm[:, i0], dm[:, j0])
    for _ in range(n - 2):
        cand = np.where(in_tour, -np.inf, mind)
        k = int(cand.argmax())
        t = np.asarray(tour)
        nxt = np.roll(t, -1)
        delta = dm[t, k] + dm[k, nxt] - dm[t, nxt]
        pos = int(delta.argmin())
        tour.insert(pos + 1, k)
        in_tour[k] = True
        mind = np.minimum(mind, dm[:, k])
    return np.asarray(tour, dtype=np.intp)


def _convex_hull(coords: np.ndarray) -> list[int]:
    """Andrew's monotone chain; returns hull vertex indices in CCW order."""
    order = np.lexsort((coords[:, 1], coords[:, 0]))

    def cross(o, a, b):
        return ((coords[a, 0] - coords[o, 0]) * (coords[b, 1] - coords[o, 1])
                - (coords[a, 1] - coords[o, 1]) * (coords[b, 0] - coords[o, 0]))

    lower = []
    for idx in order:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], idx) <= 0:
            lower.pop()
        lower.append(int(idx))
    upper = []
    for idx in order[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], idx) <= 0:
            upper.pop()
        upper.append(int(idx))
    hull = lower[:-1] + upper[:-1]
    return hull if len(hull) >= 2 else [int(order[0]), int(order[-1])]


def hull_cheapest_insertion(coords, dm, rng, params) -> np.ndarray:
    n = dm.shape[0]
    if n < 4:
        return np.arange(n, dtype=np.intp)
    tour = _convex_hull(coords)
    rem = [i for i in range(n) if i not in set(tour)]
    while rem:
        t = np.asarray(tour)
        nxt = np.roll(t, -1)
        r = np.asarray(rem)
        # delta[e, k]: cost of inserting rem[k] into tour edge e
        delta = dm[np.ix_(t, r)] + dm[np.ix_(nxt, r)] - dm[t, nxt][:, None]
        e, k = np.unravel_index(int(delta.argmin()), delta.shape)
        tour.insert(int(e) + 1, int(r[k]))
        rem.pop(int(k))
    return np.asarray(tour, dtype=np.intp)


def _hilbert_index(side: int, x: int, y: int) -> int:
    d = 0
    s = side // 2
    while s > 0:
        rx = 1 if (x & s) > 0 else 0
        ry = 1 if (y & s) > 0 else 0
        d += s * s * ((3 * rx) ^ ry)
        if ry == 0:
            if rx == 1:
                x = s - 1 - x
                y = s - 1 - y
            x, y = y, x
        s //= 2
    return d


def space_filling_curve(coords, dm, rng, params) -> np.ndarray:
    """Visit nodes in Hilbert-curve order on a 256x256 grid."""
    side = int(params.get("grid", 256))
    scaled = np.clip((coords * side).astype(np.intp), 0, side - 1)
    keys = np.array([_hilbert_index(side, int(px), int(py)) for px, py in scaled])
    return np.argsort(keys, kind="stable").astype(np.intp)


def multi_start_two_opt(coords, dm, rng, params) -> np.ndarray:
    """Random restarts sharing one fixed improving-move budget."""
    n = dm.shape[0]
    starts = int(params.get("starts", 4))
    budget = int(params.get("move_budget", 240))
    best = np.arange(n, dtype=np.intp)
    best_len = tour_length(dm, best)
    for _ in range(starts):
        if budget <= 0:
            break
        t = rng.permutation(n).astype(np.intp)
        improved, used = _descend(dm, t, budget)
        budget -= max(used, 1)
        length = tour_length(dm, improved)
        if length < best_len:
            best_len = length
            best = improved
    return best
