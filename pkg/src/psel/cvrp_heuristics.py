"""Classical CVRP route-construction heuristics.

Functions take (instance, dm, rng, params) and return routes as lists of
customer indices (depot 0 excluded). Loads are checked against the
normalized capacity; demands are guaranteed <= capacity per customer.
"""

from __future__ import annotations

import numpy as np

from . import tsp_heuristics as tsp

_EPS = 1e-12


def _route_two_opt(dm, route):
    """2-opt the closed loop depot -> route -> depot."""
    if len(route) < 3:
        return list(route)
    cyc = np.array([0] + list(route), dtype=np.intp)
    sub = dm[np.ix_(cyc, cyc)]
    t = tsp.two_opt(sub, np.arange(len(cyc)), max_moves=4 * len(cyc))
    z = int(np.flatnonzero(t == 0)[0])
    t = np.roll(t, -z)
    return [int(cyc[i]) for i in t[1:]]


def _savings_merge(instance, dm, lam: float):
    """Parallel savings construction with shape parameter lam."""
    n = instance.scale
    if n <= 2:
        return [[i] for i in range(1, n)]
    dem = instance.demands
    cap = instance.capacity + _EPS
    cust = np.arange(1, n)
    iu = np.triu_indices(n - 1, k=1)
    ci, cj = cust[iu[0]], cust[iu[1]]
    s = dm[0, ci] + dm[0, cj] - lam * dm[ci, cj]
    order = np.lexsort((cj, ci, -s))
    routes = {int(i): [int(i)] for i in cust}
    rid = {int(i): int(i) for i in cust}
    load = {int(i): float(dem[i]) for i in cust}
    for k in order:
        if s[k] <= 0:
            break
        i, j = int(ci[k]), int(cj[k])
        ri, rj = rid[i], rid[j]
        if ri == rj or load[ri] + load[rj] > cap:
            continue
        a, b = routes[ri], routes[rj]
        if a[0] == i:
            a = a[::-1]
        if a[-1] != i:
            continue
        if b[-1] == j:
            b = b[::-1]
        if b[0] != j:
            continue
        routes[ri] = a + b
        load[ri] += load[rj]
        for c in b:
            rid[c] = ri
        del routes[rj], load[rj]
    return [routes[k] for k in sorted(routes)]


def clarke_wright(instance, dm, rng, params):
    return _savings_merge(instance, dm, lam=float(params.get("lam", 1.0)))


def sweep_two_opt(instance, dm, rng, params):
    """Polar-angle sweep into capacity bins, then per-route 2-opt."""
    n = instance.scale
    dem = instance.demands
    cap = instance.capacity + _EPS
    rel = instance.coords[1:] - instance.coords[0]
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    rad = np.hypot(rel[:, 0], rel[:, 1])
    order = np.lexsort((rad, ang))
    routes = []
    cur: list[int] = []
    load = 0.0
    for k in order:
        c = int(k) + 1
        if cur and load + dem[c] > cap:
            routes.append(cur)
            cur = []
            load = 0.0
        cur.append(c)
        load += float(dem[c])
    if cur:
        routes.append(cur)
    return [_route_two_opt(dm, r) for r in routes]


def nn_routes_two_opt(instance, dm, rng, params):
    """Greedy nearest-feasible-customer route builder, then per-route 2-opt."""
    n = instance.scale
    dem = instance.demands
    cap = instance.capacity + _EPS
    unvisited = np.ones(n, dtype=bool)
    unvisited[0] = False
    routes = []
    while unvisited.any():
        cur = 0
        load = 0.0
        route: list[int] = []
        while True:
            ok = unvisited & (dem <= cap - load)
            if not ok.any():
                break
            d = np.where(ok, dm[cur], np.inf)
            c = int(d.argmin())
            route.append(c)
            unvisited[c] = False
            load += float(dem[c])
            cur = c
        routes.append(route)
    return [_route_two_opt(dm, r) for r in routes]


def _or_opt(instance, dm, routes, passes: int):
    """Relocate segments of length 1..3 (either orientation), first improvement."""
    dem = instance.demands
    cap = instance.capacity + _EPS
    routes = [list(r) for r in routes]
    loads = [float(sum(dem[c] for c in r)) for r in routes]
    d = dm.tolist()  # plain lists: the scan is python-loop bound
    for _ in range(passes):
        improved = False
        ri = 0
        while ri < len(routes):
            r = routes[ri]
            s = 0
            while s < len(r):
                applied = False
                for seg_len in (1, 2, 3):
                    if s + seg_len > len(r):
                        break
                    seg = r[s:s + seg_len]
                    segd = float(sum(dem[c] for c in seg))
                    prev_n = r[s - 1] if s else 0
                    next_n = r[s + seg_len] if s + seg_len < len(r) else 0
                    gain = d[prev_n][seg[0]] + d[seg[-1]][next_n] - d[prev_n][next_n]
                    if gain <= 1e-12:     # insertion cost is nonnegative (metric)
                        continue
                    best = -1e-9
                    best_move = None
                    for rj in range(len(routes)):
                        if rj == ri:
                            base = r[:s] + r[s + seg_len:]
                        else:
                            if loads[rj] + segd > cap:
                                continue
                            base = routes[rj]
                        prev = 0
                        for p in range(len(base) + 1):
                            nxt = base[p] if p < len(base) else 0
                            dp = d[prev]
                            ins_f = dp[seg[0]] + d[seg[-1]][nxt] - dp[nxt]
                            ins_r = dp[seg[-1]] + d[seg[0]][nxt] - dp[nxt]
                            rev = ins_r < ins_f
                            delta = (ins_r if rev else ins_f) - gain
                            if delta < best:
                                best = delta
                                best_move = (rj, p, rev)
                            prev = nxt
                    if best_move is not None:
                        rj, p, rev = best_move
                        placed = seg[::-1] if rev else seg
                        if rj == ri:
                            base = r[:s] + r[s + seg_len:]
                            routes[ri] = base[:p] + placed + base[p:]
                        else:
                            routes[ri] = r[:s] + r[s + seg_len:]
                            routes[rj] = routes[rj][:p] + placed + routes[rj][p:]
                            loads[ri] -= segd
                            loads[rj] += segd
                        applied = True
                        improved = True
                        break
                if applied:
                    r = routes[ri]  # rescan current position on the new route
                else:
                    s += 1
            ri += 1
        # drop emptied routes before the next pass
        keep = [k for k in range(len(routes)) if routes[k]]
        routes = [routes[k] for k in keep]
        loads = [loads[k] for k in keep]
        if not improved:
            break
    return [r for r in routes if r]


def savings_or_opt(instance, dm, rng, params):
    """Shape-parameterized savings construction polished by Or-opt moves."""
    routes = _savings_merge(instance, dm, lam=float(params.get("lam", 1.4)))
    return _or_opt(instance, dm, routes, passes=int(params.get("passes", 2)))
