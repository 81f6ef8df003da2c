"""Child-process solver adapter speaking line-delimited JSON."""

from __future__ import annotations

import json
import subprocess
import time

from .instances import RoutingInstance, Solution, SolutionValidationError, tour_cost
from .zoo import SolverFailure


class SolverTimeout(SolverFailure):
    pass


class SolverProtocolError(SolverFailure):
    pass


class SolverInvalidSolution(SolverFailure):
    pass


def encode_request(instance: RoutingInstance) -> dict:
    req = {"id": instance.id,
           "problem": instance.kind.lower(),
           "coords": [[float(x), float(y)] for x, y in instance.coords]}
    if instance.kind == "CVRP":
        req["demands"] = [float(d) for d in instance.demands]
        req["capacity"] = float(instance.capacity)
    return req


def external_solve(command, instance: RoutingInstance, timeout: float) -> Solution:
    if timeout <= 0:
        raise SolverProtocolError("timeout must be positive")
    line = json.dumps(encode_request(instance)) + "\n"
    t0 = time.perf_counter()
    try:
        proc = subprocess.Popen(command, stdin=subprocess.PIPE,
                                stdout=subprocess.PIPE, stderr=subprocess.DEVNULL,
                                text=True)
    except OSError as exc:
        raise SolverProtocolError(f"cannot launch {command!r}: {exc}") from exc
    try:
        out, _ = proc.communicate(line, timeout=timeout)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.wait()
        raise SolverTimeout(f"solver exceeded {timeout}s on {instance.id}")
    wall = time.perf_counter() - t0
    if proc.returncode != 0:
        raise SolverProtocolError(f"solver exited with code {proc.returncode}")
    reply = out.splitlines()[0] if out.splitlines() else ""
    try:
        resp = json.loads(reply)
    except json.JSONDecodeError as exc:
        raise SolverProtocolError(f"malformed response: {reply[:200]!r}") from exc
    if not isinstance(resp, dict) or resp.get("id") != instance.id:
        raise SolverProtocolError(f"response id mismatch: {resp!r}")
    if "error" in resp:
        raise SolverFailure(f"solver reported: {resp['error']}")
    sol = Solution()
    if instance.kind == "TSP":
        if "tour" not in resp:
            raise SolverProtocolError("TSP response missing 'tour'")
        sol.tour = resp["tour"]
    else:
        if "routes" not in resp:
            raise SolverProtocolError("CVRP response missing 'routes'")
        sol.routes = resp["routes"]
    try:
        sol.objective = tour_cost(instance, sol)
    except SolutionValidationError as exc:
        raise SolverInvalidSolution(str(exc)) from exc
    sol.wall_time = wall
    return sol
