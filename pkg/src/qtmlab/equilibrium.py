"""Pure-strategy equilibrium computation and certification.

The stationarity system characterizing equilibrium is

    a_k^i = (p_k / 2c) (v_k^i - sum_l p_l v_l^i)        per agent,
    A_k   = (p_k / 2c) (V_k - sum_l p_l V_l)            in aggregate,

with p = softmax(A). For two alternatives the aggregate system collapses to a
single monotone root-finding problem solved by bisection on a guaranteed
bracket; for m > 2 a damped fixed-point iteration is used, optionally from
many starts to detect multiple equilibria. Certification reports both the
stationarity residual and the slack found by explicit best-response search.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import (
    FloatArray,
    MechanismParams,
    SoftmaxOutcome,
    ValueProfile,
    VoteProfile,
    as_matrix,
    as_vector,
)
from .qtm import softmax_probs

__all__ = [
    "AggregateSolution",
    "BestResponse",
    "EquilibriumSolution",
    "BestResponseDynamics",
    "solve_two_alt",
    "solve_foc_fixed_point",
    "solve_foc_multistart",
    "votes_from_aggregate",
    "best_response",
    "foc_residual",
    "verify_equilibrium",
    "best_response_dynamics",
    "solve_instance",
    "solve_instance_multistart",
]

CONVERGED = "converged"
MAX_ITERATIONS = "max-iterations"
NOT_APPLICABLE = "not-applicable"


@dataclass(frozen=True, eq=False)
class AggregateSolution:
    """Aggregate vote vector solving the stationarity system, with diagnostics."""

    aggregates: FloatArray
    p: FloatArray
    residual: float
    iterations: int
    status: str


def solve_two_alt(v1: float, v2: float, params: MechanismParams, tol: float = 1e-13) -> AggregateSolution:
    """Two-alternative aggregate equilibrium by bisection.

    Solves A = (V1 - V2) / (2c (e^A + e^-A)^2) on [0, (V1 - V2) / 8c]; the
    bracket is valid because p1 p2 <= 1/4, and the residual is strictly
    increasing so the root is unique.
    """
    if v2 > v1:
        raise ValueError("canonical ordering required: V1 >= V2")
    c = params.c
    dv = float(v1 - v2)
    if dv == 0.0:
        return AggregateSolution(
            aggregates=np.array([0.0, 0.0]),
            p=np.array([0.5, 0.5]),
            residual=0.0,
            iterations=0,
            status=CONVERGED,
        )

    def g(a: float) -> float:
        s = math.exp(a) + math.exp(-a)
        return a - dv / (2.0 * c * s * s)

    lo, hi = 0.0, dv / (8.0 * c)
    mid = 0.5 * hi
    it = 0
    for it in range(1, 201):
        mid = 0.5 * (lo + hi)
        val = g(mid)
        if abs(val) <= tol:
            break
        if val > 0.0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-17 * max(1.0, hi):
            break
    a = mid
    return AggregateSolution(
        aggregates=np.array([a, -a]),
        p=softmax_probs(np.array([a, -a])),
        residual=abs(g(a)),
        iterations=it,
        status=CONVERGED if abs(g(a)) <= max(tol, 1e-12) else MAX_ITERATIONS,
    )


def _foc_map(aggregates: FloatArray, totals: FloatArray, c: float) -> FloatArray:
    p = softmax_probs(aggregates)
    return p / (2.0 * c) * (totals - float(p @ totals))


def solve_foc_fixed_point(
    totals,
    params: MechanismParams,
    damping: float = 0.5,
    max_iter: int = 100_000,
    tol: float = 1e-10,
    init=None,
) -> AggregateSolution:
    """Damped iteration A <- (1 - damping) A + damping F(A) on the aggregate system.

    F always sums to zero, so the returned aggregates do too (up to rounding).
    Non-convergence is reported in the status, never silently.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    V = as_vector(totals)
    c = params.c
    A = np.zeros(V.size) if init is None else as_vector(init).copy()
    residual = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        F = _foc_map(A, V, c)
        residual = float(np.max(np.abs(A - F)))
        if residual <= tol:
            A = F
            break
        A = (1.0 - damping) * A + damping * F
    status = CONVERGED if residual <= tol else MAX_ITERATIONS
    return AggregateSolution(
        aggregates=A,
        p=softmax_probs(A),
        residual=residual,
        iterations=it,
        status=status,
    )


def solve_foc_multistart(
    totals,
    params: MechanismParams,
    n_starts: int = 8,
    seed: int = 0,
    damping: float = 0.5,
    max_iter: int = 100_000,
    tol: float = 1e-10,
    distinct_tol: float = 1e-7,
) -> list[AggregateSolution]:
    """Fixed points reached from A = 0 plus random starts, deduplicated.

    Existence theory does not rule out multiple fixed points for m > 2; any
    worst-case quantity should be evaluated over everything found here.
    """
    V = as_vector(totals)
    rng = np.random.default_rng(seed)
    scale = (float(V.max()) - float(V.min())) / (2.0 * params.c) + 1.0
    inits = [np.zeros(V.size)]
    inits.extend(rng.uniform(-scale, scale, size=V.size) for _ in range(n_starts))
    found: list[AggregateSolution] = []
    for init in inits:
        sol = solve_foc_fixed_point(V, params, damping=damping, max_iter=max_iter, tol=tol, init=init)
        if sol.status != CONVERGED:
            continue
        if all(np.max(np.abs(sol.aggregates - f.aggregates)) > distinct_tol for f in found):
            found.append(sol)
    return found


def votes_from_aggregate(values, p, params: MechanismParams) -> FloatArray:
    """Stationarity votes a_k^i = (p_k / 2c)(v_k^i - E_p v^i); rows sum to zero."""
    v = as_matrix(values)
    probs = np.asarray(p, dtype=np.float64)
    if np.any(probs <= 0):
        raise ValueError("p must be strictly positive")
    ev = v @ probs
    return probs[None, :] / (2.0 * params.c) * (v - ev[:, None])


@dataclass(frozen=True, eq=False)
class BestResponse:
    """Best-response search result for one agent against fixed opponent totals."""

    votes: FloatArray
    objective: float
    grad_norm: float
    on_boundary: bool
    heuristic: bool


def _own_objective(a: FloatArray, opp: FloatArray, v: FloatArray, c: float) -> float:
    p = softmax_probs(opp + a)
    return float(p @ v) - c * float(a @ a)


def _own_grad(a: FloatArray, opp: FloatArray, v: FloatArray, c: float) -> FloatArray:
    p = softmax_probs(opp + a)
    return p * (v - float(p @ v)) - 2.0 * c * a


def _projected_grad_norm(a: FloatArray, g: FloatArray, r: float) -> float:
    pg = g.copy()
    pg[(a >= r) & (g > 0)] = 0.0
    pg[(a <= -r) & (g < 0)] = 0.0
    return float(np.max(np.abs(pg)))


def _pga(a0: FloatArray, opp: FloatArray, v: FloatArray, c: float, r: float, tol: float, max_iter: int) -> FloatArray:
    """Projected gradient ascent with Armijo backtracking on the vote box."""
    a = np.clip(a0, -r, r)
    base_step = 1.0 / (2.0 * c)
    for _ in range(max_iter):
        g = _own_grad(a, opp, v, c)
        if _projected_grad_norm(a, g, r) <= tol:
            break
        f0 = _own_objective(a, opp, v, c)
        step = base_step
        while True:
            cand = np.clip(a + step * g, -r, r)
            if _own_objective(cand, opp, v, c) >= f0 + 1e-4 * float(g @ (cand - a)):
                break
            step *= 0.5
            if step < 1e-18:
                cand = a
                break
        if np.array_equal(cand, a):
            break
        a = cand
    return a


def best_response(opponent_aggregate, v_i, params: MechanismParams, tol: float = 1e-9, max_iter: int = 500) -> BestResponse:
    """Maximize p-weighted value minus the quadratic charge over the dominated box.

    In the strictly concave regime (c at least half the agent's top value) the
    optimum is interior and certified by the gradient norm. Below it, the
    search is restarted from several points and the result flagged heuristic.
    """
    opp = as_vector(opponent_aggregate)
    v = as_vector(v_i)
    c = params.c
    r = math.sqrt(float(v.max()) / c)
    if r == 0.0:
        zero = np.zeros(v.size)
        return BestResponse(zero, _own_objective(zero, opp, v, c), 0.0, False, False)

    concave = c >= 0.5 * float(v.max())
    if concave:
        # Damped stationarity iteration is a cheap near-exact warm start here.
        a = np.zeros(v.size)
        for _ in range(80):
            p = softmax_probs(opp + a)
            target = p / (2.0 * c) * (v - float(p @ v))
            nxt = 0.5 * a + 0.5 * target
            if np.max(np.abs(nxt - a)) <= 0.01 * tol:
                a = nxt
                break
            a = nxt
        a = _pga(a, opp, v, c, r, tol, max_iter)
        heuristic = False
    else:
        rng = np.random.default_rng(0)
        starts = [np.zeros(v.size)] + [rng.uniform(-r, r, size=v.size) for _ in range(4)]
        best = None
        for s in starts:
            cand = _pga(s, opp, v, c, r, tol, max_iter)
            val = _own_objective(cand, opp, v, c)
            if best is None or val > best[0]:
                best = (val, cand)
        a = best[1]
        heuristic = True

    g = _own_grad(a, opp, v, c)
    return BestResponse(
        votes=a,
        objective=_own_objective(a, opp, v, c),
        grad_norm=_projected_grad_norm(a, g, r),
        on_boundary=bool(np.any(np.abs(a) >= r * (1.0 - 1e-12))),
        heuristic=heuristic,
    )


def foc_residual(votes, values, params: MechanismParams) -> float:
    """Max-norm violation of both stationarity equations at a vote profile."""
    a = as_matrix(votes)
    v = as_matrix(values)
    c = params.c
    A = a.sum(axis=0)
    p = softmax_probs(A)
    ev = v @ p
    agent_target = p[None, :] / (2.0 * c) * (v - ev[:, None])
    V = v.sum(axis=0)
    agg_target = p / (2.0 * c) * (V - float(p @ V))
    return max(
        float(np.max(np.abs(a - agent_target))),
        float(np.max(np.abs(A - agg_target))),
    )


def verify_equilibrium(votes, values, params: MechanismParams, tol: float = 1e-8) -> tuple[float, float]:
    """(stationarity residual, best-response slack) of a vote profile.

    Both at or below tol certifies the profile as an equilibrium at that
    tolerance. The slack is the largest utility improvement any agent's
    best-response search can find; the redistribution term cancels in it.
    """
    a = as_matrix(votes)
    v = as_matrix(values)
    c = params.c
    A = a.sum(axis=0)
    residual = foc_residual(a, v, params)

    br_slack = -math.inf
    for i in range(a.shape[0]):
        opp = A - a[i]
        br = best_response(opp, v[i], params)
        slack = br.objective - _own_objective(a[i], opp, v[i], c)
        br_slack = max(br_slack, slack)
    return residual, br_slack


@dataclass(frozen=True, eq=False)
class EquilibriumSolution:
    """Certified (or diagnosed) result of one solve."""

    votes: VoteProfile
    aggregates: FloatArray
    p: SoftmaxOutcome
    foc_residual: float
    br_slack: float
    status: str

    def to_doc(self, seed: int | None = None, params: MechanismParams | None = None) -> dict:
        doc: dict = {
            "schemaVersion": 1,
            "A": self.aggregates.tolist(),
            "p": self.p.p.tolist(),
            "focResidual": self.foc_residual,
            "brSlack": self.br_slack,
            "status": self.status,
        }
        if seed is not None:
            doc["seed"] = seed
        if params is not None:
            doc["params"] = {"c": params.c}
        return doc

    def write_json(self, path: str | Path, seed: int | None = None, params: MechanismParams | None = None) -> None:
        Path(path).write_text(json.dumps(self.to_doc(seed, params), sort_keys=True, indent=2) + "\n")


def _solution_from_aggregates(
    profile: ValueProfile, params: MechanismParams, agg: AggregateSolution, with_br: bool, tol: float
) -> EquilibriumSolution:
    votes = votes_from_aggregate(profile.values, agg.p, params)
    if with_br:
        residual, br_slack = verify_equilibrium(votes, profile.values, params)
    else:
        residual = foc_residual(votes, profile.values, params)
        br_slack = math.nan
    status = agg.status
    if status == CONVERGED and residual > tol:
        status = MAX_ITERATIONS
    return EquilibriumSolution(
        votes=VoteProfile(votes),
        aggregates=agg.aggregates,
        p=SoftmaxOutcome(agg.p),
        foc_residual=residual,
        br_slack=br_slack,
        status=status,
    )


def solve_instance(
    profile: ValueProfile,
    params: MechanismParams,
    tol: float = 1e-10,
    with_br: bool = True,
) -> EquilibriumSolution:
    """Solve one instance to a certified equilibrium (focal fixed point).

    Two alternatives use the bisection specialization; more use the damped
    fixed-point iteration from zero. Votes are reconstructed from the solved
    aggregate and re-verified against both stationarity equations.
    """
    V = profile.aggregates
    if profile.m == 2:
        order = profile.canonical_order
        sub = solve_two_alt(float(V[order[0]]), float(V[order[1]]), params, tol=min(tol, 1e-13))
        aggregates = np.empty(2)
        aggregates[order[0]] = sub.aggregates[0]
        aggregates[order[1]] = sub.aggregates[1]
        agg = AggregateSolution(
            aggregates=aggregates,
            p=softmax_probs(aggregates),
            residual=sub.residual,
            iterations=sub.iterations,
            status=sub.status,
        )
    else:
        agg = solve_foc_fixed_point(V, params, tol=min(tol, 1e-12))
    return _solution_from_aggregates(profile, params, agg, with_br, tol)


def solve_instance_multistart(
    profile: ValueProfile,
    params: MechanismParams,
    n_starts: int = 8,
    seed: int = 0,
    tol: float = 1e-10,
    with_br: bool = False,
) -> list[EquilibriumSolution]:
    """All distinct equilibria found by multi-start solving (focal one first)."""
    sols = solve_foc_multistart(profile.aggregates, params, n_starts=n_starts, seed=seed, tol=min(tol, 1e-12))
    return [_solution_from_aggregates(profile, params, s, with_br, tol) for s in sols]


@dataclass(frozen=True, eq=False)
class BestResponseDynamics:
    """Round-robin best-response trajectory with per-round residuals."""

    trajectory: list[FloatArray]
    residuals: list[float]


def best_response_dynamics(
    values,
    params: MechanismParams,
    init=None,
    rounds: int = 200,
    stop_tol: float | None = None,
) -> BestResponseDynamics:
    """Sequential best-response updates; deterministic for a fixed start.

    Records the stationarity residual after every full round; stops early once
    it falls below stop_tol, if given.
    """
    v = as_matrix(values)
    n, m = v.shape
    a = np.zeros((n, m)) if init is None else as_matrix(init).copy()
    trajectory = [a.copy()]
    residuals: list[float] = []
    for _ in range(rounds):
        for i in range(n):
            opp = a.sum(axis=0) - a[i]
            a[i] = best_response(opp, v[i], params).votes
        residuals.append(foc_residual(a, v, params))
        trajectory.append(a.copy())
        if stop_tol is not None and residuals[-1] <= stop_tol:
            break
    return BestResponseDynamics(trajectory=trajectory, residuals=residuals)
