"""Two-stage runs: aggregation produces estimates, the committed decision stage selects.

A certified run keeps redistribution off, uses importance-weighted settlement,
plays focal stationarity votes in the decision stage, and evaluates every
bound inline. The practical-variant runs execute the submitted-votes fixed
point instead and are always marked uncertified.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .aggregation import (
    EfficientMarketRun,
    ManipulatorContext,
    MarketState,
    OutcomeModel,
    WagerState,
    alternative_independence_check,
    market_payoff,
    optimize_wager_report,
    settlement_transcript,
    simulate_efficient_market,
    wagering_aggregate,
    wagering_payoffs,
)
from .analysis import MARGIN_TOL, BoundReport, bound_squap
from .core import FloatArray, MechanismParams, ValueProfile, as_vector
from .qtm import PaymentReport
from .synthetic import commit, focal_votes, run_impractical, solve_practical_two_alt

__all__ = [
    "SquapConfig",
    "SquapRun",
    "StageError",
    "run_impractical_squap",
    "run_practical_squap",
    "accuracy_bound_check",
    "SelfFundingReport",
    "self_funding_check",
]

ALT_INDEPENDENCE_TOL = 1e-10


class StageError(RuntimeError):
    """Failure inside one stage of a combined run, tagged with the stage name."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[stage {stage}] {message}")
        self.stage = stage


@dataclass(frozen=True)
class SquapConfig:
    """Reproducible parameters of one combined run."""

    aggregation: str = "market"  # market | wagering
    epsilon: float = 0.25  # liquidity scale: beta = epsilon * max value
    beta: float | None = None  # overrides epsilon when set
    c: float | None = None  # defaults to half the max value
    redistribute: bool = False  # must stay off in certified runs
    seed: int = 0
    n_participants: int = 4
    initial: tuple[float, ...] | None = None  # market prior, defaults to zeros
    manipulator: int | None = None  # agent index acting in both stages
    variances: tuple[float, ...] | None = None  # noisy observed outcomes; expectations stay analytic

    def __post_init__(self) -> None:
        if self.aggregation not in ("market", "wagering"):
            raise ValueError(f"unknown aggregation kind {self.aggregation!r}")
        if self.beta is None and self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.beta is not None and self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.n_participants < 2:
            raise ValueError("need at least two aggregation participants")
        if self.variances is not None and any(v < 0 for v in self.variances):
            raise ValueError("variances must be nonnegative")

    def outcome_model(self, B: FloatArray) -> OutcomeModel:
        if self.variances is None:
            return OutcomeModel(means=B)
        return OutcomeModel(means=B, variances=np.asarray(self.variances, dtype=float), family="gaussian")

    def to_doc(self) -> dict:
        return {
            "aggregation": self.aggregation,
            "epsilon": self.epsilon,
            "beta": self.beta,
            "c": self.c,
            "redistribute": self.redistribute,
            "seed": self.seed,
            "nParticipants": self.n_participants,
            "initial": list(self.initial) if self.initial is not None else None,
            "manipulator": self.manipulator,
            "variances": list(self.variances) if self.variances is not None else None,
        }


@dataclass(frozen=True, eq=False)
class SquapRun:
    """Full record of one combined run, serializable as a single document."""

    config: SquapConfig
    B: FloatArray
    bhat: FloatArray
    decision: FloatArray
    chosen: int
    bstar: float
    payments: PaymentReport
    aggregation_payoffs: FloatArray
    welfare: float
    welfare_ratio: float
    spread: float
    alpha: float
    max_value: float
    bounds: list[BoundReport]
    certified: bool
    practical: bool = False
    flags: dict = field(default_factory=dict)
    transcript: list[dict] = field(default_factory=list, repr=False)

    def to_doc(self) -> dict:
        return {
            "schemaVersion": 1,
            "config": self.config.to_doc(),
            "B": self.B.tolist(),
            "Bhat": self.bhat.tolist(),
            "decision": self.decision.tolist(),
            "chosen": self.chosen,
            "bstar": self.bstar,
            "revenue": self.payments.revenue,
            "netTransfers": self.payments.net_transfers.tolist(),
            "aggregationPayoffs": self.aggregation_payoffs.tolist(),
            "welfare": self.welfare,
            "welfareRatio": self.welfare_ratio,
            "spread": self.spread,
            "alpha": self.alpha,
            "maxValue": self.max_value,
            "bounds": [
                {
                    "name": b.name,
                    "value": b.value,
                    "measured": b.satisfied_by,
                    "margin": b.margin,
                    "kind": b.kind,
                    "applicable": b.applicable,
                }
                for b in self.bounds
            ],
            "certified": self.certified,
            "practical": self.practical,
            "flags": dict(sorted(self.flags.items())),
        }

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_doc(), sort_keys=True, indent=2) + "\n")


def _resolve_params(profile: ValueProfile, config: SquapConfig) -> tuple[MechanismParams, float, float]:
    maxv = profile.max_value
    if maxv <= 0:
        raise StageError("setup", "degenerate all-zero profile")
    params = MechanismParams(config.c) if config.c is not None else MechanismParams.half_max(profile)
    beta = config.beta if config.beta is not None else config.epsilon * maxv
    alpha = math.sqrt(beta / maxv)
    return params, beta, alpha


def _aggregation_stage(
    profile: ValueProfile,
    B: FloatArray,
    beta: float,
    params: MechanismParams,
    config: SquapConfig,
    rng: np.random.Generator,
) -> tuple[MarketState | WagerState, FloatArray, dict]:
    """Produce the elicited estimates and the settlement state."""
    flags: dict = {}
    manip = (
        ManipulatorContext(profile=profile, agent=config.manipulator, params=params)
        if config.manipulator is not None
        else None
    )
    if config.aggregation == "market":
        initial = np.zeros(B.size) if config.initial is None else np.asarray(config.initial, dtype=float)
        run: EfficientMarketRun = simulate_efficient_market(
            B, initial, beta, n_traders=config.n_participants, manipulator=manip, rng=rng
        )
        if manip is not None and not run.converged:
            flags["manipulatorConverged"] = False
        return run.state, run.bhat, flags

    predictions = np.tile(B, (config.n_participants, 1))
    if manip is not None:
        state0 = WagerState(beta=beta, predictions=predictions)
        report, converged = optimize_wager_report(
            state0, config.n_participants - 1, B, manip, rng=rng
        )
        predictions[config.n_participants - 1] = report
        if not converged:
            flags["manipulatorConverged"] = False
    state = WagerState(beta=beta, predictions=predictions)
    return state, wagering_aggregate(state), flags


def _settle_aggregation(state: MarketState | WagerState, chosen: int, p: FloatArray, bstar: float) -> FloatArray:
    if isinstance(state, MarketState):
        return np.array(
            [market_payoff(t, state, chosen, p, bstar) for t in range(1, state.n_traders + 1)]
        )
    return wagering_payoffs(state, chosen, p, bstar)


def run_impractical_squap(profile: ValueProfile, B, config: SquapConfig) -> SquapRun:
    """Aggregation, committed decision stage at the elicited estimates, settlement."""
    truth = as_vector(B)
    if truth.size != profile.m:
        raise StageError("setup", "B and the profile disagree on m")
    params, beta, alpha = _resolve_params(profile, config)
    rng = np.random.default_rng(config.seed)

    state, bhat, flags = _aggregation_stage(profile, truth, beta, params, config, rng)

    try:
        commitment = commit(profile.aggregates, bhat, params)
        votes = focal_votes(commitment, profile.values, params)
        outcome = run_impractical(commitment, votes, params, redistribute=config.redistribute)
    except (RuntimeError, ValueError) as exc:
        raise StageError("decision", str(exc)) from exc
    p = outcome.p.p

    chosen = int(rng.choice(truth.size, p=p))
    model = config.outcome_model(truth)
    bstar = model.sample(chosen, rng)
    payoffs = _settle_aggregation(state, chosen, p, bstar)
    transcript = settlement_transcript(state, chosen, p, bstar)

    totals = profile.aggregates + truth
    w1 = float(totals.max())
    welfare = float(p @ totals)
    ratio = welfare / w1
    maxv = profile.max_value
    spread = w1 / maxv

    bounds = [
        BoundReport.lower("squap_welfare", bound_squap(spread, alpha), ratio),
        BoundReport.upper("bhat_accuracy", alpha * maxv, float(np.max(np.abs(bhat - truth)))),
        BoundReport.upper(
            "alt_independence_spread",
            ALT_INDEPENDENCE_TOL,
            alternative_independence_check(state, model, weighted=True),
        ),
    ]
    certified = (
        not config.redistribute
        and all(b.satisfied for b in bounds if b.applicable)
        and flags.get("manipulatorConverged", True)
    )
    return SquapRun(
        config=config,
        B=truth,
        bhat=np.asarray(bhat, dtype=float),
        decision=p,
        chosen=chosen,
        bstar=bstar,
        payments=outcome.payments,
        aggregation_payoffs=payoffs,
        welfare=welfare,
        welfare_ratio=ratio,
        spread=spread,
        alpha=alpha,
        max_value=maxv,
        bounds=bounds,
        certified=certified,
        practical=False,
        flags=flags,
        transcript=transcript,
    )


def run_practical_squap(profile: ValueProfile, B, config: SquapConfig) -> SquapRun:
    """Same composition, but the decision stage solves the submitted-votes fixed point.

    Used only as the empirical harness for the practical-variant conjecture;
    never certified.
    """
    if profile.m != 2:
        raise StageError("decision", "practical fixed point is two-alternative only")
    truth = as_vector(B)
    params, beta, alpha = _resolve_params(profile, config)
    rng = np.random.default_rng(config.seed)

    state, bhat, flags = _aggregation_stage(profile, truth, beta, params, config, rng)

    try:
        commitment = commit(profile.aggregates, bhat, params)
        votes = focal_votes(commitment, profile.values, params)
        sums = votes.sum(axis=0)
        p1 = solve_practical_two_alt(sums, bhat, params)
        outcome = run_impractical(commitment, votes, params, redistribute=config.redistribute)
    except (RuntimeError, ValueError) as exc:
        raise StageError("decision", str(exc)) from exc
    p = np.array([p1, 1.0 - p1])

    chosen = int(rng.choice(2, p=p))
    model = config.outcome_model(truth)
    bstar = model.sample(chosen, rng)
    payoffs = _settle_aggregation(state, chosen, p, bstar)
    transcript = settlement_transcript(state, chosen, p, bstar)

    totals = profile.aggregates + truth
    w1 = float(totals.max())
    welfare = float(p @ totals)
    maxv = profile.max_value
    bounds = [
        BoundReport.upper("bhat_accuracy", alpha * maxv, float(np.max(np.abs(bhat - truth)))),
    ]
    flags = dict(flags)
    flags["uncertified"] = "practical variant is measured, not certified"
    return SquapRun(
        config=config,
        B=truth,
        bhat=np.asarray(bhat, dtype=float),
        decision=p,
        chosen=chosen,
        bstar=bstar,
        payments=outcome.payments,
        aggregation_payoffs=payoffs,
        welfare=welfare,
        welfare_ratio=welfare / w1,
        spread=w1 / maxv,
        alpha=alpha,
        max_value=maxv,
        bounds=bounds,
        certified=False,
        practical=True,
        flags=flags,
        transcript=transcript,
    )


def accuracy_bound_check(run: SquapRun, alpha: float, x: float) -> bool:
    """Whether the run's elicited estimates stayed within alpha * x of the truth."""
    return bool(np.max(np.abs(run.bhat - run.B)) <= alpha * x + MARGIN_TOL)


@dataclass(frozen=True)
class SelfFundingReport:
    """Whether decision-stage revenue covers the expected market spend."""

    expected_revenue: float
    expected_market_spend: float
    feasible: bool


def self_funding_check(runs: list[SquapRun], beta: float) -> SelfFundingReport:
    """Average revenue vs the telescoped spend cap (prior-to-truth score gap)."""
    if not runs:
        raise ValueError("need at least one run")
    revenue = float(np.mean([r.payments.revenue for r in runs]))
    spends = []
    for r in runs:
        if r.config.aggregation != "market":
            raise ValueError("self-funding is defined for market runs")
        initial = (
            np.zeros(r.B.size) if r.config.initial is None else np.asarray(r.config.initial, dtype=float)
        )
        spends.append(float(np.sum((initial - r.B) ** 2)) / beta)
    spend = float(np.mean(spends))
    return SelfFundingReport(expected_revenue=revenue, expected_market_spend=spend, feasible=revenue >= spend)
