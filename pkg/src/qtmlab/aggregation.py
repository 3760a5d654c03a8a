"""Information-aggregation stage: quadratic scoring, decision market, wagering.

Both mechanisms score predictions of per-alternative external impacts with the
quadratic rule s(bhat, bstar) = -(bhat - bstar)^2 / beta, settle only the
market of the selected alternative, and weight that settlement by the inverse
selection probability. The inverse weight cancels the settlement probability,
so a participant's expected payment is the same no matter how the selection is
made; dropping it (the weight-1 control) breaks that.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import FloatArray, MechanismParams, ValueProfile, as_probs, as_vector
from .equilibrium import votes_from_aggregate
from .synthetic import commit

__all__ = [
    "MarketState",
    "WagerState",
    "OutcomeModel",
    "ManipulatorContext",
    "EfficientMarketRun",
    "quadratic_score",
    "expected_score",
    "market_payoff",
    "market_total_payout",
    "simulate_efficient_market",
    "market_deviation_bound",
    "wagering_payoffs",
    "wagering_aggregate",
    "optimize_wager_report",
    "settlement_transcript",
    "write_transcript",
    "forced_payment_table",
    "alternative_independence_check",
]


def quadratic_score(bhat: float, bstar: float, beta: float) -> float:
    """Quadratic score -(bhat - bstar)^2 / beta; never positive."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = bhat - bstar
    return -(d * d) / beta


def expected_score(bhat, means, beta: float) -> float:
    """Expected total score of a prediction vector against the true means."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    b = as_vector(bhat)
    mu = as_vector(means)
    return float(-np.sum((b - mu) ** 2) / beta)


@dataclass(eq=False)
class MarketState:
    """Sequential scoring-rule market: a prior and an append-only report history."""

    beta: float
    initial: FloatArray
    history: list[FloatArray] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        self.initial = np.asarray(self.initial, dtype=np.float64).copy()

    @property
    def n_traders(self) -> int:
        return len(self.history)

    @property
    def final(self) -> FloatArray:
        return self.history[-1] if self.history else self.initial

    def report(self, bhat) -> None:
        arr = np.asarray(bhat, dtype=np.float64)
        if arr.shape != self.initial.shape:
            raise ValueError("report shape does not match the market")
        self.history.append(arr.copy())

    def prediction_pair(self, t: int) -> tuple[FloatArray, FloatArray]:
        """(previous, own) predictions of 1-indexed trader t."""
        if not 1 <= t <= len(self.history):
            raise ValueError(f"trader index {t} outside 1..{len(self.history)}")
        prev = self.initial if t == 1 else self.history[t - 2]
        return prev, self.history[t - 1]


def _settlement_weight(p_k: float, weighted: bool, weight_cap: float | None) -> float:
    if p_k <= 0:
        raise ValueError("settlement needs a strictly positive selection probability")
    if not weighted:
        return 1.0
    w = 1.0 / p_k
    # Capped weights trade exactness for bounded liability; capped runs are
    # never part of certified checks.
    return min(w, weight_cap) if weight_cap is not None else w


def market_payoff(
    t: int, state: MarketState, k: int, p, bstar: float, weighted: bool = True, weight_cap: float | None = None
) -> float:
    """Trader t's settlement when alternative k is selected and bstar observed.

    The inverse-probability weight is the certified rule; weighted=False is the
    control that re-couples payments to the selection.
    """
    probs = as_probs(p)
    prev, cur = state.prediction_pair(t)
    raw = quadratic_score(float(cur[k]), bstar, state.beta) - quadratic_score(float(prev[k]), bstar, state.beta)
    return raw * _settlement_weight(float(probs[k]), weighted, weight_cap)


def market_total_payout(
    state: MarketState, k: int, p, bstar: float, weighted: bool = True, weight_cap: float | None = None
) -> float:
    """Total mechanism spend; telescopes to the last-vs-prior score difference."""
    probs = as_probs(p)
    raw = quadratic_score(float(state.final[k]), bstar, state.beta) - quadratic_score(
        float(state.initial[k]), bstar, state.beta
    )
    return raw * _settlement_weight(float(probs[k]), weighted, weight_cap)


def market_deviation_bound(epsilon: float, x: float) -> float:
    """Certified cap sqrt(epsilon) * x on |Bhat_k - B_k| at liquidity beta = epsilon * x."""
    if epsilon <= 0 or x <= 0:
        raise ValueError("epsilon and x must be positive")
    return math.sqrt(epsilon) * x


@dataclass(frozen=True, eq=False)
class OutcomeModel:
    """Per-alternative observation model: b*_k has the given mean and variance."""

    means: FloatArray
    variances: FloatArray | None = None
    family: str = "point"

    def __post_init__(self) -> None:
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))
        if self.family not in ("point", "gaussian"):
            raise ValueError(f"unknown outcome family {self.family!r}")
        var = self.variances
        if var is None:
            var = np.zeros_like(self.means)
        var = np.asarray(var, dtype=np.float64)
        if var.shape != self.means.shape or np.any(var < 0):
            raise ValueError("variances must be nonnegative and match the means")
        object.__setattr__(self, "variances", var)

    def sample(self, k: int, rng: np.random.Generator) -> float:
        if self.family == "point":
            return float(self.means[k])
        return float(rng.normal(self.means[k], math.sqrt(float(self.variances[k]))))

    def expected_quadratic_score(self, bhat: float, k: int, beta: float) -> float:
        """E[s(bhat, b*_k)] = -((bhat - B_k)^2 + Var_k) / beta."""
        d = bhat - float(self.means[k])
        return -(d * d + float(self.variances[k])) / beta


@dataclass(frozen=True, eq=False)
class ManipulatorContext:
    """An agent who both forecasts and votes: their values drive the distortion."""

    profile: ValueProfile
    agent: int
    params: MechanismParams

    def qtm_stage_utility(self, bhat: FloatArray) -> float:
        """Focal-equilibrium own utility of the committed decision stage at Bhat."""
        commitment = commit(self.profile.aggregates, bhat, self.params)
        p = commitment.p.p
        v_i = self.profile.values[self.agent]
        own = votes_from_aggregate(v_i[None, :], p, self.params)[0]
        return float(p @ v_i) - self.params.c * float(own @ own)


def _golden_max(f, lo: float, hi: float, iters: int = 60) -> tuple[float, float]:
    """Golden-section maximization of a unimodal scalar function on [lo, hi]."""
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    x1 = b - inv_phi * (b - a)
    x2 = a + inv_phi * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(iters):
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + inv_phi * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - inv_phi * (b - a)
            f1 = f(x1)
    x = 0.5 * (a + b)
    return x, f(x)


def _coordinate_search(
    objective,
    start: FloatArray,
    center: FloatArray,
    radius: float,
    sweeps: int = 3,
) -> tuple[FloatArray, float, bool]:
    """Coordinate-wise golden-section ascent inside a box around `center`."""
    x = start.copy()
    best = objective(x)
    converged = False
    for _ in range(sweeps):
        improved = best
        for k in range(x.size):
            def along(val: float, k=k) -> float:
                trial = x.copy()
                trial[k] = val
                return objective(trial)

            xk, fk = _golden_max(along, center[k] - radius, center[k] + radius)
            if fk > best:
                x[k] = xk
                best = fk
        if best - improved <= 1e-12 * max(1.0, abs(best)):
            converged = True
            break
    return x, best, converged


@dataclass(frozen=True, eq=False)
class EfficientMarketRun:
    """Market simulation output: final state, elicited estimates, flags."""

    state: MarketState
    bhat: FloatArray
    manipulated: bool
    converged: bool


def simulate_efficient_market(
    B,
    initial,
    beta: float,
    n_traders: int = 4,
    manipulator: ManipulatorContext | None = None,
    rng: np.random.Generator | None = None,
) -> EfficientMarketRun:
    """Run a market whose last informed participant believes the true means B.

    The history interpolates from the prior to B (the informed endpoint). A
    manipulator, when present, gets one extra report chosen to maximize their
    expected score plus their decision-stage utility; without one the output is
    exactly B.
    """
    truth = as_vector(B)
    prior = as_vector(initial)
    if truth.shape != prior.shape:
        raise ValueError("B and the prior disagree on m")
    state = MarketState(beta=beta, initial=prior)
    for j in range(1, n_traders + 1):
        state.report(prior + (j / n_traders) * (truth - prior))

    if manipulator is None:
        return EfficientMarketRun(state=state, bhat=state.final.copy(), manipulated=False, converged=True)

    maxv = manipulator.profile.max_value

    def objective(bh: FloatArray) -> float:
        return expected_score(bh, truth, beta) + manipulator.qtm_stage_utility(bh)

    rng = np.random.default_rng(0) if rng is None else rng
    radius = 10.0 * maxv
    best_x, best_f, best_conv = truth.copy(), objective(truth), True
    for s in range(5):
        start = truth.copy() if s == 0 else truth + rng.uniform(-maxv, maxv, size=truth.size)
        x, fval, conv = _coordinate_search(objective, start, truth, radius)
        if fval > best_f:
            best_x, best_f, best_conv = x, fval, conv
    state.report(best_x)
    return EfficientMarketRun(state=state, bhat=best_x.copy(), manipulated=True, converged=best_conv)


@dataclass(eq=False)
class WagerState:
    """One-shot wagering pool: every participant predicts every alternative."""

    beta: float
    predictions: FloatArray

    def __post_init__(self) -> None:
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        arr = np.asarray(self.predictions, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("predictions must be an (N, m) matrix")
        self.predictions = arr.copy()

    @property
    def n_forecasters(self) -> int:
        return self.predictions.shape[0]


def wagering_payoffs(
    state: WagerState, k: int, p, bstar: float, weighted: bool = True, weight_cap: float | None = None
) -> FloatArray:
    """Own score minus the pool average, inverse-probability weighted; sums to zero."""
    probs = as_probs(p)
    scores = -((state.predictions[:, k] - bstar) ** 2) / state.beta
    centered = scores - scores.mean()
    return centered * _settlement_weight(float(probs[k]), weighted, weight_cap)


def wagering_aggregate(state: WagerState) -> FloatArray:
    """The pool's output estimate: the coordinatewise average prediction."""
    return state.predictions.mean(axis=0)


def optimize_wager_report(
    state: WagerState,
    forecaster: int,
    B,
    manipulator: ManipulatorContext,
    rng: np.random.Generator | None = None,
) -> tuple[FloatArray, bool]:
    """Best deviating prediction for a forecaster who also votes in the decision stage.

    Their controllable expected wagering payoff is (1 - 1/N) times their own
    expected score; the decision stage sees the pool average including their
    report.
    """
    truth = as_vector(B)
    n = state.n_forecasters
    others_sum = state.predictions.sum(axis=0) - state.predictions[forecaster]

    def objective(report: FloatArray) -> float:
        own = (1.0 - 1.0 / n) * expected_score(report, truth, state.beta)
        bhat = (others_sum + report) / n
        return own + manipulator.qtm_stage_utility(bhat)

    maxv = manipulator.profile.max_value
    rng = np.random.default_rng(0) if rng is None else rng
    best_x, best_f, best_conv = truth.copy(), objective(truth), True
    for s in range(5):
        start = truth.copy() if s == 0 else truth + rng.uniform(-maxv, maxv, size=truth.size)
        x, fval, conv = _coordinate_search(objective, start, truth, 10.0 * maxv)
        if fval > best_f:
            best_x, best_f, best_conv = x, fval, conv
    return best_x, best_conv


def _market_score_changes(state: MarketState, model: OutcomeModel) -> FloatArray:
    """(N, m) expected unweighted score changes; variances cancel in the difference."""
    n = state.n_traders
    m = state.initial.size
    out = np.empty((n, m))
    for t in range(1, n + 1):
        prev, cur = state.prediction_pair(t)
        out[t - 1] = (-((cur - model.means) ** 2) + (prev - model.means) ** 2) / state.beta
    return out


def _wager_score_changes(state: WagerState, model: OutcomeModel) -> FloatArray:
    """(N, m) expected own-minus-average score terms; variances cancel."""
    exp_scores = -(((state.predictions - model.means[None, :]) ** 2) + model.variances[None, :]) / state.beta
    return exp_scores - exp_scores.mean(axis=0, keepdims=True)


def settlement_transcript(
    state: MarketState | WagerState, k: int, p, bstar: float, weighted: bool = True
) -> list[dict]:
    """One record per trade/wager at the realized settlement: {t, bhat, payoff, k, bstar}."""
    records = []
    if isinstance(state, MarketState):
        for t in range(1, state.n_traders + 1):
            _, cur = state.prediction_pair(t)
            records.append(
                {
                    "t": t,
                    "bhat": cur.tolist(),
                    "payoff": market_payoff(t, state, k, p, bstar, weighted),
                    "k": k,
                    "bstar": bstar,
                }
            )
    else:
        payoffs = wagering_payoffs(state, k, p, bstar, weighted)
        for t in range(state.n_forecasters):
            records.append(
                {
                    "t": t + 1,
                    "bhat": state.predictions[t].tolist(),
                    "payoff": float(payoffs[t]),
                    "k": k,
                    "bstar": bstar,
                }
            )
    return records


def write_transcript(path, records: list[dict]) -> None:
    """JSON-lines transcript, one record per line."""
    lines = [json.dumps(r, sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def forced_payment_table(state: MarketState | WagerState, model: OutcomeModel, weighted: bool = True) -> FloatArray:
    """Expected net payment of each participant when the selection is forced to k.

    Entry [t, k] evaluates the payment functional at a selection concentrated
    on k, in the full-support limit where the inverse weight cancels each
    market's settlement probability: with weighting, every market contributes
    its unconditional expected score change (so the value cannot depend on k);
    without it, only the forced market pays.
    """
    if isinstance(state, MarketState):
        changes = _market_score_changes(state, model)
    else:
        changes = _wager_score_changes(state, model)
    if weighted:
        total = changes.sum(axis=1)
        return np.tile(total[:, None], (1, changes.shape[1]))
    return changes


def alternative_independence_check(state: MarketState | WagerState, model: OutcomeModel, weighted: bool = True) -> float:
    """Max over participants of the forced-alternative expected-payment spread.

    The importance-weighted mechanisms must return (numerically) zero; the
    weight-1 control is strictly positive whenever expected score changes
    differ across alternatives.
    """
    table = forced_payment_table(state, model, weighted)
    return float(np.max(table.max(axis=1) - table.min(axis=1)))
