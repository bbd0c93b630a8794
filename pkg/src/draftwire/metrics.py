"""Distortion and acceptance-rate metrics, bound checks, and sweep rollups.

Per scored position the instrumentation computes, from exact float64
shadow distributions:

* per-worker residual mass eps_i and local reconstruction error (L1 between
  the worker's distribution and its top-K reconstruction), for both
  reconstruction strategies;
* aggregation bias (L1 between the compressed and exact weighted averages),
  per strategy;
* acceptance rates of the draft proposal against the exact and compressed
  averages, and their absolute difference, per strategy (draft positions
  only; the bonus position has no proposal).

The checked bounds, at 1e-9 tolerance:

* renormalized local error == 2 eps exactly; residual-uniform <= 2 eps;
* aggregation bias <= 2 * sum_i w_i eps_i;
* acceptance variation <= bias / 2 <= sum_i w_i eps_i.

Violations are counted, never raised, so a sweep reports them in its CSV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .aggregation import TopKProfile, WeightVector, aggregate
from .compression import Strategy, mass_split, reconstruct, truncate_topk
from .dist import Distribution, l1_distance
from .specdec import acceptance_rate

BOUND_TOLERANCE = 1e-9

CSV_COLUMNS = [
    "strategy",
    "M",
    "gamma",
    "vocab_size",
    "K",
    "K_pct",
    "temperature",
    "seed",
    "samples",
    "steps",
    "delta_bar",
    "eps_bar",
    "two_eps_bar",
    "delta_alpha_bar",
    "half_delta_bar",
    "lemma1_violations",
    "thm1_violations",
    "thm2_violations",
]


def local_error(original: Distribution, reconstructed: Distribution) -> float:
    """L1 distance between a worker distribution and its reconstruction."""
    return l1_distance(original, reconstructed)


def aggregation_bias(exact: Distribution, compressed: Distribution) -> float:
    """L1 distance between the exact and compressed weighted averages."""
    return l1_distance(exact, compressed)


def acceptance_variation(q: Distribution, p_exact: Distribution, p_comp: Distribution) -> float:
    """Absolute change in expected acceptance rate caused by compression."""
    return abs(acceptance_rate(p_comp, q) - acceptance_rate(p_exact, q))


@dataclass(frozen=True)
class StepMetrics:
    """Everything measured at one scored position, both strategies at once.

    Acceptance fields are None at the bonus position, where there is no
    draft proposal to accept against.
    """

    worker_epsilons: tuple[float, ...]
    weighted_epsilon: float
    local_errors_renormalized: tuple[float, ...]
    local_errors_residual: tuple[float, ...]
    bias_renormalized: float
    bias_residual: float
    alpha_exact: float | None
    alpha_renormalized: float | None
    alpha_residual: float | None
    dalpha_renormalized: float | None
    dalpha_residual: float | None

    def __post_init__(self) -> None:
        for e in self.worker_epsilons:
            if not 0.0 <= e <= 1.0:
                raise ValueError(f"residual mass {e} outside [0, 1]")
        for err in (*self.local_errors_renormalized, *self.local_errors_residual,
                    self.bias_renormalized, self.bias_residual):
            if not 0.0 <= err <= 2.0 + BOUND_TOLERANCE:
                raise ValueError(f"L1 value {err} outside [0, 2]")
        for a in (self.alpha_exact, self.alpha_renormalized, self.alpha_residual):
            if a is not None and not 0.0 <= a <= 1.0:
                raise ValueError(f"acceptance rate {a} outside [0, 1]")

    def bias(self, strategy: Strategy) -> float:
        return self.bias_renormalized if strategy == Strategy.RENORMALIZED else self.bias_residual

    def dalpha(self, strategy: Strategy) -> float | None:
        return (self.dalpha_renormalized if strategy == Strategy.RENORMALIZED
                else self.dalpha_residual)

    def local_errors(self, strategy: Strategy) -> tuple[float, ...]:
        return (self.local_errors_renormalized if strategy == Strategy.RENORMALIZED
                else self.local_errors_residual)


def instrument_position(
    worker_dists: Sequence[Distribution],
    q: Distribution | None,
    w: WeightVector,
    k_profile: TopKProfile,
) -> StepMetrics:
    """Score one position from exact shadow distributions.

    Truncation, reconstruction and aggregation all run at float64 here, so
    bound checks see the mathematics rather than 32-bit wire rounding.
    """
    if len(worker_dists) != len(w) or len(worker_dists) != len(k_profile):
        raise ValueError("worker count mismatch between distributions, weights, profile")

    payloads = [truncate_topk(d, k_profile[i]) for i, d in enumerate(worker_dists)]
    epsilons = tuple(mass_split(p).epsilon for p in payloads)
    weighted_eps = float(sum(w[i] * epsilons[i] for i in range(len(w))))

    recon_ren = [reconstruct(p, Strategy.RENORMALIZED) for p in payloads]
    recon_res = [reconstruct(p, Strategy.RESIDUAL_UNIFORM) for p in payloads]
    err_ren = tuple(local_error(d, r) for d, r in zip(worker_dists, recon_ren))
    err_res = tuple(local_error(d, r) for d, r in zip(worker_dists, recon_res))

    p_exact = aggregate(list(worker_dists), w)
    p_ren = aggregate(recon_ren, w)
    p_res = aggregate(recon_res, w)
    bias_ren = aggregation_bias(p_exact, p_ren)
    bias_res = aggregation_bias(p_exact, p_res)

    if q is None:
        alphas = (None,) * 5
    else:
        a_exact = acceptance_rate(p_exact, q)
        a_ren = acceptance_rate(p_ren, q)
        a_res = acceptance_rate(p_res, q)
        alphas = (a_exact, a_ren, a_res, abs(a_ren - a_exact), abs(a_res - a_exact))

    return StepMetrics(
        worker_epsilons=epsilons,
        weighted_epsilon=weighted_eps,
        local_errors_renormalized=err_ren,
        local_errors_residual=err_res,
        bias_renormalized=bias_ren,
        bias_residual=bias_res,
        alpha_exact=alphas[0],
        alpha_renormalized=alphas[1],
        alpha_residual=alphas[2],
        dalpha_renormalized=alphas[3],
        dalpha_residual=alphas[4],
    )


@dataclass(frozen=True)
class BoundReport:
    """Violation counts for one step, split by strategy."""

    lemma1_renormalized: int
    lemma1_residual: int
    thm1_renormalized: int
    thm1_residual: int
    thm2_renormalized: int
    thm2_residual: int

    def for_strategy(self, strategy: Strategy) -> tuple[int, int, int]:
        if strategy == Strategy.RENORMALIZED:
            return (self.lemma1_renormalized, self.thm1_renormalized, self.thm2_renormalized)
        return (self.lemma1_residual, self.thm1_residual, self.thm2_residual)

    @property
    def total(self) -> int:
        return (self.lemma1_renormalized + self.lemma1_residual
                + self.thm1_renormalized + self.thm1_residual
                + self.thm2_renormalized + self.thm2_residual)


def check_bounds(step: StepMetrics, tol: float = BOUND_TOLERANCE) -> BoundReport:
    """Count bound violations at one step; never raises on a violation.

    Renormalized local error must EQUAL 2 eps (both directions checked);
    residual-uniform only has the upper bound. The acceptance check is the
    two-link chain dalpha <= bias/2 <= weighted eps; a broken link on
    either side counts once.
    """
    lemma1 = {Strategy.RENORMALIZED: 0, Strategy.RESIDUAL_UNIFORM: 0}
    for e, err in zip(step.worker_epsilons, step.local_errors_renormalized):
        if abs(err - 2.0 * e) > tol:
            lemma1[Strategy.RENORMALIZED] += 1
    for e, err in zip(step.worker_epsilons, step.local_errors_residual):
        if err > 2.0 * e + tol:
            lemma1[Strategy.RESIDUAL_UNIFORM] += 1

    thm1 = {}
    ceiling = 2.0 * step.weighted_epsilon + tol
    thm1[Strategy.RENORMALIZED] = int(step.bias_renormalized > ceiling)
    thm1[Strategy.RESIDUAL_UNIFORM] = int(step.bias_residual > ceiling)

    thm2 = {Strategy.RENORMALIZED: 0, Strategy.RESIDUAL_UNIFORM: 0}
    for strategy in (Strategy.RENORMALIZED, Strategy.RESIDUAL_UNIFORM):
        da = step.dalpha(strategy)
        if da is None:
            continue
        half_bias = step.bias(strategy) / 2.0
        if da > half_bias + tol or half_bias > step.weighted_epsilon + tol:
            thm2[strategy] = 1

    return BoundReport(
        lemma1_renormalized=lemma1[Strategy.RENORMALIZED],
        lemma1_residual=lemma1[Strategy.RESIDUAL_UNIFORM],
        thm1_renormalized=thm1[Strategy.RENORMALIZED],
        thm1_residual=thm1[Strategy.RESIDUAL_UNIFORM],
        thm2_renormalized=thm2[Strategy.RENORMALIZED],
        thm2_residual=thm2[Strategy.RESIDUAL_UNIFORM],
    )


@dataclass(frozen=True)
class SweepRecord:
    """One CSV row: a (strategy, K, temperature) point averaged over steps."""

    strategy: Strategy
    m: int
    gamma: int
    vocab_size: int
    k: int
    temperature: float
    seed: int
    samples: int
    steps: int
    delta_bar: float
    eps_bar: float
    delta_alpha_bar: float
    lemma1_violations: int
    thm1_violations: int
    thm2_violations: int

    @property
    def k_pct(self) -> float:
        return 100.0 * self.k / self.vocab_size

    @property
    def two_eps_bar(self) -> float:
        return 2.0 * self.eps_bar

    @property
    def half_delta_bar(self) -> float:
        return self.delta_bar / 2.0

    def to_row(self) -> dict[str, object]:
        return {
            "strategy": self.strategy.name.lower(),
            "M": self.m,
            "gamma": self.gamma,
            "vocab_size": self.vocab_size,
            "K": self.k,
            "K_pct": repr(self.k_pct),
            "temperature": repr(self.temperature),
            "seed": self.seed,
            "samples": self.samples,
            "steps": self.steps,
            "delta_bar": repr(self.delta_bar),
            "eps_bar": repr(self.eps_bar),
            "two_eps_bar": repr(self.two_eps_bar),
            "delta_alpha_bar": repr(self.delta_alpha_bar),
            "half_delta_bar": repr(self.half_delta_bar),
            "lemma1_violations": self.lemma1_violations,
            "thm1_violations": self.thm1_violations,
            "thm2_violations": self.thm2_violations,
        }


def sweep_aggregate(
    steps: Sequence[StepMetrics],
    *,
    strategy: Strategy,
    m: int,
    gamma: int,
    vocab_size: int,
    k: int,
    temperature: float,
    seed: int,
    samples: int,
) -> SweepRecord:
    """Average one strategy's step metrics into a CSV row.

    All steps contribute to delta_bar and eps_bar; delta_alpha_bar averages
    only the positions that had a draft proposal. Summation runs in step
    order for reproducibility.
    """
    if not steps:
        raise ValueError("cannot aggregate an empty step list")
    delta_sum = 0.0
    eps_sum = 0.0
    dalpha_sum = 0.0
    dalpha_n = 0
    l1 = t1 = t2 = 0
    for s in steps:
        delta_sum += s.bias(strategy)
        eps_sum += s.weighted_epsilon
        da = s.dalpha(strategy)
        if da is not None:
            dalpha_sum += da
            dalpha_n += 1
        a, b, c = check_bounds(s).for_strategy(strategy)
        l1 += a
        t1 += b
        t2 += c
    n = len(steps)
    return SweepRecord(
        strategy=strategy,
        m=m,
        gamma=gamma,
        vocab_size=vocab_size,
        k=k,
        temperature=temperature,
        seed=seed,
        samples=samples,
        steps=n,
        delta_bar=delta_sum / n,
        eps_bar=eps_sum / n,
        delta_alpha_bar=(dalpha_sum / dalpha_n) if dalpha_n else 0.0,
        lemma1_violations=l1,
        thm1_violations=t1,
        thm2_violations=t2,
    )


def write_sweep_csv(records: Sequence[SweepRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for rec in records:
            writer.writerow(rec.to_row())


def read_sweep_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
