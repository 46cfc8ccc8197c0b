"""Exact-oracle checks of the estimator limits on random enumerable instances.

Shared by the ``oracle-check`` command and the acceptance tests.  Each check
returns a :class:`CheckResult` with the worst value observed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .estimators import maligan_grad, normalized_weights, unnormalized_is_grad
from .oracle import (augmented_target, check_descent_direction, enumerate_distribution, exact_expected_grad,
                     interpolated_discriminator, measure_estimator, mixed_limit, optimal_discriminator,
                     per_step_limit, random_tabular, ratios_of, singular_instance, step_scores)
from .rollout import per_step_grad
from .training import RunReport


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    instances: int
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: worst={self.worst:.3e} over {self.instances} instances {self.detail}".rstrip()


def _instances(n: int, seed: int, V: int, T: int):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        gen = random_tabular(V, T, rng)
        pd = enumerate_distribution(random_tabular(V, T, rng))
        yield rng, gen, pd


def optimal_identity(n: int = 100, seed: int = 0, V: int = 3, T: int = 3, tol: float = 1e-10) -> CheckResult:
    """With the optimal discriminator, the reweighted self-sample gradient equals the data gradient."""
    worst = 0.0
    for _, gen, pd in _instances(n, seed, V, T):
        pp = enumerate_distribution(gen)
        S = step_scores(gen)
        q, Z = augmented_target(pp, optimal_discriminator(pd, pp))
        lhs = exact_expected_grad(gen, q, S)
        rhs = exact_expected_grad(gen, pd.probs, S)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))), abs(Z - 1.0))
    return CheckResult("optimal-discriminator identity", worst <= tol, worst, n, f"(tol {tol:g})")


def _min_normalized(values: list[float]) -> float:
    return min(values) if values else math.nan


def suboptimal_descent(n: int = 100, seed: int = 1, V: int = 3, T: int = 3) -> CheckResult:
    """A discriminator between 0.5 and the optimum still yields a KL descent direction."""
    inner = []
    for rng, gen, pd in _instances(n, seed, V, T):
        pp = enumerate_distribution(gen)
        S = step_scores(gen)
        d = interpolated_discriminator(optimal_discriminator(pd, pp), rng)
        q, _ = augmented_target(pp, d)
        e = exact_expected_grad(gen, q, S)
        inner.append(check_descent_direction(e, gen, pd, S) / (np.linalg.norm(e) * np.linalg.norm(pd_grad(gen, pd, S))))
    worst = _min_normalized(inner)
    return CheckResult("suboptimal-discriminator descent", worst > 0, worst, n, "(min cosine)")


def pd_grad(gen, pd, S):
    return exact_expected_grad(gen, pd.probs, S)


def mixed_descent(n: int = 100, seed: int = 2, V: int = 3, T: int = 3) -> CheckResult:
    """The mixed estimator limit is a descent direction at every clamp length."""
    inner = []
    for rng, gen, pd in _instances(n, seed, V, T):
        pp = enumerate_distribution(gen)
        S = step_scores(gen)
        d = interpolated_discriminator(optimal_discriminator(pd, pp), rng)
        g = pd_grad(gen, pd, S)
        for N in range(T + 1):
            e = mixed_limit(gen, pd, d, N, S)
            inner.append(check_descent_direction(e, gen, pd, S) / (np.linalg.norm(e) * np.linalg.norm(g)))
    worst = _min_normalized(inner)
    return CheckResult(f"mixed-estimator descent (N=0..{T})", worst > 0, worst, n, "(min cosine)")


def per_step_descent(n: int = 100, seed: int = 3, V: int = 3, T: int = 3) -> CheckResult:
    """Per-step weighting with exact Q under a sub-optimal discriminator descends the KL."""
    inner = []
    for rng, gen, pd in _instances(n, seed, V, T):
        pp = enumerate_distribution(gen)
        S = step_scores(gen)
        d = interpolated_discriminator(optimal_discriminator(pd, pp), rng)
        e = per_step_limit(gen, d, S)
        inner.append(check_descent_direction(e, gen, pd, S) / (np.linalg.norm(e) * np.linalg.norm(pd_grad(gen, pd, S))))
    worst = _min_normalized(inner)
    return CheckResult("per-step estimator descent", worst > 0, worst, n, "(min cosine)")


def weight_algebra(n: int = 100, seed: int = 4, tol: float = 1e-12) -> CheckResult:
    """Weights sum to ``1 - b`` and are invariant to rescaling the ratios."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        m = int(rng.integers(2, 64))
        r = ratios_of(rng.uniform(0.01, 0.99, size=m))
        b = float(rng.uniform(0, 1))
        w = normalized_weights(r, b)
        worst = max(worst, abs(math.fsum(w) - (1 - b)),
                    float(np.max(np.abs(normalized_weights(r * rng.uniform(0.1, 10), b) - w))))
    return CheckResult("weight normalization", worst < tol, worst, n, f"(tol {tol:g})")


def oracle_suite(seed: int = 0, n: int = 100) -> list[CheckResult]:
    return [optimal_identity(n, seed), suboptimal_descent(n, seed + 1), mixed_descent(n, seed + 2),
            per_step_descent(n, seed + 3), weight_algebra(n, seed + 4)]


def variance_report(trials: int = 10_000, m: int = 32, n_rollouts: int = 16, seed: int = 0) -> RunReport:
    """Covariance traces of three estimators on the singular-ratio instance.

    Self-normalized (b = 0) and unnormalized importance weighting use the
    same minibatch size; per-step weighting uses ``n_rollouts`` completions
    per position.  Ratios land in ``RunReport.extra``.
    """
    inst = singular_instance(seed=seed)
    gen, disc = inst.gen, inst.disc
    estimators = {
        "self_normalized": lambda rng: maligan_grad(gen, disc, gen.sample(m, rng), 0.0).values,
        "unnormalized": lambda rng: unnormalized_is_grad(gen, disc, gen.sample(m, rng)).values,
        "per_step": lambda rng: per_step_grad(gen, disc, gen.sample(m, rng), n_rollouts, rng).values,
    }
    traces = {}
    for k, (name, fn) in enumerate(estimators.items()):
        traces[name] = measure_estimator(fn, trials, np.random.default_rng([seed, k])).cov_trace
    extra = {
        "cov_trace": traces,
        "ratio_self_normalized_to_unnormalized": traces["self_normalized"] / traces["unnormalized"],
        "ratio_per_step_to_self_normalized": traces["per_step"] / traces["self_normalized"],
    }
    config = {"instance": "singular", "seed": seed, "m": m, "trials": trials, "n_rollouts": n_rollouts,
              "omega_mass_generator": 1e-4, "omega_mass_data": 0.3}
    return RunReport(config, {}, {}, [], extra=extra)
