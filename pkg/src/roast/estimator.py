"""Monte-Carlo check of the inverse-probability masked gradient estimator.

Model: each of ``|B|`` per-example gradients is drawn from N(mu, sigma^2 I);
their mean ``g`` is masked coordinate-wise by ``m ~ Bernoulli(p)`` and
rescaled, ``g_tilde = (m / p) * g``.  Closed forms:

    E[g_tilde_i]   = mu_i
    Var[g_tilde_i] = (sigma^2 / |B|) / p_i + (1 - p_i) * mu_i^2 / p_i
"""

from __future__ import annotations

import itertools
import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from roast.rng import RandomSource

GRID_MU = (0.0, 1.0, -1.0, 3.0, -3.0)
GRID_SIGMA = (0.0, 1.0, 2.0)
GRID_BATCH = (1, 4, 16)
GRID_P = (0.1, 0.5, 0.9)

CHUNK = 50_000


@dataclass
class EstimatorScenario:
    mu: np.ndarray
    sigma: float
    batch_size: int
    p: np.ndarray
    draws: int = 100_000

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.p = np.atleast_1d(np.asarray(self.p, dtype=float))
        if self.p.size == 1 and self.mu.size > 1:
            self.p = np.full(self.mu.size, float(self.p[0]))
        if self.mu.size == 1 and self.p.size > 1:
            self.mu = np.full(self.p.size, float(self.mu[0]))
        if self.mu.shape != self.p.shape:
            raise ValueError("mu and p must have one entry per coordinate")
        if self.sigma < 0 or self.batch_size < 1:
            raise ValueError("need sigma >= 0 and batch size >= 1")
        if np.any(self.p <= 0) or np.any(self.p > 1):
            raise ValueError("keep probabilities must lie in (0, 1]")

    @property
    def dim(self) -> int:
        return self.mu.size

    def label(self) -> str:
        p = ",".join(f"{v:g}" for v in self.p)
        return f"mu={self.mu[0]:g} sigma={self.sigma:g} B={self.batch_size} p=[{p}]"


def default_grid(draws: int = 100_000) -> list[EstimatorScenario]:
    """45 scenarios: (mu, sigma, |B|) grid, each with one coordinate per p value."""
    return [EstimatorScenario(np.full(len(GRID_P), mu), s, b, np.array(GRID_P), draws)
            for mu, s, b in itertools.product(GRID_MU, GRID_SIGMA, GRID_BATCH)]


def theoretical_moments(sc: EstimatorScenario) -> tuple[np.ndarray, np.ndarray]:
    p = sc.p
    if np.any(p == 0):
        raise ValueError("p = 0 leaves the estimator undefined")
    var = (sc.sigma ** 2 / sc.batch_size) / p + (1.0 - p) * sc.mu ** 2 / p
    return sc.mu.copy(), var


def draw_masked_estimates(sc: EstimatorScenario, n: int, rng: RandomSource,
                          scaled: bool = True) -> np.ndarray:
    """``n`` independent draws of the masked estimator, shape (n, dim)."""
    per_example = rng.normal(sc.mu, sc.sigma, size=(n, sc.batch_size, sc.dim)) if sc.sigma > 0 \
        else np.broadcast_to(sc.mu, (n, sc.batch_size, sc.dim))
    g = per_example.mean(axis=1)
    m = (rng.random((n, sc.dim)) < sc.p).astype(float)
    return (m / sc.p) * g if scaled else m * g


@dataclass
class EmpiricalMoments:
    mean: np.ndarray
    var: np.ndarray
    cov: np.ndarray
    draws: int

    @property
    def stderr(self) -> np.ndarray:
        return np.sqrt(self.var / self.draws)


def simulate_masked_estimator(sc: EstimatorScenario, seed: int | RandomSource = 0,
                              scaled: bool = True) -> EmpiricalMoments:
    """Streamed sample mean / variance / covariance over ``sc.draws`` draws."""
    rng = seed if isinstance(seed, RandomSource) else RandomSource(seed)
    d = sc.dim
    total = 0
    mean = np.zeros(d)
    m2 = np.zeros((d, d))
    while total < sc.draws:
        n = min(CHUNK, sc.draws - total)
        x = draw_masked_estimates(sc, n, rng, scaled)
        cmean = x.mean(axis=0)
        xc = x - cmean
        cm2 = xc.T @ xc
        # pairwise merge of partial moments
        delta = cmean - mean
        new_total = total + n
        m2 += cm2 + np.outer(delta, delta) * total * n / new_total
        mean += delta * n / new_total
        total = new_total
    cov = m2 / (total - 1)
    return EmpiricalMoments(mean, np.diag(cov).copy(), cov, total)


def covariance_bound(sc: EstimatorScenario) -> float:
    """``d * || sigma^2 I / (p_min |B|) + (1 - p_min) diag(mu)^2 / p_min ||_F``."""
    p_hat = float(sc.p.min())
    mat = np.eye(sc.dim) * sc.sigma ** 2 / (p_hat * sc.batch_size) \
        + np.diag((1.0 - p_hat) * sc.mu ** 2 / p_hat)
    return sc.dim * float(np.linalg.norm(mat, "fro"))


def covariance_bound_check(sc: EstimatorScenario, seed: int = 0,
                           slack: float = 0.05) -> tuple[bool, float]:
    """Does the empirical covariance respect the Frobenius bound?  Returns (ok, margin)."""
    emp = simulate_masked_estimator(sc, seed)
    lhs = float(np.linalg.norm(emp.cov, "fro"))
    rhs = covariance_bound(sc) * (1.0 + slack)
    margin = rhs - lhs
    return bool(margin >= 0), margin


# ---------------------------------------------------------------------------
# suite


@dataclass
class ScenarioResult:
    label: str
    mu: list
    sigma: float
    batch_size: int
    p: list
    mean_draws: int
    var_draws: int
    empirical_mean: list
    stderr: list
    mean_z: list
    unbiased: bool
    theoretical_var: list
    empirical_var: list
    var_rel_error: list
    variance_ok: bool
    unscaled_mean: list
    bound_ok: bool
    bound_margin: float


def verify_scenario(sc: EstimatorScenario, rng: RandomSource, mean_draws: int = 100_000,
                    var_draws: int = 1_000_000, z_limit: float = 3.0,
                    var_tol: float = 0.05) -> ScenarioResult:
    r_mean, r_var, r_unscaled = rng.split(3)
    mu, var_th = theoretical_moments(sc)

    emp_m = simulate_masked_estimator(_with_draws(sc, mean_draws), r_mean)
    se = emp_m.stderr
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, (emp_m.mean - mu) / np.where(se > 0, se, 1.0),
                     np.where(emp_m.mean == mu, 0.0, np.inf))
    unbiased = bool(np.all(np.abs(z) <= z_limit))

    emp_v = simulate_masked_estimator(_with_draws(sc, var_draws), r_var)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(var_th > 0, np.abs(emp_v.var - var_th) / np.where(var_th > 0, var_th, 1.0),
                       np.abs(emp_v.var))
    variance_ok = bool(np.all(rel[var_th > 0] <= var_tol)) and bool(np.all(emp_v.var[var_th == 0] == 0))

    unscaled = simulate_masked_estimator(_with_draws(sc, mean_draws), r_unscaled, scaled=False)

    lhs = float(np.linalg.norm(emp_v.cov, "fro"))
    margin = covariance_bound(sc) * 1.05 - lhs

    return ScenarioResult(
        sc.label(), sc.mu.tolist(), sc.sigma, sc.batch_size, sc.p.tolist(),
        mean_draws, var_draws, emp_m.mean.tolist(), se.tolist(), z.tolist(), unbiased,
        var_th.tolist(), emp_v.var.tolist(), rel.tolist(), variance_ok,
        unscaled.mean.tolist(), bool(margin >= 0), margin,
    )


def _with_draws(sc: EstimatorScenario, draws: int) -> EstimatorScenario:
    return EstimatorScenario(sc.mu, sc.sigma, sc.batch_size, sc.p, draws)


def run_suite(seed: int = 0, mean_draws: int = 100_000, var_draws: int = 1_000_000,
              scenarios: list[EstimatorScenario] | None = None) -> dict:
    """Run every grid scenario on its own sub-stream; returns a JSON-ready report."""
    scenarios = scenarios if scenarios is not None else default_grid()
    streams = RandomSource(seed).split(len(scenarios))
    t0 = time.perf_counter()
    results = [verify_scenario(sc, r, mean_draws, var_draws) for sc, r in zip(scenarios, streams)]
    return {
        "seed": seed,
        "mean_draws": mean_draws,
        "var_draws": var_draws,
        "scenarios": len(results),
        "unbiased_pass": sum(r.unbiased for r in results),
        "variance_pass": sum(r.variance_ok for r in results),
        "bound_pass": sum(r.bound_ok for r in results),
        "elapsed_s": time.perf_counter() - t0,
        "results": [asdict(r) for r in results],
    }


def write_report(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, default=float)
