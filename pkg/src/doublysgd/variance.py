"""Closed-form variance bounds and their Monte Carlo measurement.

The central object is the three-term decomposition of the trace variance
of a subsampled ensemble of (possibly correlated) unbiased estimators:

    tr V[x_B] <= V_com + V_cor + V_sub

    V_com = (rho/b_eff + (1-rho)/b) * mean_i tr V[x_i]
    V_cor = rho * (1 - 1/b_eff)     * (mean_i sqrt(tr V[x_i]))^2
    V_sub = (1/b_eff)               * mean_i ||xbar_i - xbar||^2

with equality when the pairwise trace-correlation condition
tr Cov(x_i, x_j) <= rho * sqrt(tr V[x_i] tr V[x_j]) is tight (independent
estimators at rho = 0, exact positive constant multiples at rho = 1).
Everything here is expressed through 1/b_eff so the full-batch
without-replacement case is exactly zero.
"""

import itertools
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import rng as streams
from .estimators import draw_noise_block, monte_carlo_component, sample_gradient_estimates
from .problems import (
    ProblemSpec,
    analytic_variance_oracle,
    component_gradients,
    component_value_and_gradient,
    global_optimum,
    make_quadratic_problem,
    objective_and_gradient,
    smoothness_constants,
    strong_convexity_constant,
)
from .sampling import inverse_effective_sample_size, subsampling_unit_variance

RHO_FOR_SHARING = {"shared": 1.0, "independent": 0.0}


# ---------------------------------------------------------------------------
# Empirical measurement
# ---------------------------------------------------------------------------

def empirical_trace_variance(sampler, reps: int, rng: np.random.Generator):
    """Unbiased sample trace variance of a vector stream, with standard error.

    ``sampler(rng, k)`` must return a (k, d) array of i.i.d. draws.  The
    standard error comes from the sample spread of the per-draw squared
    deviations divided by sqrt(reps).
    """
    if reps < 2:
        raise ValueError("need reps >= 2 for a variance estimate")
    samples = np.asarray(sampler(rng, reps), dtype=float)
    center = np.mean(samples, axis=0)
    sq_dev = np.sum((samples - center[None, :]) ** 2, axis=1)
    estimate = float(np.sum(sq_dev) / (reps - 1))
    std_error = float(np.std(sq_dev, ddof=1) / np.sqrt(reps))
    return estimate, std_error


def gradient_sampler(p: ProblemSpec, x: np.ndarray, b: int, m: int,
                     sharing: str, strategy: str):
    """Sampler closure over the doubly stochastic gradient at ``x``."""
    def sampler(rng, k):
        return sample_gradient_estimates(p, x, b, m, sharing, strategy, k, rng)
    return sampler


# ---------------------------------------------------------------------------
# The variance decomposition and its corollary endpoints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BoundTerms:
    v_com: float
    v_cor: float
    v_sub: float

    @property
    def total(self) -> float:
        return self.v_com + self.v_cor + self.v_sub


def doubly_stochastic_variance_bound(sigmas: np.ndarray, means: np.ndarray,
                                     rho: float, strategy: str, b: int,
                                     n: int) -> BoundTerms:
    """Evaluate the three-term decomposition for given constants.

    ``sigmas`` are the trace standard deviations of the component
    estimators actually subsampled (fold any 1/sqrt(m) Monte Carlo
    averaging into them before calling); ``means`` are the component
    expectations, an (n, d) array.
    """
    sigmas = np.asarray(sigmas, dtype=float)
    means = np.asarray(means, dtype=float)
    if sigmas.shape[0] != n or means.shape[0] != n:
        raise ValueError("constants disagree with the population size n")
    if np.any(sigmas < 0):
        raise ValueError("trace standard deviations must be non-negative")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    inv_beff = inverse_effective_sample_size(strategy, b, n)
    v_com = (rho * inv_beff + (1.0 - rho) / b) * float(np.mean(sigmas ** 2))
    v_cor = rho * (1.0 - inv_beff) * float(np.mean(sigmas)) ** 2
    v_sub = inv_beff * subsampling_unit_variance(means)
    return BoundTerms(v_com=v_com, v_cor=v_cor, v_sub=v_sub)


COROLLARY_CASES = ("i", "ii", "iii", "iv", "v")


def corollary_variance(case: str, sigmas: np.ndarray, tau_sq: float,
                       n: int, b: int, m: int) -> float:
    """Endpoint formulas for m-sample Monte Carlo with b-nice subsampling.

    ``sigmas`` are the single-sample trace standard deviations; the 1/m
    from averaging m i.i.d. draws sits explicitly in each formula.
    """
    sigmas = np.asarray(sigmas, dtype=float)
    if sigmas.shape[0] != n:
        raise ValueError("constants disagree with the population size n")
    if tau_sq < 0 or m < 1:
        raise ValueError("need tau_sq >= 0 and m >= 1")
    if not 1 <= b <= n:
        raise ValueError("need 1 <= b <= n")
    mean_sq = float(np.mean(sigmas ** 2))
    sq_mean = float(np.mean(sigmas)) ** 2
    if case == "i":
        if not 1 < b < n:
            raise ValueError("case (i) requires 1 < b < n")
        return ((n - b) / ((n - 1.0) * m * b) * mean_sq
                + n * (b - 1) / ((n - 1.0) * m * b) * sq_mean
                + (n - b) / ((n - 1.0) * b) * tau_sq)
    if case == "ii":
        if b != 1:
            raise ValueError("case (ii) requires b = 1")
        return mean_sq / m + tau_sq
    if case == "iii":
        if b != n:
            raise ValueError("case (iii) requires b = n")
        return sq_mean / m
    if case == "iv":
        if np.any(sigmas != 0):
            raise ValueError("case (iv) requires all sigma_i = 0")
        return (n - b) / ((n - 1.0) * b) * tau_sq
    if case == "v":
        return mean_sq / (m * b) + (n - b) / ((n - 1.0) * b) * tau_sq
    raise ValueError(f"unknown corollary case {case!r}")


# ---------------------------------------------------------------------------
# Expected-variance lemma (exhaustive check)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BatchScenario:
    """One realization of the batch variable with its conditional structure.

    ``stds[i]`` is the conditional trace standard deviation of element i
    and ``corr[i, j]`` the conditional trace correlation, so the exact
    conditional variance of the sum is sum_ij corr[i,j] stds[i] stds[j].
    """

    prob: float
    stds: np.ndarray
    corr: np.ndarray

    def __post_init__(self):
        k = self.stds.shape[0]
        if self.corr.shape != (k, k):
            raise ValueError("correlation matrix shape disagrees with stds")


@dataclass(frozen=True)
class LemmaCheck:
    lhs: float
    rhs: float
    passed: bool
    equality: bool


def expected_variance_lemma_check(scenarios: Sequence[BatchScenario], rho: float,
                                  tol: float = 1e-12) -> LemmaCheck:
    """Exhaustively compare both sides of the expected-variance inequality.

    lhs = E[tr V(sum_i x_i | B)], rhs = rho*V[S] + rho*(E S)^2 + (1-rho)*E[V]
    with S and V the conditional sums of standard deviations and variances.
    """
    probs = np.array([sc.prob for sc in scenarios])
    if abs(probs.sum() - 1.0) > 1e-9:
        raise ValueError("scenario probabilities must sum to 1")
    lhs = 0.0
    s_vals = np.empty(len(scenarios))
    v_vals = np.empty(len(scenarios))
    for j, sc in enumerate(scenarios):
        lhs += sc.prob * float(sc.stds @ sc.corr @ sc.stds)
        s_vals[j] = np.sum(sc.stds)
        v_vals[j] = np.sum(sc.stds ** 2)
    e_s = float(probs @ s_vals)
    var_s = float(probs @ (s_vals - e_s) ** 2)
    e_v = float(probs @ v_vals)
    rhs = rho * var_s + rho * e_s ** 2 + (1.0 - rho) * e_v
    scale = max(1.0, abs(rhs))
    return LemmaCheck(lhs=lhs, rhs=rhs,
                      passed=lhs <= rhs + tol * scale,
                      equality=abs(lhs - rhs) <= tol * scale)


def enumerate_subset_scenarios(stds: np.ndarray, b: int,
                               pair_correlation: float) -> List[BatchScenario]:
    """All C(n, b) equally likely subsets, elements scaled by 1/b.

    ``pair_correlation`` is the common off-diagonal trace correlation of
    the population (1 for exact constant multiples, 0 for independent).
    """
    stds = np.asarray(stds, dtype=float)
    n = stds.shape[0]
    if not 1 <= b <= n:
        raise ValueError("need 1 <= b <= n")
    subsets = list(itertools.combinations(range(n), b))
    prob = 1.0 / len(subsets)
    corr = np.full((b, b), pair_correlation)
    np.fill_diagonal(corr, 1.0)
    return [BatchScenario(prob=prob, stds=stds[list(sub)] / b, corr=corr)
            for sub in subsets]


# ---------------------------------------------------------------------------
# Problem constants (BV and ER) and condition numbers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantsReport:
    """Closed-form constants of one (problem, estimator configuration) pair."""

    n: int
    b: int
    m: int
    sharing: str
    strategy: str
    rho: float
    mu: float
    L_i: np.ndarray
    L_max: float
    sigma_i: Optional[np.ndarray] = None      # m-folded trace std at x*
    sigma_i_sq: Optional[np.ndarray] = None
    tau_sq: Optional[float] = None
    bv_sigma_sq: Optional[float] = None       # BV constant of the full estimator
    script_L_i: Optional[np.ndarray] = None
    script_L_sub: Optional[float] = None      # unit constant, composed as /b_eff
    script_L_A: Optional[float] = None
    script_L_B: Optional[float] = None
    kappa: Optional[float] = None
    kappa_sigma: Optional[float] = None
    kappa_tau: Optional[float] = None


def bv_constants(p: ProblemSpec, m: int) -> ConstantsReport:
    """Exact solution-set variance constants for the quadratic family.

    sigma_i^2 = tr V of the m-sample component estimator at x*, which is
    (d/m) L_i^2 for additive Gaussian noise; tau^2 is the single-draw
    subsampling variance of the exact component gradients at x*.
    """
    if p.kind != "quadratic":
        raise ValueError("closed-form optimum (and thus BV constants) requires the quadratic family")
    if m < 1:
        raise ValueError("need m >= 1")
    L = np.array(p.components.smoothness, dtype=float)
    sigma_i_sq = (p.d / m) * L ** 2
    xstar = global_optimum(p)
    tau_sq = subsampling_unit_variance(component_gradients(p, xstar))
    mu = strong_convexity_constant(p)
    return ConstantsReport(
        n=p.n, b=0, m=m, sharing="", strategy="", rho=np.nan, mu=mu,
        L_i=L, L_max=float(np.max(L)),
        sigma_i=np.sqrt(sigma_i_sq), sigma_i_sq=sigma_i_sq, tau_sq=tau_sq,
    )


def montecarlo_er_constants(p: ProblemSpec, mu: float) -> np.ndarray:
    """Per-component ER constants of the Monte Carlo estimators.

    With common random numbers the quadratic integrand difference
    g_i(x; eta) - g_i(x*; eta) = L_i (x - x*) is noise-free, so the
    coupled ER constant is 0.  The smoothing family inherits G_i^2 from
    its bounded Jacobian and unit loss curvature; the location-scale
    family satisfies the quadratic growth bound with
    L_i^2 (d_z + kurtosis) / mu.
    """
    c = p.components
    if p.kind == "quadratic":
        return np.zeros(p.n)
    if p.kind == "smoothing_erm":
        return np.array(c.jacobian_bounds, dtype=float) ** 2
    if p.kind == "reparam":
        L = np.array(c.smoothness, dtype=float)
        return L ** 2 * (c.latent_dim + c.base_kurtosis) / mu
    raise ValueError(f"unknown problem kind {p.kind!r}")


def er_constants(p: ProblemSpec, rho: float, strategy: str, b: int,
                 mu: float) -> ConstantsReport:
    """Compose the estimator-level ER constants for the doubly stochastic gradient.

    script_L_A uses the worst per-component constant, script_L_B the mean
    and the squared mean of square roots; both add the subsampling
    contribution L_max / b_eff.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if mu <= 0:
        raise ValueError("mu must be positive")
    inv_beff = inverse_effective_sample_size(strategy, b, p.n)
    script_l = montecarlo_er_constants(p, mu)
    L = smoothness_constants(p)
    l_max = float(np.max(L))
    sub_term = l_max * inv_beff
    mix = rho * inv_beff + (1.0 - rho) / b
    script_l_a = (mix * float(np.max(script_l))
                  + rho * (1.0 - inv_beff) * float(np.mean(script_l))
                  + sub_term)
    script_l_b = (mix * float(np.mean(script_l))
                  + rho * (1.0 - inv_beff) * float(np.mean(np.sqrt(script_l))) ** 2
                  + sub_term)
    return ConstantsReport(
        n=p.n, b=b, m=0, sharing="", strategy=strategy, rho=rho, mu=mu,
        L_i=L, L_max=l_max,
        script_L_i=script_l, script_L_sub=l_max,
        script_L_A=script_l_a, script_L_B=script_l_b,
    )


def constants_report(p: ProblemSpec, b: int, m: int, sharing: str,
                     strategy: str) -> ConstantsReport:
    """Merged BV + ER constants with condition numbers (quadratic family)."""
    rho = RHO_FOR_SHARING[sharing]
    bv = bv_constants(p, m)
    er = er_constants(p, rho, strategy, b, bv.mu)
    terms = doubly_stochastic_variance_bound(bv.sigma_i, component_gradients(p, global_optimum(p)),
                                             rho, strategy, b, p.n)
    return ConstantsReport(
        n=p.n, b=b, m=m, sharing=sharing, strategy=strategy, rho=rho, mu=bv.mu,
        L_i=bv.L_i, L_max=bv.L_max,
        sigma_i=bv.sigma_i, sigma_i_sq=bv.sigma_i_sq, tau_sq=bv.tau_sq,
        bv_sigma_sq=terms.total,
        script_L_i=er.script_L_i, script_L_sub=er.script_L_sub,
        script_L_A=er.script_L_A, script_L_B=er.script_L_B,
        kappa=bv.L_max / bv.mu,
        kappa_sigma=float(np.max(bv.sigma_i)) / bv.mu,
        kappa_tau=float(np.sqrt(bv.tau_sq)) / bv.mu,
    )


# ---------------------------------------------------------------------------
# Variance reports (bound vs measurement)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VarianceReport:
    empirical: float
    std_error: float
    v_com: float
    v_cor: float
    v_sub: float
    rho_used: float
    inv_beff: float
    b: int
    m: int
    sharing: str
    strategy: str
    oracle: float = np.nan

    @property
    def bound_total(self) -> float:
        return self.v_com + self.v_cor + self.v_sub


def variance_report(p: ProblemSpec, x: np.ndarray, b: int, m: int, sharing: str,
                    strategy: str, reps: int, rng: np.random.Generator) -> VarianceReport:
    """Measure the doubly stochastic gradient variance at ``x`` and bound it."""
    rho = RHO_FOR_SHARING[sharing]
    bv = bv_constants(p, m) if p.kind == "quadratic" else None
    if bv is None:
        raise ValueError("variance reports need the quadratic family's exact constants")
    means = component_gradients(p, x)
    # at a general point the component estimator variance is unchanged
    # (additive noise), so the x* constants apply verbatim
    terms = doubly_stochastic_variance_bound(bv.sigma_i, means, rho, strategy, b, p.n)
    if reps >= 2:
        empirical, se = empirical_trace_variance(
            gradient_sampler(p, x, b, m, sharing, strategy), reps, rng)
    else:
        empirical, se = np.nan, np.nan
    return VarianceReport(
        empirical=empirical, std_error=se,
        v_com=terms.v_com, v_cor=terms.v_cor, v_sub=terms.v_sub,
        rho_used=rho, inv_beff=inverse_effective_sample_size(strategy, b, p.n),
        b=b, m=m, sharing=sharing, strategy=strategy,
        oracle=analytic_variance_oracle(p, x, b, m, sharing, strategy),
    )


# ---------------------------------------------------------------------------
# Lemma-level audits
# ---------------------------------------------------------------------------

def average_bregman_check(p: ProblemSpec, x: np.ndarray, y: np.ndarray):
    """(lhs, rhs) of the identity mean_i D_{f_i}(x, y) = D_F(x, y)."""
    fx, _ = objective_and_gradient(p, x)
    fy, gy = objective_and_gradient(p, y)
    rhs = fx - fy - float(gy @ (np.asarray(x) - np.asarray(y)))
    lhs = 0.0
    for i in range(p.n):
        vix, _ = component_value_and_gradient(p, i, np.asarray(x, dtype=float))
        viy, giy = component_value_and_gradient(p, i, np.asarray(y, dtype=float))
        lhs += vix - viy - float(giy @ (np.asarray(x) - np.asarray(y)))
    return lhs / p.n, rhs


@dataclass(frozen=True)
class AuditRow:
    point_index: int
    empirical: float
    std_error: float
    rhs: float
    passed: bool


def gradient_norm_bound_audit(p: ProblemSpec, points: Sequence[np.ndarray],
                              report: ConstantsReport, reps: int,
                              rng: np.random.Generator) -> List[AuditRow]:
    """Check E||g(x)||^2 <= 4 (script_L_A + L_F) (F(x) - F(x*)) + 2 sigma^2.

    L_F is the smoothness of the full objective (the mean of the L_i for
    the isotropic quadratic), sigma^2 the composed BV constant; empirical
    means get a 3-standard-error allowance.
    """
    xstar = global_optimum(p)
    fstar, _ = objective_and_gradient(p, xstar)
    l_f = float(np.mean(report.L_i))
    rows = []
    for j, x in enumerate(points):
        fx, _ = objective_and_gradient(p, x)
        rhs = 4.0 * (report.script_L_A + l_f) * (fx - fstar) + 2.0 * report.bv_sigma_sq
        samples = sample_gradient_estimates(p, np.asarray(x, dtype=float), report.b,
                                            report.m, report.sharing, report.strategy,
                                            reps, rng)
        sq = np.sum(samples ** 2, axis=1)
        emp = float(np.mean(sq))
        se = float(np.std(sq, ddof=1) / np.sqrt(reps))
        rows.append(AuditRow(point_index=j, empirical=emp, std_error=se, rhs=rhs,
                             passed=emp <= rhs + 3.0 * se))
    return rows


# ---------------------------------------------------------------------------
# Correlation diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorrelationEstimate:
    rho_hat: float
    degenerate_components: tuple


def sample_component_gradient_matrix(p: ProblemSpec, x: np.ndarray,
                                     indices: Sequence[int], m: int, sharing: str,
                                     reps: int, rng: np.random.Generator) -> np.ndarray:
    """(reps, k, d) per-component Monte Carlo gradients drawn jointly."""
    indices = list(indices)
    x = np.asarray(x, dtype=float)
    out = np.empty((reps, len(indices), p.d))
    for r in range(reps):
        if sharing == "shared":
            block = draw_noise_block(p, m, rng, sharing)
            for j, i in enumerate(indices):
                out[r, j] = monte_carlo_component(p, i, x, block)
        else:
            for j, i in enumerate(indices):
                block = draw_noise_block(p, m, rng, sharing)
                out[r, j] = monte_carlo_component(p, i, x, block)
    return out


def correlation_estimate(samples: np.ndarray, degenerate_tol: float = 1e-15) -> CorrelationEstimate:
    """Worst-pair trace correlation of jointly drawn component gradients.

    rho_hat = max over pairs of tr Cov(x_i, x_j) / sqrt(tr V_i tr V_j),
    clamped to [0, 1]; components with vanishing trace variance are flagged
    and their pairs skipped.
    """
    samples = np.asarray(samples, dtype=float)
    reps, k, _ = samples.shape
    if reps < 2 or k < 2:
        raise ValueError("need at least 2 draws of at least 2 components")
    centered = samples - np.mean(samples, axis=0, keepdims=True)
    # (k, k) matrix of trace covariances
    cov = np.einsum("rid,rjd->ij", centered, centered) / (reps - 1)
    tr_v = np.diag(cov).copy()
    degenerate = tuple(int(i) for i in np.flatnonzero(tr_v <= degenerate_tol))
    live = [i for i in range(k) if i not in degenerate]
    best = -np.inf
    for a in range(len(live)):
        for b_ in range(a + 1, len(live)):
            i, j = live[a], live[b_]
            best = max(best, cov[i, j] / np.sqrt(tr_v[i] * tr_v[j]))
    if best == -np.inf:
        raise ValueError("all component pairs were degenerate")
    return CorrelationEstimate(rho_hat=float(np.clip(best, 0.0, 1.0)),
                               degenerate_components=degenerate)


# ---------------------------------------------------------------------------
# Budget sweep (trade-off between b and m at fixed budget)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepRow:
    s: float
    budget: int
    b: int
    m: int
    sharing: str
    strategy: str
    empirical: float
    std_error: float
    oracle: float
    v_com: float
    v_cor: float
    v_sub: float
    bound_total: float


def budget_factorizations(budget: int, n: int) -> List[int]:
    """Power-of-two batch sizes b with b | budget and b <= n."""
    if budget < 1:
        raise ValueError("budget must be positive")
    out = []
    b = 1
    while b <= min(budget, n):
        if budget % b == 0:
            out.append(b)
        b *= 2
    return out


def budget_sweep(n: int, d: int, s_values: Sequence[float], budgets: Sequence[int],
                 sharing: str, strategy: str, instance_seed: int,
                 reps: int = 0, master_seed: int = 0, threads: int = 1) -> List[SweepRow]:
    """Gradient variance at the optimum for every budget factorization b*m.

    With reps = 0 only the closed-form columns are produced; otherwise
    each cell measures the empirical trace variance with its own stream.
    Cells that fail numerically are flagged with NaNs and the sweep
    continues.
    """
    cells = []
    for s in s_values:
        p = make_quadratic_problem(n, d, s, instance_seed)
        xstar = global_optimum(p)
        for budget in budgets:
            for b in budget_factorizations(budget, n):
                cells.append((s, p, xstar, budget, b, budget // b))

    def run_cell(args):
        index, (s, p, xstar, budget, b, m) = args
        try:
            report = variance_report(p, xstar, b, m, sharing, strategy, reps,
                                     streams.substream(master_seed, streams.STREAM_CELL, index))
            return SweepRow(s=s, budget=budget, b=b, m=m, sharing=sharing,
                            strategy=strategy, empirical=report.empirical,
                            std_error=report.std_error, oracle=report.oracle,
                            v_com=report.v_com, v_cor=report.v_cor,
                            v_sub=report.v_sub, bound_total=report.bound_total)
        except (ValueError, FloatingPointError):
            nan = float("nan")
            return SweepRow(s=s, budget=budget, b=b, m=m, sharing=sharing,
                            strategy=strategy, empirical=nan, std_error=nan,
                            oracle=nan, v_com=nan, v_cor=nan, v_sub=nan,
                            bound_total=nan)

    indexed = list(enumerate(cells))
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_cell, indexed))
    else:
        rows = [run_cell(item) for item in indexed]
    return rows
