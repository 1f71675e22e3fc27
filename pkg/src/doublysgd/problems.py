"""Synthetic problem families with exact objectives and variance oracles.

All families are finite sums ``F(x) = (1/n) sum_i f_i(x)`` in which each
component is itself an expectation over a noise variable, so gradients can
only be estimated by Monte Carlo.  Every family here is chosen so that the
expectation has a closed form: the lab can compare stochastic estimates
against exact values.

Families
--------
quadratic
    ``f_i(x; eta) = (L_i / 2) ||x - c_i + eta||^2`` with ``eta ~ N(0, I_d)``.
    Exact expectation ``f_i(x) = (L_i / 2) (||x - c_i||^2 + d)``; the noise
    floor constant is kept so that ``f_i`` equals the true expectation.
    The global optimum and the exact trace variance of the doubly
    stochastic gradient are available in closed form (see
    ``docs/quadratic_variance_derivation.md``).

smoothing_erm
    Linear model, half squared loss, Gaussian weight perturbation shared
    across the batch: ``f_i(w; eps) = (1/2) ((w + eps) . x_i - y_i)^2``
    with ``eps ~ N(0, nu^2 I_d)``.  The smoothed risk has the closed form
    ``(1/2) (w . x_i - y_i)^2 + (nu^2 / 2) ||x_i||^2``.

reparam
    Location-scale reparameterization with a standard Gaussian base:
    ``z = C u + m``, integrand ``l_i(z) = (L_i / 2) ||z - t_i||^2``.
    The parameter vector is ``w = [m, tril(C)]`` (row-major lower
    triangle, positive diagonal required), giving
    ``f_i(w) = (L_i / 2) (||m - t_i||^2 + ||C||_F^2)``.
"""

import json
from dataclasses import dataclass

import numpy as np

from .sampling import inverse_effective_sample_size

KINDS = ("quadratic", "smoothing_erm", "reparam")
SHARINGS = ("shared", "independent")


@dataclass(frozen=True)
class QuadraticComponents:
    smoothness: np.ndarray   # (n,) positive L_i
    centers: np.ndarray      # (n, d) per-component stationary points c_i
    heterogeneity: float     # center scale s used at generation time

    def __post_init__(self):
        if np.any(self.smoothness <= 0):
            raise ValueError("all smoothness constants must be positive")
        if self.centers.shape[0] != self.smoothness.shape[0]:
            raise ValueError("centers and smoothness disagree on component count")


@dataclass(frozen=True)
class SmoothingErmComponents:
    features: np.ndarray          # (n, d)
    labels: np.ndarray            # (n,)
    perturbation_scale: float     # nu > 0
    jacobian_bounds: np.ndarray   # (n,) G_i >= ||x_i||

    def __post_init__(self):
        if self.perturbation_scale <= 0:
            raise ValueError("perturbation scale must be positive")
        norms = np.linalg.norm(self.features, axis=1)
        if np.any(self.jacobian_bounds < norms - 1e-12):
            raise ValueError("jacobian bounds must dominate feature norms")


@dataclass(frozen=True)
class ReparamComponents:
    targets: np.ndarray      # (n, d_z) stationary points t_i of the integrands
    smoothness: np.ndarray   # (n,) positive L_i
    base_kurtosis: float     # k of the base distribution (3 for Gaussian)

    def __post_init__(self):
        if np.any(self.smoothness <= 0):
            raise ValueError("all smoothness constants must be positive")

    @property
    def latent_dim(self) -> int:
        return self.targets.shape[1]


@dataclass(frozen=True)
class ProblemSpec:
    """Immutable description of one synthetic instance.

    ``d`` is the dimension of the optimization variable; for the reparam
    family that is ``d_z + d_z (d_z + 1) / 2`` (location plus lower
    triangle of the scale).  Regenerating with the same constructor
    arguments reproduces the instance bit-exactly.
    """

    kind: str
    n: int
    d: int
    components: object
    seed: int

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.n < 1 or self.d < 1:
            raise ValueError("need n >= 1 and d >= 1")

    @property
    def noise_dim(self) -> int:
        """Dimension of one raw noise draw."""
        if self.kind == "reparam":
            return self.components.latent_dim
        return self.d


# ---------------------------------------------------------------------------
# Instance generation
# ---------------------------------------------------------------------------

def _sample_inverse_gamma_half_half(rng: np.random.Generator, n: int) -> np.ndarray:
    # Inverse-Gamma with shape 1/2 and scale 1/2 (shape/scale convention,
    # density ~ x^(-3/2) exp(-1/(2x))).  Its reciprocal is chi-square with
    # one degree of freedom, so L = 1 / Z^2 with Z standard normal.
    z = rng.standard_normal(n)
    return 1.0 / np.square(z)


def make_quadratic_problem(n: int, d: int, s: float, seed: int) -> ProblemSpec:
    """Quadratic instance: L_i ~ Inv-Gamma(1/2, 1/2), c_i ~ N(0, s^2 I_d)."""
    if n < 1 or d < 1:
        raise ValueError("need n >= 1 and d >= 1")
    if s <= 0:
        raise ValueError("heterogeneity s must be positive")
    rng = np.random.default_rng(seed)
    smoothness = _sample_inverse_gamma_half_half(rng, n)
    centers = s * rng.standard_normal((n, d))
    comps = QuadraticComponents(smoothness=smoothness, centers=centers, heterogeneity=float(s))
    return ProblemSpec(kind="quadratic", n=n, d=d, components=comps, seed=seed)


def quadratic_problem_from_parts(smoothness, centers, seed: int = 0, heterogeneity: float = 0.0) -> ProblemSpec:
    """Quadratic instance with explicitly chosen L_i and centers."""
    smoothness = np.asarray(smoothness, dtype=float)
    centers = np.asarray(centers, dtype=float)
    if centers.ndim != 2:
        raise ValueError("centers must be an (n, d) array")
    comps = QuadraticComponents(smoothness=smoothness, centers=centers,
                                heterogeneity=float(heterogeneity))
    return ProblemSpec(kind="quadratic", n=centers.shape[0], d=centers.shape[1],
                       components=comps, seed=seed)


def make_smoothing_erm_problem(n: int, d: int, perturbation_scale: float, seed: int) -> ProblemSpec:
    """Planted linear regression with Gaussian weight smoothing.

    Features are standard normal, labels come from a planted weight vector
    (no label noise), and the Jacobian bound of the linear model is the
    feature norm itself.
    """
    if n < 1 or d < 1:
        raise ValueError("need n >= 1 and d >= 1")
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((n, d))
    w_true = rng.standard_normal(d)
    labels = features @ w_true
    comps = SmoothingErmComponents(
        features=features,
        labels=labels,
        perturbation_scale=float(perturbation_scale),
        jacobian_bounds=np.linalg.norm(features, axis=1),
    )
    return ProblemSpec(kind="smoothing_erm", n=n, d=d, components=comps, seed=seed)


def make_reparam_problem(n: int, d_z: int, seed: int, target_scale: float = 1.0) -> ProblemSpec:
    """Location-scale reparameterization instance with Gaussian base.

    Integrand curvatures are drawn log-uniformly from [0.5, 4] to get a
    moderate, strictly positive spread; targets are N(0, target_scale^2 I).
    """
    if n < 1 or d_z < 1:
        raise ValueError("need n >= 1 and d_z >= 1")
    rng = np.random.default_rng(seed)
    smoothness = np.exp(rng.uniform(np.log(0.5), np.log(4.0), size=n))
    targets = target_scale * rng.standard_normal((n, d_z))
    comps = ReparamComponents(targets=targets, smoothness=smoothness, base_kurtosis=3.0)
    d = d_z + d_z * (d_z + 1) // 2
    return ProblemSpec(kind="reparam", n=n, d=d, components=comps, seed=seed)


# ---------------------------------------------------------------------------
# Location-scale parameter packing
# ---------------------------------------------------------------------------

def pack_location_scale(m: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Concatenate location and the row-major lower triangle of the scale."""
    d_z = m.shape[0]
    rows, cols = np.tril_indices(d_z)
    if np.any(np.diag(scale) <= 0):
        raise ValueError("scale matrix must have a positive diagonal")
    if np.any(np.triu(scale, k=1) != 0):
        raise ValueError("scale matrix must be lower triangular")
    return np.concatenate([m, scale[rows, cols]])


def unpack_location_scale(w: np.ndarray, d_z: int):
    """Split a parameter vector into (location, lower-triangular scale)."""
    m = w[:d_z]
    scale = np.zeros((d_z, d_z))
    rows, cols = np.tril_indices(d_z)
    scale[rows, cols] = w[d_z:]
    return m, scale


def reparam_initial_point(p: ProblemSpec) -> np.ndarray:
    """Default starting parameters: zero location, identity scale."""
    d_z = p.components.latent_dim
    return pack_location_scale(np.zeros(d_z), np.eye(d_z))


# ---------------------------------------------------------------------------
# Exact objectives and gradients
# ---------------------------------------------------------------------------

def component_value_and_gradient(p: ProblemSpec, i: int, x: np.ndarray):
    """Exact (f_i(x), grad f_i(x)) of the noise expectation."""
    if not 0 <= i < p.n:
        raise ValueError(f"component index {i} out of range [0, {p.n})")
    c = p.components
    if p.kind == "quadratic":
        L = c.smoothness[i]
        diff = x - c.centers[i]
        value = 0.5 * L * (diff @ diff + p.d)
        return value, L * diff
    if p.kind == "smoothing_erm":
        xi = c.features[i]
        resid = x @ xi - c.labels[i]
        nu2 = c.perturbation_scale ** 2
        value = 0.5 * resid ** 2 + 0.5 * nu2 * (xi @ xi)
        return value, resid * xi
    if p.kind == "reparam":
        d_z = c.latent_dim
        L = c.smoothness[i]
        m, scale = unpack_location_scale(x, d_z)
        diff = m - c.targets[i]
        value = 0.5 * L * (diff @ diff + np.sum(scale ** 2))
        rows, cols = np.tril_indices(d_z)
        grad = np.concatenate([L * diff, L * scale[rows, cols]])
        return value, grad
    raise ValueError(f"unknown problem kind {p.kind!r}")


def component_gradients(p: ProblemSpec, x: np.ndarray) -> np.ndarray:
    """Exact gradients of every component, stacked into an (n, d) array."""
    c = p.components
    if p.kind == "quadratic":
        return c.smoothness[:, None] * (x[None, :] - c.centers)
    if p.kind == "smoothing_erm":
        resid = c.features @ x - c.labels
        return resid[:, None] * c.features
    if p.kind == "reparam":
        d_z = c.latent_dim
        m, scale = unpack_location_scale(x, d_z)
        rows, cols = np.tril_indices(d_z)
        tri = scale[rows, cols]
        grads = np.empty((p.n, p.d))
        grads[:, :d_z] = c.smoothness[:, None] * (m[None, :] - c.targets)
        grads[:, d_z:] = c.smoothness[:, None] * tri[None, :]
        return grads
    raise ValueError(f"unknown problem kind {p.kind!r}")


def minibatch_exact_gradient(p: ProblemSpec, batch: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Noise-free batch gradient (1/b) sum_{i in batch} grad f_i(x)."""
    batch = np.asarray(batch, dtype=int)
    c = p.components
    if p.kind == "quadratic":
        lb = c.smoothness[batch]
        return np.mean(lb[:, None] * (x[None, :] - c.centers[batch]), axis=0)
    if p.kind == "smoothing_erm":
        feats = c.features[batch]
        resid = feats @ x - c.labels[batch]
        return np.mean(resid[:, None] * feats, axis=0)
    if p.kind == "reparam":
        d_z = c.latent_dim
        m, scale = unpack_location_scale(x, d_z)
        lb = c.smoothness[batch]
        rows, cols = np.tril_indices(d_z)
        g_loc = np.mean(lb[:, None] * (m[None, :] - c.targets[batch]), axis=0)
        return np.concatenate([g_loc, np.mean(lb) * scale[rows, cols]])
    raise ValueError(f"unknown problem kind {p.kind!r}")


def objective_and_gradient(p: ProblemSpec, x: np.ndarray):
    """Exact (F(x), grad F(x)); the full expectation over all noise."""
    x = np.asarray(x, dtype=float)
    if x.shape != (p.d,):
        raise ValueError(f"point has shape {x.shape}, expected ({p.d},)")
    if not np.all(np.isfinite(x)):
        raise ValueError("point must be finite")
    c = p.components
    if p.kind == "quadratic":
        diffs = x[None, :] - c.centers
        values = 0.5 * c.smoothness * (np.sum(diffs ** 2, axis=1) + p.d)
        grad = np.mean(c.smoothness[:, None] * diffs, axis=0)
        return float(np.mean(values)), grad
    if p.kind == "smoothing_erm":
        resid = c.features @ x - c.labels
        nu2 = c.perturbation_scale ** 2
        values = 0.5 * resid ** 2 + 0.5 * nu2 * np.sum(c.features ** 2, axis=1)
        grad = np.mean(resid[:, None] * c.features, axis=0)
        return float(np.mean(values)), grad
    if p.kind == "reparam":
        d_z = c.latent_dim
        m, scale = unpack_location_scale(x, d_z)
        diffs = m[None, :] - c.targets
        fro2 = np.sum(scale ** 2)
        values = 0.5 * c.smoothness * (np.sum(diffs ** 2, axis=1) + fro2)
        rows, cols = np.tril_indices(d_z)
        lbar = np.mean(c.smoothness)
        grad = np.concatenate([
            np.mean(c.smoothness[:, None] * diffs, axis=0),
            lbar * scale[rows, cols],
        ])
        return float(np.mean(values)), grad
    raise ValueError(f"unknown problem kind {p.kind!r}")


def global_optimum(p: ProblemSpec) -> np.ndarray:
    """Closed-form minimizer; only the quadratic family has one."""
    if p.kind != "quadratic":
        raise ValueError(f"no closed-form optimum for kind {p.kind!r}")
    c = p.components
    weights = c.smoothness / np.sum(c.smoothness)
    return weights @ c.centers


def smoothness_constants(p: ProblemSpec) -> np.ndarray:
    """Per-component smoothness L_i of the exact components f_i."""
    c = p.components
    if p.kind in ("quadratic", "reparam"):
        return np.array(c.smoothness, dtype=float)
    if p.kind == "smoothing_erm":
        # Hessian of the smoothed instance risk is x_i x_i^T.
        return np.sum(c.features ** 2, axis=1)
    raise ValueError(f"unknown problem kind {p.kind!r}")


def strong_convexity_constant(p: ProblemSpec) -> float:
    """Modulus mu shared by every component (quadratic/reparam only)."""
    if p.kind in ("quadratic", "reparam"):
        return float(np.min(p.components.smoothness))
    raise ValueError(f"components of kind {p.kind!r} are not strongly convex")


# ---------------------------------------------------------------------------
# Exact variance oracle (quadratic family)
# ---------------------------------------------------------------------------

def analytic_variance_oracle(p: ProblemSpec, x: np.ndarray, b: int, m: int,
                             sharing: str, strategy: str) -> float:
    """Exact trace variance of the doubly stochastic gradient at ``x``.

    Derived from the law of total variance; the full derivation is written
    out in ``docs/quadratic_variance_derivation.md``.  With batch mean
    ``Lbar_B`` of the smoothness constants, population mean ``Lbar``,
    population variance ``Var(L)``, deterministic parts
    ``a_i = L_i (x - c_i)`` and effective sample size ``b_eff``:

    shared noise:
        ``(d/m) * (Lbar^2 + Var(L)/b_eff) + Var(a)/b_eff``
    independent noise:
        ``(d/(m b)) * mean(L^2) + Var(a)/b_eff``

    where ``Var(a) = (1/n) sum_i ||a_i - mean(a)||^2`` and ``1/b_eff`` is
    exactly 0 for full batches without replacement.
    """
    if p.kind != "quadratic":
        raise ValueError("analytic variance oracle exists only for the quadratic family")
    if m < 1:
        raise ValueError("need m >= 1")
    if sharing not in SHARINGS:
        raise ValueError(f"unknown sharing policy {sharing!r}")
    x = np.asarray(x, dtype=float)
    c = p.components
    inv_beff = inverse_effective_sample_size(strategy, b, p.n)

    L = c.smoothness
    lbar = np.mean(L)
    var_l = np.mean(L ** 2) - lbar ** 2
    a = L[:, None] * (x[None, :] - c.centers)
    abar = np.mean(a, axis=0)
    var_a = np.mean(np.sum((a - abar) ** 2, axis=1))

    if sharing == "shared":
        ensemble = (p.d / m) * (lbar ** 2 + var_l * inv_beff)
    else:
        ensemble = (p.d / (m * b)) * np.mean(L ** 2)
    return float(ensemble + inv_beff * var_a)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def problem_to_dict(p: ProblemSpec) -> dict:
    """JSON-ready dict carrying the realized instance, not just its seed."""
    c = p.components
    out = {"kind": p.kind, "n": p.n, "d": p.d, "seed": p.seed}
    if p.kind == "quadratic":
        out["components"] = {
            "smoothness": c.smoothness.tolist(),
            "centers": c.centers.tolist(),
            "heterogeneity": c.heterogeneity,
        }
    elif p.kind == "smoothing_erm":
        out["components"] = {
            "features": c.features.tolist(),
            "labels": c.labels.tolist(),
            "perturbation_scale": c.perturbation_scale,
            "jacobian_bounds": c.jacobian_bounds.tolist(),
        }
    else:
        out["components"] = {
            "targets": c.targets.tolist(),
            "smoothness": c.smoothness.tolist(),
            "base_kurtosis": c.base_kurtosis,
        }
    return out


def problem_from_dict(data: dict) -> ProblemSpec:
    kind = data["kind"]
    comp = data["components"]
    if kind == "quadratic":
        components = QuadraticComponents(
            smoothness=np.asarray(comp["smoothness"], dtype=float),
            centers=np.asarray(comp["centers"], dtype=float),
            heterogeneity=float(comp["heterogeneity"]),
        )
    elif kind == "smoothing_erm":
        components = SmoothingErmComponents(
            features=np.asarray(comp["features"], dtype=float),
            labels=np.asarray(comp["labels"], dtype=float),
            perturbation_scale=float(comp["perturbation_scale"]),
            jacobian_bounds=np.asarray(comp["jacobian_bounds"], dtype=float),
        )
    elif kind == "reparam":
        components = ReparamComponents(
            targets=np.asarray(comp["targets"], dtype=float),
            smoothness=np.asarray(comp["smoothness"], dtype=float),
            base_kurtosis=float(comp["base_kurtosis"]),
        )
    else:
        raise ValueError(f"unknown problem kind {kind!r}")
    return ProblemSpec(kind=kind, n=int(data["n"]), d=int(data["d"]),
                       components=components, seed=int(data["seed"]))


def save_problem(p: ProblemSpec, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(problem_to_dict(p), fh, indent=2)
        fh.write("\n")


def load_problem(path) -> ProblemSpec:
    with open(path, encoding="utf-8") as fh:
        return problem_from_dict(json.load(fh))
