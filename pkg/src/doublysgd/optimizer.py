"""Projected SGD drivers: independent subsampling and random reshuffling.

Indexing is epoch-major.  A reshuffling run with p = n/b batches per epoch
maps (epoch k, within-epoch step i) to the global step t = k*p + i; plain
SGD is the degenerate case epoch 0, step t.  The master seed splits into a
partition stream, a batch stream, and one noise stream per global step
(see ``rng``), so trajectories with shared and independent noise are
comparable at equal seeds.
"""

import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from . import rng as streams
from .estimators import doubly_stochastic_gradient
from .problems import (
    ProblemSpec,
    SHARINGS,
    global_optimum,
    minibatch_exact_gradient,
    objective_and_gradient,
    reparam_initial_point,
)
from .sampling import (
    STRATEGIES,
    SubsamplingStrategy,
    draw_minibatch,
    reshuffle_partition,
)

RESHUFFLE = "reshuffle"


@dataclass(frozen=True)
class EuclideanBall:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("ball radius must be positive")


def project(x: np.ndarray, domain: Optional[EuclideanBall]) -> np.ndarray:
    """Euclidean projection: identity when unconstrained, radial clamp on a ball."""
    if domain is None:
        return x
    offset = x - domain.center
    norm = np.linalg.norm(offset)
    if norm <= domain.radius:
        return x
    return domain.center + (domain.radius / norm) * offset


@dataclass(frozen=True)
class RunConfig:
    """Everything one optimizer run depends on besides the problem."""

    strategy: str                 # "with_replacement" | "without_replacement" | "reshuffle"
    b: int
    m: int
    sharing: str
    gamma: float
    steps_or_epochs: int
    master_seed: int
    record_every: int = 1
    domain: Optional[EuclideanBall] = None
    x0: Optional[np.ndarray] = None
    exact_gradients: bool = False  # noise-free surrogate for the m -> infinity limit

    def __post_init__(self):
        if self.strategy not in STRATEGIES + (RESHUFFLE,):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.sharing not in SHARINGS:
            raise ValueError(f"unknown sharing policy {self.sharing!r}")
        if self.gamma <= 0:
            raise ValueError("stepsize must be positive")
        if self.b < 1 or self.m < 1:
            raise ValueError("need b >= 1 and m >= 1")
        if self.record_every < 1:
            raise ValueError("record_every must be at least 1")
        if self.steps_or_epochs < 0:
            raise ValueError("steps_or_epochs must be non-negative")


@dataclass(frozen=True)
class TraceRecord:
    epoch: int
    step: int
    iterate: np.ndarray
    dist_sq_to_opt: Optional[float] = None
    grad_norm_sq: Optional[float] = None


def _initial_point(p: ProblemSpec, cfg: RunConfig) -> np.ndarray:
    if cfg.x0 is not None:
        x0 = np.asarray(cfg.x0, dtype=float)
        if x0.shape != (p.d,):
            raise ValueError(f"x0 has shape {x0.shape}, expected ({p.d},)")
        return x0.copy()
    if p.kind == "reparam":
        return reparam_initial_point(p)
    return np.zeros(p.d)


def _make_record(p: ProblemSpec, epoch: int, step: int, x: np.ndarray,
                 xstar: Optional[np.ndarray]) -> TraceRecord:
    if xstar is not None:
        diff = x - xstar
        return TraceRecord(epoch=epoch, step=step, iterate=x.copy(),
                           dist_sq_to_opt=float(diff @ diff))
    _, grad = objective_and_gradient(p, x)
    return TraceRecord(epoch=epoch, step=step, iterate=x.copy(),
                       grad_norm_sq=float(grad @ grad))


def _step_gradient(p: ProblemSpec, batch: np.ndarray, x: np.ndarray,
                   cfg: RunConfig, t: int) -> np.ndarray:
    if cfg.exact_gradients:
        return minibatch_exact_gradient(p, batch, x)
    noise_rng = streams.substream(cfg.master_seed, streams.STREAM_NOISE, t)
    return doubly_stochastic_gradient(p, batch, x, cfg.m, cfg.sharing, noise_rng).value


def sgd_run(p: ProblemSpec, cfg: RunConfig) -> List[TraceRecord]:
    """Projected SGD with a fresh minibatch and fresh noise every step."""
    if cfg.strategy == RESHUFFLE:
        raise ValueError("sgd_run needs a per-step subsampling strategy; use sgd_rr_run")
    strategy = SubsamplingStrategy(kind=cfg.strategy, b=cfg.b)
    xstar = global_optimum(p) if p.kind == "quadratic" else None
    x = _initial_point(p, cfg)
    batch_rng = streams.substream(cfg.master_seed, streams.STREAM_BATCH)

    trace = [_make_record(p, 0, 0, x, xstar)]
    T = cfg.steps_or_epochs
    for t in range(T):
        batch = draw_minibatch(strategy, p.n, batch_rng)
        g = _step_gradient(p, batch, x, cfg, t)
        x = project(x - cfg.gamma * g, cfg.domain)
        if (t + 1) % cfg.record_every == 0 or t + 1 == T:
            trace.append(_make_record(p, 0, t + 1, x, xstar))
    return trace


def sgd_rr_run(p: ProblemSpec, cfg: RunConfig) -> List[TraceRecord]:
    """Doubly stochastic SGD with random reshuffling.

    Each epoch draws one fresh partition of the n components into p = n/b
    disjoint batches and visits them in partition order; noise blocks stay
    fresh per step.  End-of-epoch iterates are always recorded (subject to
    record_every counting epochs).
    """
    if p.n % cfg.b != 0:
        raise ValueError(f"batch size {cfg.b} does not divide n={p.n}")
    xstar = global_optimum(p) if p.kind == "quadratic" else None
    x = _initial_point(p, cfg)
    p_batches = p.n // cfg.b

    trace = [_make_record(p, 0, 0, x, xstar)]
    K = cfg.steps_or_epochs
    for k in range(K):
        part_rng = streams.substream(cfg.master_seed, streams.STREAM_PARTITION, k)
        partition = reshuffle_partition(p.n, cfg.b, part_rng, epoch_seed=k)
        for i in range(p_batches):
            t = k * p_batches + i
            g = _step_gradient(p, partition.batches[i], x, cfg, t)
            x = project(x - cfg.gamma * g, cfg.domain)
        if (k + 1) % cfg.record_every == 0 or k + 1 == K:
            trace.append(_make_record(p, k + 1, (k + 1) * p_batches, x, xstar))
    return trace


# ---------------------------------------------------------------------------
# Stepsize selection from the geometric-recurrence lemmas
# ---------------------------------------------------------------------------

def stepsize_for_accuracy(B: float, C: float, mu: float, eps: float, r0: float):
    """Stepsize and iteration count for r_T <= (1-gamma*mu)^T r0 + B*gamma.

    gamma = min(eps/(2B), 1/C) splits the budget so the noise floor eats
    at most eps/2; T_min then drives the geometric term below eps/2.
    """
    if B < 0:
        raise ValueError("B must be non-negative")
    if min(C, mu, eps, r0) <= 0:
        raise ValueError("C, mu, eps, r0 must be positive")
    gamma = 1.0 / C if B == 0 else min(eps / (2.0 * B), 1.0 / C)
    return gamma, _t_min(gamma, mu, eps, r0)


def stepsize_for_accuracy_quadratic_floor(A: float, B: float, C: float,
                                          mu: float, eps: float, r0: float):
    """Same for the recurrence with floor A*gamma^2 + B*gamma.

    The variance-budget root is evaluated in the rationalized form
    eps / (B + sqrt(B^2 + 2*A*eps)), which is stable for A -> 0 and
    reduces to eps/(2B) there.
    """
    if A < 0 or B < 0:
        raise ValueError("A and B must be non-negative")
    if min(C, mu, eps, r0) <= 0:
        raise ValueError("C, mu, eps, r0 must be positive")
    if A == 0 and B == 0:
        gamma = 1.0 / C
    else:
        gamma_var = eps / (B + math.sqrt(B * B + 2.0 * A * eps))
        gamma = min(gamma_var, 1.0 / C)
    return gamma, _t_min(gamma, mu, eps, r0)


def _t_min(gamma: float, mu: float, eps: float, r0: float) -> int:
    target = 2.0 * r0 / eps
    if target <= 1.0:
        return 0
    return math.ceil(math.log(target) / (gamma * mu))


# ---------------------------------------------------------------------------
# Reshuffling Lyapunov reference points
# ---------------------------------------------------------------------------

def lyapunov_reference_points(p: ProblemSpec, partition, gamma: float,
                              domain: Optional[EuclideanBall] = None) -> np.ndarray:
    """Drifted anchors x*_i = proj(x* - gamma * sum_{j<i} grad f_{P_j}(x*)).

    Returns a (p+1, d) array; row 0 is x* itself and, on an unconstrained
    domain, the final row telescopes back to x* because the full-epoch sum
    of batch gradients is (n/b) grad F(x*) = 0.
    """
    if gamma <= 0:
        raise ValueError("stepsize must be positive")
    xstar = global_optimum(p)
    batch_grads = np.stack([
        minibatch_exact_gradient(p, batch, xstar) for batch in partition.batches
    ])
    prefix = np.concatenate([np.zeros((1, p.d)), np.cumsum(batch_grads, axis=0)])
    points = xstar[None, :] - gamma * prefix
    if domain is not None:
        points = np.stack([project(pt, domain) for pt in points])
    return points
