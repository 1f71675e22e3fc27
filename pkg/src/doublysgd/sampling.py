"""Minibatch subsampling strategies and epoch partitions."""

from dataclasses import dataclass

import numpy as np

WITH_REPLACEMENT = "with_replacement"
WITHOUT_REPLACEMENT = "without_replacement"
STRATEGIES = (WITH_REPLACEMENT, WITHOUT_REPLACEMENT)


@dataclass(frozen=True)
class SubsamplingStrategy:
    kind: str
    b: int

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown subsampling strategy {self.kind!r}")
        if self.b < 1:
            raise ValueError("batch size must be at least 1")


def draw_minibatch(strategy: SubsamplingStrategy, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one batch of ``strategy.b`` indices from ``{0, ..., n-1}``.

    ``with_replacement`` returns i.i.d. uniform indices (duplicates
    allowed), ``without_replacement`` a uniform random subset.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    b = strategy.b
    if strategy.kind == WITH_REPLACEMENT:
        return rng.integers(0, n, size=b)
    if b > n:
        raise ValueError(f"cannot draw {b} of {n} indices without replacement")
    return rng.choice(n, size=b, replace=False)


def inverse_effective_sample_size(kind: str, b: int, n: int) -> float:
    """1 / b_eff, with the b = n without-replacement case exactly 0.

    Keeping the inverse as the primitive avoids infinity arithmetic
    downstream: every bound uses 1/b_eff, never b_eff itself.
    """
    if kind not in STRATEGIES:
        raise ValueError(f"unknown subsampling strategy {kind!r}")
    if b < 1:
        raise ValueError("batch size must be at least 1")
    if kind == WITH_REPLACEMENT:
        return 1.0 / b
    if b > n:
        raise ValueError(f"cannot draw {b} of {n} indices without replacement")
    if b == n:
        return 0.0
    return (n - b) / ((n - 1.0) * b)


def effective_sample_size(strategy: SubsamplingStrategy, n: int) -> float:
    """b for i.i.d. sampling, (n-1)b/(n-b) without replacement, inf at b=n."""
    inv = inverse_effective_sample_size(strategy.kind, strategy.b, n)
    if inv == 0.0:
        return np.inf
    return 1.0 / inv


@dataclass(frozen=True)
class EpochPartition:
    """One epoch's disjoint batches: a (p, b) index array covering {0..n-1}."""

    batches: np.ndarray
    epoch_seed: int = 0

    def __post_init__(self):
        p, b = self.batches.shape
        flat = np.sort(self.batches.ravel())
        if not np.array_equal(flat, np.arange(p * b)):
            raise ValueError("batches must partition {0, ..., n-1}")

    @property
    def num_batches(self) -> int:
        return self.batches.shape[0]

    @property
    def batch_size(self) -> int:
        return self.batches.shape[1]


def reshuffle_partition(n: int, b: int, rng: np.random.Generator, epoch_seed: int = 0) -> EpochPartition:
    """Uniform permutation of {0..n-1} chunked into n/b consecutive batches."""
    if n < 1 or b < 1:
        raise ValueError("need n >= 1 and b >= 1")
    if n % b != 0:
        raise ValueError(f"batch size {b} does not divide n={n}")
    perm = rng.permutation(n)
    return EpochPartition(batches=perm.reshape(n // b, b), epoch_seed=epoch_seed)


def subsampling_unit_variance(component_gradients: np.ndarray, mean: np.ndarray = None) -> float:
    """Single-draw subsampling variance (1/n) sum_i ||g_i - mean||^2.

    The variance of a b-batch estimator is this divided by b_eff.
    """
    grads = np.asarray(component_gradients, dtype=float)
    if grads.ndim != 2 or grads.shape[0] < 1:
        raise ValueError("expected a non-empty (n, d) array of gradients")
    if mean is None:
        mean = np.mean(grads, axis=0)
    return float(np.mean(np.sum((grads - mean[None, :]) ** 2, axis=1)))
