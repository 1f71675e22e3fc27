"""Component gradient estimators and the doubly stochastic gradient.

A gradient estimate carries two layers of randomness: the minibatch of
component indices and, inside each component, ``m`` Monte Carlo draws of
the component's noise variable.  The sharing policy decides whether one
block of draws is reused by every component in the batch (``shared``,
which correlates the component estimators) or each batch slot gets its
own block from a disjoint stream (``independent``).

Coupled evaluations (common random numbers) are supported by building a
``NoiseBlock`` once and passing it to ``monte_carlo_component`` at several
points.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .problems import SHARINGS, ProblemSpec, unpack_location_scale
from .sampling import WITH_REPLACEMENT, WITHOUT_REPLACEMENT, STRATEGIES

# chunk size guard for the vectorized sampler (elements, not bytes)
_CHUNK_ELEMENTS = 4_000_000


@dataclass(frozen=True)
class NoiseBlock:
    """The raw noise draws used by one component gradient evaluation."""

    draws: np.ndarray        # (m, noise_dim)
    sharing: str
    source_seed: int = 0

    @property
    def m(self) -> int:
        return self.draws.shape[0]


def draw_noise_block(p: ProblemSpec, m: int, rng: np.random.Generator,
                     sharing: str = "shared", source_seed: int = 0) -> NoiseBlock:
    """Sample m raw noise vectors from the problem's noise law."""
    if m < 1:
        raise ValueError("need m >= 1")
    if sharing not in SHARINGS:
        raise ValueError(f"unknown sharing policy {sharing!r}")
    draws = rng.standard_normal((m, p.noise_dim))
    if p.kind == "smoothing_erm":
        draws = p.components.perturbation_scale * draws
    return NoiseBlock(draws=draws, sharing=sharing, source_seed=source_seed)


def component_gradient_integrand(p: ProblemSpec, i: int, x: np.ndarray,
                                 noise: np.ndarray) -> np.ndarray:
    """Single-draw unbiased gradient of component i at x.

    quadratic:       L_i (x - c_i + eta)
    smoothing_erm:   x_i ((w + eps) . x_i - y_i)
    reparam:         chain rule through z = C u + m; the location block is
                     L_i (z - t_i) and scale entry (r, c) is L_i (z - t_i)_r u_c.
    """
    if not 0 <= i < p.n:
        raise ValueError(f"component index {i} out of range [0, {p.n})")
    c = p.components
    noise = np.asarray(noise, dtype=float)
    if p.kind == "quadratic":
        return c.smoothness[i] * (x - c.centers[i] + noise)
    if p.kind == "smoothing_erm":
        xi = c.features[i]
        resid = (x + noise) @ xi - c.labels[i]
        return resid * xi
    if p.kind == "reparam":
        d_z = c.latent_dim
        loc, scale = unpack_location_scale(x, d_z)
        z = scale @ noise + loc
        inner = c.smoothness[i] * (z - c.targets[i])
        rows, cols = np.tril_indices(d_z)
        return np.concatenate([inner, inner[rows] * noise[cols]])
    raise ValueError(f"unknown problem kind {p.kind!r}")


def monte_carlo_component(p: ProblemSpec, i: int, x: np.ndarray,
                          block: NoiseBlock) -> np.ndarray:
    """m-sample Monte Carlo estimate of grad f_i(x) from one noise block."""
    grads = [component_gradient_integrand(p, i, x, eta) for eta in block.draws]
    return np.mean(grads, axis=0)


@dataclass(frozen=True)
class GradientEstimate:
    """One realized doubly stochastic gradient with its provenance."""

    value: np.ndarray
    batch: np.ndarray
    m: int
    sharing: str
    at_point: np.ndarray
    per_component: Optional[np.ndarray] = None  # (b, d) when retained


def doubly_stochastic_gradient(p: ProblemSpec, batch: np.ndarray, x: np.ndarray,
                               m: int, sharing: str, rng: np.random.Generator,
                               retain_per_component: bool = False) -> GradientEstimate:
    """Batch average of Monte Carlo component estimates.

    With ``shared`` one noise block is drawn from ``rng`` and reused for
    every index in the batch; with ``independent`` each batch slot draws
    its block from its own child stream of ``rng``, so duplicated indices
    in a with-replacement batch still get fresh noise.
    """
    batch = np.asarray(batch, dtype=int)
    if batch.size == 0:
        raise ValueError("batch must be nonempty")
    x = np.asarray(x, dtype=float)
    if sharing == "shared":
        block = draw_noise_block(p, m, rng, sharing)
        per = np.stack([monte_carlo_component(p, i, x, block) for i in batch])
    elif sharing == "independent":
        streams = rng.spawn(batch.size)
        per = np.stack([
            monte_carlo_component(p, i, x, draw_noise_block(p, m, slot_rng, sharing))
            for i, slot_rng in zip(batch, streams)
        ])
    else:
        raise ValueError(f"unknown sharing policy {sharing!r}")
    value = np.mean(per, axis=0)
    return GradientEstimate(value=value, batch=batch, m=m, sharing=sharing,
                            at_point=x, per_component=per if retain_per_component else None)


# ---------------------------------------------------------------------------
# Vectorized sampling (many independent gradient estimates at one point)
# ---------------------------------------------------------------------------

def draw_batches(kind: str, b: int, n: int, reps: int, rng: np.random.Generator) -> np.ndarray:
    """reps independent minibatches as a (reps, b) index array."""
    if kind not in STRATEGIES:
        raise ValueError(f"unknown subsampling strategy {kind!r}")
    if kind == WITH_REPLACEMENT:
        return rng.integers(0, n, size=(reps, b))
    if b > n:
        raise ValueError(f"cannot draw {b} of {n} indices without replacement")
    if b == n:
        return np.tile(np.arange(n), (reps, 1))
    # b smallest of n i.i.d. uniforms index a uniformly random subset
    u = rng.random((reps, n))
    return np.argpartition(u, b - 1, axis=1)[:, :b]


def sample_gradient_estimates(p: ProblemSpec, x: np.ndarray, b: int, m: int,
                              sharing: str, strategy: str, reps: int,
                              rng: np.random.Generator) -> np.ndarray:
    """(reps, d) array of i.i.d. doubly stochastic gradients at ``x``.

    Semantically identical to calling ``doubly_stochastic_gradient`` reps
    times with fresh batches, but vectorized.  For the quadratic and
    smoothing families the integrand is affine in the noise, so the mean
    of the m Gaussian draws is sampled directly from its exact law
    N(0, I/m); the reparameterization family keeps all m literal draws
    (its scale block is quadratic in the noise).
    """
    if sharing not in SHARINGS:
        raise ValueError(f"unknown sharing policy {sharing!r}")
    if m < 1 or reps < 1:
        raise ValueError("need m >= 1 and reps >= 1")
    x = np.asarray(x, dtype=float)
    out = np.empty((reps, p.d))
    per_rep = b * max(p.noise_dim, p.d) * (m if p.kind == "reparam" else 1)
    chunk = max(1, min(reps, _CHUNK_ELEMENTS // max(per_rep, 1)))
    done = 0
    while done < reps:
        k = min(chunk, reps - done)
        idx = draw_batches(strategy, b, p.n, k, rng)
        out[done:done + k] = _sample_chunk(p, x, idx, m, sharing, rng)
        done += k
    return out


def _sample_chunk(p: ProblemSpec, x, idx, m, sharing, rng):
    k, b = idx.shape
    c = p.components
    if p.kind == "quadratic":
        a = c.smoothness[:, None] * (x[None, :] - c.centers)
        mean_a = np.mean(a[idx], axis=1)
        if sharing == "shared":
            eta_bar = rng.standard_normal((k, p.d)) / np.sqrt(m)
            return mean_a + np.mean(c.smoothness[idx], axis=1)[:, None] * eta_bar
        eta_bar = rng.standard_normal((k, b, p.d)) / np.sqrt(m)
        return mean_a + np.mean(c.smoothness[idx][:, :, None] * eta_bar, axis=1)
    if p.kind == "smoothing_erm":
        resid = c.features @ x - c.labels
        base = resid[:, None] * c.features
        mean_base = np.mean(base[idx], axis=1)
        feats = c.features[idx]                          # (k, b, d)
        nu = c.perturbation_scale
        if sharing == "shared":
            eps_bar = nu / np.sqrt(m) * rng.standard_normal((k, p.d))
            proj = np.einsum("kbd,kd->kb", feats, eps_bar)
        else:
            eps_bar = nu / np.sqrt(m) * rng.standard_normal((k, b, p.d))
            proj = np.sum(feats * eps_bar, axis=2)
        return mean_base + np.mean(feats * proj[:, :, None], axis=1)
    if p.kind == "reparam":
        return _sample_chunk_reparam(p, x, idx, m, sharing, rng)
    raise ValueError(f"unknown problem kind {p.kind!r}")


def _sample_chunk_reparam(p: ProblemSpec, x, idx, m, sharing, rng):
    c = p.components
    k, b = idx.shape
    d_z = c.latent_dim
    loc, scale = unpack_location_scale(x, d_z)
    rows, cols = np.tril_indices(d_z)
    lbar_b = np.mean(c.smoothness[idx], axis=1)                       # (k,)
    lt_b = np.mean((c.smoothness[:, None] * c.targets)[idx], axis=1)  # (k, d_z)

    if sharing == "shared":
        u = rng.standard_normal((k, m, d_z))
        z = u @ scale.T + loc[None, None, :]
        u_bar = np.mean(u, axis=1)
        z_bar = np.mean(z, axis=1)
        zu = np.einsum("kmr,kmc->krc", z, u) / m                      # (k, d_z, d_z)
        g_loc = lbar_b[:, None] * z_bar - lt_b
        g_scale = lbar_b[:, None, None] * zu - lt_b[:, :, None] * u_bar[:, None, :]
        return np.concatenate([g_loc, g_scale[:, rows, cols]], axis=1)

    u = rng.standard_normal((k, b, m, d_z))
    z = u @ scale.T + loc[None, None, None, :]
    u_bar = np.mean(u, axis=2)                                        # (k, b, d_z)
    z_bar = np.mean(z, axis=2)
    zu = np.einsum("kbmr,kbmc->kbrc", z, u) / m                       # (k, b, d_z, d_z)
    l_i = c.smoothness[idx]                                           # (k, b)
    t_i = c.targets[idx]                                              # (k, b, d_z)
    g_loc = np.mean(l_i[:, :, None] * (z_bar - t_i), axis=1)
    g_scale = np.mean(
        l_i[:, :, None, None] * (zu - t_i[:, :, :, None] * u_bar[:, :, None, :]),
        axis=1,
    )
    return np.concatenate([g_loc, g_scale[:, rows, cols]], axis=1)
