"""Time-discretized finite-particle MFLD stepper with counter-keyed noise.

One step over the whole ensemble:

    x_next[i] = x[i] - step * grad_field(x)[i] + sqrt(2 * sigma * step) * xi[i]

The gradient field is evaluated once against the pre-step particle matrix
(synchronous update), and the noise rows are drawn by the caller from an
`RngStream`, a stateless counter-based source: a draw depends only on
(master seed, key), never on how many draws happened before it.  That is what
makes trajectories bit-reproducible under any parallel schedule.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import NumericalFailure
from .features import ParticleEnsemble
from .objectives import RegParams


class RngStream:
    """Keyed Gaussian noise: `normal(key, shape)` is a pure function of key."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)

    def generator(self, key) -> np.random.Generator:
        key = tuple(int(k) for k in key)
        if any(k < 0 for k in key):
            raise ValueError(f"stream keys must be nonnegative, got {key}")
        seq = np.random.SeedSequence(entropy=self.master_seed, spawn_key=key)
        return np.random.Generator(np.random.Philox(seq))

    def normal(self, key, shape) -> np.ndarray:
        return self.generator(key).standard_normal(shape)


def mfld_step(
    ens: ParticleEnsemble,
    grad_field,
    step: float,
    sigma: float,
    noise: np.ndarray | None = None,
    *,
    rng: RngStream | None = None,
    key=None,
) -> ParticleEnsemble:
    """One synchronous noisy-gradient step; the input ensemble is not mutated.

    grad_field maps the full (N, d) pre-step particle matrix to the (N, d)
    matrix of per-particle gradients.  When sigma > 0 the noise comes either
    from explicit standard-normal rows aligned with the particles (row i
    belongs to particle i, so a caller permuting particles permutes noise rows
    alongside) or from `rng.normal(key, ...)` when an RngStream and key are
    given instead.
    """
    if not step > 0:
        raise ValueError(f"step must be > 0, got {step}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma > 0 and noise is None:
        if rng is None or key is None:
            raise ValueError("sigma > 0 needs either explicit noise or rng + key")
        noise = rng.normal(key, ens.particles.shape)
    grads = np.asarray(grad_field(ens.particles), dtype=np.float64)
    if grads.shape != ens.particles.shape:
        raise ValueError(
            f"grad_field returned shape {grads.shape}, expected {ens.particles.shape}"
        )
    finite_rows = np.isfinite(grads).all(axis=1)
    if not finite_rows.all():
        bad = int(np.argmin(finite_rows))
        raise NumericalFailure(f"non-finite gradient at particle {bad}")
    new = ens.particles - step * grads
    if sigma > 0:
        noise = np.asarray(noise, dtype=np.float64)
        if noise.shape != ens.particles.shape:
            raise ValueError(
                f"noise shape {noise.shape} does not match particles {ens.particles.shape}"
            )
        new = new + math.sqrt(2.0 * sigma * step) * noise
    if not np.all(np.isfinite(new)):
        bad = int(np.argwhere(~np.isfinite(new).all(axis=1))[0, 0])
        raise NumericalFailure(f"non-finite state at particle {bad} after step")
    return ens.replace(new)


def validate_step_sizes(reg: RegParams, alpha: float, beta: float, gamma: float) -> list[str]:
    """Check the contraction conditions; returns named violations (empty = ok)."""
    violations = []
    if reg.zeta1 > 0 and alpha > 1.0 / reg.zeta1:
        violations.append(f"alpha={alpha} exceeds 1/zeta1={1.0 / reg.zeta1}")
    if reg.lam * reg.zeta1 > 0 and beta > 1.0 / (reg.lam * reg.zeta1):
        violations.append(f"beta={beta} exceeds 1/(lam*zeta1)={1.0 / (reg.lam * reg.zeta1)}")
    if reg.zeta2 > 0 and gamma > 1.0 / reg.zeta2:
        violations.append(f"gamma={gamma} exceeds 1/zeta2={1.0 / reg.zeta2}")
    return violations
