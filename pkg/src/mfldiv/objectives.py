"""Two-stage risk functionals on particle ensembles and their gradients.

Stage I measures how well the instrument-side ensemble `ens_z` reproduces the
treatment-side ensemble `ens_x` through the joint batch; stage II measures fit
to the outcome.  With h_x(a) and g_z(w) the two ensemble predictions:

    u1 = 1/2 mean_b (g_z(w_b) - h_x(a_b))^2
    u2 = 1/2 mean_b (g_z(w_b) - y_b)^2
    f1 = u1 + zeta1/2 * mean_j ||z_j||^2
    f2 = u2 + zeta2/2 * mean_j ||x_j||^2

Entropic regularization is never evaluated numerically; it exists only as
injected noise inside the dynamics module.  Gradients follow the mean-field
1/N convention: they are gradients of the limiting functional at a particle
position, consumed by the stepper as-is.  Finite differences of u1/u2/f1 in
one particle's coordinates therefore equal gradient/N.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .features import ParticleEnsemble, ensemble_eval_batch


@dataclass(frozen=True)
class RegParams:
    """Regularization scales: ell_2 (zeta), noise (sigma), penalty weight (lam)."""

    zeta1: float = 1e-5
    zeta2: float = 1e-5
    sigma1: float = 1e-2
    sigma2: float = 1e-2
    lam: float = 0.3

    def __post_init__(self):
        # lam = 0 is allowed: several degenerate checks rely on it, and the
        # step-size rule touching lam is vacuous there
        for name in ("zeta1", "zeta2", "sigma1", "sigma2", "lam"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")


def _check_batch(*arrays):
    sizes = {np.asarray(arr).shape[0] for arr in arrays}
    if len(sizes) != 1:
        raise ValueError(f"batch arrays disagree on length: {sorted(sizes)}")
    (size,) = sizes
    if size == 0:
        raise ValueError("empty batch")


def mean_sq_norm(ens: ParticleEnsemble) -> float:
    """Mean particle squared norm, exactly rounded over the particle axis."""
    sq = (ens.particles * ens.particles).sum(axis=1)
    return math.fsum(sq.tolist()) / ens.n_particles


def u1(ens_x, ens_z, a_batch, w_batch) -> float:
    _check_batch(a_batch, w_batch)
    resid = ensemble_eval_batch(ens_z, w_batch) - ensemble_eval_batch(ens_x, a_batch)
    return 0.5 * float(np.mean(resid * resid))


def u2(ens_z, w_batch, y_batch) -> float:
    _check_batch(w_batch, y_batch)
    resid = ensemble_eval_batch(ens_z, w_batch) - np.asarray(y_batch, dtype=np.float64)
    return 0.5 * float(np.mean(resid * resid))


def f1(ens_x, ens_z, a_batch, w_batch, reg: RegParams) -> float:
    return u1(ens_x, ens_z, a_batch, w_batch) + 0.5 * reg.zeta1 * mean_sq_norm(ens_z)


def f2(ens_x, ens_z, w_batch, y_batch, reg: RegParams) -> float:
    return u2(ens_z, w_batch, y_batch) + 0.5 * reg.zeta2 * mean_sq_norm(ens_x)


def _x_residual(ens_x, ens_z, a_batch, w_batch) -> np.ndarray:
    """h_x(a) - g_z(w) over the batch (the treatment-side sign convention)."""
    _check_batch(a_batch, w_batch)
    return ensemble_eval_batch(ens_x, a_batch) - ensemble_eval_batch(ens_z, w_batch)


def grad1_u1_field(ens_x, ens_z, a_batch, w_batch, at=None) -> np.ndarray:
    """Gradient of U1 in the x-slot, evaluated at each row of `at` (default: ens_x)."""
    particles = ens_x.particles if at is None else np.atleast_2d(at)
    resid = _x_residual(ens_x, ens_z, a_batch, w_batch)
    weights = resid / resid.shape[0]
    return ens_x.spec.grad_weighted(particles, np.atleast_2d(a_batch), weights)


def grad1_u1(ens_x, ens_z, a_batch, w_batch, x) -> np.ndarray:
    return grad1_u1_field(ens_x, ens_z, a_batch, w_batch, at=np.asarray(x)[None, :])[0]


def grad2_f1_field(ens_x, ens_z, a_batch, w_batch, reg: RegParams, at=None) -> np.ndarray:
    """Gradient of F1 in the z-slot at each row of `at` (default: ens_z particles)."""
    particles = ens_z.particles if at is None else np.atleast_2d(at)
    resid = -_x_residual(ens_x, ens_z, a_batch, w_batch)
    weights = resid / resid.shape[0]
    grad = ens_z.spec.grad_weighted(particles, np.atleast_2d(w_batch), weights)
    return grad + reg.zeta1 * particles


def grad2_f1(ens_x, ens_z, a_batch, w_batch, reg: RegParams, z) -> np.ndarray:
    return grad2_f1_field(ens_x, ens_z, a_batch, w_batch, reg, at=np.asarray(z)[None, :])[0]


def grad_u2_field(ens_z, w_batch, y_batch, at=None) -> np.ndarray:
    """Gradient of U2 in the z-slot at each row of `at` (default: ens_z particles)."""
    _check_batch(w_batch, y_batch)
    particles = ens_z.particles if at is None else np.atleast_2d(at)
    resid = ensemble_eval_batch(ens_z, w_batch) - np.asarray(y_batch, dtype=np.float64)
    weights = resid / resid.shape[0]
    return ens_z.spec.grad_weighted(particles, np.atleast_2d(w_batch), weights)


def grad_u2(ens_z, w_batch, y_batch, z) -> np.ndarray:
    return grad_u2_field(ens_z, w_batch, y_batch, at=np.asarray(z)[None, :])[0]


def lagrangian_monitor(ens_x, tilde_z, z_star, stage1, stage2, reg: RegParams):
    """Entropy-free penalty objective and constraint gap.

    stage1 = (a_batch, w_batch), stage2 = (w_batch, y_batch).  Returns
    (value, gap) with value = f2 + lam * gap and gap = f1(tilde) - f1(star).
    """
    a1, w1 = stage1
    w2, y2 = stage2
    gap = f1(ens_x, tilde_z, a1, w1, reg) - f1(ens_x, z_star, a1, w1, reg)
    value = f2(ens_x, tilde_z, w2, y2, reg) + reg.lam * gap
    return value, gap
