"""Two-layer neuron features and particle ensembles.

A feature spec knows how to evaluate one neuron `psi(a, x)` and its gradient in
the particle coordinates `x`.  An ensemble of N particles represents the
empirical measure (1/N) sum_i delta_{x_i}; its prediction is the particle
average of neuron outputs.  Outputs are squashed through the smooth clip
`clip_R(u) = R * tanh(u / R)`, so |prediction| <= R always.

Numerical conventions used by every consumer downstream:

* reductions over the particle axis go through ``math.fsum`` (exactly rounded,
  hence independent of particle order and of duplication N -> 2N);
* pre-activations are formed by broadcast-multiply-sum, never BLAS matmul, so
  the value computed for one input row does not depend on which batch it is
  evaluated in;
* reductions over the batch axis (gradient averaging) use ordinary vectorized
  numpy, because batch order is fixed by the caller.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("tanh", "sigmoid")


def _as_2d(arr: np.ndarray, dim: int, name: str, axis_label: str) -> np.ndarray:
    out = np.asarray(arr, dtype=np.float64)
    if out.ndim != 2:
        raise ValueError(f"{name} must be 2-d (rows, {axis_label}), got shape {out.shape}")
    if out.shape[1] != dim:
        raise ValueError(
            f"{name} has {out.shape[1]} columns on axis 1 ({axis_label}), expected {dim}"
        )
    return out


def _inner(inputs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    # (B, d) x (N, d) -> (B, N) without BLAS; see module docstring.
    return (inputs[:, None, :] * weights[None, :, :]).sum(axis=2)


def _weight_columns(weights, batch: int, count: int) -> np.ndarray:
    # accept a shared (B,) weight vector or per-particle (B, N) columns
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape == (batch,):
        return weights[:, None]
    if weights.shape == (batch, count):
        return weights
    raise ValueError(
        f"weights shape {weights.shape} matches neither ({batch},) nor ({batch}, {count})"
    )


@dataclass(frozen=True)
class NeuronSpec:
    """Shape of one two-layer neuron: psi(a, x) = clip_R(w2 * act(w1.a + b)).

    Particle layout is (w1..., b, w2), so param_dim = input_dim + 2.
    """

    input_dim: int
    clip_bound: float
    activation: str = "tanh"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if not (self.clip_bound > 0 and math.isfinite(self.clip_bound)):
            raise ValueError(f"clip_bound must be positive and finite, got {self.clip_bound}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def param_dim(self) -> int:
        return self.input_dim + 2

    def _act(self, s: np.ndarray) -> np.ndarray:
        if self.activation == "tanh":
            return np.tanh(s)
        # sigmoid via tanh keeps exp() from overflowing for large |s|
        return 0.5 * (1.0 + np.tanh(0.5 * s))

    def _act_prime_from_value(self, g: np.ndarray) -> np.ndarray:
        if self.activation == "tanh":
            return 1.0 - g * g
        return g * (1.0 - g)

    def per_particle(self, particles: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        """Clipped outputs psi(a_b, x_j) as a (B, N) array."""
        particles = _as_2d(particles, self.param_dim, "particles", "param_dim")
        inputs = _as_2d(inputs, self.input_dim, "inputs", "input_dim")
        d = self.input_dim
        s = _inner(inputs, particles[:, :d]) + particles[None, :, d]
        u = self._act(s) * particles[None, :, d + 1]
        return self.clip_bound * np.tanh(u / self.clip_bound)

    def grad_weighted(
        self, particles: np.ndarray, inputs: np.ndarray, weights: np.ndarray
    ) -> np.ndarray:
        """sum_b weights[b] * grad_x psi(a_b, x_j), for every particle j.

        weights is either (B,), shared across particles, or (B, N) with one
        weight column per particle.  Returns an (N, param_dim) array in the
        (w1..., b, w2) layout.
        """
        particles = _as_2d(particles, self.param_dim, "particles", "param_dim")
        inputs = _as_2d(inputs, self.input_dim, "inputs", "input_dim")
        w_bn = _weight_columns(weights, inputs.shape[0], particles.shape[0])
        d = self.input_dim
        w2 = particles[:, d + 1]
        s = _inner(inputs, particles[:, :d]) + particles[None, :, d]
        g = self._act(s)
        u = g * w2[None, :]
        t = np.tanh(u / self.clip_bound)
        clip_prime = 1.0 - t * t
        gp = self._act_prime_from_value(g)
        pre = clip_prime * gp * w2[None, :]          # (B, N): dpsi/d(w1.a + b)
        pre_w = w_bn * pre
        d_w1 = pre_w.T @ inputs                      # (N, d)
        d_b = pre_w.sum(axis=0)
        d_w2 = (w_bn * clip_prime * g).sum(axis=0)
        return np.concatenate([d_w1, d_b[:, None], d_w2[:, None]], axis=1)


@dataclass(frozen=True)
class ClippedLinearSpec:
    """Degenerate feature psi(a, z) = clip_R(z . a) with param_dim = input_dim.

    Used for closed-form cross-checks: with clip_bound far above the data
    range the ensemble prediction is linear in the particle mean, so ridge
    regression gives the exact optimum to compare against.
    """

    input_dim: int
    clip_bound: float

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if not (self.clip_bound > 0 and math.isfinite(self.clip_bound)):
            raise ValueError(f"clip_bound must be positive and finite, got {self.clip_bound}")

    @property
    def param_dim(self) -> int:
        return self.input_dim

    def per_particle(self, particles: np.ndarray, inputs: np.ndarray) -> np.ndarray:
        particles = _as_2d(particles, self.param_dim, "particles", "param_dim")
        inputs = _as_2d(inputs, self.input_dim, "inputs", "input_dim")
        u = _inner(inputs, particles)
        return self.clip_bound * np.tanh(u / self.clip_bound)

    def grad_weighted(
        self, particles: np.ndarray, inputs: np.ndarray, weights: np.ndarray
    ) -> np.ndarray:
        particles = _as_2d(particles, self.param_dim, "particles", "param_dim")
        inputs = _as_2d(inputs, self.input_dim, "inputs", "input_dim")
        w_bn = _weight_columns(weights, inputs.shape[0], particles.shape[0])
        t = np.tanh(_inner(inputs, particles) / self.clip_bound)
        clip_prime = 1.0 - t * t
        return (w_bn * clip_prime).T @ inputs


def neuron_eval(spec, x: np.ndarray, a: np.ndarray) -> float:
    """Single neuron output psi(a, x)."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    return float(spec.per_particle(x[None, :], a[None, :])[0, 0])


def neuron_grad(spec, x: np.ndarray, a: np.ndarray) -> np.ndarray:
    """Gradient of psi(a, x) in the particle coordinates x."""
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    return spec.grad_weighted(x[None, :], a[None, :], np.ones(1))[0]


@dataclass
class ParticleEnsemble:
    """N particles plus the feature spec they parameterize.

    particles: (N, param_dim), finite.  The represented function is
    a -> (1/N) sum_j psi(a, x_j).
    """

    particles: np.ndarray
    spec: NeuronSpec | ClippedLinearSpec = field(repr=False)

    def __post_init__(self):
        self.particles = _as_2d(self.particles, self.spec.param_dim, "particles", "param_dim")
        if self.particles.shape[0] < 1:
            raise ValueError("ensemble needs at least one particle")
        if not np.all(np.isfinite(self.particles)):
            bad = int(np.argwhere(~np.isfinite(self.particles).all(axis=1))[0, 0])
            raise ValueError(f"non-finite particle at index {bad}")

    @property
    def n_particles(self) -> int:
        return self.particles.shape[0]

    def replace(self, particles: np.ndarray) -> "ParticleEnsemble":
        return ParticleEnsemble(particles, self.spec)


def particle_mean(values: np.ndarray) -> np.ndarray:
    """Exactly-rounded mean over the trailing (particle) axis of a (B, N) array."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[-1]
    return np.array([math.fsum(row) for row in values.tolist()]) / n


def ensemble_eval_batch(ens: ParticleEnsemble, inputs: np.ndarray) -> np.ndarray:
    """Ensemble predictions for a batch of inputs, shape (B,)."""
    return particle_mean(ens.spec.per_particle(ens.particles, inputs))


def ensemble_eval(ens: ParticleEnsemble, a: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(ensemble_eval_batch(ens, a[None, :])[0])
