"""Two-stage ridge baselines: fixed feature maps and learned neuron features.

`fixed_2sls` is the closed-form estimator: stage I ridge-regresses treatment
features on instrument features, stage II ridge-regresses the outcome on the
stage-I fitted features.  `dfiv_train` replaces both feature maps with banks
of two-layer neurons and alternates closed-form head solves with gradient
steps on the feature weights, where the gradient through each ridge solve
comes from the adjoint method (one extra linear solve per head, no
differentiation of matrix inverses entry by entry).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .checkpoints import load_container, save_container
from .errors import ConfigError, DataFormatError, DivergenceError, NumericalFailure
from .features import NeuronSpec
from .npiv_data import NpivDataset

DIVERGENCE_LIMIT = 1e6

FEATURE_KINDS = ("identity", "polynomial", "random_tanh")

CHECKPOINT_KIND_2SLS = "fixed2sls"
CHECKPOINT_KIND_DFIV = "dfiv"


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Frozen vector-valued feature function rows -> (B, output_dim)."""

    kind: str
    input_dim: int
    output_dim: int
    weights: Optional[np.ndarray] = field(default=None, repr=False)
    biases: Optional[np.ndarray] = field(default=None, repr=False)
    degree: int = 0

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ConfigError(f"unknown feature kind {self.kind!r}, choose from {FEATURE_KINDS}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigError("feature dimensions must be positive")

    def __call__(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.input_dim:
            raise ValueError(
                f"feature input must be (rows, {self.input_dim}), got {rows.shape}"
            )
        if self.kind == "identity":
            return rows.copy()
        if self.kind == "polynomial":
            cols = [np.ones(rows.shape[0])]
            for k in range(1, self.degree + 1):
                cols.extend((rows[:, j] ** k) for j in range(self.input_dim))
            return np.stack(cols, axis=1)
        return np.tanh(rows @ self.weights.T + self.biases)


def identity_features(input_dim: int) -> FeatureMap:
    return FeatureMap("identity", input_dim, input_dim)


def polynomial_features(input_dim: int, degree: int) -> FeatureMap:
    if degree < 1:
        raise ConfigError(f"polynomial degree must be >= 1, got {degree}")
    return FeatureMap("polynomial", input_dim, 1 + input_dim * degree, degree=degree)


def random_tanh_features(input_dim: int, output_dim: int, seed: int) -> FeatureMap:
    """tanh(W x + b) with frozen standard-normal W and b; outputs in (-1, 1)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    weights = rng.standard_normal((output_dim, input_dim))
    biases = rng.standard_normal(output_dim)
    return FeatureMap("random_tanh", input_dim, output_dim, weights=weights, biases=biases)


def spd_solve(matrix: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    """Solve a symmetric positive-definite system with a jitter retry.

    On Cholesky failure, adds a trace-scaled 1e-10 diagonal once; a second
    failure raises with a condition estimate.
    """
    try:
        return cho_solve(cho_factor(matrix, lower=True), rhs)
    except np.linalg.LinAlgError:
        pass
    dim = matrix.shape[0]
    jitter = 1e-10 * max(float(np.trace(matrix)) / dim, 1.0)
    bumped = matrix + jitter * np.eye(dim)
    try:
        return cho_solve(cho_factor(bumped, lower=True), rhs)
    except np.linalg.LinAlgError as exc:
        cond = float(np.linalg.cond(matrix))
        raise NumericalFailure(
            f"{what}: ridge system not positive definite even after jitter "
            f"(condition estimate {cond:.3e})"
        ) from exc


@dataclass(eq=False)
class RidgeSolution:
    """Stage-I operator V, stage-II weights u, and the maps that index them."""

    v: np.ndarray  # (p, q): treatment-feature dim x instrument-feature dim
    u: np.ndarray  # (p,)
    zeta1: float
    zeta2: float
    psi: FeatureMap
    phi: FeatureMap

    def __post_init__(self):
        if not (np.all(np.isfinite(self.v)) and np.all(np.isfinite(self.u))):
            raise NumericalFailure("ridge solution contains non-finite entries")
        if self.v.shape != (self.psi.output_dim, self.phi.output_dim):
            raise ValueError(f"V shape {self.v.shape} inconsistent with feature maps")
        if self.u.shape != (self.psi.output_dim,):
            raise ValueError(f"u shape {self.u.shape} inconsistent with treatment features")

    def predict(self, a_rows: np.ndarray) -> np.ndarray:
        return self.psi(np.asarray(a_rows, dtype=np.float64)) @ self.u

    def stage1_fit(self, w_rows: np.ndarray) -> np.ndarray:
        """Fitted treatment features V phi(w), one row per input row."""
        return self.phi(np.asarray(w_rows, dtype=np.float64)) @ self.v.T


def fixed_2sls(
    psi: FeatureMap,
    phi: FeatureMap,
    data: NpivDataset,
    zeta1: float,
    zeta2: float,
) -> RidgeSolution:
    """Closed-form double ridge regression.

    Stage I:  V = Psi_A^T Phi_W (Phi_W^T Phi_W + 2 m zeta1 I)^-1
    Stage II: (G^T G + 2 n zeta2 I) u = G^T y  with rows G_i = V phi(w_i)
    """
    if not (zeta1 > 0 and zeta2 > 0):
        raise ConfigError(f"ridge scales must be > 0, got zeta1={zeta1}, zeta2={zeta2}")
    psi_a = psi(data.stage1_a)
    phi_w = phi(data.stage1_w)
    m = data.m
    b1 = phi_w.T @ phi_w + 2.0 * m * zeta1 * np.eye(phi.output_dim)
    # V B1 = Psi^T Phi  <=>  B1 V^T = Phi^T Psi (B1 symmetric)
    v = spd_solve(b1, phi_w.T @ psi_a, "stage I").T
    phi_w2 = phi(data.stage2_w)
    g = phi_w2 @ v.T
    n = data.n
    b2 = g.T @ g + 2.0 * n * zeta2 * np.eye(psi.output_dim)
    u = spd_solve(b2, g.T @ data.stage2_y, "stage II")
    return RidgeSolution(v=v, u=u, zeta1=zeta1, zeta2=zeta2, psi=psi, phi=phi)


@dataclass(eq=False)
class NeuronBank:
    """Width-k bank of two-layer neurons used as a learned k-dim feature map.

    Unlike a particle ensemble there is no averaging: neuron j's output is
    feature coordinate j.
    """

    spec: NeuronSpec
    particles: np.ndarray

    def __post_init__(self):
        self.particles = np.asarray(self.particles, dtype=np.float64)
        if self.particles.ndim != 2 or self.particles.shape[1] != self.spec.param_dim:
            raise ValueError(
                f"bank particles must be (width, {self.spec.param_dim}), "
                f"got {self.particles.shape}"
            )
        if not np.all(np.isfinite(self.particles)):
            raise ValueError("non-finite neuron parameters")

    @property
    def width(self) -> int:
        return self.particles.shape[0]

    def features(self, rows: np.ndarray) -> np.ndarray:
        return self.spec.per_particle(self.particles, np.asarray(rows, dtype=np.float64))

    def backprop(self, rows: np.ndarray, sensitivity: np.ndarray) -> np.ndarray:
        """d(loss)/d(particles) given d(loss)/d(features) of shape (B, width)."""
        return self.spec.grad_weighted(self.particles, rows, sensitivity)


def neuron_bank(input_dim: int, width: int, seed: int, clip_bound: float = 10.0,
                activation: str = "tanh") -> NeuronBank:
    spec = NeuronSpec(input_dim, clip_bound, activation)
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    return NeuronBank(spec, rng.standard_normal((width, spec.param_dim)))


@dataclass(eq=False)
class DfivModel:
    psi_net: NeuronBank
    phi_net: NeuronBank
    v: np.ndarray
    u: np.ndarray
    zeta1: float
    zeta2: float
    loss_trace: list  # stage-II loss after each head solve, length steps + 1

    def predict(self, a_rows: np.ndarray) -> np.ndarray:
        return self.psi_net.features(a_rows) @ self.u


def _dfiv_heads(psi_a, phi_w, phi_w2, y, zeta1, zeta2):
    """Solve both ridge heads; returns (v, u, g, b1, b2)."""
    m, q = phi_w.shape
    p = psi_a.shape[1]
    b1 = phi_w.T @ phi_w + 2.0 * m * zeta1 * np.eye(q)
    v = spd_solve(b1, phi_w.T @ psi_a, "stage I").T
    g = phi_w2 @ v.T
    n = g.shape[0]
    b2 = g.T @ g + 2.0 * n * zeta2 * np.eye(p)
    u = spd_solve(b2, g.T @ y, "stage II")
    return v, u, g, b1, b2


def _stage2_loss(g, u, y):
    r = g @ u - y
    return 0.5 * float(r @ r) / y.shape[0]


def _dfiv_gradients(psi_a, phi_w, phi_w2, y, v, u, g, b1, b2):
    """Adjoint gradients of the stage-II loss through both ridge solves.

    Loss L = (1/2n) ||G u - y||^2 with u = B2^-1 G^T y and V = Psi^T Phi B1^-1
    treated as functions of the feature matrices.  Differentials:

        dL/dG     = (1/n) [r (u - w)^T - (G w) u^T],  w = B2^-1 G^T r
        dL/dPhi2  = (dL/dG) V
        dL/dV     = (dL/dG)^T Phi2 =: C
        dL/dPsi   = Phi W1^T,  W1 = C B1^-1
        dL/dPhi   = Psi W1 - Phi (M + M^T),  M = V^T W1
    """
    n = y.shape[0]
    r = g @ u - y
    w = spd_solve(b2, g.T @ r, "stage II adjoint")
    l_g = (np.outer(r, u - w) - np.outer(g @ w, u)) / n
    d_phi2 = l_g @ v
    c = l_g.T @ phi_w2
    w1 = spd_solve(b1, c.T, "stage I adjoint").T
    d_psi = phi_w @ w1.T
    m_mat = v.T @ w1
    d_phi = psi_a @ w1 - phi_w @ (m_mat + m_mat.T)
    return d_psi, d_phi, d_phi2


def _check_bank_divergence(tag: str, bank: NeuronBank, step: int) -> None:
    norm = float(np.mean(np.sqrt((bank.particles**2).sum(axis=1))))
    if norm > DIVERGENCE_LIMIT:
        raise DivergenceError(
            f"mean neuron norm of {tag} reached {norm:.3e} at step {step} "
            f"(limit {DIVERGENCE_LIMIT:.0e})"
        )


def _self_check_adjoint(psi_net, phi_net, data, zeta1, zeta2, grad_psi, grad_phi):
    """Directional finite-difference probe of the assembled adjoint gradient."""
    h = 1e-6
    rng = np.random.default_rng(0)
    d_psi = rng.standard_normal(psi_net.particles.shape)
    d_phi = rng.standard_normal(phi_net.particles.shape)
    directional = float((grad_psi * d_psi).sum() + (grad_phi * d_phi).sum())

    def loss_at(eps):
        psi_b = NeuronBank(psi_net.spec, psi_net.particles + eps * d_psi)
        phi_b = NeuronBank(phi_net.spec, phi_net.particles + eps * d_phi)
        _, u, g, _, _ = _dfiv_heads(
            psi_b.features(data.stage1_a), phi_b.features(data.stage1_w),
            phi_b.features(data.stage2_w), data.stage2_y, zeta1, zeta2,
        )
        return _stage2_loss(g, u, data.stage2_y)

    fd = (loss_at(h) - loss_at(-h)) / (2 * h)
    scale = max(abs(fd), abs(directional))
    if scale > 1e-7 and abs(fd - directional) > 1e-3 * scale:
        raise NumericalFailure(
            f"adjoint self-check failed: directional {directional:.6e} vs "
            f"finite difference {fd:.6e}"
        )


def dfiv_train(
    psi_net: Optional[NeuronBank],
    phi_net: Optional[NeuronBank],
    data: NpivDataset,
    zeta1: float,
    zeta2: float,
    steps: int = 200,
    lr: float = 1e-3,
    seed: int = 0,
    width: int = 32,
    clip_bound: float = 10.0,
) -> DfivModel:
    """Alternating head solves and feature-weight gradient steps.

    Pass None for either net to initialize a standard-normal bank of `width`
    neurons from `seed`.  With lr=0 or steps=0 the features never move, so
    the prediction coincides with fixed_2sls on the same frozen features.
    """
    if not (zeta1 > 0 and zeta2 > 0):
        raise ConfigError(f"ridge scales must be > 0, got zeta1={zeta1}, zeta2={zeta2}")
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    if lr < 0:
        raise ConfigError(f"lr must be >= 0, got {lr}")
    if psi_net is None:
        psi_net = neuron_bank(data.d_a, width, seed, clip_bound)
    if phi_net is None:
        phi_net = neuron_bank(data.d_w, width, seed + 1, clip_bound)
    y = data.stage2_y

    def heads():
        psi_a = psi_net.features(data.stage1_a)
        phi_w = phi_net.features(data.stage1_w)
        phi_w2 = phi_net.features(data.stage2_w)
        return (psi_a, phi_w, phi_w2) + _dfiv_heads(psi_a, phi_w, phi_w2, y, zeta1, zeta2)

    psi_a, phi_w, phi_w2, v, u, g, b1, b2 = heads()
    loss_trace = [_stage2_loss(g, u, y)]
    checked = False
    for step in range(steps):
        d_psi_feat, d_phi_feat, d_phi2_feat = _dfiv_gradients(
            psi_a, phi_w, phi_w2, y, v, u, g, b1, b2
        )
        grad_psi = psi_net.backprop(data.stage1_a, d_psi_feat)
        grad_phi = phi_net.backprop(data.stage1_w, d_phi_feat) + phi_net.backprop(
            data.stage2_w, d_phi2_feat
        )
        if not checked:
            _self_check_adjoint(psi_net, phi_net, data, zeta1, zeta2, grad_psi, grad_phi)
            checked = True
        psi_net = NeuronBank(psi_net.spec, psi_net.particles - lr * grad_psi)
        phi_net = NeuronBank(phi_net.spec, phi_net.particles - lr * grad_phi)
        _check_bank_divergence("psi", psi_net, step + 1)
        _check_bank_divergence("phi", phi_net, step + 1)
        psi_a, phi_w, phi_w2, v, u, g, b1, b2 = heads()
        loss_trace.append(_stage2_loss(g, u, y))
    return DfivModel(
        psi_net=psi_net, phi_net=phi_net, v=v, u=u,
        zeta1=zeta1, zeta2=zeta2, loss_trace=loss_trace,
    )


def _feature_map_config(fm: FeatureMap) -> dict:
    return {
        "kind": fm.kind,
        "input_dim": fm.input_dim,
        "output_dim": fm.output_dim,
        "degree": fm.degree,
    }


def save_fixed_2sls(path, sol: RidgeSolution) -> None:
    config = {
        "zeta1": sol.zeta1,
        "zeta2": sol.zeta2,
        "psi": _feature_map_config(sol.psi),
        "phi": _feature_map_config(sol.phi),
    }
    arrays = {"v": sol.v, "u": sol.u}
    for name, fm in (("psi", sol.psi), ("phi", sol.phi)):
        if fm.weights is not None:
            arrays[f"{name}_weights"] = fm.weights
            arrays[f"{name}_biases"] = fm.biases
    save_container(path, CHECKPOINT_KIND_2SLS, config, arrays)


def _feature_map_from(config: dict, arrays: dict, name: str) -> FeatureMap:
    return FeatureMap(
        kind=config["kind"],
        input_dim=config["input_dim"],
        output_dim=config["output_dim"],
        degree=config.get("degree", 0),
        weights=arrays.get(f"{name}_weights"),
        biases=arrays.get(f"{name}_biases"),
    )


def load_fixed_2sls(path) -> RidgeSolution:
    kind, config, arrays = load_container(path)
    if kind != CHECKPOINT_KIND_2SLS:
        raise DataFormatError(f"{path}: checkpoint kind {kind!r}, expected "
                              f"{CHECKPOINT_KIND_2SLS!r}")
    return RidgeSolution(
        v=arrays["v"], u=arrays["u"],
        zeta1=config["zeta1"], zeta2=config["zeta2"],
        psi=_feature_map_from(config["psi"], arrays, "psi"),
        phi=_feature_map_from(config["phi"], arrays, "phi"),
    )


def save_dfiv(path, model: DfivModel) -> None:
    config = {
        "zeta1": model.zeta1,
        "zeta2": model.zeta2,
        "psi": {
            "input_dim": model.psi_net.spec.input_dim,
            "clip_bound": model.psi_net.spec.clip_bound,
            "activation": model.psi_net.spec.activation,
        },
        "phi": {
            "input_dim": model.phi_net.spec.input_dim,
            "clip_bound": model.phi_net.spec.clip_bound,
            "activation": model.phi_net.spec.activation,
        },
    }
    arrays = {
        "psi_particles": model.psi_net.particles,
        "phi_particles": model.phi_net.particles,
        "v": model.v,
        "u": model.u,
        "loss_trace": np.asarray(model.loss_trace),
    }
    save_container(path, CHECKPOINT_KIND_DFIV, config, arrays)


def load_dfiv(path) -> DfivModel:
    kind, config, arrays = load_container(path)
    if kind != CHECKPOINT_KIND_DFIV:
        raise DataFormatError(f"{path}: checkpoint kind {kind!r}, expected "
                              f"{CHECKPOINT_KIND_DFIV!r}")

    def bank(name):
        meta = config[name]
        spec = NeuronSpec(meta["input_dim"], meta["clip_bound"], meta["activation"])
        return NeuronBank(spec, arrays[f"{name}_particles"])

    return DfivModel(
        psi_net=bank("psi"), phi_net=bank("phi"),
        v=arrays["v"], u=arrays["u"],
        zeta1=config["zeta1"], zeta2=config["zeta2"],
        loss_trace=[float(x) for x in arrays["loss_trace"]],
    )
