"""Penalty-based bilevel trainer for two-stage regression with particle networks.

The estimator keeps three particle ensembles: `x` parameterizes the outcome
network h_x(a), and two stage-I ensembles parameterize networks of the
instrument, `z_star` tracking the minimizer of the stage-I objective F1 and
`tilde_z` tracking the minimizer of the penalized objective U2 + lam * F1.
Each outer iteration first refreshes the two stage-I ensembles with
`inner_steps` noisy-gradient passes (the inner loop), then moves `x` one step
along

    zeta2 * x + lam * (grad_x U1(x; tilde_z) - grad_x U1(x; z_star))

with injected noise at scale sigma2.  The difference of the two U1 gradients
is the first-order surrogate for differentiating through the inner problem;
no second-order terms appear anywhere.

All Gaussian draws and batch draws are addressed by (phase, outer iteration,
inner iteration) keys on a counter-based stream, so a trajectory is a pure
function of (config, seed) regardless of scheduling.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .checkpoints import load_container, save_container
from .dynamics import RngStream, mfld_step, validate_step_sizes
from .errors import ConfigError, DataFormatError, DivergenceError, NumericalFailure
from .features import (
    ACTIVATIONS,
    NeuronSpec,
    ParticleEnsemble,
    ensemble_eval,
    ensemble_eval_batch,
)
from .npiv_data import NpivDataset, StructuralSpec, oracle_th
from .objectives import (
    RegParams,
    f1,
    f2,
    grad1_u1_field,
    grad2_f1_field,
    grad_u2_field,
)

# Stream phases.  Every stochastic draw in a run is keyed (phase, outer[, inner]).
PHASE_X_INIT = 0
PHASE_Z_INIT = 1
PHASE_ZT_INIT = 2
PHASE_Z_NOISE = 3
PHASE_ZT_NOISE = 4
PHASE_X_NOISE = 5
PHASE_STAGE1_BATCH = 6
PHASE_STAGE2_BATCH = 7
PHASE_OUTER_BATCH = 8
PHASE_TRACE_ROWS = 9

DIVERGENCE_LIMIT = 1e6

CHECKPOINT_KIND = "bilevel_npiv"

TRACE_COLUMNS = ("iter", "f1", "f2", "gap", "lagrangian", "mean_norm_x", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    """Run shape for the bilevel trainer.

    inner_steps and outer_steps may be zero (the corresponding loop is
    skipped); particle counts and batch size must be positive.  Step sizes
    must satisfy the contraction bounds alpha <= 1/zeta1, beta <= 1/(lam*zeta1),
    gamma <= 1/zeta2 for whichever scales are positive.
    """

    reg: RegParams = field(default_factory=RegParams)
    alpha: float = 1e-4
    beta: float = 1e-4
    gamma: float = 1e-4
    inner_steps: int = 10
    outer_steps: int = 1000
    n_x: int = 50
    n_z: int = 50
    batch_size: int = 32
    warm_start_inner: bool = True
    seed: int = 0
    clip_bound: float = 10.0
    activation: str = "tanh"
    trace_eval_size: Optional[int] = None

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("n_x", "n_z", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("inner_steps", "outer_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if not self.clip_bound > 0:
            raise ConfigError(f"clip_bound must be > 0, got {self.clip_bound}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.trace_eval_size is not None and self.trace_eval_size < 1:
            raise ConfigError(f"trace_eval_size must be >= 1, got {self.trace_eval_size}")
        violations = validate_step_sizes(self.reg, self.alpha, self.beta, self.gamma)
        if violations:
            raise ConfigError("step sizes out of range: " + "; ".join(violations))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        reg = data.pop("reg", {})
        if isinstance(reg, dict):
            reg = RegParams(**reg)
        return cls(reg=reg, **data)


@dataclass(frozen=True)
class TraceRecord:
    iteration: int
    f1: float
    f2: float
    gap: float
    lagrangian: float
    mean_norm_x: float
    wall_ms: float
    value_estimate: Optional[float] = None


@dataclass
class TrainedModel:
    """Terminal ensembles plus the full per-iteration trace."""

    ens_x: ParticleEnsemble
    ens_z: ParticleEnsemble
    tilde_ens_z: ParticleEnsemble
    trace: list
    config: TrainConfig

    def __post_init__(self):
        want = self.config.outer_steps + 1
        if len(self.trace) != want:
            raise ValueError(f"trace has {len(self.trace)} records, expected {want}")


def gaussian_ensemble(rng: RngStream, key, count: int, spec) -> ParticleEnsemble:
    """Standard-normal initialization, one keyed draw for the whole matrix."""
    return ParticleEnsemble(rng.normal(key, (count, spec.param_dim)), spec)


def sample_rows(rng: RngStream, key, total: int, size: int) -> np.ndarray:
    """Uniform draw of `size` distinct row indices; full range when size >= total."""
    if total < 1:
        raise ValueError("cannot sample from an empty table")
    if size >= total:
        return np.arange(total)
    return rng.generator(key).choice(total, size=size, replace=False)


def mean_particle_norm(ens: ParticleEnsemble) -> float:
    return float(np.mean(np.sqrt((ens.particles**2).sum(axis=1))))


def _check_divergence(tag: str, ens: ParticleEnsemble, outer_iter: int) -> None:
    norm = mean_particle_norm(ens)
    if norm > DIVERGENCE_LIMIT:
        raise DivergenceError(
            f"mean particle norm of {tag} reached {norm:.3e} at outer iteration "
            f"{outer_iter} (limit {DIVERGENCE_LIMIT:.0e}); step sizes are likely too large"
        )


def inner_loop(
    ens_x: ParticleEnsemble,
    data: NpivDataset,
    cfg: TrainConfig,
    rng: Optional[RngStream] = None,
    *,
    init_z: Optional[ParticleEnsemble] = None,
    init_tilde_z: Optional[ParticleEnsemble] = None,
    outer_iter: int = 0,
) -> tuple:
    """Refresh the two stage-I ensembles against a frozen outcome ensemble.

    Run one: `inner_steps` noisy-gradient steps on the stage-I objective F1
    at step alpha, noise scale sigma1.  Run two: same count on U2 + lam * F1
    at step beta, noise scale lam * sigma1.  Either run starts from the given
    ensemble (warm start) or from a fresh standard normal keyed by this
    outer iteration.
    """
    if rng is None:
        rng = RngStream(cfg.seed)
    reg = cfg.reg
    spec_z = None
    for ens in (init_z, init_tilde_z):
        if ens is not None:
            spec_z = ens.spec
            break
    if spec_z is None:
        spec_z = NeuronSpec(data.d_w, cfg.clip_bound, cfg.activation)
    z = init_z if init_z is not None else gaussian_ensemble(
        rng, (PHASE_Z_INIT, outer_iter), cfg.n_z, spec_z
    )
    tilde = init_tilde_z if init_tilde_z is not None else gaussian_ensemble(
        rng, (PHASE_ZT_INIT, outer_iter), cfg.n_z, spec_z
    )

    for t in range(cfg.inner_steps):
        rows1 = sample_rows(rng, (PHASE_STAGE1_BATCH, outer_iter, t), data.m, cfg.batch_size)
        rows2 = sample_rows(rng, (PHASE_STAGE2_BATCH, outer_iter, t), data.n, cfg.batch_size)
        a_b, w_b = data.stage1_a[rows1], data.stage1_w[rows1]
        w2_b, y_b = data.stage2_w[rows2], data.stage2_y[rows2]

        def field_z(p, _cur=z):
            return grad2_f1_field(ens_x, _cur.replace(p), a_b, w_b, reg)

        def field_tilde(p, _cur=tilde):
            cur = _cur.replace(p)
            g = grad_u2_field(cur, w2_b, y_b)
            if reg.lam:
                g = g + reg.lam * grad2_f1_field(ens_x, cur, a_b, w_b, reg)
            return g

        z = mfld_step(
            z, field_z, cfg.alpha, reg.sigma1,
            rng=rng, key=(PHASE_Z_NOISE, outer_iter, t),
        )
        tilde = mfld_step(
            tilde, field_tilde, cfg.beta, reg.lam * reg.sigma1,
            rng=rng, key=(PHASE_ZT_NOISE, outer_iter, t),
        )
    return z, tilde


def outer_step(
    ens_x: ParticleEnsemble,
    tilde_z: ParticleEnsemble,
    z_star: ParticleEnsemble,
    batch,
    cfg: TrainConfig,
    rng: RngStream,
    *,
    outer_iter: int = 0,
) -> ParticleEnsemble:
    """One noisy step of the outcome ensemble along the penalty-difference field.

    `batch` is a (stage-I treatments, stage-I instruments) pair; the same rows
    feed both U1 gradients so the two terms cancel bit-exactly whenever
    tilde_z and z_star hold identical particles.
    """
    a_b, w_b = batch
    reg = cfg.reg

    def field(p):
        drift = reg.zeta2 * p
        if reg.lam:
            cur = ens_x.replace(p)
            g_tilde = grad1_u1_field(cur, tilde_z, a_b, w_b)
            g_star = grad1_u1_field(cur, z_star, a_b, w_b)
            drift = drift + reg.lam * (g_tilde - g_star)
        return drift

    return mfld_step(
        ens_x, field, cfg.gamma, reg.sigma2,
        rng=rng, key=(PHASE_X_NOISE, outer_iter),
    )


def _trace_record(
    iteration: int,
    ens_x: ParticleEnsemble,
    tilde_z: ParticleEnsemble,
    z_star: ParticleEnsemble,
    eval_stage1,
    eval_stage2,
    reg: RegParams,
    wall_ms: float,
) -> TraceRecord:
    a1, w1 = eval_stage1
    w2, y2 = eval_stage2
    # same compositions as objectives.lagrangian_monitor, with f1/f2 kept
    f1_star = f1(ens_x, z_star, a1, w1, reg)
    f1_tilde = f1(ens_x, tilde_z, a1, w1, reg)
    f2_tilde = f2(ens_x, tilde_z, w2, y2, reg)
    gap = f1_tilde - f1_star
    record = TraceRecord(
        iteration=iteration,
        f1=f1_star,
        f2=f2_tilde,
        gap=gap,
        lagrangian=f2_tilde + reg.lam * gap,
        mean_norm_x=mean_particle_norm(ens_x),
        wall_ms=wall_ms,
    )
    for name in ("f1", "f2", "gap", "lagrangian", "mean_norm_x"):
        if not math.isfinite(getattr(record, name)):
            raise NumericalFailure(
                f"trace metric {name} is non-finite at outer iteration {iteration}"
            )
    return record


def _trace_eval_rows(rng: RngStream, cfg: TrainConfig, data: NpivDataset):
    size = cfg.trace_eval_size
    if size is None:
        return np.arange(data.m), np.arange(data.n)
    rows1 = sample_rows(rng, (PHASE_TRACE_ROWS, 0), data.m, size)
    rows2 = sample_rows(rng, (PHASE_TRACE_ROWS, 1), data.n, size)
    return rows1, rows2


def train(cfg: TrainConfig, data: NpivDataset) -> TrainedModel:
    """Run the full bilevel loop and return terminal ensembles plus trace.

    The trace has outer_steps + 1 records: index 0 captures the freshly
    initialized state, record s the state after outer iteration s.  With
    outer_steps = 0 the returned model is exactly the initialization.
    """
    rng = RngStream(cfg.seed)
    spec_x = NeuronSpec(data.d_a, cfg.clip_bound, cfg.activation)
    spec_z = NeuronSpec(data.d_w, cfg.clip_bound, cfg.activation)
    ens_x = gaussian_ensemble(rng, (PHASE_X_INIT, 0), cfg.n_x, spec_x)
    z_star = gaussian_ensemble(rng, (PHASE_Z_INIT, 0), cfg.n_z, spec_z)
    tilde_z = gaussian_ensemble(rng, (PHASE_ZT_INIT, 0), cfg.n_z, spec_z)

    rows1, rows2 = _trace_eval_rows(rng, cfg, data)
    eval_stage1 = (data.stage1_a[rows1], data.stage1_w[rows1])
    eval_stage2 = (data.stage2_w[rows2], data.stage2_y[rows2])

    started = time.perf_counter()

    def elapsed_ms() -> float:
        return (time.perf_counter() - started) * 1e3

    trace = [
        _trace_record(0, ens_x, tilde_z, z_star, eval_stage1, eval_stage2, cfg.reg, elapsed_ms())
    ]
    for s in range(1, cfg.outer_steps + 1):
        try:
            z_star, tilde_z = inner_loop(
                ens_x, data, cfg, rng,
                init_z=z_star if cfg.warm_start_inner else None,
                init_tilde_z=tilde_z if cfg.warm_start_inner else None,
                outer_iter=s,
            )
            rows = sample_rows(rng, (PHASE_OUTER_BATCH, s), data.m, cfg.batch_size)
            ens_x = outer_step(
                ens_x, tilde_z, z_star,
                (data.stage1_a[rows], data.stage1_w[rows]),
                cfg, rng, outer_iter=s,
            )
        except NumericalFailure as exc:
            raise NumericalFailure(f"outer iteration {s}: {exc}") from exc
        _check_divergence("x", ens_x, s)
        _check_divergence("z", z_star, s)
        _check_divergence("tilde_z", tilde_z, s)
        trace.append(
            _trace_record(
                s, ens_x, tilde_z, z_star, eval_stage1, eval_stage2, cfg.reg, elapsed_ms()
            )
        )
    return TrainedModel(ens_x, z_star, tilde_z, trace, cfg)


def predict(model: TrainedModel, a) -> float:
    """Outcome-network prediction at a single treatment point."""
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    return ensemble_eval(model.ens_x, a)


def predict_batch(model: TrainedModel, a_rows: np.ndarray) -> np.ndarray:
    return ensemble_eval_batch(model.ens_x, a_rows)


def _as_structural_callable(model) -> Callable:
    if callable(model):
        return model
    ens = model.ens_x
    if ens.spec.input_dim != 1:
        raise ValueError(
            f"projected risk is defined for scalar treatments, model takes {ens.spec.input_dim}"
        )
    return lambda a: ensemble_eval_batch(ens, np.asarray(a, dtype=np.float64).reshape(-1, 1))


def projected_risk(model, spec: StructuralSpec, w_grid, n_quad: int = 201) -> float:
    """Mean squared error between smoothed estimate and smoothed truth.

    Both the model prediction and the true structural function are pushed
    through the conditional-expectation quadrature at each grid instrument
    value; the risk is the grid average of the squared difference.  `model`
    may be a TrainedModel or any vectorized callable over treatment values.
    """
    h_hat = _as_structural_callable(model)
    h_true = spec.h
    w_grid = np.atleast_1d(np.asarray(w_grid, dtype=np.float64))
    diffs = [
        oracle_th(spec, h_hat, w, n_quad) - oracle_th(spec, h_true, w, n_quad)
        for w in w_grid
    ]
    return float(np.mean(np.square(diffs)))


def save_trace(path, records) -> None:
    """Trace CSV with one row per outer iteration; floats via repr for round-trip."""
    with_value = any(r.value_estimate is not None for r in records)
    columns = TRACE_COLUMNS + ("value_estimate",) if with_value else TRACE_COLUMNS
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for r in records:
            row = [
                r.iteration, repr(r.f1), repr(r.f2), repr(r.gap),
                repr(r.lagrangian), repr(r.mean_norm_x), repr(r.wall_ms),
            ]
            if with_value:
                row.append("" if r.value_estimate is None else repr(r.value_estimate))
            writer.writerow(row)


def load_trace(path) -> list:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[: len(TRACE_COLUMNS)]) != TRACE_COLUMNS:
            raise DataFormatError(f"{path}: unexpected trace header {header}")
        with_value = len(header) > len(TRACE_COLUMNS)
        for row in reader:
            if len(row) != len(header):
                raise DataFormatError(f"{path}: truncated trace row {row}")
            value = None
            if with_value and row[len(TRACE_COLUMNS)]:
                value = float(row[len(TRACE_COLUMNS)])
            records.append(
                TraceRecord(
                    iteration=int(row[0]),
                    f1=float(row[1]),
                    f2=float(row[2]),
                    gap=float(row[3]),
                    lagrangian=float(row[4]),
                    mean_norm_x=float(row[5]),
                    wall_ms=float(row[6]),
                    value_estimate=value,
                )
            )
    return records


def _trace_arrays(records) -> dict:
    out = {
        "trace_iter": np.array([r.iteration for r in records], dtype=np.int64),
        "trace_f1": np.array([r.f1 for r in records]),
        "trace_f2": np.array([r.f2 for r in records]),
        "trace_gap": np.array([r.gap for r in records]),
        "trace_lagrangian": np.array([r.lagrangian for r in records]),
        "trace_mean_norm_x": np.array([r.mean_norm_x for r in records]),
        "trace_wall_ms": np.array([r.wall_ms for r in records]),
    }
    if any(r.value_estimate is not None for r in records):
        out["trace_value_estimate"] = np.array(
            [np.nan if r.value_estimate is None else r.value_estimate for r in records]
        )
    return out


def _records_from_arrays(arrays) -> list:
    count = arrays["trace_iter"].shape[0]
    values = arrays.get("trace_value_estimate")
    records = []
    for i in range(count):
        value = None
        if values is not None and not np.isnan(values[i]):
            value = float(values[i])
        records.append(
            TraceRecord(
                iteration=int(arrays["trace_iter"][i]),
                f1=float(arrays["trace_f1"][i]),
                f2=float(arrays["trace_f2"][i]),
                gap=float(arrays["trace_gap"][i]),
                lagrangian=float(arrays["trace_lagrangian"][i]),
                mean_norm_x=float(arrays["trace_mean_norm_x"][i]),
                wall_ms=float(arrays["trace_wall_ms"][i]),
                value_estimate=value,
            )
        )
    return records


def save_model(path, model: TrainedModel, kind: str = CHECKPOINT_KIND) -> None:
    arrays = {
        "x": model.ens_x.particles,
        "z": model.ens_z.particles,
        "tilde_z": model.tilde_ens_z.particles,
    }
    arrays.update(_trace_arrays(model.trace))
    save_container(path, kind, model.config.to_dict(), arrays)


def load_model(path, expected_kind: str = CHECKPOINT_KIND) -> TrainedModel:
    kind, config, arrays = load_container(path)
    if kind != expected_kind:
        raise DataFormatError(f"{path}: checkpoint kind {kind!r}, expected {expected_kind!r}")
    cfg = TrainConfig.from_dict(config)
    spec_x = NeuronSpec(arrays["x"].shape[1] - 2, cfg.clip_bound, cfg.activation)
    spec_z = NeuronSpec(arrays["z"].shape[1] - 2, cfg.clip_bound, cfg.activation)
    return TrainedModel(
        ens_x=ParticleEnsemble(arrays["x"], spec_x),
        ens_z=ParticleEnsemble(arrays["z"], spec_z),
        tilde_ens_z=ParticleEnsemble(arrays["tilde_z"], spec_z),
        trace=_records_from_arrays(arrays),
        config=cfg,
    )
