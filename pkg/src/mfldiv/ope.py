"""Offline policy evaluation on tabular MDPs through the two-stage machinery.

For a fixed target policy the Bellman equation

    E[r | s, b] = Q(s, b) - discount * E[Q(s', b') | s, b],  b' ~ pi(.|s')

has the shape of the instrumented two-stage problem: the current pair (s, b)
plays the instrument, the successor pair (s', b') the treatment input, and
the reward the outcome.  Tuples collected under a behavior policy are recast
through one-hot state-action encodings and split into the two stages.  The
particle trainer then runs with two changes relative to the plain regression
setting: the stage-II residual becomes Q_x(s,b) - discount * g_z(s,b) - r,
and the outcome ensemble feels the direct gradient of that residual on top
of the penalty difference.  Small MDPs keep an exact linear-solve oracle
available for checking the estimates.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .baselines import NeuronBank, neuron_bank, spd_solve, _stage2_loss
from .bilevel import (
    PHASE_OUTER_BATCH,
    PHASE_STAGE1_BATCH,
    PHASE_STAGE2_BATCH,
    PHASE_X_INIT,
    PHASE_X_NOISE,
    PHASE_Z_INIT,
    PHASE_Z_NOISE,
    PHASE_ZT_INIT,
    PHASE_ZT_NOISE,
    TraceRecord,
    TrainConfig,
    TrainedModel,
    _check_divergence,
    _trace_eval_rows,
    gaussian_ensemble,
    load_model,
    mean_particle_norm,
    sample_rows,
    save_model,
)
from .checkpoints import load_container, save_container
from .dynamics import RngStream, mfld_step
from .errors import ConfigError, DataFormatError, DivergenceError, NumericalFailure
from .features import NeuronSpec, ParticleEnsemble, ensemble_eval_batch
from .npiv_data import NpivDataset
from .objectives import RegParams, f1, grad1_u1_field, grad2_f1_field, mean_sq_norm

# extends the phase table in bilevel: the outer step here needs a second
# batch, drawn from the stage-II rows, for the direct residual term
PHASE_OUTER_STAGE2_BATCH = 10

CHECKPOINT_KIND_Q = "bilevel_bellman"
CHECKPOINT_KIND_DFIV_Q = "dfiv_bellman"
CHECKPOINT_KIND_Q_TABLE = "q_table"

MDP_SCHEMA_VERSION = 1
DATASET_SCHEMA_VERSION = 1


def _check_discount(discount: float) -> None:
    if not (0.0 <= discount < 1.0):
        raise ConfigError(f"discount must lie in [0, 1), got {discount}")


@dataclass(eq=False)
class TabularMdp:
    """Finite MDP: transition[s, b, s'], rewards[s, b, s'], start distribution.

    `slip` is carried as metadata by the chain factory (probability that the
    executed action flips); it is already baked into `transition`.
    """

    transition: np.ndarray
    rewards: np.ndarray
    discount: float
    init_dist: np.ndarray
    slip: float = 0.0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.init_dist = np.asarray(self.init_dist, dtype=np.float64)
        if self.transition.ndim != 3 or self.transition.shape[0] != self.transition.shape[2]:
            raise ConfigError(
                f"transition must be (states, actions, states), got {self.transition.shape}"
            )
        if self.rewards.shape != self.transition.shape:
            raise ConfigError(
                f"rewards shape {self.rewards.shape} does not match transition "
                f"{self.transition.shape}"
            )
        if np.any(self.transition < 0):
            raise ConfigError("negative transition probability")
        row_sums = self.transition.sum(axis=2)
        if np.max(np.abs(row_sums - 1.0)) > 1e-12:
            raise ConfigError("transition rows must sum to 1 within 1e-12")
        if self.init_dist.shape != (self.n_states,):
            raise ConfigError(
                f"init_dist must have shape ({self.n_states},), got {self.init_dist.shape}"
            )
        if np.any(self.init_dist < 0) or abs(float(self.init_dist.sum()) - 1.0) > 1e-12:
            raise ConfigError("init_dist must be a probability vector")
        _check_discount(self.discount)
        if not (0.0 <= self.slip <= 1.0):
            raise ConfigError(f"slip must lie in [0, 1], got {self.slip}")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def mean_rewards(self) -> np.ndarray:
        """Expected immediate reward per (state, action)."""
        return np.einsum("sbt,sbt->sb", self.transition, self.rewards)


def chain_mdp(n_states: int = 5, slip: float = 0.0, discount: float = 0.9) -> TabularMdp:
    """Saturating random walk: action 0 steps left, action 1 steps right.

    The executed action flips with probability `slip`.  Reward depends only
    on the landing state, (1 + s') / n_states, so staying right pays more.
    """
    if n_states < 1:
        raise ConfigError(f"n_states must be >= 1, got {n_states}")
    if not (0.0 <= slip <= 1.0):
        raise ConfigError(f"slip must lie in [0, 1], got {slip}")
    transition = np.zeros((n_states, 2, n_states))
    for s in range(n_states):
        for b in range(2):
            intended = min(s + 1, n_states - 1) if b == 1 else max(s - 1, 0)
            flipped = min(s + 1, n_states - 1) if b == 0 else max(s - 1, 0)
            transition[s, b, intended] += 1.0 - slip
            transition[s, b, flipped] += slip
    landing = (1.0 + np.arange(n_states)) / n_states
    rewards = np.broadcast_to(landing, (n_states, 2, n_states)).copy()
    init = np.full(n_states, 1.0 / n_states)
    return TabularMdp(transition, rewards, discount, init, slip=slip)


def _check_policy(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    policy = np.asarray(policy, dtype=np.float64)
    if policy.shape != (mdp.n_states, mdp.n_actions):
        raise ConfigError(
            f"policy must have shape ({mdp.n_states}, {mdp.n_actions}), got {policy.shape}"
        )
    if np.any(policy < 0) or np.max(np.abs(policy.sum(axis=1) - 1.0)) > 1e-12:
        raise ConfigError("policy rows must be probability vectors")
    return policy


def uniform_policy(mdp: TabularMdp) -> np.ndarray:
    return np.full((mdp.n_states, mdp.n_actions), 1.0 / mdp.n_actions)


def single_action_policy(mdp: TabularMdp, action: int) -> np.ndarray:
    if not 0 <= action < mdp.n_actions:
        raise ConfigError(f"action {action} out of range for {mdp.n_actions} actions")
    policy = np.zeros((mdp.n_states, mdp.n_actions))
    policy[:, action] = 1.0
    return policy


def right_biased_policy(mdp: TabularMdp, p_right: float = 0.9) -> np.ndarray:
    """Two-action policy taking action 1 with probability p_right in every state."""
    if mdp.n_actions != 2:
        raise ConfigError(f"right_biased_policy needs 2 actions, mdp has {mdp.n_actions}")
    if not (0.0 <= p_right <= 1.0):
        raise ConfigError(f"p_right must lie in [0, 1], got {p_right}")
    return np.tile([1.0 - p_right, p_right], (mdp.n_states, 1))


@dataclass(eq=False)
class OpeDataset:
    """Behavior-policy tuples (s, b, r, s') with successor actions b' ~ pi(.|s')."""

    s: np.ndarray
    b: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    b_next: np.ndarray
    target_policy: np.ndarray
    n_states: int
    n_actions: int
    seed: int

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.int64)
        self.b = np.asarray(self.b, dtype=np.int64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.s_next = np.asarray(self.s_next, dtype=np.int64)
        self.b_next = np.asarray(self.b_next, dtype=np.int64)
        self.target_policy = np.asarray(self.target_policy, dtype=np.float64)
        lengths = {arr.shape for arr in (self.s, self.b, self.r, self.s_next, self.b_next)}
        if len(lengths) != 1 or self.s.ndim != 1:
            raise ValueError(f"tuple arrays disagree on shape: {sorted(lengths)}")
        if self.n == 0:
            raise ValueError("empty dataset")
        for name, arr, limit in (
            ("s", self.s, self.n_states),
            ("b", self.b, self.n_actions),
            ("s_next", self.s_next, self.n_states),
            ("b_next", self.b_next, self.n_actions),
        ):
            if arr.min() < 0 or arr.max() >= limit:
                raise ValueError(f"{name} contains indices outside [0, {limit})")
        if not np.all(np.isfinite(self.r)):
            raise ValueError("non-finite reward")
        if self.target_policy.shape != (self.n_states, self.n_actions):
            raise ValueError(
                f"target_policy shape {self.target_policy.shape} does not match "
                f"({self.n_states}, {self.n_actions})"
            )

    @property
    def n(self) -> int:
        return self.s.shape[0]


def _inverse_cdf(cum_row: np.ndarray, u: float) -> int:
    idx = int(np.searchsorted(cum_row, u, side="right"))
    return min(idx, cum_row.shape[0] - 1)


def build_ope_dataset(
    mdp: TabularMdp,
    behavior_policy: np.ndarray,
    target_policy: np.ndarray,
    n_tuples: int,
    seed: int,
) -> OpeDataset:
    """Roll out one trajectory under the behavior policy and attach b'.

    Successor actions are sampled from the target policy once per tuple, the
    usual single-sample stand-in for the conditional expectation; that
    sampling is a variance source on top of the transitions themselves.
    """
    behavior = _check_policy(mdp, behavior_policy)
    target = _check_policy(mdp, target_policy)
    if n_tuples < 1:
        raise ConfigError(f"n_tuples must be >= 1, got {n_tuples}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    cum_beh = np.cumsum(behavior, axis=1)
    cum_p = np.cumsum(mdp.transition, axis=2)
    cum_target = np.cumsum(target, axis=1)

    s_arr = np.empty(n_tuples, dtype=np.int64)
    b_arr = np.empty(n_tuples, dtype=np.int64)
    r_arr = np.empty(n_tuples)
    s2_arr = np.empty(n_tuples, dtype=np.int64)
    state = _inverse_cdf(np.cumsum(mdp.init_dist), rng.random())
    for i in range(n_tuples):
        action = _inverse_cdf(cum_beh[state], rng.random())
        nxt = _inverse_cdf(cum_p[state, action], rng.random())
        s_arr[i], b_arr[i], s2_arr[i] = state, action, nxt
        r_arr[i] = mdp.rewards[state, action, nxt]
        state = nxt
    draws = rng.random(n_tuples)
    b2_arr = np.minimum(
        (draws[:, None] >= cum_target[s2_arr]).sum(axis=1), mdp.n_actions - 1
    ).astype(np.int64)
    return OpeDataset(
        s=s_arr, b=b_arr, r=r_arr, s_next=s2_arr, b_next=b2_arr,
        target_policy=target, n_states=mdp.n_states, n_actions=mdp.n_actions,
        seed=int(seed),
    )


def one_hot_pairs(states, actions, n_states: int, n_actions: int) -> np.ndarray:
    """Concatenated one-hot rows [state block | action block], (n, S + B)."""
    states = np.asarray(states, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    out = np.zeros((states.shape[0], n_states + n_actions))
    out[np.arange(states.shape[0]), states] = 1.0
    out[np.arange(actions.shape[0]), n_states + actions] = 1.0
    return out


def state_action_grid(n_states: int, n_actions: int) -> np.ndarray:
    """One-hot rows for every (s, b), state-major order."""
    s = np.repeat(np.arange(n_states), n_actions)
    b = np.tile(np.arange(n_actions), n_states)
    return one_hot_pairs(s, b, n_states, n_actions)


def ope_to_npiv(dataset: OpeDataset) -> NpivDataset:
    """Recast tuples as a two-stage regression problem.

    Even-indexed tuples form stage I (treatment input = encoded successor
    pair, instrument = encoded current pair), odd-indexed tuples form stage
    II (instrument encoding, outcome = reward).  Interleaving keeps both
    halves sampling the same stretch of the trajectory.
    """
    if dataset.n < 2:
        raise ValueError("need at least 2 tuples to split into two stages")
    enc_next = one_hot_pairs(dataset.s_next, dataset.b_next, dataset.n_states, dataset.n_actions)
    enc_cur = one_hot_pairs(dataset.s, dataset.b, dataset.n_states, dataset.n_actions)
    return NpivDataset(
        stage1_a=enc_next[0::2],
        stage1_w=enc_cur[0::2],
        stage2_w=enc_cur[1::2],
        stage2_y=dataset.r[1::2],
    )


# ---------------------------------------------------------------------------
# Adapted stage-II objective: residual Q_x(s,b) - discount * g_z(s,b) - r.


def bellman_residual(ens_x, ens_z, w_batch, r_batch, discount: float) -> np.ndarray:
    r_batch = np.asarray(r_batch, dtype=np.float64)
    if np.asarray(w_batch).shape[0] != r_batch.shape[0]:
        raise ValueError("batch arrays disagree on length")
    q = ensemble_eval_batch(ens_x, w_batch)
    g = ensemble_eval_batch(ens_z, w_batch)
    return q - discount * g - r_batch


def u2_bellman(ens_x, ens_z, w_batch, r_batch, discount: float) -> float:
    resid = bellman_residual(ens_x, ens_z, w_batch, r_batch, discount)
    return 0.5 * float(np.mean(resid * resid))


def f2_bellman(ens_x, ens_z, w_batch, r_batch, discount: float, reg: RegParams) -> float:
    return u2_bellman(ens_x, ens_z, w_batch, r_batch, discount) + 0.5 * reg.zeta2 * mean_sq_norm(ens_x)


def grad_z_u2_bellman_field(ens_x, ens_z, w_batch, r_batch, discount: float, at=None) -> np.ndarray:
    """Gradient of the adapted stage-II risk in the z-slot (default: ens_z particles)."""
    particles = ens_z.particles if at is None else np.atleast_2d(at)
    resid = bellman_residual(ens_x, ens_z, w_batch, r_batch, discount)
    weights = (-discount) * resid / resid.shape[0]
    return ens_z.spec.grad_weighted(particles, np.atleast_2d(w_batch), weights)


def grad_x_u2_bellman_field(ens_x, ens_z, w_batch, r_batch, discount: float, at=None) -> np.ndarray:
    """Gradient of the adapted stage-II risk in the x-slot (default: ens_x particles)."""
    particles = ens_x.particles if at is None else np.atleast_2d(at)
    resid = bellman_residual(ens_x, ens_z, w_batch, r_batch, discount)
    weights = resid / resid.shape[0]
    return ens_x.spec.grad_weighted(particles, np.atleast_2d(w_batch), weights)


def inner_loop_q(
    ens_x: ParticleEnsemble,
    data: NpivDataset,
    cfg: TrainConfig,
    discount: float,
    rng: Optional[RngStream] = None,
    *,
    init_z: Optional[ParticleEnsemble] = None,
    init_tilde_z: Optional[ParticleEnsemble] = None,
    outer_iter: int = 0,
) -> tuple:
    """Stage-I refresh with the Bellman residual in the penalized run.

    Identical keying to the plain two-stage inner loop; only the data term of
    the tilde dynamics changes, since the outcome ensemble now enters the
    stage-II risk directly.
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
            g = grad_z_u2_bellman_field(ens_x, cur, w2_b, y_b, discount)
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


def outer_step_q(
    ens_x: ParticleEnsemble,
    tilde_z: ParticleEnsemble,
    z_star: ParticleEnsemble,
    stage1_batch,
    stage2_batch,
    cfg: TrainConfig,
    discount: float,
    rng: RngStream,
    *,
    outer_iter: int = 0,
) -> ParticleEnsemble:
    """Outcome-ensemble step: direct residual gradient plus penalty difference."""
    a_b, w_b = stage1_batch
    w2_b, r_b = stage2_batch
    reg = cfg.reg

    def field(p):
        cur = ens_x.replace(p)
        drift = reg.zeta2 * p + grad_x_u2_bellman_field(cur, tilde_z, w2_b, r_b, discount)
        if reg.lam:
            g_tilde = grad1_u1_field(cur, tilde_z, a_b, w_b)
            g_star = grad1_u1_field(cur, z_star, a_b, w_b)
            drift = drift + reg.lam * (g_tilde - g_star)
        return drift

    return mfld_step(
        ens_x, field, cfg.gamma, reg.sigma2,
        rng=rng, key=(PHASE_X_NOISE, outer_iter),
    )


def _ensemble_policy_value(ens_x, mdp: TabularMdp, policy: np.ndarray) -> float:
    grid = state_action_grid(mdp.n_states, mdp.n_actions)
    q = ensemble_eval_batch(ens_x, grid).reshape(mdp.n_states, mdp.n_actions)
    return float(np.sum(mdp.init_dist[:, None] * policy * q))


def _trace_record_q(
    iteration, ens_x, tilde_z, z_star, eval_stage1, eval_stage2, reg, discount,
    wall_ms, value,
) -> TraceRecord:
    a1, w1 = eval_stage1
    w2, r2 = eval_stage2
    f1_star = f1(ens_x, z_star, a1, w1, reg)
    f1_tilde = f1(ens_x, tilde_z, a1, w1, reg)
    f2_tilde = f2_bellman(ens_x, tilde_z, w2, r2, discount, reg)
    gap = f1_tilde - f1_star
    record = TraceRecord(
        iteration=iteration,
        f1=f1_star,
        f2=f2_tilde,
        gap=gap,
        lagrangian=f2_tilde + reg.lam * gap,
        mean_norm_x=mean_particle_norm(ens_x),
        wall_ms=wall_ms,
        value_estimate=value,
    )
    for name in ("f1", "f2", "gap", "lagrangian", "mean_norm_x"):
        if not math.isfinite(getattr(record, name)):
            raise NumericalFailure(
                f"trace metric {name} is non-finite at outer iteration {iteration}"
            )
    if value is not None and not math.isfinite(value):
        raise NumericalFailure(
            f"value estimate is non-finite at outer iteration {iteration}"
        )
    return record


def train_q(
    cfg: TrainConfig,
    dataset: OpeDataset,
    discount: float,
    *,
    mdp: Optional[TabularMdp] = None,
    init_x: Optional[ParticleEnsemble] = None,
    init_z: Optional[ParticleEnsemble] = None,
    init_tilde_z: Optional[ParticleEnsemble] = None,
) -> TrainedModel:
    """Particle training of the Q-network against the Bellman moment.

    Mirrors the two-stage trainer loop record for record; passing `mdp`
    additionally evaluates the target-policy value of the current outcome
    ensemble into every trace record.  Explicit init ensembles override the
    keyed Gaussian draws without disturbing any other draw (the stream is
    counter-based, so skipped keys cost nothing).
    """
    _check_discount(discount)
    data = ope_to_npiv(dataset)
    enc_dim = dataset.n_states + dataset.n_actions
    if mdp is not None and (mdp.n_states, mdp.n_actions) != (dataset.n_states, dataset.n_actions):
        raise ConfigError(
            f"mdp has {mdp.n_states} states x {mdp.n_actions} actions, dataset has "
            f"{dataset.n_states} x {dataset.n_actions}"
        )
    for name, ens in (("init_x", init_x), ("init_z", init_z), ("init_tilde_z", init_tilde_z)):
        if ens is not None and ens.spec.input_dim != enc_dim:
            raise ConfigError(
                f"{name} takes {ens.spec.input_dim}-dim inputs, encoding is {enc_dim}-dim"
            )
    rng = RngStream(cfg.seed)
    spec = NeuronSpec(enc_dim, cfg.clip_bound, cfg.activation)
    ens_x = init_x if init_x is not None else gaussian_ensemble(
        rng, (PHASE_X_INIT, 0), cfg.n_x, spec
    )
    z_star = init_z if init_z is not None else gaussian_ensemble(
        rng, (PHASE_Z_INIT, 0), cfg.n_z, spec
    )
    tilde_z = init_tilde_z if init_tilde_z is not None else gaussian_ensemble(
        rng, (PHASE_ZT_INIT, 0), cfg.n_z, spec
    )

    rows1, rows2 = _trace_eval_rows(rng, cfg, data)
    eval_stage1 = (data.stage1_a[rows1], data.stage1_w[rows1])
    eval_stage2 = (data.stage2_w[rows2], data.stage2_y[rows2])

    def value_of(ens) -> Optional[float]:
        if mdp is None:
            return None
        return _ensemble_policy_value(ens, mdp, dataset.target_policy)

    started = time.perf_counter()

    def elapsed_ms() -> float:
        return (time.perf_counter() - started) * 1e3

    trace = [
        _trace_record_q(
            0, ens_x, tilde_z, z_star, eval_stage1, eval_stage2, cfg.reg, discount,
            elapsed_ms(), value_of(ens_x),
        )
    ]
    for s in range(1, cfg.outer_steps + 1):
        try:
            z_star, tilde_z = inner_loop_q(
                ens_x, data, cfg, discount, rng,
                init_z=z_star if cfg.warm_start_inner else None,
                init_tilde_z=tilde_z if cfg.warm_start_inner else None,
                outer_iter=s,
            )
            rows_a = sample_rows(rng, (PHASE_OUTER_BATCH, s), data.m, cfg.batch_size)
            rows_b = sample_rows(rng, (PHASE_OUTER_STAGE2_BATCH, s), data.n, cfg.batch_size)
            ens_x = outer_step_q(
                ens_x, tilde_z, z_star,
                (data.stage1_a[rows_a], data.stage1_w[rows_a]),
                (data.stage2_w[rows_b], data.stage2_y[rows_b]),
                cfg, discount, rng, outer_iter=s,
            )
        except NumericalFailure as exc:
            raise NumericalFailure(f"outer iteration {s}: {exc}") from exc
        _check_divergence("x", ens_x, s)
        _check_divergence("z", z_star, s)
        _check_divergence("tilde_z", tilde_z, s)
        trace.append(
            _trace_record_q(
                s, ens_x, tilde_z, z_star, eval_stage1, eval_stage2, cfg.reg, discount,
                elapsed_ms(), value_of(ens_x),
            )
        )
    return TrainedModel(ens_x, z_star, tilde_z, trace, cfg)


def save_q_model(path, model: TrainedModel) -> None:
    save_model(path, model, kind=CHECKPOINT_KIND_Q)


def load_q_model(path) -> TrainedModel:
    return load_model(path, expected_kind=CHECKPOINT_KIND_Q)


# ---------------------------------------------------------------------------
# Exact oracle and policy value.


def exact_q(mdp: TabularMdp, policy: np.ndarray) -> np.ndarray:
    """Direct linear solve of the policy's Bellman system; returns (S, B) table."""
    policy = _check_policy(mdp, policy)
    n_sa = mdp.n_states * mdp.n_actions
    rbar = mdp.mean_rewards().reshape(-1)
    step = np.einsum(
        "sbt,tc->sbtc", mdp.transition, policy
    ).reshape(n_sa, n_sa)
    q = np.linalg.solve(np.eye(n_sa) - mdp.discount * step, rbar)
    resid = q - (rbar + mdp.discount * (step @ q))
    worst = float(np.max(np.abs(resid)))
    if worst > 1e-10:
        raise NumericalFailure(f"Bellman residual {worst:.3e} exceeds 1e-10 after solve")
    return q.reshape(mdp.n_states, mdp.n_actions)


def _as_q_table(source, mdp: TabularMdp) -> np.ndarray:
    shape = (mdp.n_states, mdp.n_actions)
    if isinstance(source, np.ndarray):
        if source.shape != shape:
            raise ValueError(f"Q table shape {source.shape}, expected {shape}")
        return np.asarray(source, dtype=np.float64)
    grid = state_action_grid(*shape)
    if isinstance(source, TrainedModel):
        return ensemble_eval_batch(source.ens_x, grid).reshape(shape)
    if hasattr(source, "q_values"):
        return np.asarray(source.q_values(), dtype=np.float64).reshape(shape)
    if callable(source):
        return np.asarray(source(grid), dtype=np.float64).reshape(shape)
    raise TypeError(f"cannot extract a Q table from {type(source).__name__}")


def policy_value(
    source,
    mdp: TabularMdp,
    policy: np.ndarray,
    n_mc: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Value of the policy at the start distribution.

    With n_mc unset the sum over init_dist x policy is exact (the state space
    is enumerable, so models are simply evaluated on the full one-hot grid).
    With n_mc the same quantity is Monte Carlo estimated from sampled (s, b).
    """
    policy = _check_policy(mdp, policy)
    q = _as_q_table(source, mdp)
    if n_mc is None:
        return float(np.sum(mdp.init_dist[:, None] * policy * q))
    if n_mc < 1:
        raise ConfigError(f"n_mc must be >= 1, got {n_mc}")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    states = rng.choice(mdp.n_states, size=n_mc, p=mdp.init_dist)
    cum = np.cumsum(policy, axis=1)
    actions = np.minimum(
        (rng.random(n_mc)[:, None] >= cum[states]).sum(axis=1), mdp.n_actions - 1
    )
    return float(np.mean(q[states, actions]))


# ---------------------------------------------------------------------------
# Learned-feature baseline on the Bellman moment, with a value trace.


@dataclass(eq=False)
class BellmanDfivModel:
    """Two learned neuron banks and ridge heads fit to the Bellman moment."""

    psi_net: NeuronBank
    phi_net: NeuronBank
    v: np.ndarray
    u: np.ndarray
    discount: float
    zeta1: float
    zeta2: float
    loss_trace: list
    value_trace: list
    n_states: int
    n_actions: int

    def predict(self, rows: np.ndarray) -> np.ndarray:
        return self.psi_net.features(rows) @ self.u

    def q_values(self) -> np.ndarray:
        grid = state_action_grid(self.n_states, self.n_actions)
        return self.predict(grid).reshape(self.n_states, self.n_actions)


def _bellman_heads(psi_a, phi_w, psi_w2, phi_w2, y, discount, zeta1, zeta2):
    """Ridge heads with prediction rows psi(s,b) - discount * V phi(s,b)."""
    m, q_dim = phi_w.shape
    p_dim = psi_a.shape[1]
    b1 = phi_w.T @ phi_w + 2.0 * m * zeta1 * np.eye(q_dim)
    v = spd_solve(b1, phi_w.T @ psi_a, "stage I").T
    g = psi_w2 - discount * (phi_w2 @ v.T)
    n = g.shape[0]
    b2 = g.T @ g + 2.0 * n * zeta2 * np.eye(p_dim)
    u = spd_solve(b2, g.T @ y, "stage II")
    return v, u, g, b1, b2


def _bellman_gradients(psi_a, phi_w, psi_w2, phi_w2, y, discount, v, u, g, b1, b2):
    """Adjoint gradients of the stage-II loss for the Bellman prediction rows.

    Same machinery as the plain two-stage adjoint with G = Psi2 - discount *
    Phi2 V^T: the G-sensitivity lands on Psi2 with weight one and on Phi2 and
    V with weight -discount.
    """
    n = y.shape[0]
    r = g @ u - y
    w = spd_solve(b2, g.T @ r, "stage II adjoint")
    l_g = (np.outer(r, u - w) - np.outer(g @ w, u)) / n
    d_psi2 = l_g
    d_phi2 = -discount * (l_g @ v)
    c = -discount * (l_g.T @ phi_w2)
    w1 = spd_solve(b1, c.T, "stage I adjoint").T
    d_psi1 = phi_w @ w1.T
    m_mat = v.T @ w1
    d_phi1 = psi_a @ w1 - phi_w @ (m_mat + m_mat.T)
    return d_psi1, d_phi1, d_psi2, d_phi2


def _check_bellman_bank_divergence(tag: str, bank: NeuronBank, step: int) -> None:
    norm = float(np.mean(np.sqrt((bank.particles**2).sum(axis=1))))
    if norm > 1e6:
        raise DivergenceError(
            f"mean neuron norm of {tag} reached {norm:.3e} at step {step} (limit 1e+06)"
        )


def _self_check_bellman_adjoint(
    psi_net, phi_net, data, discount, zeta1, zeta2, grad_psi, grad_phi,
):
    h = 1e-6
    rng = np.random.default_rng(0)
    d_psi = rng.standard_normal(psi_net.particles.shape)
    d_phi = rng.standard_normal(phi_net.particles.shape)
    directional = float((grad_psi * d_psi).sum() + (grad_phi * d_phi).sum())

    def loss_at(eps):
        psi_b = NeuronBank(psi_net.spec, psi_net.particles + eps * d_psi)
        phi_b = NeuronBank(phi_net.spec, phi_net.particles + eps * d_phi)
        _, u, g, _, _ = _bellman_heads(
            psi_b.features(data.stage1_a), phi_b.features(data.stage1_w),
            psi_b.features(data.stage2_w), phi_b.features(data.stage2_w),
            data.stage2_y, discount, zeta1, zeta2,
        )
        return _stage2_loss(g, u, data.stage2_y)

    fd = (loss_at(h) - loss_at(-h)) / (2 * h)
    scale = max(abs(fd), abs(directional))
    if scale > 1e-7 and abs(fd - directional) > 1e-3 * scale:
        raise NumericalFailure(
            f"adjoint self-check failed: directional {directional:.6e} vs "
            f"finite difference {fd:.6e}"
        )


def dfiv_q_train(
    psi_net: Optional[NeuronBank],
    phi_net: Optional[NeuronBank],
    dataset: OpeDataset,
    discount: float,
    zeta1: float,
    zeta2: float,
    steps: int = 200,
    lr: float = 1e-3,
    seed: int = 0,
    width: int = 32,
    clip_bound: float = 10.0,
    *,
    mdp: Optional[TabularMdp] = None,
) -> BellmanDfivModel:
    """Learned-feature two-stage baseline on the Bellman moment.

    Tracks the stage-II loss after every head solve and, when `mdp` is given,
    the target-policy value of the current heads; both traces have steps + 1
    entries.
    """
    _check_discount(discount)
    if not (zeta1 > 0 and zeta2 > 0):
        raise ConfigError(f"ridge scales must be > 0, got zeta1={zeta1}, zeta2={zeta2}")
    if steps < 0:
        raise ConfigError(f"steps must be >= 0, got {steps}")
    if lr < 0:
        raise ConfigError(f"lr must be >= 0, got {lr}")
    if mdp is not None and (mdp.n_states, mdp.n_actions) != (dataset.n_states, dataset.n_actions):
        raise ConfigError(
            f"mdp has {mdp.n_states} states x {mdp.n_actions} actions, dataset has "
            f"{dataset.n_states} x {dataset.n_actions}"
        )
    data = ope_to_npiv(dataset)
    enc_dim = dataset.n_states + dataset.n_actions
    if psi_net is None:
        psi_net = neuron_bank(enc_dim, width, seed, clip_bound)
    if phi_net is None:
        phi_net = neuron_bank(enc_dim, width, seed + 1, clip_bound)
    y = data.stage2_y
    grid = state_action_grid(dataset.n_states, dataset.n_actions)

    def heads():
        psi_a = psi_net.features(data.stage1_a)
        phi_w = phi_net.features(data.stage1_w)
        psi_w2 = psi_net.features(data.stage2_w)
        phi_w2 = phi_net.features(data.stage2_w)
        return (psi_a, phi_w, psi_w2, phi_w2) + _bellman_heads(
            psi_a, phi_w, psi_w2, phi_w2, y, discount, zeta1, zeta2
        )

    def value_of(u_vec) -> Optional[float]:
        if mdp is None:
            return None
        q = (psi_net.features(grid) @ u_vec).reshape(dataset.n_states, dataset.n_actions)
        return float(np.sum(mdp.init_dist[:, None] * dataset.target_policy * q))

    psi_a, phi_w, psi_w2, phi_w2, v, u, g, b1, b2 = heads()
    loss_trace = [_stage2_loss(g, u, y)]
    value_trace = [value_of(u)]
    checked = False
    for step in range(steps):
        d_psi1, d_phi1, d_psi2, d_phi2 = _bellman_gradients(
            psi_a, phi_w, psi_w2, phi_w2, y, discount, v, u, g, b1, b2
        )
        grad_psi = psi_net.backprop(data.stage1_a, d_psi1) + psi_net.backprop(
            data.stage2_w, d_psi2
        )
        grad_phi = phi_net.backprop(data.stage1_w, d_phi1) + phi_net.backprop(
            data.stage2_w, d_phi2
        )
        if not checked:
            _self_check_bellman_adjoint(
                psi_net, phi_net, data, discount, zeta1, zeta2, grad_psi, grad_phi
            )
            checked = True
        psi_net = NeuronBank(psi_net.spec, psi_net.particles - lr * grad_psi)
        phi_net = NeuronBank(phi_net.spec, phi_net.particles - lr * grad_phi)
        _check_bellman_bank_divergence("psi", psi_net, step + 1)
        _check_bellman_bank_divergence("phi", phi_net, step + 1)
        psi_a, phi_w, psi_w2, phi_w2, v, u, g, b1, b2 = heads()
        loss_trace.append(_stage2_loss(g, u, y))
        value_trace.append(value_of(u))
    if mdp is None:
        value_trace = []
    return BellmanDfivModel(
        psi_net=psi_net, phi_net=phi_net, v=v, u=u, discount=discount,
        zeta1=zeta1, zeta2=zeta2, loss_trace=loss_trace, value_trace=value_trace,
        n_states=dataset.n_states, n_actions=dataset.n_actions,
    )


# ---------------------------------------------------------------------------
# File formats: MDP specs as JSON, datasets as the CSV container, Q tables
# and trained baselines as array containers.


def save_mdp(path, mdp: TabularMdp) -> None:
    payload = {
        "schema": MDP_SCHEMA_VERSION,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "transition": mdp.transition.tolist(),
        "rewards": mdp.rewards.tolist(),
        "discount": mdp.discount,
        "init_dist": mdp.init_dist.tolist(),
        "slip": mdp.slip,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_mdp(path) -> TabularMdp:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: unparseable MDP file: {exc}") from None
    if not isinstance(payload, dict) or payload.get("schema") != MDP_SCHEMA_VERSION:
        found = payload.get("schema") if isinstance(payload, dict) else None
        raise DataFormatError(
            f"{path}: MDP schema {found!r}, reader supports {MDP_SCHEMA_VERSION}"
        )
    try:
        mdp = TabularMdp(
            transition=np.asarray(payload["transition"], dtype=np.float64),
            rewards=np.asarray(payload["rewards"], dtype=np.float64),
            discount=float(payload["discount"]),
            init_dist=np.asarray(payload["init_dist"], dtype=np.float64),
            slip=float(payload.get("slip", 0.0)),
        )
    except KeyError as exc:
        raise DataFormatError(f"{path}: missing MDP field {exc}") from None
    declared = (payload.get("n_states"), payload.get("n_actions"))
    if declared != (mdp.n_states, mdp.n_actions):
        raise DataFormatError(
            f"{path}: declared shape {declared} does not match arrays "
            f"({mdp.n_states}, {mdp.n_actions})"
        )
    return mdp


def save_ope_dataset(path, dataset: OpeDataset) -> None:
    """CSV container: `#meta:{json}` line, header, one row per tuple."""
    meta = {
        "schema": DATASET_SCHEMA_VERSION,
        "n": dataset.n,
        "n_states": dataset.n_states,
        "n_actions": dataset.n_actions,
        "seed": dataset.seed,
        "target_policy": dataset.target_policy.tolist(),
    }
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("#meta:" + json.dumps(meta, sort_keys=True) + "\n")
        writer = csv.writer(fh)
        writer.writerow(["s", "b", "r", "s_next", "b_next"])
        for i in range(dataset.n):
            writer.writerow(
                [
                    int(dataset.s[i]), int(dataset.b[i]), repr(float(dataset.r[i])),
                    int(dataset.s_next[i]), int(dataset.b_next[i]),
                ]
            )


def load_ope_dataset(path) -> OpeDataset:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        first = fh.readline()
        if not first.startswith("#meta:"):
            raise DataFormatError("missing #meta: header line")
        try:
            meta = json.loads(first[len("#meta:"):])
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"unparseable meta header: {exc}") from None
        if meta.get("schema") != DATASET_SCHEMA_VERSION:
            raise DataFormatError(
                f"schema version mismatch: file has {meta.get('schema')!r}, "
                f"reader supports {DATASET_SCHEMA_VERSION}"
            )
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("truncated file: no column header") from None
        if header != ["s", "b", "r", "s_next", "b_next"]:
            raise DataFormatError(f"unexpected column header {header}")
        rows = []
        for lineno, row in enumerate(reader, start=3):
            if len(row) != 5:
                raise DataFormatError(f"truncated or ragged row at line {lineno}")
            try:
                rows.append(
                    (int(row[0]), int(row[1]), float(row[2]), int(row[3]), int(row[4]))
                )
            except ValueError:
                raise DataFormatError(f"unparseable tuple at line {lineno}") from None
    if not rows:
        raise DataFormatError("dataset has no tuples")
    if meta.get("n") is not None and meta["n"] != len(rows):
        raise DataFormatError(f"meta declares {meta['n']} tuples, file has {len(rows)}")
    cols = list(zip(*rows))
    try:
        return OpeDataset(
            s=np.array(cols[0]), b=np.array(cols[1]), r=np.array(cols[2]),
            s_next=np.array(cols[3]), b_next=np.array(cols[4]),
            target_policy=np.asarray(meta["target_policy"], dtype=np.float64),
            n_states=int(meta["n_states"]), n_actions=int(meta["n_actions"]),
            seed=int(meta.get("seed", 0)),
        )
    except KeyError as exc:
        raise DataFormatError(f"meta header missing field {exc}") from None
    except ValueError as exc:
        raise DataFormatError(f"inconsistent dataset: {exc}") from None


def save_q_table(path, q: np.ndarray, mdp: TabularMdp, policy: np.ndarray) -> None:
    """Container holding a Q table plus what policy_value needs to use it."""
    policy = _check_policy(mdp, policy)
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise ValueError(
            f"Q table shape {q.shape}, expected ({mdp.n_states}, {mdp.n_actions})"
        )
    config = {
        "discount": mdp.discount,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
    }
    arrays = {"q": q, "init_dist": mdp.init_dist, "policy": policy}
    save_container(path, CHECKPOINT_KIND_Q_TABLE, config, arrays)


@dataclass(eq=False)
class QTableCheckpoint:
    q: np.ndarray
    init_dist: np.ndarray
    policy: np.ndarray
    discount: float

    def value(self) -> float:
        return float(np.sum(self.init_dist[:, None] * self.policy * self.q))


def load_q_table(path) -> QTableCheckpoint:
    kind, config, arrays = load_container(path)
    if kind != CHECKPOINT_KIND_Q_TABLE:
        raise DataFormatError(
            f"{path}: checkpoint kind {kind!r}, expected {CHECKPOINT_KIND_Q_TABLE!r}"
        )
    return QTableCheckpoint(
        q=arrays["q"], init_dist=arrays["init_dist"], policy=arrays["policy"],
        discount=config["discount"],
    )


def save_bellman_dfiv(path, model: BellmanDfivModel) -> None:
    config = {
        "discount": model.discount,
        "zeta1": model.zeta1,
        "zeta2": model.zeta2,
        "n_states": model.n_states,
        "n_actions": model.n_actions,
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
        "has_value_trace": bool(model.value_trace),
    }
    arrays = {
        "psi_particles": model.psi_net.particles,
        "phi_particles": model.phi_net.particles,
        "v": model.v,
        "u": model.u,
        "loss_trace": np.asarray(model.loss_trace),
    }
    if model.value_trace:
        arrays["value_trace"] = np.asarray(model.value_trace)
    save_container(path, CHECKPOINT_KIND_DFIV_Q, config, arrays)


def load_bellman_dfiv(path) -> BellmanDfivModel:
    kind, config, arrays = load_container(path)
    if kind != CHECKPOINT_KIND_DFIV_Q:
        raise DataFormatError(
            f"{path}: checkpoint kind {kind!r}, expected {CHECKPOINT_KIND_DFIV_Q!r}"
        )

    def bank(name):
        meta = config[name]
        spec = NeuronSpec(meta["input_dim"], meta["clip_bound"], meta["activation"])
        return NeuronBank(spec, arrays[f"{name}_particles"])

    value_trace = []
    if config.get("has_value_trace"):
        value_trace = [float(x) for x in arrays["value_trace"]]
    return BellmanDfivModel(
        psi_net=bank("psi"), phi_net=bank("phi"),
        v=arrays["v"], u=arrays["u"],
        discount=config["discount"], zeta1=config["zeta1"], zeta2=config["zeta2"],
        loss_trace=[float(x) for x in arrays["loss_trace"]],
        value_trace=value_trace,
        n_states=config["n_states"], n_actions=config["n_actions"],
    )
