import json

import numpy as np
import pytest

from mfldiv.bilevel import TrainConfig, load_model
from mfldiv.errors import ConfigError, DataFormatError
from mfldiv.features import NeuronSpec, ParticleEnsemble
from mfldiv.objectives import RegParams
from mfldiv.ope import (
    BellmanDfivModel,
    OpeDataset,
    TabularMdp,
    build_ope_dataset,
    chain_mdp,
    dfiv_q_train,
    exact_q,
    load_bellman_dfiv,
    load_mdp,
    load_ope_dataset,
    load_q_model,
    load_q_table,
    one_hot_pairs,
    ope_to_npiv,
    policy_value,
    right_biased_policy,
    save_bellman_dfiv,
    save_mdp,
    save_ope_dataset,
    save_q_model,
    save_q_table,
    single_action_policy,
    state_action_grid,
    train_q,
    u2_bellman,
    uniform_policy,
)
from gradient_suite import probe_bellman_adapter


def one_state_mdp(reward=1.0, discount=0.9):
    return TabularMdp(
        transition=np.ones((1, 1, 1)),
        rewards=np.full((1, 1, 1), reward),
        discount=discount,
        init_dist=np.array([1.0]),
    )


# ---------------------------------------------------------------------------
# MDP structure and validation


def test_chain_mdp_rows_and_rewards():
    mdp = chain_mdp(5, slip=0.2)
    assert mdp.transition.shape == (5, 2, 5)
    assert np.allclose(mdp.transition.sum(axis=2), 1.0, atol=1e-15)
    # landing-state reward only
    assert np.allclose(mdp.rewards[3, 0], mdp.rewards[1, 1])
    assert np.allclose(mdp.rewards[0, 0, :], (1.0 + np.arange(5)) / 5)
    # interior state moves right with prob 0.8 under action 1
    assert mdp.transition[2, 1, 3] == pytest.approx(0.8)
    assert mdp.transition[2, 1, 1] == pytest.approx(0.2)


def test_chain_mdp_slip_zero_deterministic():
    mdp = chain_mdp(4, slip=0.0)
    for s in range(4):
        assert mdp.transition[s, 1, min(s + 1, 3)] == 1.0
        assert mdp.transition[s, 0, max(s - 1, 0)] == 1.0


def test_tabular_mdp_validation():
    good = chain_mdp(3)
    with pytest.raises(ConfigError, match="sum to 1"):
        TabularMdp(good.transition * 1.1, good.rewards, 0.9, good.init_dist)
    with pytest.raises(ConfigError, match="discount"):
        TabularMdp(good.transition, good.rewards, 1.0, good.init_dist)
    with pytest.raises(ConfigError, match="probability vector"):
        TabularMdp(good.transition, good.rewards, 0.9, np.array([0.5, 0.5, 0.5]))
    with pytest.raises(ConfigError, match="rewards shape"):
        TabularMdp(good.transition, good.rewards[:, :, :2], 0.9, good.init_dist)


def test_policies():
    mdp = chain_mdp(3)
    assert np.allclose(uniform_policy(mdp), 0.5)
    det = single_action_policy(mdp, 1)
    assert np.array_equal(det, np.tile([0.0, 1.0], (3, 1)))
    biased = right_biased_policy(mdp, 0.9)
    assert np.allclose(biased, np.tile([0.1, 0.9], (3, 1)))
    with pytest.raises(ConfigError):
        single_action_policy(mdp, 5)
    with pytest.raises(ConfigError):
        right_biased_policy(mdp, 1.5)


# ---------------------------------------------------------------------------
# Exact solve oracle


def test_exact_q_zero_discount_is_mean_reward():
    mdp = chain_mdp(5, slip=0.2, discount=0.0)
    q = exact_q(mdp, uniform_policy(mdp))
    assert np.allclose(q, mdp.mean_rewards(), atol=1e-12)


def test_exact_q_constant_reward_geometric():
    mdp = one_state_mdp(reward=1.0, discount=0.9)
    q = exact_q(mdp, uniform_policy(mdp))
    assert q[0, 0] == pytest.approx(10.0, abs=1e-9)


def test_exact_q_bellman_residual():
    mdp = chain_mdp(5, slip=0.2, discount=0.9)
    pi = right_biased_policy(mdp)
    q = exact_q(mdp, pi)
    backup = mdp.mean_rewards() + mdp.discount * np.einsum(
        "sbt,tc,tc->sb", mdp.transition, pi, q
    )
    assert np.max(np.abs(q - backup)) <= 1e-10


def test_exact_q_against_monte_carlo_returns():
    mdp = chain_mdp(5, slip=0.2, discount=0.9)
    pi = right_biased_policy(mdp)
    q = exact_q(mdp, pi)
    rng = np.random.default_rng(123)
    episodes, horizon = 4000, 250
    s = np.full(episodes, 2)
    b = np.full(episodes, 1)
    total = np.zeros(episodes)
    disc = 1.0
    cum_p = np.cumsum(mdp.transition, axis=2)
    cum_pi = np.cumsum(pi, axis=1)
    for _ in range(horizon):
        nxt = np.minimum((rng.random(episodes)[:, None] >= cum_p[s, b]).sum(axis=1), 4)
        total += disc * mdp.rewards[s, b, nxt]
        disc *= mdp.discount
        s = nxt
        b = np.minimum((rng.random(episodes)[:, None] >= cum_pi[s]).sum(axis=1), 1)
    se = total.std(ddof=1) / np.sqrt(episodes)
    assert abs(total.mean() - q[2, 1]) <= 3 * se


# ---------------------------------------------------------------------------
# Policy value


def test_policy_value_point_mass_deterministic():
    mdp = TabularMdp(
        transition=chain_mdp(3).transition,
        rewards=chain_mdp(3).rewards,
        discount=0.9,
        init_dist=np.array([0.0, 1.0, 0.0]),
    )
    pi = single_action_policy(mdp, 1)
    q = exact_q(mdp, pi)
    assert policy_value(q, mdp, pi) == pytest.approx(q[1, 1], abs=1e-12)


def test_policy_value_uniform_average():
    mdp = chain_mdp(2, discount=0.5)
    pi = uniform_policy(mdp)
    q = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert policy_value(q, mdp, pi) == pytest.approx(2.5, abs=1e-12)


def test_policy_value_model_matches_table():
    mdp = chain_mdp(3, slip=0.1)
    pi = right_biased_policy(mdp)
    ds = build_ope_dataset(mdp, uniform_policy(mdp), pi, 40, seed=0)
    cfg = TrainConfig(outer_steps=0, n_x=10, n_z=10, batch_size=8)
    model = train_q(cfg, ds, 0.9, mdp=mdp)
    # the model path should agree with evaluating its own table through the array path
    from mfldiv.ope import _as_q_table

    table = _as_q_table(model, mdp)
    assert policy_value(model, mdp, pi) == pytest.approx(
        policy_value(table, mdp, pi), abs=1e-14
    )
    assert model.trace[0].value_estimate == pytest.approx(
        policy_value(model, mdp, pi), abs=1e-14
    )


def test_policy_value_monte_carlo_path():
    mdp = chain_mdp(5, slip=0.2)
    pi = right_biased_policy(mdp)
    q = exact_q(mdp, pi)
    exact = policy_value(q, mdp, pi)
    mc = policy_value(q, mdp, pi, n_mc=200000, seed=1)
    assert abs(mc - exact) <= 0.05
    with pytest.raises(ConfigError):
        policy_value(q, mdp, pi, n_mc=0)


# ---------------------------------------------------------------------------
# Dataset construction


def test_one_state_dataset_all_tuples_identical():
    mdp = one_state_mdp()
    ds = build_ope_dataset(mdp, uniform_policy(mdp), uniform_policy(mdp), 50, seed=0)
    assert np.all(ds.s == 0) and np.all(ds.b == 0)
    assert np.all(ds.s_next == 0) and np.all(ds.b_next == 0)
    assert np.all(ds.r == 1.0)
    assert ds.seed == 0


def test_slip_zero_chain_successor_determined():
    mdp = chain_mdp(5, slip=0.0)
    ds = build_ope_dataset(mdp, uniform_policy(mdp), uniform_policy(mdp), 300, seed=1)
    expected = np.where(ds.b == 1, np.minimum(ds.s + 1, 4), np.maximum(ds.s - 1, 0))
    assert np.array_equal(ds.s_next, expected)
    # trajectory is connected: each tuple starts where the last one landed
    assert np.array_equal(ds.s[1:], ds.s_next[:-1])


def test_empirical_transition_frequencies():
    mdp = chain_mdp(5, slip=0.2)
    ds = build_ope_dataset(mdp, uniform_policy(mdp), uniform_policy(mdp), 100000, seed=0)
    for s in range(5):
        for b in range(2):
            mask = (ds.s == s) & (ds.b == b)
            count = int(mask.sum())
            assert count > 1000
            for t in range(5):
                p = mdp.transition[s, b, t]
                phat = float(np.mean(ds.s_next[mask] == t))
                se = np.sqrt(max(p * (1 - p), 1e-12) / count)
                assert abs(phat - p) <= max(3 * se, 1e-9), (s, b, t)


def test_successor_actions_follow_target_policy():
    mdp = chain_mdp(5, slip=0.2)
    target = right_biased_policy(mdp, 0.9)
    ds = build_ope_dataset(mdp, uniform_policy(mdp), target, 100000, seed=0)
    for s in range(5):
        mask = ds.s_next == s
        count = int(mask.sum())
        phat = float(np.mean(ds.b_next[mask] == 1))
        se = np.sqrt(0.9 * 0.1 / count)
        assert abs(phat - 0.9) <= 3 * se


def test_dataset_determinism_and_validation():
    mdp = chain_mdp(4, slip=0.1)
    d1 = build_ope_dataset(mdp, uniform_policy(mdp), uniform_policy(mdp), 100, seed=7)
    d2 = build_ope_dataset(mdp, uniform_policy(mdp), uniform_policy(mdp), 100, seed=7)
    for name in ("s", "b", "r", "s_next", "b_next"):
        assert np.array_equal(getattr(d1, name), getattr(d2, name))
    d3 = build_ope_dataset(mdp, uniform_policy(mdp), uniform_policy(mdp), 100, seed=8)
    assert not np.array_equal(d1.s_next, d3.s_next)
    with pytest.raises(ConfigError):
        build_ope_dataset(mdp, uniform_policy(mdp), uniform_policy(mdp), 0, seed=0)
    with pytest.raises(ConfigError, match="policy"):
        build_ope_dataset(mdp, np.ones((4, 2)), uniform_policy(mdp), 10, seed=0)
    with pytest.raises(ValueError, match="indices"):
        OpeDataset(
            s=[5], b=[0], r=[0.0], s_next=[0], b_next=[0],
            target_policy=uniform_policy(mdp), n_states=4, n_actions=2, seed=0,
        )


# ---------------------------------------------------------------------------
# Encoding and two-stage recast


def test_one_hot_pairs_positions():
    enc = one_hot_pairs([2, 0], [1, 0], n_states=3, n_actions=2)
    assert enc.shape == (2, 5)
    assert np.array_equal(enc[0], [0, 0, 1, 0, 1])
    assert np.array_equal(enc[1], [1, 0, 0, 1, 0])


def test_state_action_grid_order():
    grid = state_action_grid(3, 2)
    assert grid.shape == (6, 5)
    # row s * B + b encodes (s, b)
    assert np.array_equal(grid[2 * 2 + 1], [0, 0, 1, 0, 1])
    assert np.all(grid.sum(axis=1) == 2)


def test_ope_to_npiv_split():
    ds = OpeDataset(
        s=[0, 1, 2, 0, 1, 2], b=[0, 1, 0, 1, 0, 1],
        r=[0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        s_next=[1, 2, 1, 1, 0, 1], b_next=[1, 0, 0, 1, 1, 0],
        target_policy=np.full((3, 2), 0.5), n_states=3, n_actions=2, seed=0,
    )
    npiv = ope_to_npiv(ds)
    assert npiv.m == 3 and npiv.n == 3
    assert npiv.d_a == 5 and npiv.d_w == 5
    # stage-I row 1 comes from tuple index 2: treatment (s'=1, b'=0), instrument (s=2, b=0)
    assert np.array_equal(npiv.stage1_a[1], [0, 1, 0, 1, 0])
    assert np.array_equal(npiv.stage1_w[1], [0, 0, 1, 1, 0])
    assert np.array_equal(npiv.stage2_y, [0.2, 0.4, 0.6])
    single = OpeDataset(
        s=[0], b=[0], r=[0.0], s_next=[0], b_next=[0],
        target_policy=np.full((3, 2), 0.5), n_states=3, n_actions=2, seed=0,
    )
    with pytest.raises(ValueError, match="2 tuples"):
        ope_to_npiv(single)


# ---------------------------------------------------------------------------
# Adapted gradients and trainer


def test_adapted_gradients_match_finite_differences():
    assert probe_bellman_adapter(10) <= 1e-5


def test_train_zero_discount_recovers_reward_regression():
    mdp = chain_mdp(5, slip=0.2)
    ds = build_ope_dataset(mdp, uniform_policy(mdp), right_biased_policy(mdp), 10000, seed=2)
    cfg = TrainConfig(
        reg=RegParams(zeta1=1e-5, zeta2=1e-5, sigma1=1e-2, sigma2=1e-4, lam=0.0),
        alpha=1e-2, beta=1e-2, gamma=0.3,
        inner_steps=0, outer_steps=1500,
        n_x=40, n_z=20, batch_size=512,
        seed=0, clip_bound=5.0, trace_eval_size=64,
    )
    model = train_q(cfg, ds, discount=0.0)
    npiv = ope_to_npiv(ds)
    grid = state_action_grid(5, 2)
    q_hat = np.asarray(
        [float(np.dot(npiv.stage2_y, (npiv.stage2_w == row).all(axis=1))) for row in grid]
    )
    counts = np.asarray([(npiv.stage2_w == row).all(axis=1).sum() for row in grid])
    cell_means = q_hat / counts
    from mfldiv.features import ensemble_eval_batch

    fitted = ensemble_eval_batch(model.ens_x, grid)
    rel = np.abs(fitted - cell_means) / np.abs(cell_means)
    assert np.max(rel) <= 0.05, (fitted, cell_means)


def test_train_zero_reward_collapses_to_zero():
    base = chain_mdp(5, slip=0.2)
    mdp = TabularMdp(base.transition, np.zeros_like(base.rewards), 0.9, base.init_dist)
    ds = build_ope_dataset(mdp, uniform_policy(mdp), right_biased_policy(mdp), 2000, seed=3)
    cfg = TrainConfig(
        reg=RegParams(zeta1=1e-5, zeta2=1e-5, sigma1=1e-2, sigma2=1e-2, lam=0.3),
        alpha=0.1, beta=0.1, gamma=0.3,
        inner_steps=4, outer_steps=120,
        n_x=40, n_z=40, batch_size=48,
        seed=0, clip_bound=5.0,
    )
    model = train_q(cfg, ds, discount=0.9, mdp=mdp)
    npiv = ope_to_npiv(ds)
    risk = u2_bellman(
        model.ens_x, model.tilde_ens_z, npiv.stage2_w, npiv.stage2_y, 0.9
    )
    assert risk <= 1e-2
    assert abs(model.trace[-1].value_estimate) <= 0.1


def test_train_determinism():
    mdp = chain_mdp(3, slip=0.1)
    ds = build_ope_dataset(mdp, uniform_policy(mdp), right_biased_policy(mdp), 200, seed=4)
    cfg = TrainConfig(
        inner_steps=3, outer_steps=5, n_x=12, n_z=10, batch_size=16, seed=11,
    )
    m1 = train_q(cfg, ds, 0.9, mdp=mdp)
    m2 = train_q(cfg, ds, 0.9, mdp=mdp)
    assert np.array_equal(m1.ens_x.particles, m2.ens_x.particles)
    assert np.array_equal(m1.tilde_ens_z.particles, m2.tilde_ens_z.particles)
    assert [r.value_estimate for r in m1.trace] == [r.value_estimate for r in m2.trace]
    assert all(r.value_estimate is not None for r in m1.trace)
    plain = train_q(cfg, ds, 0.9)
    assert all(r.value_estimate is None for r in plain.trace)


def test_relabeling_states_leaves_value_invariant():
    mdp = chain_mdp(4, slip=0.2, discount=0.8)
    target = right_biased_policy(mdp)
    ds = build_ope_dataset(mdp, uniform_policy(mdp), target, 400, seed=5)

    perm = np.array([2, 0, 3, 1])  # new label of each old state
    relabeled = TabularMdp(
        transition=_permute3(mdp.transition, perm),
        rewards=_permute3(mdp.rewards, perm),
        discount=mdp.discount,
        init_dist=_permute1(mdp.init_dist, perm),
        slip=mdp.slip,
    )
    ds_rel = OpeDataset(
        s=perm[ds.s], b=ds.b, r=ds.r, s_next=perm[ds.s_next], b_next=ds.b_next,
        target_policy=_permute_rows(target, perm),
        n_states=4, n_actions=2, seed=ds.seed,
    )

    # exact oracle side
    q = exact_q(mdp, target)
    q_rel = exact_q(relabeled, _permute_rows(target, perm))
    assert np.allclose(q_rel[perm], q, atol=1e-12)
    assert policy_value(q, mdp, target) == pytest.approx(
        policy_value(q_rel, relabeled, _permute_rows(target, perm)), abs=1e-12
    )

    # trained estimate side: noise off, identical inits up to the coordinate
    # permutation that the one-hot relabeling induces on w1 blocks
    cfg = TrainConfig(
        reg=RegParams(zeta1=1e-4, zeta2=1e-4, sigma1=0.0, sigma2=0.0, lam=0.3),
        alpha=0.05, beta=0.05, gamma=0.05,
        inner_steps=4, outer_steps=25, n_x=8, n_z=6, batch_size=32, seed=0,
    )
    spec = NeuronSpec(6, cfg.clip_bound, cfg.activation)
    rng = np.random.default_rng(99)
    inits = {
        "init_x": ParticleEnsemble(rng.standard_normal((cfg.n_x, spec.param_dim)), spec),
        "init_z": ParticleEnsemble(rng.standard_normal((cfg.n_z, spec.param_dim)), spec),
        "init_tilde_z": ParticleEnsemble(rng.standard_normal((cfg.n_z, spec.param_dim)), spec),
    }
    inits_rel = {
        name: ParticleEnsemble(_permute_w1(ens.particles, perm, n_states=4), spec)
        for name, ens in inits.items()
    }
    m = train_q(cfg, ds, 0.8, mdp=mdp, **inits)
    m_rel = train_q(cfg, ds_rel, 0.8, mdp=relabeled, **inits_rel)
    v = [r.value_estimate for r in m.trace]
    v_rel = [r.value_estimate for r in m_rel.trace]
    assert np.allclose(v, v_rel, atol=1e-12)


def _permute1(vec, perm):
    out = np.empty_like(vec)
    out[perm] = vec
    return out


def _permute_rows(mat, perm):
    out = np.empty_like(mat)
    out[perm] = mat
    return out


def _permute3(tensor, perm):
    out = np.empty_like(tensor)
    out[perm[:, None, None], np.arange(tensor.shape[1])[None, :, None], perm[None, None, :]] = (
        tensor[
            np.arange(tensor.shape[0])[:, None, None],
            np.arange(tensor.shape[1])[None, :, None],
            np.arange(tensor.shape[2])[None, None, :],
        ]
    )
    return out


def _permute_w1(particles, perm, n_states):
    out = particles.copy()
    block = np.empty_like(particles[:, :n_states])
    block[:, perm] = particles[:, :n_states]
    out[:, :n_states] = block
    return out


# ---------------------------------------------------------------------------
# Learned-feature baseline on the Bellman moment


def test_dfiv_q_zero_discount_frozen_is_plain_ridge():
    mdp = chain_mdp(4, slip=0.1)
    ds = build_ope_dataset(mdp, uniform_policy(mdp), right_biased_policy(mdp), 200, seed=6)
    model = dfiv_q_train(None, None, ds, 0.0, 0.05, 0.05, steps=2, lr=0.0, seed=1, width=5)
    npiv = ope_to_npiv(ds)
    psi2 = model.psi_net.features(npiv.stage2_w)
    n = npiv.n
    u_hand = np.linalg.solve(
        psi2.T @ psi2 + 2 * n * 0.05 * np.eye(5), psi2.T @ npiv.stage2_y
    )
    assert np.allclose(model.u, u_hand, atol=1e-9)
    grid = state_action_grid(4, 2)
    assert np.allclose(model.predict(grid), model.psi_net.features(grid) @ u_hand, atol=1e-9)


def test_dfiv_q_traces_and_determinism():
    mdp = chain_mdp(4, slip=0.2)
    ds = build_ope_dataset(mdp, uniform_policy(mdp), right_biased_policy(mdp), 300, seed=7)
    m1 = dfiv_q_train(None, None, ds, 0.9, 0.05, 0.05, steps=6, lr=1e-3, seed=2, width=6, mdp=mdp)
    m2 = dfiv_q_train(None, None, ds, 0.9, 0.05, 0.05, steps=6, lr=1e-3, seed=2, width=6, mdp=mdp)
    assert len(m1.loss_trace) == 7 and len(m1.value_trace) == 7
    assert m1.loss_trace == m2.loss_trace and m1.value_trace == m2.value_trace
    assert np.array_equal(m1.psi_net.particles, m2.psi_net.particles)
    assert m1.loss_trace[-1] <= m1.loss_trace[0] + 1e-12
    no_mdp = dfiv_q_train(None, None, ds, 0.9, 0.05, 0.05, steps=2, lr=1e-3, seed=2, width=6)
    assert no_mdp.value_trace == []
    assert m1.q_values().shape == (4, 2)


def test_dfiv_q_validation():
    mdp = chain_mdp(3)
    ds = build_ope_dataset(mdp, uniform_policy(mdp), uniform_policy(mdp), 50, seed=0)
    with pytest.raises(ConfigError):
        dfiv_q_train(None, None, ds, 1.0, 0.1, 0.1)
    with pytest.raises(ConfigError):
        dfiv_q_train(None, None, ds, 0.9, 0.0, 0.1)
    wrong = chain_mdp(4)
    with pytest.raises(ConfigError, match="states"):
        dfiv_q_train(None, None, ds, 0.9, 0.1, 0.1, mdp=wrong)


# ---------------------------------------------------------------------------
# File formats


def test_mdp_json_round_trip(tmp_path):
    mdp = chain_mdp(5, slip=0.2, discount=0.9)
    path = tmp_path / "mdp.json"
    save_mdp(path, mdp)
    back = load_mdp(path)
    assert np.array_equal(back.transition, mdp.transition)
    assert np.array_equal(back.rewards, mdp.rewards)
    assert np.array_equal(back.init_dist, mdp.init_dist)
    assert back.discount == mdp.discount and back.slip == mdp.slip


def test_mdp_json_error_paths(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("not json at all")
    with pytest.raises(DataFormatError, match="unparseable"):
        load_mdp(bad)
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps({"schema": 99}))
    with pytest.raises(DataFormatError, match="schema"):
        load_mdp(schema)
    mdp = chain_mdp(3)
    path = tmp_path / "mdp.json"
    save_mdp(path, mdp)
    payload = json.loads(path.read_text())
    payload["n_states"] = 7
    path.write_text(json.dumps(payload))
    with pytest.raises(DataFormatError, match="declared shape"):
        load_mdp(path)


def test_ope_dataset_csv_round_trip(tmp_path):
    mdp = chain_mdp(5, slip=0.2)
    ds = build_ope_dataset(mdp, uniform_policy(mdp), right_biased_policy(mdp), 64, seed=9)
    path = tmp_path / "tuples.csv"
    save_ope_dataset(path, ds)
    back = load_ope_dataset(path)
    for name in ("s", "b", "r", "s_next", "b_next"):
        assert np.array_equal(getattr(back, name), getattr(ds, name)), name
    assert np.array_equal(back.target_policy, ds.target_policy)
    assert back.seed == 9 and back.n_states == 5


def test_ope_dataset_csv_error_paths(tmp_path):
    path = tmp_path / "junk.csv"
    path.write_text("s,b,r\n")
    with pytest.raises(DataFormatError, match="meta"):
        load_ope_dataset(path)
    path.write_text('#meta:{"schema": 1, "n_states": 2, "n_actions": 2, "target_policy": [[0.5,0.5],[0.5,0.5]]}\nwrong,header\n')
    with pytest.raises(DataFormatError, match="header"):
        load_ope_dataset(path)
    path.write_text('#meta:{"schema": 1, "n_states": 2, "n_actions": 2, "target_policy": [[0.5,0.5],[0.5,0.5]]}\ns,b,r,s_next,b_next\n0,0,nope,0,0\n')
    with pytest.raises(DataFormatError, match="unparseable tuple"):
        load_ope_dataset(path)


def test_q_table_checkpoint(tmp_path):
    mdp = chain_mdp(5, slip=0.2)
    pi = right_biased_policy(mdp)
    q = exact_q(mdp, pi)
    path = tmp_path / "q.ckpt"
    save_q_table(path, q, mdp, pi)
    back = load_q_table(path)
    assert np.array_equal(back.q, q)
    assert back.discount == 0.9
    assert back.value() == pytest.approx(policy_value(q, mdp, pi), abs=1e-12)
    with pytest.raises(DataFormatError, match="kind"):
        load_bellman_dfiv(path)


def test_q_model_checkpoint_round_trip(tmp_path):
    mdp = chain_mdp(3, slip=0.1)
    ds = build_ope_dataset(mdp, uniform_policy(mdp), right_biased_policy(mdp), 100, seed=1)
    cfg = TrainConfig(inner_steps=2, outer_steps=3, n_x=8, n_z=6, batch_size=16)
    model = train_q(cfg, ds, 0.9, mdp=mdp)
    path = tmp_path / "model.ckpt"
    save_q_model(path, model)
    back = load_q_model(path)
    assert np.array_equal(back.ens_x.particles, model.ens_x.particles)
    assert back.trace[-1].value_estimate == pytest.approx(
        model.trace[-1].value_estimate, abs=0
    )
    with pytest.raises(DataFormatError, match="kind"):
        load_model(path)  # expects the plain two-stage kind


def test_bellman_dfiv_checkpoint_round_trip(tmp_path):
    mdp = chain_mdp(4, slip=0.2)
    ds = build_ope_dataset(mdp, uniform_policy(mdp), right_biased_policy(mdp), 120, seed=2)
    model = dfiv_q_train(None, None, ds, 0.9, 0.05, 0.05, steps=3, lr=1e-3, seed=3, width=4, mdp=mdp)
    path = tmp_path / "dfiv_q.ckpt"
    save_bellman_dfiv(path, model)
    back = load_bellman_dfiv(path)
    assert isinstance(back, BellmanDfivModel)
    assert np.array_equal(back.psi_net.particles, model.psi_net.particles)
    assert back.loss_trace == model.loss_trace
    assert back.value_trace == model.value_trace
    assert np.array_equal(back.q_values(), model.q_values())
