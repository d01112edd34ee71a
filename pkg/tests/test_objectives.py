import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfldiv.errors import ConfigError
from mfldiv.features import NeuronSpec, ParticleEnsemble, ensemble_eval
from mfldiv.objectives import (
    RegParams,
    f1,
    f2,
    grad1_u1,
    grad2_f1,
    grad_u2,
    lagrangian_monitor,
    mean_sq_norm,
    u1,
    u2,
)
from gradient_suite import probe_grad1_u1, probe_grad2_f1, probe_grad_u2
from oracles import rel_err

SPEC = NeuronSpec(input_dim=2, clip_bound=2.0)


def make_ens(rng, n, spec=SPEC):
    return ParticleEnsemble(rng.standard_normal((n, spec.param_dim)), spec)


def zero_ens(n, spec=SPEC):
    return ParticleEnsemble(np.zeros((n, spec.param_dim)), spec)


def test_u1_zero_ensembles():
    a = np.ones((5, 2))
    w = np.ones((5, 2))
    assert u1(zero_ens(3), zero_ens(4), a, w) == 0.0


def test_u1_matched_ensembles_on_shared_inputs():
    rng = np.random.default_rng(0)
    ens = make_ens(rng, 6)
    rows = rng.standard_normal((7, 2))
    assert u1(ens, ens, rows, rows) == 0.0


def test_u1_single_row_half_squared_residual():
    rng = np.random.default_rng(1)
    ens_x, ens_z = make_ens(rng, 3), make_ens(rng, 5)
    a = rng.standard_normal((1, 2))
    w = rng.standard_normal((1, 2))
    p = ensemble_eval(ens_x, a[0])
    q = ensemble_eval(ens_z, w[0])
    assert u1(ens_x, ens_z, a, w) == pytest.approx(0.5 * (q - p) ** 2, rel=1e-14)


def test_u2_zero_cases_and_symmetry():
    w = np.ones((4, 2))
    y = np.zeros(4)
    assert u2(zero_ens(2), w, y) == 0.0
    rng = np.random.default_rng(2)
    y = rng.standard_normal(4)
    assert u2(zero_ens(2), w, y) == u2(zero_ens(2), w, -y)


def test_u2_single_row():
    rng = np.random.default_rng(3)
    ens = make_ens(rng, 4)
    w = rng.standard_normal((1, 2))
    y = np.array([0.37])
    q = ensemble_eval(ens, w[0])
    assert u2(ens, w, y) == pytest.approx(0.5 * (q - 0.37) ** 2, rel=1e-14)


def test_f_equals_u_when_zeta_zero():
    rng = np.random.default_rng(4)
    ens_x, ens_z = make_ens(rng, 3), make_ens(rng, 3)
    a = rng.standard_normal((5, 2))
    w = rng.standard_normal((5, 2))
    y = rng.standard_normal(5)
    reg = RegParams(zeta1=0.0, zeta2=0.0)
    assert f1(ens_x, ens_z, a, w, reg) == u1(ens_x, ens_z, a, w)
    assert f2(ens_x, ens_z, w, y, reg) == u2(ens_z, w, y)


def test_f1_zero_ensembles_unit_zeta():
    a = np.ones((3, 2))
    w = np.ones((3, 2))
    reg = RegParams(zeta1=1.0)
    assert f1(zero_ens(2), zero_ens(2), a, w, reg) == u1(zero_ens(2), zero_ens(2), a, w)


def test_f1_l2_term_arithmetic():
    # one particle with ||z||^2 = 4 at zeta1 = 0.5 adds exactly 1
    z = np.zeros((1, SPEC.param_dim))
    z[0, 0] = 2.0
    ens_z = ParticleEnsemble(z, SPEC)
    a = np.ones((2, 2))
    w = np.ones((2, 2))
    reg = RegParams(zeta1=0.5)
    assert f1(zero_ens(1), ens_z, a, w, reg) - u1(zero_ens(1), ens_z, a, w) == 1.0


def test_grad1_u1_zero_residual():
    rng = np.random.default_rng(5)
    ens = make_ens(rng, 4)
    rows = rng.standard_normal((6, 2))
    x = rng.standard_normal(SPEC.param_dim)
    assert np.array_equal(grad1_u1(ens, ens, rows, rows, x), np.zeros(SPEC.param_dim))


def test_grad2_f1_zero_residual_reduces_to_l2():
    rng = np.random.default_rng(6)
    ens = make_ens(rng, 4)
    rows = rng.standard_normal((6, 2))
    z = rng.standard_normal(SPEC.param_dim)
    reg = RegParams(zeta1=0.7)
    got = grad2_f1(ens, ens, rows, rows, reg, z)
    assert np.allclose(got, 0.7 * z, rtol=0, atol=0)
    reg0 = RegParams(zeta1=0.0)
    assert np.array_equal(grad2_f1(ens, ens, rows, rows, reg0, z), np.zeros_like(z))


def test_grad_u2_zero_residual():
    rng = np.random.default_rng(7)
    ens = make_ens(rng, 3)
    w = rng.standard_normal((4, 2))
    y = np.array([ensemble_eval(ens, row) for row in w])
    z = rng.standard_normal(SPEC.param_dim)
    assert np.array_equal(grad_u2(ens, w, y, z), np.zeros_like(z))


def test_grad1_u1_sign_single_row():
    from mfldiv.features import neuron_grad

    rng = np.random.default_rng(8)
    ens_x, ens_z = make_ens(rng, 3), zero_ens(2)
    a = rng.standard_normal((1, 2))
    w = rng.standard_normal((1, 2))
    resid = ensemble_eval(ens_x, a[0]) - ensemble_eval(ens_z, w[0])
    x = rng.standard_normal(SPEC.param_dim)
    got = grad1_u1(ens_x, ens_z, a, w, x)
    assert np.allclose(got, resid * neuron_grad(SPEC, x, a[0]), rtol=1e-13, atol=1e-15)


def test_gradients_match_finite_differences():
    assert probe_grad1_u1(120) <= 1e-5
    assert probe_grad2_f1(120) <= 1e-5
    assert probe_grad_u2(120) <= 1e-5


def test_lagrangian_monitor_identical_inner_ensembles():
    rng = np.random.default_rng(9)
    ens_x, ens_z = make_ens(rng, 3), make_ens(rng, 4)
    a = rng.standard_normal((5, 2))
    w = rng.standard_normal((5, 2))
    w2 = rng.standard_normal((4, 2))
    y = rng.standard_normal(4)
    reg = RegParams()
    value, gap = lagrangian_monitor(ens_x, ens_z, ens_z, (a, w), (w2, y), reg)
    assert gap == 0.0
    assert value == f2(ens_x, ens_z, w2, y, reg)


def test_lagrangian_monitor_lambda_zero():
    rng = np.random.default_rng(10)
    ens_x = make_ens(rng, 3)
    tilde, star = make_ens(rng, 4), make_ens(rng, 4)
    a, w = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    w2, y = rng.standard_normal((4, 2)), rng.standard_normal(4)
    reg = RegParams(lam=0.0)
    value, gap = lagrangian_monitor(ens_x, tilde, star, (a, w), (w2, y), reg)
    assert value == f2(ens_x, tilde, w2, y, reg)
    assert gap != 0.0


def test_lagrangian_monitor_hand_composition():
    rng = np.random.default_rng(11)
    ens_x = make_ens(rng, 1)
    tilde, star = make_ens(rng, 1), make_ens(rng, 1)
    a, w = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    w2, y = rng.standard_normal((3, 2)), rng.standard_normal(3)
    reg = RegParams(lam=0.7, zeta1=0.2, zeta2=0.1)
    value, gap = lagrangian_monitor(ens_x, tilde, star, (a, w), (w2, y), reg)
    want_gap = f1(ens_x, tilde, a, w, reg) - f1(ens_x, star, a, w, reg)
    want_value = f2(ens_x, tilde, w2, y, reg) + 0.7 * want_gap
    assert gap == pytest.approx(want_gap, rel=1e-14)
    assert value == pytest.approx(want_value, rel=1e-14)


@settings(max_examples=60, deadline=None)
@given(
    st.integers(1, 8),
    st.integers(1, 8),
    st.integers(0, 2**32 - 1),
)
def test_linear_convexity_of_f1_in_the_z_measure(n_p, n_q, seed):
    rng = np.random.default_rng(seed)
    ens_x = make_ens(rng, 3)
    p = make_ens(rng, n_p)
    q = make_ens(rng, n_q)
    mix = ParticleEnsemble(np.vstack([p.particles, q.particles]), SPEC)
    theta = n_p / (n_p + n_q)
    a = rng.standard_normal((5, 2))
    w = rng.standard_normal((5, 2))
    reg = RegParams(zeta1=0.3)
    lhs = f1(ens_x, mix, a, w, reg)
    rhs = theta * f1(ens_x, p, a, w, reg) + (1 - theta) * f1(ens_x, q, a, w, reg)
    assert lhs <= rhs + 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**32 - 1))
def test_objectives_invariant_under_particle_permutation(n, seed):
    rng = np.random.default_rng(seed)
    ens_x, ens_z = make_ens(rng, n), make_ens(rng, n)
    perm = rng.permutation(n)
    a, w = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    y = rng.standard_normal(4)
    reg = RegParams(zeta1=0.2, zeta2=0.4)
    ens_xp = ens_x.replace(ens_x.particles[perm])
    ens_zp = ens_z.replace(ens_z.particles[perm])
    assert u1(ens_x, ens_z, a, w) == u1(ens_xp, ens_zp, a, w)
    assert u2(ens_z, w, y) == u2(ens_zp, w, y)
    assert f1(ens_x, ens_z, a, w, reg) == f1(ens_xp, ens_zp, a, w, reg)
    assert f2(ens_x, ens_z, w, y, reg) == f2(ens_xp, ens_zp, w, y, reg)


def test_empty_batch_rejected():
    with pytest.raises(ValueError, match="empty"):
        u1(zero_ens(1), zero_ens(1), np.zeros((0, 2)), np.zeros((0, 2)))
    with pytest.raises(ValueError, match="empty"):
        u2(zero_ens(1), np.zeros((0, 2)), np.zeros(0))


def test_reg_params_validation():
    with pytest.raises(ConfigError):
        RegParams(zeta1=-1.0)
    with pytest.raises(ConfigError):
        RegParams(lam=-0.5)
    r = RegParams()
    assert (r.zeta1, r.zeta2, r.sigma1, r.sigma2, r.lam) == (1e-5, 1e-5, 1e-2, 1e-2, 0.3)


def test_mean_sq_norm_permutation_invariant():
    rng = np.random.default_rng(12)
    ens = make_ens(rng, 9)
    perm = rng.permutation(9)
    assert mean_sq_norm(ens) == mean_sq_norm(ens.replace(ens.particles[perm]))
