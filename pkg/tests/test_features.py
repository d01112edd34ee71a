import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfldiv.features import (
    ClippedLinearSpec,
    NeuronSpec,
    ParticleEnsemble,
    ensemble_eval,
    ensemble_eval_batch,
    neuron_eval,
    neuron_grad,
)
from oracles import central_diff, loop_ensemble_average, rel_err

SPEC = NeuronSpec(input_dim=3, clip_bound=2.0, activation="tanh")


def direct_formula(spec, x, a):
    # independent scalar-math transcription of the neuron definition
    d = spec.input_dim
    s = sum(x[i] * a[i] for i in range(d)) + x[d]
    if spec.activation == "tanh":
        g = math.tanh(s)
    else:
        g = 1.0 / (1.0 + math.exp(-s)) if s > -500 else 0.0
    u = x[d + 1] * g
    return spec.clip_bound * math.tanh(u / spec.clip_bound)


def test_neuron_eval_zero_params_tanh():
    assert neuron_eval(SPEC, np.zeros(SPEC.param_dim), np.ones(3)) == 0.0


@pytest.mark.parametrize("activation", ["tanh", "sigmoid"])
def test_neuron_eval_matches_direct_formula(activation):
    spec = NeuronSpec(input_dim=3, clip_bound=2.0, activation=activation)
    rng = np.random.default_rng(101)
    for _ in range(1000):
        x = rng.standard_normal(spec.param_dim)
        a = rng.standard_normal(spec.input_dim)
        # 1e-10 headroom: the implementation computes sigmoid through tanh
        assert rel_err(neuron_eval(spec, x, a), direct_formula(spec, x, a)) <= 1e-10


def test_neuron_eval_bounded_for_huge_params():
    rng = np.random.default_rng(7)
    for _ in range(200):
        x = 1e3 * rng.standard_normal(SPEC.param_dim)
        a = 1e3 * rng.standard_normal(3)
        assert abs(neuron_eval(SPEC, x, a)) <= SPEC.clip_bound


@pytest.mark.parametrize("activation", ["tanh", "sigmoid"])
def test_neuron_grad_matches_central_differences(activation):
    spec = NeuronSpec(input_dim=3, clip_bound=2.0, activation=activation)
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(1000):
        x = rng.standard_normal(spec.param_dim)
        a = rng.standard_normal(spec.input_dim)
        fd = central_diff(lambda p: neuron_eval(spec, p, a), x, h=1e-5)
        worst = max(worst, rel_err(neuron_grad(spec, x, a), fd))
    assert worst <= 1e-6


def test_neuron_grad_zero_params_tanh():
    g = neuron_grad(SPEC, np.zeros(SPEC.param_dim), np.ones(3))
    assert np.array_equal(g, np.zeros(SPEC.param_dim))


def test_neuron_grad_inf_norm_bound_with_clipped_w2():
    # the sup-norm bound on the gradient needs |w2| <= R and inputs in the unit box
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(10_000):
        x = rng.standard_normal(SPEC.param_dim)
        x[-1] = np.clip(x[-1], -SPEC.clip_bound, SPEC.clip_bound)
        a = rng.uniform(-1.0, 1.0, size=3)
        worst = max(worst, np.max(np.abs(neuron_grad(SPEC, x, a))))
    assert worst <= SPEC.clip_bound + 1e-12


def test_ensemble_of_identical_particles_equals_single_neuron():
    rng = np.random.default_rng(5)
    x = rng.standard_normal(SPEC.param_dim)
    a = rng.standard_normal(3)
    ens = ParticleEnsemble(np.tile(x, (17, 1)), SPEC)
    assert ensemble_eval(ens, a) == pytest.approx(neuron_eval(SPEC, x, a), rel=1e-12)


def test_ensemble_eval_matches_loop_oracle():
    rng = np.random.default_rng(6)
    ens = ParticleEnsemble(rng.standard_normal((100, SPEC.param_dim)), SPEC)
    a = rng.standard_normal(3)
    expected = loop_ensemble_average(lambda x, aa: neuron_eval(SPEC, x, aa), ens.particles, a)
    assert rel_err(ensemble_eval(ens, a), expected) <= 1e-12


def test_ensemble_eval_duplicated_particles_bitwise_identical():
    rng = np.random.default_rng(8)
    particles = rng.standard_normal((33, SPEC.param_dim))
    a = rng.standard_normal(3)
    once = ensemble_eval(ParticleEnsemble(particles, SPEC), a)
    twice = ensemble_eval(ParticleEnsemble(np.vstack([particles, particles]), SPEC), a)
    assert once == twice


def test_batch_eval_bitwise_equals_loop_of_single_evals():
    rng = np.random.default_rng(9)
    ens = ParticleEnsemble(rng.standard_normal((40, SPEC.param_dim)), SPEC)
    inputs = rng.standard_normal((32, 3))
    batch = ensemble_eval_batch(ens, inputs)
    singles = np.array([ensemble_eval(ens, row) for row in inputs])
    assert np.array_equal(batch, singles)


def test_batch_eval_empty_batch():
    ens = ParticleEnsemble(np.zeros((4, SPEC.param_dim)), SPEC)
    out = ensemble_eval_batch(ens, np.zeros((0, 3)))
    assert out.shape == (0,)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 30), st.integers(0, 2**32 - 1))
def test_permutation_of_particles_is_bitwise_invariant(n, seed):
    rng = np.random.default_rng(seed)
    particles = rng.standard_normal((n, SPEC.param_dim))
    a = rng.standard_normal(3)
    perm = rng.permutation(n)
    v0 = ensemble_eval(ParticleEnsemble(particles, SPEC), a)
    v1 = ensemble_eval(ParticleEnsemble(particles[perm], SPEC), a)
    assert v0 == v1


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 20), st.floats(0.5, 10.0), st.integers(0, 2**32 - 1))
def test_ensemble_output_bounded_by_clip(n, clip, seed):
    spec = NeuronSpec(input_dim=2, clip_bound=clip)
    rng = np.random.default_rng(seed)
    ens = ParticleEnsemble(10.0 * rng.standard_normal((n, spec.param_dim)), spec)
    vals = ensemble_eval_batch(ens, 10.0 * rng.standard_normal((8, 2)))
    assert np.all(np.abs(vals) <= clip)


def test_curvature_stays_bounded_under_step_refinement():
    rng = np.random.default_rng(404)
    for _ in range(50):
        x = rng.standard_normal(SPEC.param_dim)
        a = rng.standard_normal(3)
        e = rng.standard_normal(SPEC.param_dim)
        e /= np.linalg.norm(e)
        for h in (1e-2, 1e-3, 1e-4):
            f = lambda p: neuron_eval(SPEC, p, a)
            curv = (f(x + h * e) - 2 * f(x) + f(x - h * e)) / h**2
            assert abs(curv) < 1e3


def test_dimension_mismatch_names_the_axis():
    with pytest.raises(ValueError, match="input_dim"):
        neuron_eval(SPEC, np.zeros(SPEC.param_dim), np.zeros(5))
    with pytest.raises(ValueError, match="param_dim"):
        ParticleEnsemble(np.zeros((3, 9)), SPEC)


def test_non_finite_particles_rejected_at_construction():
    particles = np.zeros((4, SPEC.param_dim))
    particles[2, 0] = np.nan
    with pytest.raises(ValueError, match="index 2"):
        ParticleEnsemble(particles, SPEC)


def test_invalid_spec_fields_rejected():
    with pytest.raises(ValueError):
        NeuronSpec(input_dim=0, clip_bound=1.0)
    with pytest.raises(ValueError):
        NeuronSpec(input_dim=1, clip_bound=-1.0)
    with pytest.raises(ValueError):
        NeuronSpec(input_dim=1, clip_bound=1.0, activation="relu")


def test_clipped_linear_matches_formula_and_fd():
    spec = ClippedLinearSpec(input_dim=2, clip_bound=5.0)
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(200):
        z = rng.standard_normal(2)
        a = rng.standard_normal(2)
        direct = 5.0 * math.tanh(float(z @ a) / 5.0)
        assert rel_err(neuron_eval(spec, z, a), direct) <= 1e-12
        fd = central_diff(lambda p: neuron_eval(spec, p, a), z, h=1e-5)
        worst = max(worst, rel_err(neuron_grad(spec, z, a), fd))
    assert worst <= 1e-6
