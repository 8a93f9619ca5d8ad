import numpy as np
import pytest
from scipy import integrate

from condflow.errors import EmptyResultError, InvalidArgumentError, NumericError
from condflow.metrics import self_distance_baseline, sinkhorn
from condflow.problems import (
    Lorenz63Spec,
    ParticleEnsemble,
    build_da_problem,
    lorenz_euler_step,
    lorenz_observe,
    lorenz_propagate,
    sir_filter,
    spiral_generate,
    spiral_reference_conditional,
    systematic_resample,
    toy1d_generate,
    toy1d_posterior_pdf,
)
from condflow.training import PairedDataset


def test_toy_generate():
    a = toy1d_generate(5, np.random.default_rng(2))
    b = toy1d_generate(5, np.random.default_rng(2))
    assert len(a) == 5 and np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y)
    assert np.all(np.abs(a.x) <= 1)
    big = toy1d_generate(1_000_000, np.random.default_rng(3))
    assert abs(big.y.var() / (1 / 3 + 0.0625) - 1) < 0.01
    with pytest.raises(InvalidArgumentError):
        toy1d_generate(0, np.random.default_rng(0))


@pytest.mark.parametrize("y_hat", [-1.0, 0.0, 0.6, 1.0])
def test_toy_pdf_normalized(y_hat):
    mass, _ = integrate.quad(toy1d_posterior_pdf, -1, 1, args=(y_hat,), epsabs=1e-12, epsrel=1e-12)
    assert abs(mass - 1) < 1e-8


def test_toy_pdf_moments():
    m0, _ = integrate.quad(lambda x: x * toy1d_posterior_pdf(x, 0.0), -1, 1)
    assert abs(m0) < 1e-12
    m6, _ = integrate.quad(lambda x: x * toy1d_posterior_pdf(x, 0.6), -1, 1)
    # truncation at 1 (1.6 noise std above 0.6) pulls the mean left
    assert 0.5 < m6 < 0.6
    assert toy1d_posterior_pdf(1.5, 0.0) == 0.0


def test_spiral_generate():
    g = np.random.default_rng(4)
    d = spiral_generate(800, g)
    assert len(d) == 800
    assert np.array_equal(d.x, spiral_generate(800, np.random.default_rng(4)).x)


def test_spiral_envelope_and_moments():
    g = np.random.default_rng(5)
    n = 1_000_000
    h = g.random(n)
    w = 1.5 * np.pi * (1 + 2 * h)
    c = g.standard_normal((n, 2))
    d = spiral_generate(n, np.random.default_rng(5))
    # same stream, same construction order: the generator reproduces the envelope exactly
    assert np.all(np.abs(d.x[:, 0]) <= 0.1 * (w + np.abs(c[:, 0])) + 1e-12)
    # independent oracle: E[W sin W] and E[W cos W] for W uniform on [1.5 pi, 4.5 pi]
    a, b = 1.5 * np.pi, 4.5 * np.pi
    ex = 0.1 * integrate.quad(lambda u: u * np.sin(u), a, b)[0] / (b - a)
    ey = 0.1 * integrate.quad(lambda u: u * np.cos(u), a, b)[0] / (b - a)
    se = d.x.std() / np.sqrt(n), d.y.std() / np.sqrt(n)
    assert abs(d.x.mean() - ex) < 3 * se[0] + 1e-12
    assert abs(d.y.mean() - ey) < 3 * se[1] + 1e-12


def test_spiral_reference_band():
    pool = spiral_generate(100_000, np.random.default_rng(6))
    ref = spiral_reference_conditional(pool, 0.0, 0.1)
    sel = np.abs(pool.y[:, 0]) <= 0.05
    assert ref.shape[0] == sel.sum() > 100
    assert np.array_equal(spiral_reference_conditional(pool, 0.0, np.inf), pool.x)
    tiny = PairedDataset(np.zeros((2, 1)), np.array([[0.0], [0.1]]))
    with pytest.raises(EmptyResultError) as e:
        spiral_reference_conditional(tiny, 5.0)
    assert e.value.count == 0


def test_lorenz_step_examples():
    spec = Lorenz63Spec()
    assert np.array_equal(lorenz_euler_step(np.zeros(3), spec), np.zeros(3))
    assert np.allclose(lorenz_euler_step(np.ones(3), spec), [1.0, 1.26, 1 + 0.01 * (1 - 8 / 3)], rtol=0, atol=1e-15)
    a = lorenz_euler_step(np.ones(3), spec, np.random.default_rng(0))
    b = lorenz_euler_step(np.ones(3), spec, np.random.default_rng(0))
    assert np.array_equal(a, b) and not np.array_equal(a, lorenz_euler_step(np.ones(3), spec))
    with pytest.raises(NumericError):
        lorenz_euler_step(np.array([1e200, 1e200, 1e200]), spec)


def test_noiseless_trajectory_reproducible():
    spec = Lorenz63Spec(process_noise_std=0.0)
    a = lorenz_propagate(np.array(spec.x0), spec)
    b = lorenz_propagate(np.array(spec.x0), spec)
    assert a.tobytes() == b.tobytes()


def test_observe():
    assert lorenz_observe(np.array([5.0, -2.0, 2.0])) == 2.0
    ys = lorenz_observe(np.tile([0.0, 0.0, 1.0], (1_000_000, 1)), Lorenz63Spec(), np.random.default_rng(1))
    assert abs(ys.var() / 0.25 - 1) < 0.01


def test_systematic_resample_equal_weights():
    idx = systematic_resample(np.full(7, 1 / 7), np.random.default_rng(3))
    assert np.array_equal(np.sort(idx), np.arange(7))


def test_sir_single_particle():
    spec = Lorenz63Spec()
    init = np.array([[1.0, 2.0, 3.0]])
    (prior, post), = sir_filter(spec, [100.0], 1, np.random.default_rng(0), initial=init)
    assert np.array_equal(prior.particles, post.particles)
    assert post.weights.tolist() == [1.0]


@pytest.mark.filterwarnings("ignore:Sinkhorn did not reach")
def test_sir_weights_simplex_and_flat_likelihood():
    rng = np.random.default_rng(8)
    spec = Lorenz63Spec(obs_noise_std=50.0)
    init = rng.standard_normal((4000, 3))
    (prior, post), = sir_filter(spec, [3.0], 4000, rng, initial=init)
    assert np.allclose(post.weights, 1 / 4000) and abs(post.weights.sum() - 1) < 1e-12
    base = self_distance_baseline(prior.particles, 1000, 2, rng=np.random.default_rng(1))
    d = sinkhorn(post.particles[:1000], prior.particles[rng.choice(4000, 1000, replace=False)]).value
    assert d < 1.5 * base


def test_particle_ensemble_uniform():
    e = ParticleEnsemble.uniform(np.zeros((4, 3)))
    assert np.allclose(e.weights, 0.25)


def test_build_da_problem_small():
    spec = Lorenz63Spec()
    a = build_da_problem(spec, np.random.default_rng(3), P=3000, n_train=100, n_test=50)
    b = build_da_problem(spec, np.random.default_rng(3), P=3000, n_train=100, n_test=50)
    assert (len(a.train), len(a.test)) == (100, 50)
    assert a.reference_posterior.shape == (3000, 3)
    assert a.prior_pool.shape == (2850, 3)
    assert a.y_hat == b.y_hat and np.array_equal(a.train.x, b.train.x)
    with pytest.raises(InvalidArgumentError):
        build_da_problem(spec, np.random.default_rng(0), P=100, n_train=100, n_test=50)
