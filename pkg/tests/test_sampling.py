import numpy as np
import pytest

from condflow.errors import InvalidArgumentError, NonConvergenceError
from condflow.mlp import MlpConfig, VelocityModel, init_params
from condflow.ode import BatchSolveResult, SolverConfig
from condflow.sampling import (
    _ensemble,
    initial_states,
    read_ensemble_csv,
    sample_posterior,
    sample_posterior_sweep,
)
from condflow.training import Normalizer


def _norm():
    return Normalizer([0.0, -4.0], [2.0, 4.0], [-1.0], [1.0])


def test_zero_velocity_is_identity():
    cfg = MlpConfig(2, 1, 4, 1)
    m = VelocityModel(cfg, np.zeros(cfg.n_params))
    x0 = np.array([[0.2, -0.5]])
    e = sample_posterior(m, _norm(), [0.3], "gaussian", 1, x0=x0)
    assert np.allclose(e.samples, _norm().invert_x(x0))
    assert e.size == 1 and np.isnan(e.std).all()


def test_stats_consistent_and_written(rng, tmp_path):
    cfg = MlpConfig(2, 1, 8, 2, "swish")
    m = VelocityModel(cfg, init_params(cfg, rng))
    e = sample_posterior(m, _norm(), 0.1, "gaussian", 64, rng=rng)
    assert np.allclose(e.mean, e.samples.mean(0), atol=1e-10)
    assert np.allclose(e.std, e.samples.std(0, ddof=1), atol=1e-10)
    assert e.avg_n_steps >= 1 and not e.failures
    e.write(tmp_path / "e.csv", tmp_path / "e.json")
    assert read_ensemble_csv(tmp_path / "e.csv").tobytes() == e.samples.tobytes()
    assert (tmp_path / "e.csv").read_text().startswith("# y_hat=[0.1] avg_n_steps=")


def test_prior_pool_source(rng):
    pool = rng.normal(size=(10, 2))
    x0 = initial_states("prior_scrambled", 10, 2, _norm(), rng, pool)
    assert sorted(map(tuple, _norm().invert_x(x0).round(12))) == sorted(map(tuple, pool.round(12)))
    with pytest.raises(InvalidArgumentError):
        initial_states("prior_scrambled", 11, 2, _norm(), rng, pool)
    with pytest.raises(InvalidArgumentError):
        initial_states("prior_scrambled", 2, 2, _norm(), rng, None)
    with pytest.raises(InvalidArgumentError):
        initial_states("gaussian", 0, 2, _norm(), rng)


def test_failures_are_reported(rng):
    cfg = MlpConfig(1, 1, 8, 2)
    m = VelocityModel(cfg, 3 * init_params(cfg, rng))
    n = Normalizer([-1.0], [1.0], [-1.0], [1.0])
    with pytest.raises(NonConvergenceError) as e:
        sample_posterior(m, n, 0.0, "gaussian", 20, SolverConfig(max_steps=2), rng)
    assert e.value.partial.n_steps.max() == 2
    # mixed outcome: failed rows are dropped from the ensemble and listed
    res = BatchSolveResult(
        x_final=np.arange(4.0)[:, None], n_steps=np.array([5, 2, 6, 2]), path_length=np.ones(4),
        rejected_steps=np.zeros(4, dtype=int), t_final=np.array([1.0, 0.4, 1.0, 0.7]),
        converged=np.array([True, False, True, False]),
    )
    ens = _ensemble(res, np.arange(4), n, [0.0])
    assert np.array_equal(ens.samples[:, 0], [0.0, 2.0]) and ens.avg_n_steps == 5.5
    assert [f["index"] for f in ens.failures] == [1, 3]
    assert ens.failures[1] == {"index": 3, "reason": "step budget exhausted", "t": 0.7}


def test_sweep_matches_individual_calls(rng):
    cfg = MlpConfig(1, 1, 8, 2, "swish")
    m = VelocityModel(cfg, init_params(cfg, rng))
    n = Normalizer([-1.0], [1.0], [-1.0], [1.0])
    ys = [-0.5, 0.2, 0.9]
    sweep = sample_posterior_sweep(m, n, ys, "gaussian", 7, rng=np.random.default_rng(4))
    x0 = np.random.default_rng(4).standard_normal((21, 1))
    for k, y in enumerate(ys):
        single = sample_posterior(m, n, y, "gaussian", 7, x0=x0[7 * k:7 * (k + 1)])
        assert np.allclose(single.samples, sweep[k].samples, rtol=0, atol=1e-12)
        assert single.avg_n_steps == sweep[k].avg_n_steps
