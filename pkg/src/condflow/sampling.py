"""Posterior sampling with a trained conditional velocity field."""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, NonConvergenceError
from .metrics import ensemble_stats
from .ode import SolverConfig, integrate_batch


@dataclass
class PosteriorEnsemble:
    samples: np.ndarray
    y_condition: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    avg_n_steps: float
    avg_path_length: float
    avg_rejected_steps: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def size(self):
        return self.samples.shape[0]

    def summary(self):
        return {
            "y_hat": self.y_condition.tolist(),
            "n_samples": int(self.size),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "avg_n_steps": self.avg_n_steps,
            "avg_rejected_steps": self.avg_rejected_steps,
            "avg_path_length": self.avg_path_length,
            "failures": self.failures,
        }

    def write(self, csv_path, json_path=None):
        """One row per sample; the header comment line carries the run statistics."""
        d = self.samples.shape[1]
        with open(csv_path, "w", newline="") as fh:
            fh.write(
                f"# y_hat={json.dumps(self.y_condition.tolist())} "
                f"avg_n_steps={self.avg_n_steps!r} avg_path_length={self.avg_path_length!r}\n"
            )
            w = csv.writer(fh)
            w.writerow([f"x{k}" for k in range(d)])
            for row in self.samples:
                w.writerow([repr(float(v)) for v in row])
        if json_path is not None:
            with open(json_path, "w") as fh:
                json.dump(self.summary(), fh, indent=2, sort_keys=True)


def read_ensemble_csv(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.reader(lines))
    return np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(len(rows) - 1, -1)


def initial_states(source, M, dim_x, normalizer, rng, prior_pool=None):
    """``M`` starting points in normalized coordinates."""
    if M < 1:
        raise InvalidArgumentError("number of samples must be >= 1")
    if source == "gaussian":
        return rng.standard_normal((M, dim_x))
    if source == "prior_scrambled":
        if prior_pool is None:
            raise InvalidArgumentError("prior source needs a pool of held-out x samples")
        pool = np.asarray(prior_pool, dtype=float).reshape(-1, dim_x)
        if pool.shape[0] < M:
            raise InvalidArgumentError(f"prior pool has {pool.shape[0]} samples, {M} requested")
        idx = rng.choice(pool.shape[0], size=M, replace=False)
        return normalizer.apply_x(pool[idx])
    raise InvalidArgumentError(f"unknown source kind {source!r}")


def sample_posterior(model, normalizer, y_hat, source, M, cfg=SolverConfig(), rng=None, prior_pool=None, x0=None):
    """Transport ``M`` source draws to the conditional at ``y_hat`` (physical units).

    The condition is normalized, every trajectory is integrated through the
    probability-flow ODE and the terminal states are mapped back to physical
    units. Trajectories that fail to converge are dropped and listed in
    ``failures``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    y_hat = np.atleast_1d(np.asarray(y_hat, dtype=float))
    if x0 is None:
        x0 = initial_states(source, M, model.cfg.dim_x, normalizer, rng, prior_pool)
    yn = normalizer.apply_y(y_hat)
    res = integrate_batch(model.field(yn), x0, cfg)
    return _ensemble(res, np.arange(len(res)), normalizer, y_hat)


def sample_posterior_sweep(model, normalizer, y_hats, source, M, cfg=SolverConfig(), rng=None, prior_pool=None):
    """:func:`sample_posterior` for many conditions, integrated as one batch.

    Rows are independent, so each ensemble matches a separate call with the
    same initial states up to matrix-product round-off. Returns one ensemble per ``y_hats`` row.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    ys = np.asarray(y_hats, dtype=float)
    if ys.ndim == 1:
        ys = ys[:, None]
    K = ys.shape[0]
    x0 = initial_states(source, K * M, model.cfg.dim_x, normalizer, rng, prior_pool)
    yn = np.repeat(normalizer.apply_y(ys), M, axis=0)

    def field_fn(x, t, rows):
        return model(x, yn[rows], t)

    res = integrate_batch(field_fn, x0, cfg, row_index=True)
    return [_ensemble(res, np.arange(k * M, (k + 1) * M), normalizer, ys[k]) for k in range(K)]


def _ensemble(res, rows, normalizer, y_hat):
    ok = res.converged[rows]
    failures = [
        {"index": int(i), "reason": "step budget exhausted", "t": float(res.t_final[rows[i]])}
        for i in np.flatnonzero(~ok)
    ]
    good = rows[ok]
    if good.size == 0:
        raise NonConvergenceError("every trajectory failed to converge", partial=res)
    samples = normalizer.invert_x(res.x_final[good])
    if samples.shape[0] >= 2:
        mean, std = ensemble_stats(samples)
    else:
        mean, std = samples[0].copy(), np.full(samples.shape[1], np.nan)
    return PosteriorEnsemble(
        samples=samples,
        y_condition=np.atleast_1d(np.asarray(y_hat, dtype=float)),
        mean=mean,
        std=std,
        avg_n_steps=float(np.mean(res.n_steps[good])),
        avg_path_length=float(np.mean(res.path_length[good])),
        avg_rejected_steps=float(np.mean(res.rejected_steps[good])),
        failures=failures,
    )
