"""Forward models and reference posteriors for the desk-scale benchmarks.

* ``toy1d``: uniform prior on [-1, 1] observed with additive N(0, 0.25^2) noise.
* ``spiral``: a 2-D spiral-shaped joint density with multimodal conditionals.
* ``lorenz``: one assimilation step of a noisy Lorenz-63 model with a
  sequential importance resampling (SIR) particle filter as reference.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .errors import DegenerateFilterError, EmptyResultError, InvalidArgumentError, NumericError
from .training import PairedDataset


# ---------------------------------------------------------------- toy 1-D

@dataclass(frozen=True)
class Toy1dSpec:
    prior_low: float = -1.0
    prior_high: float = 1.0
    noise_std: float = 0.25

    def __post_init__(self):
        if self.noise_std <= 0:
            raise InvalidArgumentError("noise_std must be positive")


def toy1d_generate(n, rng, spec=Toy1dSpec(), split="train"):
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    x = rng.uniform(spec.prior_low, spec.prior_high, size=n)
    y = x + spec.noise_std * rng.standard_normal(n)
    return PairedDataset(x[:, None], y[:, None], split)


def toy1d_posterior_pdf(x, y_hat, spec=Toy1dSpec()):
    """Density of N(y_hat, noise_std^2) truncated to the prior support."""
    x = np.asarray(x, dtype=float)
    s = spec.noise_std
    mass = ndtr((spec.prior_high - y_hat) / s) - ndtr((spec.prior_low - y_hat) / s)
    pdf = np.exp(-0.5 * ((x - y_hat) / s) ** 2) / (s * np.sqrt(2 * np.pi) * mass)
    inside = (x >= spec.prior_low) & (x <= spec.prior_high)
    return np.where(inside, pdf, 0.0)


# ---------------------------------------------------------------- spiral

@dataclass(frozen=True)
class SpiralSpec:
    scale: float = 0.1


def spiral_generate(n, rng, spec=SpiralSpec(), split="train"):
    """``X = s (W sin W + C3)``, ``Y = s (W cos W + C4)`` with ``W = 1.5 pi (1 + 2H)``."""
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    h = rng.random(n)
    w = 1.5 * np.pi * (1.0 + 2.0 * h)
    c = rng.standard_normal((n, 2))
    x = spec.scale * (w * np.sin(w) + c[:, 0])
    y = spec.scale * (w * np.cos(w) + c[:, 1])
    return PairedDataset(x[:, None], y[:, None], split)


def spiral_reference_conditional(pool, y_hat, band=0.1):
    """``x`` rows whose ``y`` lies within ``band / 2`` of ``y_hat`` (``band`` is the total width)."""
    yv = pool.y[:, 0]
    mask = np.abs(yv - y_hat) <= band / 2
    count = int(mask.sum())
    if count == 0:
        raise EmptyResultError(f"no pool points within a band of width {band} around y={y_hat}", count=0)
    return pool.x[mask]


# ---------------------------------------------------------------- Lorenz-63

@dataclass(frozen=True)
class Lorenz63Spec:
    sigma: float = 10.0
    rho: float = 28.0
    beta: float = 8.0 / 3.0
    dt: float = 0.01
    process_noise_std: float = 0.01
    obs_noise_std: float = 0.5
    steps_per_observation: int = 10
    x0: tuple = (-1.27323174, -0.00702107, 0.74486393)
    initial_std: float = 1.0

    def __post_init__(self):
        if self.dt <= 0 or self.process_noise_std < 0 or self.obs_noise_std <= 0:
            raise InvalidArgumentError("dt and obs_noise_std must be positive, process noise non-negative")


def lorenz_drift(state, spec=Lorenz63Spec()):
    s = np.asarray(state, dtype=float)
    x1, x2, x3 = s[..., 0], s[..., 1], s[..., 2]
    return np.stack(
        [spec.sigma * (x2 - x1), spec.rho * x1 - x2 - x1 * x3, x1 * x2 - spec.beta * x3], axis=-1
    )


def lorenz_euler_step(state, spec=Lorenz63Spec(), rng=None):
    """One forward-Euler step; process noise is added unless ``rng`` is None."""
    s = np.asarray(state, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        out = s + spec.dt * lorenz_drift(s, spec)
    if rng is not None and spec.process_noise_std > 0:
        out = out + spec.process_noise_std * rng.standard_normal(s.shape)
    if not np.all(np.isfinite(out)):
        raise NumericError("Lorenz state became non-finite")
    return out


def lorenz_propagate(state, spec=Lorenz63Spec(), rng=None):
    """Advance one observation interval (``steps_per_observation`` Euler steps)."""
    for _ in range(spec.steps_per_observation):
        state = lorenz_euler_step(state, spec, rng)
    return state


def lorenz_observe(state, spec=Lorenz63Spec(), rng=None):
    """``x3`` plus N(0, obs_noise_std^2) noise (exact ``x3`` when ``rng`` is None)."""
    s = np.asarray(state, dtype=float)
    y = s[..., 2].copy() if s.ndim > 1 else float(s[2])
    if rng is not None:
        y = y + spec.obs_noise_std * rng.standard_normal(np.shape(y))
    return y


@dataclass
class ParticleEnsemble:
    particles: np.ndarray
    weights: np.ndarray

    @classmethod
    def uniform(cls, particles):
        p = np.asarray(particles, dtype=float)
        return cls(p, np.full(p.shape[0], 1.0 / p.shape[0]))


def systematic_resample(weights, rng):
    """Indices drawn by systematic resampling (one uniform offset, stratified grid)."""
    w = np.asarray(weights, dtype=float)
    P = w.size
    cw = np.cumsum(w)
    cw /= cw[-1]
    cw[-1] = 1.0
    u = (rng.random() + np.arange(P)) / P
    return np.searchsorted(cw, u, side="right")


def sir_update(prior, y_obs, spec, rng):
    """Weight a prior ensemble by the observation likelihood and resample."""
    r = (y_obs - prior.particles[:, 2]) / spec.obs_noise_std
    logw = np.log(prior.weights) - 0.5 * r * r
    top = np.max(logw)
    if not np.isfinite(top):
        raise DegenerateFilterError("all particle weights vanished")
    w = np.exp(logw - top)
    w /= w.sum()
    idx = systematic_resample(w, rng)
    return ParticleEnsemble.uniform(prior.particles[idx])


def sir_filter(spec, observations, P, rng, initial=None):
    """Bootstrap particle filter over the given observation sequence.

    Starts from ``P`` draws of N(0, initial_std^2 I) unless ``initial`` is
    given. Returns one ``(prior, posterior)`` ensemble pair per observation.
    """
    if P < 1:
        raise InvalidArgumentError("P must be >= 1")
    if initial is None:
        initial = spec.initial_std * rng.standard_normal((P, 3))
    post = ParticleEnsemble.uniform(initial)
    out = []
    for y in np.atleast_1d(observations):
        prior = ParticleEnsemble(lorenz_propagate(post.particles, spec, rng), post.weights)
        post = sir_update(prior, float(y), spec, rng)
        out.append((prior, post))
    return out


def simulate_truth(spec, n_obs, rng):
    """Noisy truth trajectory from ``spec.x0``; returns states and observations at each cycle."""
    state = np.array(spec.x0, dtype=float)
    states, obs = [], []
    for _ in range(n_obs):
        state = lorenz_propagate(state, spec, rng)
        states.append(state.copy())
        obs.append(float(lorenz_observe(state, spec, rng)))
    return np.array(states), np.array(obs)


@dataclass
class DAProblem:
    train: PairedDataset
    test: PairedDataset
    reference_posterior: np.ndarray
    reference_prior: np.ndarray
    prior_pool: np.ndarray
    y_hat: float
    truth: np.ndarray
    observations: np.ndarray
    meta: dict = field(default_factory=dict)


def build_da_problem(spec, rng, P=100_000, n_steps=3, n_train=1000, n_test=500):
    """One assimilation step at cycle ``n_steps`` as a conditional sampling problem.

    Sub-samples ``n_train + n_test`` particles of the SIR prior at the last
    cycle, pairs each with its own synthetic observation and returns the SIR
    posterior as the reference. Unused prior particles form the pool for the
    prior source.
    """
    n_joint = n_train + n_test
    if P < n_joint + 1:
        raise InvalidArgumentError(f"need more than {n_joint} particles, got {P}")
    truth, obs = simulate_truth(spec, n_steps, rng)
    steps = sir_filter(spec, obs, P, rng)
    prior, post = steps[-1]
    perm = rng.permutation(P)
    pick = perm[:n_joint]
    x = prior.particles[pick]
    y = lorenz_observe(x, spec, rng)[:, None]
    train = PairedDataset(x[:n_train], y[:n_train], "train")
    test = PairedDataset(x[n_train:], y[n_train:], "test")
    return DAProblem(
        train=train,
        test=test,
        reference_posterior=post.particles,
        reference_prior=prior.particles,
        prior_pool=prior.particles[perm[n_joint:]],
        y_hat=float(obs[-1]),
        truth=truth,
        observations=obs,
        meta={"P": P, "n_steps": n_steps, "n_train": n_train, "n_test": n_test},
    )
