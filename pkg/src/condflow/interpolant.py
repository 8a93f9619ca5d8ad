"""Linear interpolant and closed-form velocity fields for finite training sets.

The fields here are the exact minimizers of the flow-matching regression
loss under an empirical target density. They are used as oracles for the
learned velocity and to reproduce the degenerate behaviour of overtrained
networks: collapse onto an interpolated point when the conditioning basis is
a partition of unity, and memorization of training points when it is a set
of indicator functions.

All fields accept either a single state of shape ``(d,)`` or a batch of
states of shape ``(n, d)``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, SingularTimeError, UnsupportedError

#: Largest pseudo-time at which (1 - t)^-1 fields are evaluated by the samplers.
T_CAP = 1.0 - 1e-4


@dataclass(frozen=True)
class EmpiricalSupport:
    """Aligned training pairs: row ``i`` of ``points_x`` goes with row ``i`` of ``points_y``."""

    points_x: np.ndarray
    points_y: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.points_x, dtype=float)
        if px.ndim == 1:
            px = px[:, None]
        py = np.asarray(self.points_y, dtype=float)
        if py.ndim == 1:
            py = py[:, None]
        if px.shape[0] < 1:
            raise InvalidArgumentError("support needs at least one point")
        if py.shape[0] != px.shape[0]:
            raise InvalidArgumentError(
                f"points_x has {px.shape[0]} rows but points_y has {py.shape[0]}"
            )
        object.__setattr__(self, "points_x", px)
        object.__setattr__(self, "points_y", py)

    @classmethod
    def from_x(cls, points_x):
        """Support with no conditioning variable (every point in one cell)."""
        px = np.asarray(points_x, dtype=float)
        if px.ndim == 1:
            px = px[:, None]
        return cls(px, np.zeros((px.shape[0], 1)))

    @property
    def n(self):
        return self.points_x.shape[0]

    @property
    def dim_x(self):
        return self.points_x.shape[1]


def _pair(z, x):
    z = np.asarray(z, dtype=float)
    x = np.asarray(x, dtype=float)
    if z.shape != x.shape:
        raise InvalidArgumentError(f"source shape {z.shape} != target shape {x.shape}")
    return z, x


def _check_time(t):
    t = np.asarray(t, dtype=float)
    if np.any(t >= 1.0):
        raise SingularTimeError(f"velocity is singular at t >= 1 (got max t={t.max()})")
    return t


def interpolate(z, x, t):
    """Point on the straight path ``(1 - t) z + t x``."""
    z, x = _pair(z, x)
    return (1.0 - t) * z + t * x


def interpolant_rate(z, x):
    """Time derivative of the linear interpolant, ``x - z``."""
    z, x = _pair(z, x)
    return x - z


def case1_xbar(support, y_query):
    """Hat-basis interpolation of the training ``x`` values at ``y_query``.

    The basis is the piecewise-linear partition of unity on the sorted
    training ``y`` values, clamped to the nearest endpoint outside the data
    range. Only scalar conditioning is supported.
    """
    if support.points_y.shape[1] != 1:
        raise UnsupportedError("hat basis is only defined for scalar conditioning (D = 1)")
    ys = support.points_y[:, 0]
    order = np.argsort(ys, kind="stable")
    ys = ys[order]
    if np.any(np.diff(ys) == 0.0):
        raise InvalidArgumentError("training y values must be distinct")
    xs = support.points_x[order]
    yq = float(np.asarray(y_query, dtype=float).reshape(-1)[0])
    if ys.size == 1:
        return xs[0].copy()
    return np.array([np.interp(yq, ys, xs[:, k]) for k in range(xs.shape[1])])


def case1_velocity(support, xi, y_query, t):
    """Velocity ``(xbar(y) - xi) / (1 - t)`` pulling every state onto ``xbar(y)``."""
    t = _check_time(t)
    xbar = case1_xbar(support, y_query)
    xi = np.asarray(xi, dtype=float)
    if np.ndim(t) == 1 and xi.ndim == 2:
        t = t[:, None]
    return (xbar - xi) / (1.0 - t)


def _log_weights(points_x, xi, t):
    # log of the standard-normal source density at (xi - t x_i) / (1 - t), up to a constant
    diff = xi[..., None, :] - t[..., None, None] * points_x
    return -0.5 * np.sum(diff * diff, axis=-1) / (1.0 - t[..., None]) ** 2


def case2_weights(support_subset, xi, t):
    """Posterior responsibilities of the training points for state ``xi`` at time ``t``.

    Weights are proportional to the standard-normal source density evaluated
    at ``(xi - t x_i) / (1 - t)``; computed with max-subtraction in log space.
    Returns shape ``(n,)`` for a single state or ``(batch, n)`` for a batch.
    """
    t = _check_time(t)
    xi = np.asarray(xi, dtype=float)
    px = support_subset.points_x
    if xi.shape[-1] != px.shape[1]:
        raise InvalidArgumentError(f"state dim {xi.shape[-1]} != support dim {px.shape[1]}")
    single = xi.ndim == 1
    xs = np.atleast_2d(xi)
    tt = np.broadcast_to(t, xs.shape[:1]).astype(float)
    logw = _log_weights(px, xs, tt)
    logw -= logw.max(axis=-1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=-1, keepdims=True)
    return w[0] if single else w


def exact_empirical_velocity(support_subset, xi, t):
    """Exact flow-matching minimizer for an empirical target and Gaussian source.

    ``sum_i w_i(xi, t) (x_i - xi) / (1 - t)`` with ``w`` from :func:`case2_weights`.
    """
    t = _check_time(t)
    xi = np.asarray(xi, dtype=float)
    w = case2_weights(support_subset, xi, t)
    target = w @ support_subset.points_x
    tt = t if np.ndim(t) == 0 or xi.ndim == 1 else np.asarray(t)[:, None]
    return (target - xi) / (1.0 - tt)


def gaussian_velocity_oracle(mu, sigma, xi, t):
    """Probability-flow velocity for a N(0, 1) source and N(mu, sigma^2) target.

    Conditional expectation ``E[X - Z | X_t = xi]`` for jointly Gaussian
    variables; finite on all of [0, 1].
    """
    if sigma <= 0:
        raise InvalidArgumentError("sigma must be positive")
    var_t = (1.0 - t) ** 2 + t**2 * sigma**2
    cov = t * sigma**2 - (1.0 - t)
    return mu + cov * (np.asarray(xi, dtype=float) - t * mu) / var_t
