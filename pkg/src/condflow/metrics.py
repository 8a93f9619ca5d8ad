"""Evaluation metrics: entropic OT distance, 1-D KDE, ensemble statistics, RMSE."""

import json
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import InvalidArgumentError

KDE_FALLBACK_BANDWIDTH = 1e-3


@dataclass(frozen=True)
class SinkhornConfig:
    epsilon: float = 0.01
    max_iters: int = 5000
    convergence_tol: float = 1e-9
    relaxation: float = 1.8

    def __post_init__(self):
        if self.epsilon <= 0 or self.convergence_tol <= 0 or self.max_iters < 1:
            raise InvalidArgumentError("epsilon, convergence_tol and max_iters must be positive")
        if not 0.0 < self.relaxation < 2.0:
            raise InvalidArgumentError("relaxation must lie in (0, 2)")

    def to_dict(self):
        return asdict(self)


@dataclass
class SinkhornResult:
    value: float
    iterations: int
    converged: bool
    marginal_error: float
    config: SinkhornConfig

    def __float__(self):
        return self.value


def _cloud(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] == 0:
        raise InvalidArgumentError(f"point cloud {name} is empty")
    if not np.all(np.isfinite(a)):
        raise InvalidArgumentError(f"point cloud {name} has non-finite coordinates")
    return a


def sq_euclidean_cost(a, b):
    """Pairwise squared distances, computed per dimension to avoid cancellation."""
    C = np.zeros((a.shape[0], b.shape[0]))
    for k in range(a.shape[1]):
        diff = a[:, k][:, None] - b[:, k][None, :]
        C += diff * diff
    return C


# absorb scalings into the potentials once they leave [e^-30, e^30]
_ABSORB = 30.0


def sinkhorn(a, b, cfg=SinkhornConfig()):
    """Entropic OT between two uniformly weighted point clouds.

    Log-stabilized Sinkhorn-Knopp: dual potentials ``f, g`` hold the bulk of
    the scaling and the kernel ``exp((f + g - C) / eps)`` is rebuilt whenever
    the residual scalings drift, so nothing overflows for small ``eps``.
    Scaling updates are over-relaxed by ``cfg.relaxation`` (1 gives the
    plain iteration; the fixed point is the same). Stops when the max-norm
    marginal violation drops below ``cfg.convergence_tol`` and returns the
    regularized transport cost ``<P, C>`` (no debiasing).
    """
    a = _cloud(a, "a")
    b = _cloud(b, "b")
    if a.shape[1] != b.shape[1]:
        raise InvalidArgumentError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    C = sq_euclidean_cost(a, b)
    res = _sinkhorn_scaling(C, cfg, cfg.relaxation)
    if res is None:
        res = _sinkhorn_scaling(C, cfg, 1.0)
    value, it, err = res
    converged = err < cfg.convergence_tol
    if not converged:
        warnings.warn(
            f"Sinkhorn did not reach tol {cfg.convergence_tol:g} in {it} iterations "
            f"(marginal error {err:.3g})",
            RuntimeWarning,
            stacklevel=2,
        )
    return SinkhornResult(value, it, converged, err, cfg)


def _sinkhorn_scaling(C, cfg, omega):
    """Returns ``(cost, iterations, marginal_error)``, or None if the relaxed iteration blew up."""
    n, m = C.shape
    eps = cfg.epsilon
    wa = np.full(n, 1.0 / n)
    wb = np.full(m, 1.0 / m)
    # one exact log-domain sweep puts the potentials in range before switching to scalings
    f = eps * (np.log(wa) - logsumexp(-C / eps, axis=1))
    g = eps * (np.log(wb) - logsumexp((f[:, None] - C) / eps, axis=0))

    def kernel():
        return np.exp((f[:, None] + g[None, :] - C) / eps)

    K = kernel()
    u = np.ones(n)
    v = np.ones(m)
    err = np.inf
    it = 0
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        while it < cfg.max_iters:
            it += 1
            if omega == 1.0:
                u = wa / (K @ v)
                v = wb / (K.T @ u)
            else:
                u = u ** (1.0 - omega) * (wa / (K @ v)) ** omega
                v = v ** (1.0 - omega) * (wb / (K.T @ u)) ** omega
            if it % 10 == 0 or it == cfg.max_iters:
                err = max(
                    float(np.max(np.abs(u * (K @ v) - wa))),
                    float(np.max(np.abs(v * (K.T @ u) - wb))),
                )
                if not np.isfinite(err):
                    return None
                if err < cfg.convergence_tol:
                    break
            lu, lv = np.log(u), np.log(v)
            if np.max(np.abs(lu)) > _ABSORB or np.max(np.abs(lv)) > _ABSORB:
                if not (np.all(np.isfinite(lu)) and np.all(np.isfinite(lv))):
                    return None
                f += eps * lu
                g += eps * lv
                K = kernel()
                u = np.ones(n)
                v = np.ones(m)
    return float(u @ ((K * C) @ v)), it, err


def sinkhorn_distance(a, b, cfg=SinkhornConfig()):
    return sinkhorn(a, b, cfg).value


def self_distance_baseline(reference, subset_size, repeats, cfg=SinkhornConfig(), rng=None):
    """Mean Sinkhorn distance between disjoint random halves-of-size ``subset_size``.

    Calibrates what "indistinguishable from the reference" looks like at a
    given sample size.
    """
    ref = _cloud(reference, "reference")
    if subset_size < 1 or 2 * subset_size > ref.shape[0]:
        raise InvalidArgumentError(
            f"need 2 * subset_size <= {ref.shape[0]} reference points, got subset_size={subset_size}"
        )
    rng = rng if rng is not None else np.random.default_rng(0)
    vals = []
    for _ in range(repeats):
        idx = rng.permutation(ref.shape[0])[: 2 * subset_size]
        vals.append(sinkhorn(ref[idx[:subset_size]], ref[idx[subset_size:]], cfg).value)
    return float(np.mean(vals))


def silverman_bandwidth(samples):
    s = np.asarray(samples, dtype=float).reshape(-1)
    if s.size < 2:
        return 0.0
    return 1.06 * float(np.std(s, ddof=1)) * s.size ** (-0.2)


def kde_1d(samples, eval_points, bandwidth="auto"):
    """Gaussian kernel density estimate. ``bandwidth='auto'`` uses Silverman's rule."""
    s = np.asarray(samples, dtype=float).reshape(-1)
    if s.size < 1:
        raise InvalidArgumentError("KDE needs at least one sample")
    x = np.asarray(eval_points, dtype=float)
    if bandwidth == "auto":
        h = silverman_bandwidth(s)
        if h <= 0.0:
            warnings.warn("degenerate samples, falling back to bandwidth 1e-3", RuntimeWarning, stacklevel=2)
            h = KDE_FALLBACK_BANDWIDTH
    else:
        h = float(bandwidth)
        if h <= 0:
            raise InvalidArgumentError("bandwidth must be positive")
    s = np.sort(s)  # fixed summation order regardless of input order
    out = np.empty(x.shape)
    flat = x.reshape(-1)
    res = out.reshape(-1)
    norm = 1.0 / (s.size * h * np.sqrt(2 * np.pi))
    for lo in range(0, flat.size, 256):
        u = (flat[lo:lo + 256, None] - s[None, :]) / h
        res[lo:lo + 256] = np.exp(-0.5 * u * u).sum(axis=1) * norm
    return out


def count_modes(density, rel_height=0.1):
    """Number of strict local maxima of a gridded density above ``rel_height * peak``."""
    p = np.asarray(density, dtype=float)
    if p.size < 3:
        return int(p.size > 0)
    inner = (p[1:-1] > p[:-2]) & (p[1:-1] >= p[2:])
    peaks = np.flatnonzero(inner) + 1
    return int(np.sum(p[peaks] >= rel_height * p.max()))


def ensemble_stats(samples):
    """Per-dimension mean and unbiased standard deviation."""
    s = np.asarray(samples, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[0] < 2:
        raise InvalidArgumentError("standard deviation needs at least two samples")
    return s.mean(axis=0), s.std(axis=0, ddof=1)


def rmse(a, b):
    a = np.asarray(a, dtype=float).reshape(-1)
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != b.shape:
        raise InvalidArgumentError(f"length mismatch: {a.size} vs {b.size}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def append_jsonl(path, record):
    """Append one metric record; keys sorted so identical runs give identical bytes."""
    with open(path, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
