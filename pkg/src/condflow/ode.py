"""Adaptive Dormand-Prince 5(4) integration of probability-flow ODEs.

The core routine advances a whole batch of independent trajectories at
once; each row keeps its own time, step size and accept/reject decisions,
so a row's result does not depend on which other rows share the batch
(beyond round-off in the field's own batched arithmetic).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, NonConvergenceError, NumericError
from .interpolant import T_CAP

# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_E = _B5 - _B4

_SAFETY, _FAC_MIN, _FAC_MAX = 0.9, 0.2, 5.0


@dataclass(frozen=True)
class SolverConfig:
    rtol: float = 1e-3
    atol: float = 1e-6
    t_end: float = 1.0
    max_steps: int = 10_000
    h0: float = 1e-2
    final_hop: bool = False
    fixed_step: float | None = None

    def __post_init__(self):
        if not (self.rtol > 0 and self.atol > 0):
            raise InvalidArgumentError("rtol and atol must be positive")
        if not 0.0 < self.t_end <= 1.0:
            raise InvalidArgumentError("t_end must lie in (0, 1]")
        if self.max_steps < 1 or self.h0 <= 0:
            raise InvalidArgumentError("max_steps and h0 must be positive")
        if self.fixed_step is not None and self.fixed_step <= 0:
            raise InvalidArgumentError("fixed_step must be positive")

    @classmethod
    def singular(cls, **kw):
        """Stop at the singular-field cap and finish with an analytic Euler hop."""
        return cls(t_end=T_CAP, final_hop=True, **kw)


@dataclass
class OdeSolveResult:
    x_final: np.ndarray
    n_steps: int
    path_length: float
    rejected_steps: int
    t_final: float = 1.0


@dataclass
class BatchSolveResult:
    x_final: np.ndarray
    n_steps: np.ndarray
    path_length: np.ndarray
    rejected_steps: np.ndarray
    t_final: np.ndarray
    converged: np.ndarray = field(repr=False)

    def __len__(self):
        return self.x_final.shape[0]

    def row(self, i):
        return OdeSolveResult(
            self.x_final[i].copy(), int(self.n_steps[i]), float(self.path_length[i]),
            int(self.rejected_steps[i]), float(self.t_final[i]),
        )


def _eval(field_fn, x, t):
    v = np.asarray(field_fn(x, t), dtype=float)
    if v.shape != x.shape:
        raise NumericError(f"field returned shape {v.shape}, expected {x.shape}")
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite velocity encountered during integration")
    return v


def _dp_stages(field_fn, x, t, h):
    hc = h[:, None]
    k = [_eval(field_fn, x, t)]
    for s in range(1, 7):
        xs = x.copy()
        for j, a in enumerate(_A[s]):
            if a != 0.0:
                xs += hc * a * k[j]
        k.append(_eval(field_fn, xs, t + _C[s] * h))
    K = np.stack(k)
    x5 = x + hc * np.tensordot(_B5, K, axes=1)
    err = hc * np.tensordot(_E, K, axes=1)
    return x5, err


def integrate_batch(field_fn, x0, cfg=SolverConfig(), row_index=False):
    """Integrate ``dx/dt = field_fn(x, t)`` from t = 0 to ``cfg.t_end`` for every row of ``x0``.

    ``field_fn`` receives a ``(m, d)`` state block and a ``(m,)`` vector of
    times; with ``row_index=True`` it also receives the ``(m,)`` original
    row numbers, so the field may differ per row. Rows that exhaust
    ``cfg.max_steps`` are flagged in ``converged`` and keep their partial
    state.
    """
    x = np.array(x0, dtype=float, ndmin=2)
    n, d = x.shape
    t = np.zeros(n)
    h = np.full(n, cfg.fixed_step if cfg.fixed_step else min(cfg.h0, cfg.t_end))
    steps = np.zeros(n, dtype=int)
    rej = np.zeros(n, dtype=int)
    path = np.zeros(n)
    active = np.ones(n, dtype=bool)
    failed = np.zeros(n, dtype=bool)
    t_end = cfg.t_end
    while active.any():
        idx = np.flatnonzero(active)
        ti, xi = t[idx], x[idx]
        remaining = t_end - ti
        hi = np.minimum(h[idx], remaining)
        last = hi >= remaining * (1.0 - 1e-12)
        hi = np.where(last, remaining, hi)
        fn = (lambda xs, ts, _i=idx: field_fn(xs, ts, _i)) if row_index else field_fn
        x5, err = _dp_stages(fn, xi, ti, hi)
        if cfg.fixed_step:
            ok = np.ones(idx.size, dtype=bool)
            h_next = h[idx]
        else:
            scale = cfg.atol + cfg.rtol * np.maximum(np.abs(xi), np.abs(x5))
            en = np.sqrt(np.mean((err / scale) ** 2, axis=1))
            ok = en <= 1.0
            with np.errstate(divide="ignore"):
                fac = _SAFETY * np.where(en > 0, en, 1e-300) ** -0.2
            fac = np.clip(fac, _FAC_MIN, _FAC_MAX)
            fac = np.where(ok, fac, np.minimum(fac, 1.0))
            h_next = hi * fac
        acc = idx[ok]
        path[acc] += np.linalg.norm(x5[ok] - xi[ok], axis=1)
        x[acc] = x5[ok]
        t[acc] = np.where(last[ok], t_end, ti[ok] + hi[ok])
        steps[acc] += 1
        rej[idx[~ok]] += 1
        h[idx] = h_next
        done = acc[last[ok]]
        active[done] = False
        tiny = idx[~ok][h_next[~ok] < 1e-14]
        over = np.flatnonzero(active & (steps >= cfg.max_steps))
        for bad in (tiny, over):
            failed[bad] = True
            active[bad] = False
    conv = ~failed
    if cfg.final_hop and t_end < 1.0 and conv.any():
        ci = np.flatnonzero(conv)
        fn = (lambda xs, ts: field_fn(xs, ts, ci)) if row_index else field_fn
        v = _eval(fn, x[ci], t[ci])
        dx = (1.0 - t[ci])[:, None] * v
        x[ci] += dx
        path[ci] += np.linalg.norm(dx, axis=1)
        t[ci] = 1.0
    return BatchSolveResult(x, steps, path, rej, t, conv)


def rk45_integrate(field_fn, x0, cfg=SolverConfig()):
    """Single-trajectory solve. ``field_fn(x, t)`` takes a 1-D state and a float time.

    Raises :class:`NonConvergenceError` (with the partial result attached)
    when the step budget runs out.
    """
    x0 = np.asarray(x0, dtype=float).reshape(-1)

    def batched(xb, tb):
        return np.stack([np.asarray(field_fn(xr, float(tr)), dtype=float).reshape(-1) for xr, tr in zip(xb, tb)])

    res = integrate_batch(batched, x0[None, :], cfg)
    out = res.row(0)
    if not res.converged[0]:
        raise NonConvergenceError(
            f"integration stopped at t={out.t_final:.6g} after {out.n_steps} accepted and "
            f"{out.rejected_steps} rejected steps",
            partial=out,
        )
    return out
