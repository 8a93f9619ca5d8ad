"""Datasets, normalization, source sampling and the flow-matching training loop."""

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, NotFoundError, NumericError
from .mlp import EmaState, OptimState, adam_step, batch_loss, ema_average, ema_update, init_params, loss_and_grad

log = logging.getLogger(__name__)

SOURCE_KINDS = ("gaussian", "prior_scrambled")


@dataclass
class PairedDataset:
    x: np.ndarray
    y: np.ndarray
    split: str = "train"

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if y.ndim == 1:
            y = y[:, None]
        if x.shape[0] != y.shape[0]:
            raise InvalidArgumentError(f"x has {x.shape[0]} rows, y has {y.shape[0]}")
        if x.shape[0] < 1:
            raise InvalidArgumentError("dataset is empty")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise InvalidArgumentError("dataset contains non-finite entries")
        self.x, self.y = x, y

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim_x(self):
        return self.x.shape[1]

    @property
    def dim_y(self):
        return self.y.shape[1]


class _MinMax:
    def __init__(self, lo, hi):
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.const = self.hi == self.lo
        self._half = np.where(self.const, 1.0, 0.5 * (self.hi - self.lo))
        self._mid = 0.5 * (self.hi + self.lo)

    def apply(self, v):
        out = (np.asarray(v, dtype=float) - self._mid) / self._half
        return np.where(self.const, 0.0, out)

    def invert(self, u):
        out = np.asarray(u, dtype=float) * self._half + self._mid
        return np.where(self.const, self.lo, out)


class Normalizer:
    """Per-dimension affine map of the training range onto [-1, 1].

    A dimension with zero range maps to 0 and inverts to its constant value;
    such dimensions are listed in ``warnings``.
    """

    def __init__(self, x_min, x_max, y_min, y_max):
        self.x = _MinMax(x_min, x_max)
        self.y = _MinMax(y_min, y_max)
        self.warnings = [f"x[{i}] is constant" for i in np.flatnonzero(self.x.const)]
        self.warnings += [f"y[{i}] is constant" for i in np.flatnonzero(self.y.const)]

    @classmethod
    def fit(cls, train):
        n = cls(train.x.min(0), train.x.max(0), train.y.min(0), train.y.max(0))
        for w in n.warnings:
            log.warning("normalizer: %s", w)
        return n

    @classmethod
    def identity(cls, dim_x, dim_y):
        """No-op map (used when a study trains on raw coordinates)."""
        return cls(-np.ones(dim_x), np.ones(dim_x), -np.ones(dim_y), np.ones(dim_y))

    def apply_x(self, v):
        return self.x.apply(v)

    def invert_x(self, u):
        return self.x.invert(u)

    def apply_y(self, v):
        return self.y.apply(v)

    def invert_y(self, u):
        return self.y.invert(u)

    def apply(self, ds):
        return PairedDataset(self.apply_x(ds.x), self.apply_y(ds.y), ds.split)

    def to_dict(self):
        return {
            "x_min": self.x.lo.tolist(),
            "x_max": self.x.hi.tolist(),
            "y_min": self.y.lo.tolist(),
            "y_max": self.y.hi.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["x_min"], d["x_max"], d["y_min"], d["y_max"])


def normalizer_fit(train):
    return Normalizer.fit(train)


def sample_source_batch(kind, batch_x, rng):
    """Initial states for one minibatch.

    ``gaussian`` draws i.i.d. standard normal rows; ``prior_scrambled``
    cyclically shifts the minibatch's own ``x`` rows by one position so no
    row is paired with itself.
    """
    batch_x = np.asarray(batch_x, dtype=float)
    if kind == "gaussian":
        return rng.standard_normal(batch_x.shape)
    if kind == "prior_scrambled":
        if batch_x.shape[0] < 2:
            raise InvalidArgumentError("prior_scrambled source needs a batch of at least 2 rows")
        return np.roll(batch_x, -1, axis=0)
    raise InvalidArgumentError(f"unknown source kind {kind!r}")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 1000
    max_iterations: int = 100_000
    ema_decay: float = 0.9999
    test_eval_stride: int = 100
    ma_window: int = 500
    seed: int = 0
    eval_weights: str = "ema"
    checkpoint_every: int = 1000
    saturation_tol: float = 1e-3
    saturation_span: int = 10

    def __post_init__(self):
        for name in ("lr", "batch_size", "max_iterations", "test_eval_stride", "ma_window", "checkpoint_every"):
            if not getattr(self, name) > 0:
                raise InvalidArgumentError(f"train.{name} must be positive")
        if not 0.0 < self.ema_decay < 1.0:
            raise InvalidArgumentError("train.ema_decay must lie in (0, 1)")
        if self.eval_weights not in ("ema", "raw"):
            raise InvalidArgumentError("train.eval_weights must be 'ema' or 'raw'")
        if self.checkpoint_every % self.test_eval_stride:
            raise InvalidArgumentError("train.checkpoint_every must be a multiple of test_eval_stride")


@dataclass
class TrainState:
    params: np.ndarray
    opt: OptimState
    ema: EmaState
    iteration: int
    rng: np.random.Generator

    @classmethod
    def fresh(cls, mlp, cfg):
        rng = np.random.default_rng(cfg.seed)
        params = init_params(mlp, rng)
        # zero-started shadow, read out with bias correction (see ema_average)
        ema = EmaState(np.zeros_like(params), cfg.ema_decay)
        return cls(params, OptimState.zeros(mlp.n_params, lr=cfg.lr), ema, 0, rng)

    def eval_params(self, which="ema"):
        if which == "raw" or self.iteration == 0:
            return self.params
        return ema_average(self.ema, self.iteration)


@dataclass
class LossHistory:
    train_loss: list = field(default_factory=list)
    eval_iterations: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    ma_window: int = 500

    @property
    def test_loss_ma(self):
        return moving_average(self.test_loss, self.ma_window)

    def truncate(self, iteration):
        """Drop everything recorded after ``iteration`` (used when resuming)."""
        self.train_loss = self.train_loss[:iteration]
        keep = [k for k, it in enumerate(self.eval_iterations) if it <= iteration]
        self.eval_iterations = [self.eval_iterations[k] for k in keep]
        self.test_loss = [self.test_loss[k] for k in keep]

    def rows(self):
        """``(iteration, train_loss, test_loss, test_loss_ma)``; test fields empty off-stride."""
        ma = self.test_loss_ma
        at = {it: k for k, it in enumerate(self.eval_iterations)}
        for i, tl in enumerate(self.train_loss, start=1):
            k = at.get(i)
            if k is None:
                yield i, tl, None, None
            else:
                yield i, tl, self.test_loss[k], float(ma[k])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "train_loss", "test_loss", "test_loss_ma"])
            for it, tr, te, ma in self.rows():
                w.writerow([it, repr(tr), "" if te is None else repr(te), "" if ma is None else repr(ma)])

    @classmethod
    def read_csv(cls, path, ma_window=500):
        h = cls(ma_window=ma_window)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                h.train_loss.append(float(row["train_loss"]))
                if row["test_loss"]:
                    h.eval_iterations.append(int(row["iteration"]))
                    h.test_loss.append(float(row["test_loss"]))
        return h


def moving_average(series, window):
    """Trailing mean over the last ``min(window, k + 1)`` entries at each position ``k``."""
    if window < 1:
        raise InvalidArgumentError("window must be >= 1")
    s = np.asarray(series, dtype=float)
    if s.size == 0:
        return s
    c = np.concatenate([[0.0], np.cumsum(s)])
    k = np.arange(1, s.size + 1)
    lo = np.maximum(k - window, 0)
    return (c[k] - c[lo]) / (k - lo)


def select_checkpoint(history, strategy="ma_minimum", iteration=None, available=None, tol=1e-3, span=10):
    """Pick a training iteration from the test-loss history.

    ``ma_minimum``: argmin of the moving-average test loss.
    ``ma_saturation``: first evaluation where the relative MA decrease over
    the trailing ``span`` evaluations drops below ``tol`` (last one if never).
    ``fixed``: ``iteration`` itself, which must be in ``available`` when given.

    When ``available`` (stored checkpoint iterations) is given, the result is
    snapped to the nearest stored checkpoint.
    """
    if strategy == "fixed":
        if iteration is None:
            raise InvalidArgumentError("fixed strategy needs an iteration")
        if available is not None and iteration not in set(available):
            raise NotFoundError(f"no stored checkpoint at iteration {iteration}")
        return int(iteration)
    if not history.eval_iterations:
        raise InvalidArgumentError("loss history has no test evaluations")
    ma = history.test_loss_ma
    its = np.asarray(history.eval_iterations)
    if strategy == "ma_minimum":
        it = int(its[int(np.argmin(ma))])
    elif strategy == "ma_saturation":
        it = int(its[-1])
        for k in range(span, ma.size):
            prev = ma[k - span]
            if prev != 0.0 and (prev - ma[k]) / abs(prev) < tol:
                it = int(its[k])
                break
    else:
        raise InvalidArgumentError(f"unknown selection strategy {strategy!r}")
    if available is not None:
        avail = np.asarray(sorted(available))
        if avail.size == 0:
            raise NotFoundError("no stored checkpoints")
        it = int(avail[int(np.argmin(np.abs(avail - it)))])
    return it


def _test_loss(params, mlp, test, kind, seed):
    # One fixed (z, t) draw per run (common random numbers): successive
    # evaluations differ only through the weights, which keeps the moving
    # average smooth, and the draw never touches the training stream.
    rng = np.random.default_rng([seed, 7])
    n = len(test)
    if kind == "prior_scrambled" and n >= 2:
        z = np.roll(test.x, -1, axis=0)
    else:
        z = rng.standard_normal(test.x.shape)
    t = rng.random(n)
    return batch_loss(params, mlp, z, test.x, test.y, t)


def train_cfm(train, test, cfg, mlp, kind, state=None, history=None, callback=None):
    """Minimize the conditional flow-matching loss by minibatch Adam.

    Every iteration draws a minibatch of joint pairs uniformly with
    replacement, fresh source states and one ``t ~ U(0, 1)`` per row, then
    takes one Adam step and updates the EMA shadow. Every
    ``cfg.test_eval_stride`` iterations the test loss over the whole test
    split is recorded with the ``cfg.eval_weights`` parameters.

    ``callback(state, history)`` is called after every test evaluation; a
    previously saved ``state`` and ``history`` resume the run.
    """
    if kind not in SOURCE_KINDS:
        raise InvalidArgumentError(f"unknown source kind {kind!r}")
    if train.dim_x != mlp.dim_x or train.dim_y != mlp.dim_y:
        raise InvalidArgumentError("dataset dimensions do not match the network config")
    state = state or TrainState.fresh(mlp, cfg)
    history = history or LossHistory(ma_window=cfg.ma_window)
    rng = state.rng
    n = len(train)
    B = cfg.batch_size
    while state.iteration < cfg.max_iterations:
        idx = rng.integers(0, n, size=B)
        xb, yb = train.x[idx], train.y[idx]
        zb = sample_source_batch(kind, xb, rng)
        tb = rng.random(B)
        loss, grad = loss_and_grad(state.params, mlp, zb, xb, yb, tb)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite training loss at iteration {state.iteration + 1}")
        state.params, state.opt = adam_step(state.params, state.opt, grad)
        state.ema = ema_update(state.ema, state.params)
        state.iteration += 1
        history.train_loss.append(loss)
        if state.iteration % cfg.test_eval_stride == 0:
            tl = _test_loss(state.eval_params(cfg.eval_weights), mlp, test, kind, cfg.seed)
            if not np.isfinite(tl):
                raise NumericError(f"non-finite test loss at iteration {state.iteration}")
            history.eval_iterations.append(state.iteration)
            history.test_loss.append(tl)
            if callback is not None:
                callback(state, history)
    return state, history
