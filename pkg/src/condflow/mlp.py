"""Multilayer-perceptron velocity field with hand-written reverse-mode gradients.

Parameters live in one flat float64 vector. The layout is the concatenation,
layer by layer, of the weight matrix (``fan_in x fan_out``, row-major)
followed by the bias vector. Hidden layers use the configured activation;
the output layer is linear.
"""

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import InvalidArgumentError, NumericError

N_TIME_FEATURES = 4
ACTIVATIONS = ("relu", "swish")


@dataclass(frozen=True)
class MlpConfig:
    dim_x: int
    dim_y: int
    hidden_width: int = 32
    hidden_layers: int = 3
    activation: str = "relu"

    def __post_init__(self):
        for name in ("dim_x", "dim_y", "hidden_width", "hidden_layers"):
            if int(getattr(self, name)) < 1:
                raise InvalidArgumentError(f"{name} must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"activation must be one of {ACTIVATIONS}")

    @property
    def input_dim(self):
        return self.dim_x + self.dim_y + N_TIME_FEATURES

    @property
    def output_dim(self):
        return self.dim_x

    def layer_sizes(self):
        return [self.input_dim] + [self.hidden_width] * self.hidden_layers + [self.output_dim]

    def layout(self):
        """Ordered ``(name, shape)`` segments of the flat parameter vector."""
        return self._layout

    @cached_property
    def _layout(self):
        sizes = self.layer_sizes()
        segs = []
        for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            segs.append((f"W{k}", (fan_in, fan_out)))
            segs.append((f"b{k}", (fan_out,)))
        return segs

    @cached_property
    def n_params(self):
        return sum(int(np.prod(shape)) for _, shape in self.layout())

    def to_dict(self):
        return {
            "dim_x": self.dim_x,
            "dim_y": self.dim_y,
            "hidden_width": self.hidden_width,
            "hidden_layers": self.hidden_layers,
            "activation": self.activation,
        }


def unflatten(params, cfg):
    """Views ``[(W0, b0), (W1, b1), ...]`` into the flat vector (no copy)."""
    params = np.asarray(params)
    if params.shape != (cfg.n_params,):
        raise InvalidArgumentError(f"expected {cfg.n_params} parameters, got {params.shape}")
    layers = []
    pos = 0
    segs = cfg.layout()
    for (_, wshape), (_, bshape) in zip(segs[0::2], segs[1::2]):
        nw = wshape[0] * wshape[1]
        W = params[pos:pos + nw].reshape(wshape)
        pos += nw
        b = params[pos:pos + bshape[0]]
        pos += bshape[0]
        layers.append((W, b))
    return layers


def init_params(cfg, rng):
    """Kaiming-uniform weights (fan-in, ReLU gain) and zero biases."""
    params = np.zeros(cfg.n_params)
    for W, _ in unflatten(params, cfg):
        bound = np.sqrt(6.0 / W.shape[0])
        W[...] = rng.uniform(-bound, bound, size=W.shape)
    return params


def time_features(t):
    """Fourier features ``[t - 0.5, cos 2 pi t, sin 2 pi t, -cos 4 pi t]``.

    Scalar ``t`` gives shape ``(4,)``; an array of times gives ``(n, 4)``.
    """
    t = np.asarray(t, dtype=float)
    return np.stack(
        [t - 0.5, np.cos(2 * np.pi * t), np.sin(2 * np.pi * t), -np.cos(4 * np.pi * t)],
        axis=-1,
    )


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def relu(a):
    return np.maximum(a, 0.0)


def swish(a):
    return a * _sigmoid(a)


def _act(a, kind):
    return relu(a) if kind == "relu" else swish(a)


def _act_grad(a, kind):
    if kind == "relu":
        return (a > 0.0).astype(float)
    s = _sigmoid(a)
    return s + a * s * (1.0 - s)


def _inputs(cfg, xi, y, t):
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    xi = np.atleast_2d(xi)
    n = xi.shape[0]
    y = np.asarray(y, dtype=float)
    if y.ndim <= 1:
        y = y.reshape(1, -1)
    if xi.shape[1] != cfg.dim_x:
        raise InvalidArgumentError(f"state dim {xi.shape[1]} != config dim_x {cfg.dim_x}")
    if y.shape[1] != cfg.dim_y or y.shape[0] not in (1, n):
        raise InvalidArgumentError(f"condition shape {y.shape} incompatible with dim_y {cfg.dim_y}")
    y = np.broadcast_to(y, (n, cfg.dim_y))
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    return np.concatenate([xi, y, time_features(t)], axis=1), single


def _forward_cache(layers, h, kind):
    pre = []
    acts = [h]
    for W, b in layers[:-1]:
        a = h @ W + b
        h = _act(a, kind)
        pre.append(a)
        acts.append(h)
    W, b = layers[-1]
    return h @ W + b, pre, acts


def forward(params, cfg, xi, y, t):
    """Evaluate the velocity on ``[xi | y | time_features(t)]``.

    ``xi`` may be ``(d,)`` or ``(n, d)``; ``y`` and ``t`` broadcast over rows.
    """
    h, single = _inputs(cfg, xi, y, t)
    out, _, _ = _forward_cache(unflatten(params, cfg), h, cfg.activation)
    return out[0] if single else out


def loss_and_grad(params, cfg, z, x, y, t):
    """Mean squared flow-matching residual and its gradient w.r.t. ``params``.

    loss = mean_b | v(I_t(z_b, x_b), y_b, t_b) - (x_b - z_b) |^2
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(x.shape[0], -1)
    t = np.asarray(t, dtype=float).reshape(-1)
    B = x.shape[0]
    if B < 1 or z.shape != x.shape or y.shape[0] != B or t.shape[0] != B:
        raise InvalidArgumentError(
            f"inconsistent batch shapes z{z.shape} x{x.shape} y{y.shape} t{t.shape}"
        )
    if y.shape[1] != cfg.dim_y:
        raise InvalidArgumentError(f"condition dim {y.shape[1]} != config dim_y {cfg.dim_y}")
    for name, arr in (("z", z), ("x", x), ("y", y), ("t", t)):
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in batch array {name!r}")

    xt = (1.0 - t)[:, None] * z + t[:, None] * x
    h0, _ = _inputs(cfg, xt, y, t)
    layers = unflatten(params, cfg)
    out, pre, acts = _forward_cache(layers, h0, cfg.activation)
    resid = out - (x - z)
    loss = float(np.sum(resid * resid) / B)

    grad = np.empty_like(params)
    glayers = unflatten(grad, cfg)
    delta = (2.0 / B) * resid
    for k in range(len(layers) - 1, -1, -1):
        gW, gb = glayers[k]
        gW[...] = acts[k].T @ delta
        gb[...] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ layers[k][0].T) * _act_grad(pre[k - 1], cfg.activation)
    return loss, grad


def batch_loss(params, cfg, z, x, y, t):
    """Loss only, without the backward pass."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t = np.asarray(t, dtype=float).reshape(-1)
    xt = (1.0 - t)[:, None] * z + t[:, None] * x
    out = forward(params, cfg, xt, np.asarray(y).reshape(x.shape[0], -1), t)
    r = out - (x - z)
    return float(np.sum(r * r) / x.shape[0])


@dataclass
class OptimState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, lr=1e-3, **kw):
        return cls(np.zeros(n), np.zeros(n), 0, lr, **kw)


def adam_step(params, opt, grad):
    """One bias-corrected Adam update. Returns new ``(params, opt)``."""
    grad = np.asarray(grad, dtype=float)
    if grad.shape != params.shape or opt.m.shape != params.shape:
        raise InvalidArgumentError("parameter, gradient and moment lengths differ")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient")
    step = opt.step + 1
    m = opt.beta1 * opt.m + (1.0 - opt.beta1) * grad
    v = opt.beta2 * opt.v + (1.0 - opt.beta2) * grad * grad
    m_hat = m / (1.0 - opt.beta1**step)
    v_hat = v / (1.0 - opt.beta2**step)
    new_params = params - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return new_params, replace(opt, m=m, v=v, step=step)


@dataclass
class EmaState:
    shadow: np.ndarray
    decay: float = 0.9999

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise InvalidArgumentError(f"EMA decay must lie in (0, 1), got {self.decay}")


def ema_update(ema, params):
    if params.shape != ema.shadow.shape:
        raise InvalidArgumentError("EMA shadow and parameter lengths differ")
    return EmaState(ema.decay * ema.shadow + (1.0 - ema.decay) * params, ema.decay)


def ema_average(ema, n_updates):
    """Bias-corrected average of a zero-started shadow after ``n_updates`` updates.

    Dividing by ``1 - decay^n`` leaves a weighted mean of the trained iterates
    only, so a slow decay (0.9999) does not drag early checkpoints back toward
    the starting point.
    """
    if n_updates < 1:
        raise InvalidArgumentError("bias-corrected EMA needs at least one update")
    return ema.shadow / -np.expm1(n_updates * np.log(ema.decay))


@dataclass
class VelocityModel:
    """A configured MLP bound to one parameter vector."""

    cfg: MlpConfig
    params: np.ndarray = field(repr=False)

    def __call__(self, xi, y, t):
        return forward(self.params, self.cfg, xi, y, t)

    def field(self, y):
        """Batched field ``v(x, t)`` for a fixed (normalized) condition ``y``."""
        y = np.asarray(y, dtype=float).reshape(1, self.cfg.dim_y)

        def v(x, t):
            return forward(self.params, self.cfg, x, y, t)

        return v
