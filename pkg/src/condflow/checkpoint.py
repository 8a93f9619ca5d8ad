"""Binary checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"CFMCKPT\\0"
    2 bytes   format version (uint16)
    4 bytes   header length H (uint32)
    H bytes   UTF-8 JSON header
    payload   float64 little-endian arrays, in the order listed in header["arrays"]

The header stores the MLP config, the parameter layout, the Adam
coefficients and step, the EMA decay, the iteration counter and the
bit-generator state, so a run can be resumed bit-exactly.
"""

import json
import struct

import numpy as np

from .errors import InvalidArgumentError
from .mlp import EmaState, MlpConfig, OptimState

MAGIC = b"CFMCKPT\x00"
VERSION = 1
_F8 = np.dtype("<f8")


def dumps(cfg, params, opt, ema, iteration, rng_state=None, meta=None):
    arrays = [("params", params), ("adam_m", opt.m), ("adam_v", opt.v), ("ema_shadow", ema.shadow)]
    header = {
        "version": VERSION,
        "mlp": cfg.to_dict(),
        "layout": [[name, list(shape)] for name, shape in cfg.layout()],
        "optim": {
            "step": opt.step,
            "lr": opt.lr,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
        },
        "ema_decay": ema.decay,
        "iteration": int(iteration),
        "rng_state": rng_state,
        "meta": meta or {},
        "arrays": [[name, int(np.size(a))] for name, a in arrays],
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", VERSION, len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(a, dtype=_F8).tobytes() for _, a in arrays]
    return b"".join(parts)


def loads(blob):
    """Inverse of :func:`dumps`. Returns a dict with typed entries."""
    if blob[:8] != MAGIC:
        raise InvalidArgumentError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<HI", blob[8:14])
    if version != VERSION:
        raise InvalidArgumentError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[14:14 + hlen].decode("utf-8"))
    pos = 14 + hlen
    arrays = {}
    for name, n in header["arrays"]:
        arrays[name] = np.frombuffer(blob, dtype=_F8, count=n, offset=pos).astype(float)
        pos += 8 * n
    if pos != len(blob):
        raise InvalidArgumentError("checkpoint payload length mismatch")
    cfg = MlpConfig(**header["mlp"])
    if arrays["params"].size != cfg.n_params:
        raise InvalidArgumentError("parameter count does not match the stored config")
    o = header["optim"]
    opt = OptimState(arrays["adam_m"], arrays["adam_v"], o["step"], o["lr"], o["beta1"], o["beta2"], o["eps"])
    return {
        "mlp": cfg,
        "params": arrays["params"],
        "opt": opt,
        "ema": EmaState(arrays["ema_shadow"], header["ema_decay"]),
        "iteration": header["iteration"],
        "rng_state": header["rng_state"],
        "meta": header["meta"],
    }


def save(path, *args, **kwargs):
    blob = dumps(*args, **kwargs)
    with open(path, "wb") as fh:
        fh.write(blob)


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
