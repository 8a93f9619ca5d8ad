"""Experiment configuration: a strict, flat-section INI file.

Every section and key is declared in ``SCHEMA``; anything else is rejected
with the offending key and its line. Only ``experiment.problem`` and
``experiment.seed`` are required, everything else falls back to per-problem
defaults (network and optimizer rows follow the published hyper-parameter
tables for the spiral and data-assimilation benchmarks).

Example::

    [experiment]
    problem = spiral
    seed = 3

    [train]
    max_iterations = 20000
"""

import configparser
import json
import re
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigError, InvalidArgumentError
from .metrics import SinkhornConfig
from .mlp import ACTIVATIONS
from .ode import SolverConfig
from .training import SOURCE_KINDS, TrainConfig

PROBLEMS = ("toy1d", "spiral", "lorenz_da", "external_csv")
SELECTIONS = ("ma_minimum", "ma_saturation", "fixed")


@dataclass(frozen=True)
class MlpSpec:
    """Network shape without the data dimensions (those come from the dataset)."""

    hidden_width: int = 32
    hidden_layers: int = 3
    activation: str = "relu"

    def __post_init__(self):
        if self.hidden_width < 1 or self.hidden_layers < 1:
            raise InvalidArgumentError("mlp width and depth must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"mlp.activation must be one of {ACTIVATIONS}")


@dataclass(frozen=True)
class DataSpec:
    n_train: int = 800
    n_test: int = 200
    pool_size: int = 100_000
    prior_pool_size: int = 20_000
    particles: int = 100_000
    da_steps: int = 3
    normalize: bool = True

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type is int and v < 1:
                raise InvalidArgumentError(f"data.{f.name} must be >= 1")


@dataclass(frozen=True)
class SampleSpec:
    y_hat: tuple = ()
    n_samples: int = 10_000
    band: float = 0.1
    baseline_repeats: int = 10
    sweep_points: int = 100
    sweep_samples: int = 200
    study_checkpoints: tuple = (1000, 3000, 15000, 50000)

    def __post_init__(self):
        if self.n_samples < 1:
            raise InvalidArgumentError("sample.n_samples must be >= 1")
        if self.band <= 0 or self.baseline_repeats < 1:
            raise InvalidArgumentError("sample.band and sample.baseline_repeats must be positive")


@dataclass(frozen=True)
class PathSpec:
    out_dir: str = "runs/experiment"
    train_csv: str = ""
    test_csv: str = ""
    reference_csv: str = ""
    prior_pool_csv: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    problem: str
    seed: int
    source: str = "gaussian"
    selection: str = "ma_saturation"
    selection_iteration: int = 0
    mlp: MlpSpec = field(default_factory=MlpSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    sinkhorn: SinkhornConfig = field(default_factory=SinkhornConfig)
    data: DataSpec = field(default_factory=DataSpec)
    sample: SampleSpec = field(default_factory=SampleSpec)
    paths: PathSpec = field(default_factory=PathSpec)

    def __post_init__(self):
        if self.problem not in PROBLEMS:
            raise InvalidArgumentError(f"experiment.problem must be one of {PROBLEMS}")
        if self.source not in SOURCE_KINDS:
            raise InvalidArgumentError(f"experiment.source must be one of {SOURCE_KINDS}")
        if self.selection not in SELECTIONS:
            raise InvalidArgumentError(f"experiment.selection must be one of {SELECTIONS}")
        if self.selection == "fixed" and self.selection_iteration < 1:
            raise InvalidArgumentError("fixed selection needs experiment.selection_iteration >= 1")
        if self.train.seed != self.seed:
            raise InvalidArgumentError("train seed must equal experiment seed")
        if self.problem == "external_csv" and not (self.paths.train_csv and self.paths.test_csv):
            raise InvalidArgumentError("external_csv needs paths.train_csv and paths.test_csv")

    def with_seed(self, seed):
        return replace(self, seed=int(seed), train=replace(self.train, seed=int(seed)))

    def with_out_dir(self, out_dir):
        return replace(self, paths=replace(self.paths, out_dir=str(out_dir)))

    def to_dict(self):
        return {sec: dict(vals) for sec, vals in _sections(self).items()}


# section -> key -> (type, target) where target is "attr" on the config or "sub.attr"
SCHEMA = {
    "experiment": {
        "problem": (str, "problem"),
        "seed": (int, "seed"),
        "source": (str, "source"),
        "selection": (str, "selection"),
        "selection_iteration": (int, "selection_iteration"),
    },
    "mlp": {k: (t, f"mlp.{k}") for k, t in (("hidden_width", int), ("hidden_layers", int), ("activation", str))},
    "train": {
        k: (t, f"train.{k}")
        for k, t in (
            ("lr", float), ("batch_size", int), ("max_iterations", int), ("ema_decay", float),
            ("test_eval_stride", int), ("ma_window", int), ("eval_weights", str),
            ("checkpoint_every", int), ("saturation_tol", float), ("saturation_span", int),
        )
    },
    "solver": {
        k: (t, f"solver.{k}") for k, t in (("rtol", float), ("atol", float), ("max_steps", int), ("h0", float))
    },
    "sinkhorn": {
        k: (t, f"sinkhorn.{k}")
        for k, t in (("epsilon", float), ("max_iters", int), ("convergence_tol", float), ("relaxation", float))
    },
    "data": {
        k: (t, f"data.{k}")
        for k, t in (
            ("n_train", int), ("n_test", int), ("pool_size", int), ("prior_pool_size", int),
            ("particles", int), ("da_steps", int), ("normalize", bool),
        )
    },
    "sample": {
        k: (t, f"sample.{k}")
        for k, t in (
            ("y_hat", "floats"), ("n_samples", int), ("band", float), ("baseline_repeats", int),
            ("sweep_points", int), ("sweep_samples", int), ("study_checkpoints", "ints"),
        )
    },
    "paths": {
        k: (str, f"paths.{k}") for k in ("out_dir", "train_csv", "test_csv", "reference_csv", "prior_pool_csv")
    },
}
REQUIRED = (("experiment", "problem"), ("experiment", "seed"))

# per-problem defaults applied before the file's own values
PROBLEM_DEFAULTS = {
    "toy1d": {
        "mlp.hidden_width": 32, "mlp.hidden_layers": 3, "mlp.activation": "swish",
        "train.lr": 3e-4, "train.batch_size": 100, "train.max_iterations": 50_000,
        "train.ema_decay": 0.998, "train.test_eval_stride": 10, "train.ma_window": 50,
        "train.checkpoint_every": 100,
        "data.n_train": 5, "data.n_test": 1000, "data.normalize": False,
        "sample.y_hat": (0.6,), "sample.n_samples": 2000,
        "selection": "ma_minimum",
    },
    "spiral": {
        "mlp.hidden_width": 32, "mlp.hidden_layers": 3, "mlp.activation": "relu",
        "train.lr": 1e-3, "train.batch_size": 1000, "train.max_iterations": 100_000,
        "train.ema_decay": 0.9999,
        "data.n_train": 800, "data.n_test": 200,
        "sample.y_hat": (-0.5, 0.0, 0.5, 1.0), "sample.n_samples": 10_000,
    },
    "lorenz_da": {
        "mlp.hidden_width": 256, "mlp.hidden_layers": 4, "mlp.activation": "relu",
        "train.lr": 1e-3, "train.batch_size": 500, "train.max_iterations": 100_000,
        "train.ema_decay": 0.9,
        "data.n_train": 1000, "data.n_test": 500,
        "sample.n_samples": 500,
    },
    "external_csv": {},
}


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _convert(kind, text):
    if kind is bool:
        return _bool(text)
    if kind == "floats":
        return tuple(float(v) for v in text.replace(",", " ").split())
    if kind == "ints":
        return tuple(int(v) for v in text.replace(",", " ").split())
    if kind is int:
        return int(text.strip())
    if kind is float:
        return float(text)
    return text.strip()


_KEY_RE = re.compile(r"^\s*([^\s=:#;\[][^=:]*?)\s*[=:]")
_SEC_RE = re.compile(r"^\s*\[([^\]]+)\]")


def _line_index(text):
    """``(section, key) -> line number`` (1-based) for locating errors."""
    where = {}
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        m = _SEC_RE.match(line)
        if m:
            section = m.group(1).strip()
            where[(section, None)] = n
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            where.setdefault((section, m.group(1).strip().lower()), n)
    return where


def build_config(values):
    """Assemble an :class:`ExperimentConfig` from ``{"attr" or "sub.attr": value}``."""
    problem = values.get("problem")
    merged = dict(PROBLEM_DEFAULTS.get(problem, {}))
    merged.update(values)
    top, sub = {}, {}
    for target, v in merged.items():
        if "." in target:
            s, a = target.split(".", 1)
            sub.setdefault(s, {})[a] = v
        else:
            top[target] = v
    seed = top.get("seed")
    sub.setdefault("train", {})["seed"] = seed
    kinds = {"mlp": MlpSpec, "train": TrainConfig, "solver": SolverConfig, "sinkhorn": SinkhornConfig,
             "data": DataSpec, "sample": SampleSpec, "paths": PathSpec}
    for s, cls in kinds.items():
        top[s] = cls(**sub.get(s, {}))
    return ExperimentConfig(**top)


def parses(text, source="<string>"):
    """Parse configuration text. Raises :class:`ConfigError` naming the key and line."""
    cp = configparser.ConfigParser(interpolation=None, strict=True, inline_comment_prefixes=("#", ";"))
    try:
        cp.read_string(text, source=source)
    except configparser.DuplicateOptionError as e:
        raise ConfigError("duplicate key", key=e.option, line=e.lineno) from None
    except configparser.DuplicateSectionError as e:
        raise ConfigError("duplicate section", key=e.section, line=e.lineno) from None
    except configparser.MissingSectionHeaderError as e:
        raise ConfigError("key outside any section", line=e.lineno) from None
    except configparser.ParsingError as e:
        line = e.errors[0][0] if e.errors else None
        raise ConfigError("unparseable line", line=line) from None
    where = _line_index(text)
    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError("unknown section", key=section, line=where.get((section, None)))
        for key, raw in cp.items(section):
            line = where.get((section, key))
            spec = SCHEMA[section].get(key)
            if spec is None:
                raise ConfigError(f"unknown key in [{section}]", key=key, line=line)
            kind, target = spec
            try:
                values[target] = _convert(kind, raw)
            except ValueError as e:
                raise ConfigError(f"bad value {raw!r}: {e}", key=f"{section}.{key}", line=line) from None
    for section, key in REQUIRED:
        if SCHEMA[section][key][1] not in values:
            raise ConfigError(f"missing required key in [{section}]", key=key)
    try:
        return build_config(values)
    except (InvalidArgumentError, TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def parse_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parses(text, source=str(path))


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _sections(cfg):
    out = {}
    for section, keys in SCHEMA.items():
        out[section] = {}
        for key, (_, target) in keys.items():
            obj = cfg
            for part in target.split("."):
                obj = getattr(obj, part)
            out[section][key] = obj
    return out


def dumps(cfg):
    """Serialize every effective value; ``parses(dumps(cfg)) == cfg``."""
    lines = []
    for section, vals in _sections(cfg).items():
        lines.append(f"[{section}]")
        lines += [f"{k} = {_fmt(v)}" for k, v in vals.items()]
        lines.append("")
    return "\n".join(lines)


def to_json(cfg):
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True, default=list)
