"""Experiment orchestration: generate -> train -> sample -> evaluate, plus the
overfitting study and a summary report.

One experiment lives in one output directory::

    <out>/config.ini, config.json   effective configuration
    <out>/manifest.json             produced files with sha256 checksums
    <out>/data/                     train/test pairs, pools, references, meta.json
    <out>/train/                    loss.csv, normalizer.json, selection.json, checkpoints/
    <out>/samples/                  ensemble_<k>.csv + .json per conditioning value
    <out>/eval/                     metrics.jsonl, kde_<k>.csv
    <out>/study/                    overfitting-study CSVs and report.json

A lock file keeps two processes from writing the same directory.
"""

import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from . import checkpoint as ckpt
from . import config as config_mod
from .errors import CondFlowError, EmptyResultError, InvalidArgumentError, NotFoundError
from .metrics import (
    count_modes,
    kde_1d,
    self_distance_baseline,
    sinkhorn,
)
from .mlp import MlpConfig, VelocityModel, ema_average
from .problems import (
    Lorenz63Spec,
    SpiralSpec,
    Toy1dSpec,
    build_da_problem,
    spiral_generate,
    spiral_reference_conditional,
    toy1d_generate,
    toy1d_posterior_pdf,
)
from .sampling import read_ensemble_csv, sample_posterior, sample_posterior_sweep
from .training import (
    LossHistory,
    Normalizer,
    PairedDataset,
    TrainState,
    select_checkpoint,
    train_cfm,
)

log = logging.getLogger(__name__)

# sub-stream tags for np.random.default_rng([seed, tag, ...])
_DATA, _PRIOR_POOL, _SAMPLE, _BASELINE, _SWEEP = 1, 3, 4, 5, 6


class LockedError(CondFlowError, OSError):
    """Another process owns the experiment directory."""


@contextmanager
def run_lock(out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / ".lock"
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"{out_dir} is locked by another run (remove {path} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        path.unlink(missing_ok=True)


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Config snapshot, input hash, timestamps and a checksum for every produced file."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.path = self.out_dir / "manifest.json"
        if self.path.exists():
            self.data = json.loads(self.path.read_text())
        else:
            self.data = {"files": {}, "stages": []}

    def record(self, stage, cfg, produced, inputs=(), partial=False):
        for p in produced:
            rel = str(Path(p).relative_to(self.out_dir))
            self.data["files"][rel] = sha256_file(p)
        h = hashlib.sha256(config_mod.dumps(cfg).encode())
        for p in sorted(str(x) for x in inputs):
            h.update(p.encode())
            h.update(sha256_file(p).encode())
        self.data["config"] = cfg.to_dict()
        self.data["stages"].append(
            {"stage": stage, "input_hash": h.hexdigest(), "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
             "partial": partial}
        )
        # drop entries for files that no longer exist (pruned checkpoints)
        self.data["files"] = {k: v for k, v in sorted(self.data["files"].items()) if (self.out_dir / k).exists()}
        self.path.write_text(json.dumps(self.data, indent=2, sort_keys=True, default=list))

    def verify(self):
        """Paths whose checksum no longer matches (empty when intact)."""
        return [k for k, v in self.data["files"].items() if sha256_file(self.out_dir / k) != v]


# ---------------------------------------------------------------- file helpers

def write_pairs(path, ds):
    header = ",".join([f"x{k}" for k in range(ds.dim_x)] + [f"y{k}" for k in range(ds.dim_y)])
    np.savetxt(path, np.hstack([ds.x, ds.y]), delimiter=",", header=header, comments="", fmt="%.17g")


def read_pairs(path, split="train"):
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"dataset file not found: {path}")
    with open(path) as fh:
        cols = fh.readline().strip().split(",")
    dx = sum(c.startswith("x") for c in cols)
    dy = sum(c.startswith("y") for c in cols)
    if dx < 1 or dy < 1 or dx + dy != len(cols):
        raise InvalidArgumentError(f"{path}: header must be x0..,y0.. columns, got {cols}")
    a = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return PairedDataset(a[:, :dx], a[:, dx:], split)


def write_matrix(path, a, prefix="x"):
    a = np.asarray(a, dtype=float)
    a = a[:, None] if a.ndim == 1 else a
    header = ",".join(f"{prefix}{k}" for k in range(a.shape[1]))
    np.savetxt(path, a, delimiter=",", header=header, comments="", fmt="%.17g")


def read_matrix(path):
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"file not found: {path}")
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=list) + "\n")


def _ckpt_name(iteration):
    return f"ckpt_{iteration:08d}.cfm"


class Experiment:
    """Paths and stage implementations for one configured run."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg.paths.out_dir)
        self.data_dir = self.out / "data"
        self.train_dir = self.out / "train"
        self.ckpt_dir = self.train_dir / "checkpoints"
        self.sample_dir = self.out / "samples"
        self.eval_dir = self.out / "eval"
        self.study_dir = self.out / "study"

    def _stream(self, *tags):
        return np.random.default_rng([self.cfg.seed, *tags])

    def write_config(self):
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / "config.ini").write_text(config_mod.dumps(self.cfg))
        (self.out / "config.json").write_text(config_mod.to_json(self.cfg) + "\n")
        return [self.out / "config.ini", self.out / "config.json"]

    def _finish(self, stage, produced, inputs=(), partial=False):
        produced = list(produced) + self.write_config()
        RunManifest(self.out).record(stage, self.cfg, produced, inputs, partial)

    # ------------------------------------------------------------ generate

    def generate(self):
        cfg, d = self.cfg, self.cfg.data
        self.data_dir.mkdir(parents=True, exist_ok=True)
        rng = self._stream(_DATA)
        meta = {"problem": cfg.problem, "seed": cfg.seed}
        produced = []

        def put(name, ds):
            write_pairs(self.data_dir / name, ds)
            produced.append(self.data_dir / name)

        def put_matrix(name, a):
            write_matrix(self.data_dir / name, a)
            produced.append(self.data_dir / name)

        if cfg.problem == "toy1d":
            spec = Toy1dSpec()
            put("train.csv", toy1d_generate(d.n_train, rng, spec, "train"))
            put("test.csv", toy1d_generate(d.n_test, rng, spec, "test"))
            meta["spec"] = vars(spec)
        elif cfg.problem == "spiral":
            spec = SpiralSpec()
            put("train.csv", spiral_generate(d.n_train, rng, spec, "train"))
            put("test.csv", spiral_generate(d.n_test, rng, spec, "test"))
            put("pool.csv", spiral_generate(d.pool_size, rng, spec, "test"))
            put_matrix("prior_pool.csv", spiral_generate(d.prior_pool_size, self._stream(_PRIOR_POOL), spec).x)
            meta["spec"] = vars(spec)
        elif cfg.problem == "lorenz_da":
            spec = Lorenz63Spec()
            da = build_da_problem(spec, rng, P=d.particles, n_steps=d.da_steps, n_train=d.n_train, n_test=d.n_test)
            put("train.csv", da.train)
            put("test.csv", da.test)
            put_matrix("reference.csv", da.reference_posterior)
            put_matrix("prior_pool.csv", da.prior_pool)
            meta.update(
                spec={k: list(v) if isinstance(v, tuple) else v for k, v in vars(spec).items()},
                y_hat=[da.y_hat],
                truth=da.truth.tolist(),
                observations=da.observations.tolist(),
                **da.meta,
            )
        else:
            p = cfg.paths
            train = read_pairs(p.train_csv, "train")
            test = read_pairs(p.test_csv, "test")
            if (train.dim_x, train.dim_y) != (test.dim_x, test.dim_y):
                raise InvalidArgumentError(f"{p.train_csv} and {p.test_csv} have different column sets")
            put("train.csv", train)
            put("test.csv", test)
            if p.reference_csv:
                put_matrix("reference.csv", read_matrix(p.reference_csv))
            if p.prior_pool_csv:
                put_matrix("prior_pool.csv", read_matrix(p.prior_pool_csv))
            meta["sources"] = {k: v for k, v in vars(p).items() if k.endswith("_csv") and v}
        meta["n_train"] = d.n_train if cfg.problem != "external_csv" else None
        _write_json(self.data_dir / "meta.json", meta)
        produced.append(self.data_dir / "meta.json")
        self._finish("generate", produced)
        return produced

    def _need_data(self):
        if not (self.data_dir / "train.csv").exists():
            raise NotFoundError(f"no generated data in {self.data_dir}; run 'generate' first")
        return read_pairs(self.data_dir / "train.csv", "train"), read_pairs(self.data_dir / "test.csv", "test")

    def meta(self):
        return json.loads((self.data_dir / "meta.json").read_text())

    # ------------------------------------------------------------ train

    def mlp_config(self, train):
        m = self.cfg.mlp
        return MlpConfig(train.dim_x, train.dim_y, m.hidden_width, m.hidden_layers, m.activation)

    def normalizer(self):
        path = self.train_dir / "normalizer.json"
        if not path.exists():
            raise NotFoundError(f"missing {path}; run 'train' first")
        return Normalizer.from_dict(json.loads(path.read_text()))

    def stored_checkpoints(self):
        if not self.ckpt_dir.exists():
            return []
        return sorted(int(p.stem.split("_")[1]) for p in self.ckpt_dir.glob("ckpt_*.cfm"))

    def _save_ckpt(self, mlp, state, norm):
        meta = {
            "problem": self.cfg.problem,
            "seed": self.cfg.seed,
            "source": self.cfg.source,
            "eval_weights": self.cfg.train.eval_weights,
            "normalizer": norm.to_dict(),
        }
        path = self.ckpt_dir / _ckpt_name(state.iteration)
        ckpt.save(path, mlp, state.params, state.opt, state.ema, state.iteration, state.rng.bit_generator.state, meta)
        return path

    def _resume_point(self, mlp):
        """Latest stored checkpoint and the loss history up to it, or ``(None, None)``."""
        its = self.stored_checkpoints()
        loss_csv = self.train_dir / "loss.csv"
        if not its or not loss_csv.exists():
            return None, None
        history = LossHistory.read_csv(loss_csv, self.cfg.train.ma_window)
        its = [i for i in its if i <= len(history.train_loss) and i <= self.cfg.train.max_iterations]
        if not its:
            return None, None
        c = ckpt.load(self.ckpt_dir / _ckpt_name(its[-1]))
        if c["mlp"] != mlp:
            raise InvalidArgumentError("stored checkpoints were made with a different network config")
        rng = np.random.default_rng()
        rng.bit_generator.state = c["rng_state"]
        state = TrainState(c["params"], c["opt"], c["ema"], c["iteration"], rng)
        history.truncate(c["iteration"])
        return state, history

    def train(self, resume=True):
        cfg, tc = self.cfg, self.cfg.train
        train, test = self._need_data()
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        if cfg.data.normalize:
            norm = Normalizer.fit(train)
        else:
            norm = Normalizer.identity(train.dim_x, train.dim_y)
        _write_json(self.train_dir / "normalizer.json", norm.to_dict())
        mlp = self.mlp_config(train)
        trn, ten = norm.apply(train), norm.apply(test)

        state = history = None
        if resume:
            state, history = self._resume_point(mlp)
            if state is not None:
                log.info("resuming from iteration %d", state.iteration)
        if state is None:
            for it in self.stored_checkpoints():
                (self.ckpt_dir / _ckpt_name(it)).unlink()

        best = {"ma": np.inf, "iteration": None}
        if history is not None and history.eval_iterations:
            ma = history.test_loss_ma
            k = int(np.argmin(ma))
            best.update(ma=float(ma[k]), iteration=history.eval_iterations[k])

        def on_eval(st, hist):
            # moving average of the newest entry only
            w = min(tc.ma_window, len(hist.test_loss))
            ma_last = float(np.mean(hist.test_loss[-w:]))
            on_grid = st.iteration % tc.checkpoint_every == 0
            if on_grid or st.iteration == tc.max_iterations:
                self._save_ckpt(mlp, st, norm)
            if ma_last < best["ma"]:
                prev = best["iteration"]
                best.update(ma=ma_last, iteration=st.iteration)
                if not on_grid:
                    self._save_ckpt(mlp, st, norm)
                if prev is not None and prev % tc.checkpoint_every and prev != st.iteration:
                    (self.ckpt_dir / _ckpt_name(prev)).unlink(missing_ok=True)

        partial = True
        try:
            state, history = train_cfm(trn, ten, tc, mlp, cfg.source, state=state, history=history, callback=on_eval)
            partial = False
        finally:
            if history is not None:
                history.write_csv(self.train_dir / "loss.csv")
            produced = [self.train_dir / "loss.csv", self.train_dir / "normalizer.json"]
            produced += [self.ckpt_dir / _ckpt_name(i) for i in self.stored_checkpoints()]
            if not partial:
                produced.append(self._write_selection(history))
            self._finish("train", [p for p in produced if p.exists()], partial=partial)
        return state, history

    def _write_selection(self, history):
        cfg, tc = self.cfg, self.cfg.train
        avail = self.stored_checkpoints()
        sel = {
            "available": avail,
            "ma_minimum": select_checkpoint(history, "ma_minimum", available=avail),
            "ma_saturation": select_checkpoint(
                history, "ma_saturation", available=avail, tol=tc.saturation_tol, span=tc.saturation_span
            ),
            "strategy": cfg.selection,
            "eval_weights": tc.eval_weights,
        }
        if cfg.selection == "fixed":
            sel["fixed"] = select_checkpoint(history, "fixed", iteration=cfg.selection_iteration, available=avail)
        sel["selected"] = sel[cfg.selection]
        path = self.train_dir / "selection.json"
        _write_json(path, sel)
        return path

    def resolve_checkpoint(self, ident=None):
        """Iteration number for ``ident``: None/'selected', 'best', 'last' or an integer."""
        avail = self.stored_checkpoints()
        if not avail:
            raise NotFoundError(f"no checkpoints in {self.ckpt_dir}; run 'train' first")
        if ident is None or ident in ("selected", "best"):
            path = self.train_dir / "selection.json"
            if not path.exists():
                raise NotFoundError(f"missing {path}; training did not finish")
            sel = json.loads(path.read_text())
            return int(sel["selected" if ident in (None, "selected") else "ma_minimum"])
        if ident == "last":
            return avail[-1]
        try:
            it = int(ident)
        except ValueError:
            raise InvalidArgumentError(f"checkpoint id must be an iteration, 'selected', 'best' or 'last': {ident!r}")
        if it not in avail:
            raise NotFoundError(f"no stored checkpoint at iteration {it}")
        return it

    def load_model(self, iteration, weights=None):
        c = ckpt.load(self.ckpt_dir / _ckpt_name(iteration))
        weights = weights or self.cfg.train.eval_weights
        params = ema_average(c["ema"], c["iteration"]) if weights == "ema" and c["iteration"] > 0 else c["params"]
        return VelocityModel(c["mlp"], params), Normalizer.from_dict(c["meta"]["normalizer"])

    # ------------------------------------------------------------ sample

    def y_hats(self):
        if self.cfg.sample.y_hat:
            return list(self.cfg.sample.y_hat)
        meta = self.meta()
        if meta.get("y_hat"):
            return list(meta["y_hat"])
        raise InvalidArgumentError("no conditioning values: set sample.y_hat")

    def prior_pool(self):
        path = self.data_dir / "prior_pool.csv"
        return read_matrix(path) if path.exists() else None

    def sample(self, checkpoint=None, n_samples=None):
        cfg = self.cfg
        M = cfg.sample.n_samples if n_samples is None else n_samples
        if M < 1:
            raise InvalidArgumentError("number of samples must be >= 1")
        it = self.resolve_checkpoint(checkpoint)
        model, norm = self.load_model(it)
        pool = self.prior_pool() if cfg.source == "prior_scrambled" else None
        self.sample_dir.mkdir(parents=True, exist_ok=True)
        produced = []
        for k, y in enumerate(self.y_hats()):
            ens = sample_posterior(model, norm, y, cfg.source, M, cfg.solver, self._stream(_SAMPLE, k), pool)
            stem = self.sample_dir / f"ensemble_{k}"
            ens.write(stem.with_suffix(".csv"), stem.with_suffix(".json"))
            summary = json.loads(stem.with_suffix(".json").read_text())
            summary.update(checkpoint=it, source=cfg.source, weights=cfg.train.eval_weights)
            _write_json(stem.with_suffix(".json"), summary)
            produced += [stem.with_suffix(".csv"), stem.with_suffix(".json")]
        self._finish("sample", produced, inputs=[self.ckpt_dir / _ckpt_name(it)])
        return produced

    def ensembles(self):
        files = sorted(self.sample_dir.glob("ensemble_*.csv"), key=lambda p: int(p.stem.split("_")[1]))
        if not files:
            raise NotFoundError(f"no ensembles in {self.sample_dir}; run 'sample' first")
        out = []
        for f in files:
            summary = json.loads(f.with_suffix(".json").read_text())
            out.append((int(f.stem.split("_")[1]), read_ensemble_csv(f), summary))
        return out

    # ------------------------------------------------------------ evaluate

    def evaluate(self):
        cfg = self.cfg
        norm = self.normalizer()
        self.eval_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = self.eval_dir / "metrics.jsonl"
        records = []
        produced = [metrics_path]
        for k, samples, summary in self.ensembles():
            y = summary["y_hat"][0] if len(summary["y_hat"]) == 1 else summary["y_hat"]
            base = {
                "problem": cfg.problem,
                "source": summary.get("source", cfg.source),
                "checkpoint": summary.get("checkpoint"),
                "y_hat": y,
                "n_generated": int(samples.shape[0]),
                "avg_n_steps": summary["avg_n_steps"],
                "avg_path_length": summary["avg_path_length"],
                "mean": summary["mean"],
                "std": summary["std"],
            }
            reference, recs = self._reference_metrics(k, y, samples, norm)
            for r in recs:
                records.append({**base, **r})
            if reference is not None:
                kde_path = self.eval_dir / f"kde_{k}.csv"
                n_modes = _write_kde(kde_path, samples, reference)
                produced.append(kde_path)
                records.append({**base, "metric": "kde_modes", "value": n_modes})
        with open(metrics_path, "w") as fh:
            for r in records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
        self._finish("evaluate", produced, inputs=sorted(self.sample_dir.glob("ensemble_*.csv")))
        return records

    def _reference_metrics(self, k, y, samples, norm):
        cfg = self.cfg
        gen = norm.apply_x(samples)
        sk_meta = {"sinkhorn": cfg.sinkhorn.to_dict(), "coordinates": "normalized" if cfg.data.normalize else "raw"}
        if cfg.problem == "spiral":
            pool = read_pairs(self.data_dir / "pool.csv", "test")
            ref = spiral_reference_conditional(pool, y, cfg.sample.band)
            rec = self._matched_sinkhorn(k, gen, norm.apply_x(ref))
            rec.update(band=cfg.sample.band, dataset="spiral_pool", **sk_meta)
            return ref, [rec]
        if cfg.problem == "lorenz_da" or (self.data_dir / "reference.csv").exists():
            ref = read_matrix(self.data_dir / "reference.csv")
            rec = self._matched_sinkhorn(k, gen, norm.apply_x(ref))
            rec.update(dataset="reference", **sk_meta)
            recs = [rec]
            if cfg.problem == "lorenz_da":
                pos = float(np.mean(samples[:, 0] > 0))
                recs.append({"metric": "x0_sign_fraction", "value": pos, "reference_value": float(np.mean(ref[:, 0] > 0))})
            return ref, recs
        if cfg.problem == "toy1d":
            spec = Toy1dSpec()
            mean, std = truncated_normal_moments(y, spec)
            return None, [{
                "metric": "toy_moments", "value": float(np.std(samples[:, 0], ddof=1)),
                "exact_std": std, "exact_mean": mean, "sample_mean": float(np.mean(samples[:, 0])),
            }]
        return None, [{"metric": "stats_only", "value": None}]

    def _matched_sinkhorn(self, k, gen, ref):
        """Generated vs reference at equal subset size m, against the reference self-distance at m.

        m = min(M, n_ref // 2) so two disjoint reference subsets exist; the
        distance and the baseline are both means over ``baseline_repeats``.
        """
        cfg = self.cfg
        reps = cfg.sample.baseline_repeats
        rng = self._stream(_BASELINE, k)
        M, n_ref = gen.shape[0], ref.shape[0]
        m = min(M, n_ref // 2)
        if m < 1:
            raise EmptyResultError(f"reference has {n_ref} points; need at least 2")
        runs = [
            sinkhorn(gen[rng.choice(M, m, replace=False)], ref[rng.choice(n_ref, m, replace=False)], cfg.sinkhorn)
            for _ in range(reps)
        ]
        b = self_distance_baseline(ref, m, reps, cfg.sinkhorn, rng)
        d = float(np.mean([r.value for r in runs]))
        return {
            "metric": "sinkhorn", "value": d, "baseline": b, "ratio": d / b, "subset_size": m,
            "repeats": reps, "n_reference": int(n_ref), "converged": all(r.converged for r in runs),
        }

    # ------------------------------------------------------------ overfitting study

    def overfit_study(self):
        cfg = self.cfg
        if cfg.problem != "toy1d":
            raise InvalidArgumentError("overfit-study needs a toy1d config")
        if not (self.data_dir / "train.csv").exists():
            self.generate()
        if not (self.train_dir / "selection.json").exists():
            self.train()
        history = LossHistory.read_csv(self.train_dir / "loss.csv", cfg.train.ma_window)
        avail = self.stored_checkpoints()
        ma_it = select_checkpoint(history, "ma_minimum", available=avail)
        wanted = sorted(set(i for i in cfg.sample.study_checkpoints if i in avail) | {ma_it})
        spec = Toy1dSpec()
        y0 = cfg.sample.y_hat[0]
        self.study_dir.mkdir(parents=True, exist_ok=True)
        grid = np.linspace(-1.5, 1.5, 601)
        sweep_y = np.sort(self._stream(_SWEEP).uniform(-1.0, 1.0, cfg.sample.sweep_points))
        stats, kde_cols, sweep_rows = [], {"x": grid, "exact": toy1d_posterior_pdf(grid, y0, spec)}, []
        for it in wanted:
            model, norm = self.load_model(it)
            # same initial states at every checkpoint so differences come from the network alone
            ens = sample_posterior(model, norm, y0, cfg.source, cfg.sample.n_samples, cfg.solver, self._stream(_SAMPLE, 0))
            s = ens.samples[:, 0]
            stats.append({"iteration": it, "mean": float(ens.mean[0]), "std": float(ens.std[0]),
                          "avg_n_steps": ens.avg_n_steps, "failures": len(ens.failures)})
            kde_cols[f"it{it}"] = kde_1d(s, grid)
            sweep = sample_posterior_sweep(model, norm, sweep_y, cfg.source, cfg.sample.sweep_samples,
                                           cfg.solver, self._stream(_SWEEP, 1))
            for yv, e in zip(sweep_y, sweep):
                em, es = truncated_normal_moments(yv, spec)
                sweep_rows.append((it, float(yv), float(e.mean[0]), float(e.std[0]), em, es))
        exact_mean, exact_std = truncated_normal_moments(y0, spec)
        by_it = {r["iteration"]: r for r in stats}
        last = max(cfg.sample.study_checkpoints)
        report = {
            "y_hat": y0,
            "ma_minimum_iteration": ma_it,
            "exact_mean": exact_mean,
            "exact_std": exact_std,
            "checkpoints": stats,
            "train_x": read_pairs(self.data_dir / "train.csv").x[:, 0].tolist(),
        }
        if last in by_it:
            report["std_ratio_last_vs_ma_minimum"] = by_it[last]["std"] / by_it[ma_it]["std"]
            s_last = {r[1]: r[3] for r in sweep_rows if r[0] == last}
            ref_it = 3000 if 3000 in by_it else ma_it
            s_ref = {r[1]: r[3] for r in sweep_rows if r[0] == ref_it}
            report["sweep_shrink_fraction"] = float(np.mean([s_last[v] <= s_ref[v] for v in s_last]))
            report["sweep_reference_iteration"] = ref_it
        _write_json(self.study_dir / "report.json", report)
        write_columns(self.study_dir / "stats.csv", ["iteration", "mean", "std", "avg_n_steps"],
                      [[r["iteration"], r["mean"], r["std"], r["avg_n_steps"]] for r in stats])
        write_columns(self.study_dir / "kde.csv", list(kde_cols), np.column_stack(list(kde_cols.values())).tolist())
        write_columns(self.study_dir / "sweep.csv",
                      ["iteration", "y_hat", "mean", "std", "exact_mean", "exact_std"], sweep_rows)
        history.write_csv(self.study_dir / "loss.csv")
        produced = [self.study_dir / n for n in ("report.json", "stats.csv", "kde.csv", "sweep.csv", "loss.csv")]
        self._finish("overfit-study", produced)
        return report

    # ------------------------------------------------------------ report

    def report(self):
        out = {"problem": self.cfg.problem, "seed": self.cfg.seed, "source": self.cfg.source}
        sel = self.train_dir / "selection.json"
        if sel.exists():
            out["selection"] = json.loads(sel.read_text())
        mpath = self.eval_dir / "metrics.jsonl"
        if mpath.exists():
            recs = [json.loads(ln) for ln in mpath.read_text().splitlines() if ln.strip()]
            out["metrics"] = recs
            sk = [r for r in recs if r["metric"] == "sinkhorn"]
            if sk:
                out["avg_sinkhorn"] = float(np.mean([r["value"] for r in sk]))
                out["avg_baseline"] = float(np.mean([r["baseline"] for r in sk]))
                out["avg_n_steps"] = float(np.mean([r["avg_n_steps"] for r in sk]))
        study = self.study_dir / "report.json"
        if study.exists():
            out["overfit_study"] = json.loads(study.read_text())
        manifest = RunManifest(self.out)
        out["manifest_mismatches"] = manifest.verify() if manifest.path.exists() else []
        _write_json(self.out / "report.json", out)
        return out


def write_columns(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) if not isinstance(v, int) else str(v) for v in r) + "\n")


def truncated_normal_moments(y_hat, spec=Toy1dSpec()):
    s = spec.noise_std
    a, b = (spec.prior_low - y_hat) / s, (spec.prior_high - y_hat) / s
    m, v = truncnorm.stats(a, b, loc=y_hat, scale=s, moments="mv")
    return float(m), float(np.sqrt(v))


def _write_kde(path, samples, reference):
    """Per-dimension KDE grids of generated and reference samples; returns the mode count of dim 0."""
    d = samples.shape[1]
    cols, names = [], []
    modes = 0
    for j in range(d):
        lo = min(samples[:, j].min(), reference[:, j].min())
        hi = max(samples[:, j].max(), reference[:, j].max())
        pad = 0.1 * (hi - lo + 1e-12)
        grid = np.linspace(lo - pad, hi + pad, 512)
        g = kde_1d(samples[:, j], grid)
        r = kde_1d(reference[:, j], grid)
        if j == 0:
            modes = count_modes(g)
        cols += [grid, g, r]
        names += [f"grid{j}", f"generated{j}", f"reference{j}"]
    write_columns(path, names, np.column_stack(cols).tolist())
    return modes


def run_pipeline(cfg, stages=("generate", "train", "sample", "evaluate")):
    """Run stages in order under the directory lock; returns the evaluation records (if any)."""
    exp = Experiment(cfg)
    out = None
    with run_lock(exp.out):
        for s in stages:
            out = getattr(exp, s.replace("-", "_"))()
    return out
