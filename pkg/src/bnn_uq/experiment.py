"""End-to-end benchmark runs: data, restarts, selection, scoring, artifacts."""

from __future__ import annotations

import configparser
import csv
import hashlib
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from bnn_uq import baselines, datasets, metrics, plotting, samplers, vi
from bnn_uq.nn import BernoulliClassification, GaussianRegression, LogJoint, MlpSpec

METHODS = ("hmc", "sgld", "sghmc", "bbb", "dropout", "ensemble", "moment-gaussian")
TASKS = ("reg1", "reg2", "class1", "class2")
SELECTION = ("validation_loglik", "elbo")

# tuned values per task, in TASKS order
_BBB_LR = dict(zip(TASKS, (0.001, 0.001, 0.01, 0.001)))
_DROPOUT_LR = dict(zip(TASKS, (0.05, 0.05, 0.005, 0.01)))
_DROPOUT_RATE = dict(zip(TASKS, (0.005, 0.01, 0.005, 0.005)))
_ENSEMBLE_LR = dict(zip(TASKS, (0.05, 0.005, 0.1, 0.1)))
_SGLD_LR = dict(zip(TASKS, (0.001, 0.001, 0.01, 0.01)))

_METHOD_CONFIG = {
    "hmc": samplers.HmcConfig,
    "moment-gaussian": samplers.HmcConfig,
    "sgld": samplers.SgldConfig,
    "sghmc": samplers.SghmcConfig,
    "bbb": vi.VIConfig,
    "dropout": baselines.DropoutConfig,
    "ensemble": baselines.EnsembleConfig,
}


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class RunFailure(RuntimeError):
    """Every restart of a run aborted (CLI exit code 1)."""


def preset_hyper(task: str, method: str) -> dict[str, Any]:
    """Tuned hyperparameters for one task/method pair."""
    if method == "bbb":
        return {"learning_rate": _BBB_LR[task]}
    if method == "dropout":
        return {"learning_rate": _DROPOUT_LR[task], "dropout_rate": _DROPOUT_RATE[task]}
    if method == "ensemble":
        return {"learning_rate": _ENSEMBLE_LR[task]}
    if method == "sgld":
        return {"step_size": _SGLD_LR[task], "per_datum": True}
    return {}


def presets() -> dict[str, dict[str, Any]]:
    out = {}
    for task in TASKS:
        out[task] = {"dataset": task}
        for method in METHODS:
            out[f"{task}-{method}"] = {"dataset": task, "method": method,
                                       "hyper": preset_hyper(task, method)}
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "reg1"
    method: str = "hmc"
    data_seed: int = 0
    seed: int = 0
    n_restarts: int | None = None
    selection: str = "validation_loglik"
    n_predictive: int = 500
    grid_points: int = 200
    vi_init: str = "standard"
    time_limit: float | None = None
    out_dir: str | None = None
    workers: int = 1
    hyper: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.dataset not in TASKS:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.selection not in SELECTION:
            raise ConfigError(f"unknown selection criterion {self.selection!r}")
        if self.selection == "elbo" and self.method != "bbb":
            raise ConfigError("ELBO selection only applies to bbb")
        if self.n_restarts is not None and self.n_restarts < 1:
            raise ConfigError("n_restarts must be positive")
        if self.n_predictive < 1 or self.grid_points < 2:
            raise ConfigError("n_predictive and grid_points must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be positive")
        if self.vi_init not in ("standard", "hmc_mean"):
            raise ConfigError(f"unknown vi_init {self.vi_init!r}")
        self.method_config()  # validates hyperparameters

    @property
    def restarts(self) -> int:
        if self.n_restarts is not None:
            return self.n_restarts
        return 20 if self.method in ("bbb", "dropout") else 1

    def method_config(self):
        cls = _METHOD_CONFIG[self.method]
        known = {f.name: f.type for f in fields(cls)}
        merged = {**preset_hyper(self.dataset, self.method), **self.hyper}
        unknown = set(merged) - set(known)
        if unknown:
            raise ConfigError(f"unknown {self.method} hyperparameters: {sorted(unknown)}")
        defaults = cls()
        coerced = {k: _coerce(v, getattr(defaults, k)) for k, v in merged.items()}
        try:
            return cls(**coerced)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad {self.method} hyperparameters: {exc}") from None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def digest(self) -> str:
        # where and how fast a run executes does not change its outputs
        blob = json.dumps({k: v for k, v in self.to_dict().items()
                           if k not in ("out_dir", "workers")},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _coerce(value, default):
    if isinstance(value, str):
        if isinstance(default, bool):
            return value.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float) or default is None:
            try:
                return float(value)
            except ValueError:
                return value
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.replace(",", " ").split())
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    return value


# -- config files ---------------------------------------------------------------

_EXPERIMENT_KEYS = {f.name for f in fields(ExperimentConfig)} - {"hyper"}
_FIELD_TYPES = {"data_seed": int, "seed": int, "n_restarts": int, "n_predictive": int,
                "grid_points": int, "time_limit": float, "workers": int}


def load_config(path=None, preset: str | None = None, **overrides) -> ExperimentConfig:
    """Build a config from a preset, then an INI file, then keyword overrides.

    The INI file has an ``[experiment]`` section for run-level keys and one
    section per method (``[hmc]``, ``[bbb]``, ...) for hyperparameters; only
    the section of the selected method is used.
    """
    values: dict[str, Any] = {}
    hyper: dict[str, Any] = {}
    if preset is not None:
        table = presets()
        if preset not in table:
            raise ConfigError(f"unknown preset {preset!r}")
        p = table[preset]
        values.update({k: v for k, v in p.items() if k != "hyper"})
        hyper.update(p.get("hyper", {}))
    section_hyper: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            if not parser.read(path):
                raise ConfigError(f"cannot read config file {path}")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            items = dict(parser.items(section))
            if section == "experiment":
                bad = set(items) - _EXPERIMENT_KEYS
                if bad:
                    raise ConfigError(f"unknown experiment keys {sorted(bad)}")
                values.update(items)
            elif section in METHODS:
                section_hyper[section] = items
            else:
                raise ConfigError(f"unknown config section [{section}]")
    for k, v in overrides.items():
        if v is not None:
            values[k] = v
    method = values.get("method", "hmc")
    hyper.update(section_hyper.get(method, {}))
    typed = {}
    for k, v in values.items():
        if isinstance(v, str) and k in _FIELD_TYPES:
            if v.strip().lower() in ("", "none"):
                v = None
            else:
                try:
                    v = _FIELD_TYPES[k](v)
                except ValueError:
                    raise ConfigError(f"bad value for {k}: {v!r}") from None
        typed[k] = v
    try:
        return ExperimentConfig(**typed, hyper=hyper)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def write_config(cfg: ExperimentConfig, path) -> None:
    parser = configparser.ConfigParser()
    parser["experiment"] = {k: "none" if v is None else str(v)
                            for k, v in cfg.to_dict().items() if k not in ("hyper",)}
    parser[cfg.method] = {k: (" ".join(map(str, v)) if isinstance(v, tuple) else str(v))
                          for k, v in asdict(cfg.method_config()).items()}
    with open(path, "w") as fh:
        parser.write(fh)


# -- fitting --------------------------------------------------------------------


def derive_seed(master: int, *keys) -> int:
    """Stable 32-bit seed for a named sub-stream of ``master``."""
    parts = [int(master)] + [k if isinstance(k, int) else
                             int.from_bytes(hashlib.sha256(str(k).encode()).digest()[:4], "little")
                             for k in keys]
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def architecture(ds: datasets.Dataset):
    if ds.task == "regression":
        return MlpSpec((1, 50, 1)), GaussianRegression(ds.noise_sigma)
    return MlpSpec((2, 10, 10, 1)), BernoulliClassification()


@dataclass
class Fit:
    """One restart's fitted approximation, able to produce predictive samples."""

    kind: str
    samples: samplers.PosteriorSamples | None = None
    members: list | None = None
    dropout_weights: np.ndarray | None = None
    dropout_rate: float = 0.0
    q: Any = None
    chain_stats: samplers.ChainStats | None = None
    training_log: vi.TrainingLog | None = None
    elbo: float = math.nan

    def predict(self, spec, model, x, n: int, seed: int) -> metrics.PredictiveSamples:
        if self.kind == "dropout":
            return baselines.dropout_predictive_samples(
                self.dropout_weights, spec, model, x, n, self.dropout_rate, seed)
        if self.kind == "ensemble":
            return baselines.ensemble_predictive_samples(self.members, spec, model, x, seed)
        return metrics.predictive_from_weights(self.samples, spec, model, x, seed=seed)

    @property
    def truncated(self) -> bool:
        return bool(self.chain_stats is not None and self.chain_stats.truncated)


def _fit_once(cfg: ExperimentConfig, mcfg, spec, model, ds, seed: int, deadline, cache):
    x, y = ds.train
    method = cfg.method
    if method in ("hmc", "moment-gaussian"):
        s, stats = samplers.hmc_run(LogJoint(model, spec, x, y), mcfg, seed, deadline=deadline)
        if method == "hmc":
            return Fit("samples", samples=s, chain_stats=stats)
        q = vi.gaussian_moment_fit(s)
        draws = vi.sample_weights(q, cfg.n_predictive, derive_seed(seed, "moment"))
        return Fit("samples", samples=draws, q=q, chain_stats=stats)
    if method == "sgld":
        s, stats = samplers.sgld_run(LogJoint(model, spec, x, y), mcfg, seed, deadline=deadline)
        return Fit("samples", samples=s, chain_stats=stats)
    if method == "sghmc":
        s, stats = samplers.sghmc_run(LogJoint(model, spec, x, y), mcfg, seed, deadline=deadline)
        return Fit("samples", samples=s, chain_stats=stats)
    if method == "bbb":
        init_mean = None
        if mcfg.init_mode == "hmc_mean" or cfg.vi_init == "hmc_mean":
            if "hmc_mean" not in cache:
                hcfg = samplers.HmcConfig()
                hs, _ = samplers.hmc_run(LogJoint(model, spec, x, y), hcfg,
                                         derive_seed(cfg.seed, "hmc-init"), deadline=deadline)
                cache["hmc_mean"] = hs.mean()
            init_mean = cache["hmc_mean"]
            mcfg = replace(mcfg, init_mode="hmc_mean")
        q, log = vi.bbb_fit(model, spec, x, y, mcfg, seed, init_mean=init_mean)
        draws = vi.sample_weights(q, cfg.n_predictive, derive_seed(seed, "draws"))
        elbo = vi.elbo_estimate(q, model, spec, x, y, 100, derive_seed(seed, "elbo"))
        return Fit("samples", samples=draws, q=q, training_log=log, elbo=elbo)
    if method == "dropout":
        w, _ = baselines.dropout_fit(model, spec, x, y, mcfg, seed)
        return Fit("dropout", dropout_weights=w, dropout_rate=mcfg.dropout_rate)
    if method == "ensemble":
        members = baselines.ensemble_fit(model, spec, x, y, mcfg, seed, workers=cfg.workers)
        return Fit("ensemble", members=members)
    raise ConfigError(method)


def _run_restart(cfg, mcfg, spec, model, ds, r, deadline, cache):
    """Fit restart ``r`` and score it; returns ``(fit or None, score, status)``."""
    seed = derive_seed(cfg.seed, r)
    try:
        fit = _fit_once(cfg, mcfg, spec, model, ds, seed, deadline, cache)
    except (samplers.DivergenceError, FloatingPointError, vi.InsufficientSamplesError) as exc:
        return None, math.nan, f"aborted: {exc}"
    if fit.samples is not None and len(fit.samples) == 0:
        return None, math.nan, "aborted: no samples retained"
    if cfg.selection == "elbo":
        score = fit.elbo
    else:
        xv, yv = ds.val
        pv = fit.predict(spec, model, xv, cfg.n_predictive, derive_seed(cfg.seed, r, "val"))
        score = metrics.avg_test_loglik(pv, yv, model)
    return fit, float(score), "ok"


def _restart_task(args):
    cfg, mcfg, spec, model, ds, r, deadline = args
    if deadline is not None and time.monotonic() > deadline and r > 0:
        return None, math.nan, "skipped"
    # ensemble members stay serial inside a pool worker
    return _run_restart(replace(cfg, workers=1), mcfg, spec, model, ds, r, deadline, {})


def select_best_restart(scores, criterion: str = "validation_loglik") -> int:
    """Index of the highest score; ties go to the lowest index."""
    if criterion not in SELECTION:
        raise ValueError(f"unknown criterion {criterion!r}")
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise ValueError("no scores")
    finite = np.isfinite(s)
    if not finite.any():
        raise RunFailure("all restart scores are non-finite")
    return int(np.argmax(np.where(finite, s, -np.inf)))


@dataclass
class RunArtifact:
    config: ExperimentConfig
    restart_scores: list[float]
    restart_status: list[str]
    selected: int
    fit: Fit
    metrics: metrics.MetricsReport
    band: metrics.IntervalBand | None
    grid_x: np.ndarray
    grid_probs: np.ndarray | None
    manifest: dict[str, Any]

    @property
    def samples(self):
        return self.fit.samples

    @property
    def chain_stats(self):
        return self.fit.chain_stats


def run_experiment(cfg: ExperimentConfig) -> RunArtifact:
    """Generate data, fit every restart, pick the best, score it, write artifacts."""
    started = time.time()
    deadline = None if cfg.time_limit is None else time.monotonic() + cfg.time_limit
    ds = datasets.generate(cfg.dataset, cfg.data_seed)
    spec, model = architecture(ds)
    mcfg = cfg.method_config()
    cache: dict[str, Any] = {}
    fits, scores, status = [], [], []
    if cfg.workers > 1 and cfg.restarts > 1:
        jobs = [(cfg, mcfg, spec, model, ds, r, deadline) for r in range(cfg.restarts)]
        with ProcessPoolExecutor(cfg.workers) as pool:
            for fit, score, st in pool.map(_restart_task, jobs):
                fits.append(fit)
                scores.append(score)
                status.append(st)
    else:
        for r in range(cfg.restarts):
            if deadline is not None and time.monotonic() > deadline and any(fits):
                fit, score, st = None, math.nan, "skipped"
            else:
                fit, score, st = _run_restart(cfg, mcfg, spec, model, ds, r, deadline, cache)
            fits.append(fit)
            scores.append(score)
            status.append(st)
    best = select_best_restart(scores, cfg.selection)
    fit = fits[best]

    xt, yt = ds.test
    pred = fit.predict(spec, model, xt, cfg.n_predictive, derive_seed(cfg.seed, "test"))
    band = None
    grid_probs = None
    if ds.task == "regression":
        gx, gy = datasets.noiseless_grid(cfg.dataset, cfg.grid_points)
        gpred = fit.predict(spec, model, gx, cfg.n_predictive, derive_seed(cfg.seed, "grid"))
        report = metrics.score_regression(pred, yt, model, cfg.dataset, cfg.method,
                                          grid=(gpred, gy))
        band = metrics.interval_band(gpred)
    else:
        gx = plotting.probability_grid()
        gpred = fit.predict(spec, model, gx, cfg.n_predictive, derive_seed(cfg.seed, "grid"))
        grid_probs = gpred.values
        report = metrics.score_classification(pred, yt, model, cfg.dataset, cfg.method)
    truncated = any(f is not None and f.truncated for f in fits) or "skipped" in status
    if truncated:
        report.flags.append("truncated")
    manifest = {
        "config": cfg.to_dict(),
        "config_digest": cfg.digest(),
        "method_config": asdict(mcfg),
        "restart_seeds": [derive_seed(cfg.seed, r) for r in range(cfg.restarts)],
        "restart_scores": scores,
        "restart_status": status,
        "selected_restart": best,
        "truncated": truncated,
        "wall_time_s": time.time() - started,
    }
    art = RunArtifact(cfg, scores, status, best, fit, report, band, gx, grid_probs, manifest)
    if cfg.out_dir is not None:
        write_artifacts(art, ds, cfg.out_dir)
    return art


# -- artifacts -------------------------------------------------------------------


def _json_default(o):
    if isinstance(o, float) and not math.isfinite(o):
        return str(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o))


def write_artifacts(art: RunArtifact, ds: datasets.Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = art.config
    write_config(cfg, out / "config.ini")
    (out / "manifest.json").write_text(
        json.dumps(art.manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    (out / "metrics.txt").write_text(art.metrics.to_record())
    write_metrics_csv([art.metrics], out / "metrics.csv")
    datasets.save(ds, out / "data.csv")
    with open(out / "restarts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["restart", "seed", "score", "status"])
        for r, (seed, score, st) in enumerate(zip(art.manifest["restart_seeds"],
                                                  art.restart_scores, art.restart_status)):
            w.writerow([r, seed, f"{score:.17g}", st])
    fit = art.fit
    if fit.samples is not None:
        np.save(out / "samples.npy", fit.samples.weights)
    if fit.members is not None:
        baselines.save_members(fit.members, out / "members")
    if fit.dropout_weights is not None:
        np.save(out / "dropout_weights.npy", fit.dropout_weights)
    if fit.chain_stats is not None:
        fit.chain_stats.to_csv(out / "chain.csv")
    if fit.training_log is not None:
        fit.training_log.to_csv(out / "training_log.csv")
    xtr, ytr = ds.train
    if art.band is not None:
        plotting.emit_band_csv(art.band, art.grid_x, out / "band.csv")
        plotting.emit_svg_plot(art.band, art.grid_x, xtr, ytr, out / "band.svg",
                               title=f"{cfg.dataset} {cfg.method}")
    else:
        with open(out / "probability_grid.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x0", "x1", "mean", "std"])
            for (a, b), m, s in zip(art.grid_x, art.grid_probs.mean(axis=0),
                                    art.grid_probs.std(axis=0)):
                w.writerow([f"{a:.17g}", f"{b:.17g}", f"{m:.17g}", f"{s:.17g}"])
        plotting.emit_heatmap_svg(art.grid_probs, xtr, ytr, out / "heatmap.svg")
    return out


def write_metrics_csv(reports, path) -> None:
    keys = []
    for r in reports:
        keys += [k for k in r.values if k not in keys]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "method"] + keys + ["flags"])
        for r in reports:
            w.writerow([r.task, r.method]
                       + [f"{r.values[k]:.17g}" if k in r.values else "" for k in keys]
                       + [";".join(r.flags)])


def replay(manifest_path, out_dir) -> tuple[RunArtifact, dict[str, bool]]:
    """Re-run the experiment recorded in a manifest and compare output bytes.

    Returns the new artifact and, per compared file, whether it is
    byte-identical to the original run's file.
    """
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    raw = dict(manifest["config"])
    raw["out_dir"] = str(out_dir)
    raw["hyper"] = dict(raw.get("hyper", {}))
    cfg = ExperimentConfig(**raw)
    if cfg.digest() != manifest["config_digest"]:
        raise ConfigError("manifest config does not match its digest")
    art = run_experiment(cfg)
    original = manifest_path.parent
    same = {}
    for name in ("metrics.txt", "metrics.csv", "band.csv", "probability_grid.csv",
                 "samples.npy", "restarts.csv"):
        a, b = original / name, Path(out_dir) / name
        if a.exists() or b.exists():
            same[name] = a.exists() and b.exists() and a.read_bytes() == b.read_bytes()
    return art, same


# -- reports -----------------------------------------------------------------------


def emit_report(runs, path) -> None:
    """Methods x metrics table, mean and s.d. over repeated runs.

    ``runs`` holds :class:`RunArtifact` or :class:`MetricsReport` objects;
    runs of the same task and method (e.g. different experiment seeds) are
    pooled. Writes ``path`` as CSV and ``path`` + ``.txt`` as an aligned table.
    """
    reports = [r.metrics if isinstance(r, RunArtifact) else r for r in runs]
    groups: dict[tuple[str, str], list] = {}
    for r in reports:
        groups.setdefault((r.task, r.method), []).append(r)
    rows = []
    for (task, method), rs in groups.items():
        names = (metrics.CLASSIFICATION_METRICS if rs[0].kind == "classification"
                 else metrics.REGRESSION_METRICS)
        row = {"task": task, "method": method, "n_runs": len(rs)}
        for k in names:
            v = np.array([r.values[k] for r in rs])
            row[f"{k}_mean"] = float(v.mean())
            row[f"{k}_sd"] = float(v.std(ddof=1)) if v.size > 1 else 0.0
        rows.append((names, row))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        last = None
        for names, row in rows:
            header = ["task", "method", "n_runs"] + [f"{k}_{s}" for k in names
                                                     for s in ("mean", "sd")]
            if header != last:
                w.writerow(header)
                last = header
            w.writerow([row[h] if not isinstance(row[h], float) else f"{row[h]:.6g}"
                        for h in header])
    lines = ["# mean +- s.d. over repeated experiment seeds"]
    for names, row in rows:
        cells = [f"{k}={row[k + '_mean']:.3f}+-{row[k + '_sd']:.3f}" for k in names]
        lines.append(f"{row['task']:<7} {row['method']:<16} n={row['n_runs']:<3} "
                     + "  ".join(cells))
    Path(f"{path}.txt").write_text("\n".join(lines) + "\n")
