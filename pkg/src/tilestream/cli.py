"""Command-line harness: simulate -> reduce -> learn -> predict.

Configuration precedence, lowest first: built-in defaults, a TOML or JSON
file given with ``--config``, ``TILESTREAM_<FIELD>`` environment variables,
then command-line flags. Flag names mirror the :class:`RunConfig` fields.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import queue
import sys
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import _kernels
from .checkpoint import save_checkpoint
from .errors import (DataError, FormatError, InsufficientDataError, IntegrationDiverged,
                     NumericalError, ShapeError)
from .model import Hyperparameters, init_model
from .predict import (MetricsSeries, RandomWalkBaseline, eval_stream, log_pred_prob,
                      score_snapshot)
from .reduce import Reducer
from .simulate import TrajectoryConfig, generate, lift, load_matrix, stream, write_matrix

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("tilestream")

ENV_PREFIX = "TILESTREAM_"
MODES = ("run", "bench", "reduce", "simulate")
WARMUP = 100


class ConfigError(ValueError):
    """Invalid configuration; the CLI exits with status 2."""


@dataclass
class RunConfig:
    mode: str = "run"
    # data source: a matrix file, or a generated trajectory
    input: str | None = None
    system: str = "van_der_pol"
    steps: int = 20000
    noise_frac: float = 0.05
    dt: float | None = None
    d: int | None = None
    lift_noise: float = 0.0
    # reduction
    n: int | None = None
    k: int | None = None
    b: int = 1
    projection: str = "achlioptas"
    decay: float = 1.0
    # model
    N: int = 1000
    B: int = 1
    lam: float = 1e-3
    nu: float = 1e-3
    beta: float = 1.0
    eps: float = 0.01
    theta: float | None = None
    step_size: float = 1e-3
    prior_walk: float = 0.02
    M: int = 30
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    update_priors: bool = True
    # evaluation and output
    T: list = field(default_factory=lambda: [1, 5, 10])
    out: str = "out"
    seed: int = 0
    backend: str | None = None
    threaded: bool = False
    format: str = "mflw"
    # benchmark
    bench_N: list = field(default_factory=lambda: [125, 250, 500, 1000])
    bench_k: int = 10
    bench_samples: int = 300
    bench_predictions: int = 2000

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("steps", "N", "b", "B", "M", "bench_k", "bench_samples",
                     "bench_predictions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("d", "n", "k"):
            val = getattr(self, name)
            if val is not None and val < 1:
                raise ConfigError(f"{name} must be >= 1, got {val}")
        if self.d is not None and self.n is not None and self.n > self.d:
            raise ConfigError(f"need n <= d, got n={self.n}, d={self.d}")
        if self.n is not None and self.k is not None and self.k > self.n:
            raise ConfigError(f"need k <= n, got k={self.k}, n={self.n}")
        if not self.T or min(self.T) < 1:
            raise ConfigError("T must be a non-empty list of horizons >= 1")
        if not self.bench_N or min(self.bench_N) < 1:
            raise ConfigError("bench_N must be a non-empty list of counts >= 1")
        if self.backend not in (None, "numpy", "numba"):
            raise ConfigError(f"backend must be numpy or numba, got {self.backend!r}")
        if self.format not in ("mflw", "csv"):
            raise ConfigError(f"format must be mflw or csv, got {self.format!r}")
        if self.input is None:
            try:
                self.trajectory()
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        try:
            self.hyperparameters(1)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def trajectory(self) -> TrajectoryConfig:
        return TrajectoryConfig(system=self.system, steps=self.steps,
                                noise_frac=self.noise_frac, seed=self.seed, dt=self.dt)

    def hyperparameters(self, k: int, N: int | None = None, B: int | None = None):
        return Hyperparameters(
            N=self.N if N is None else N, k=k, lam=self.lam, nu=self.nu, beta=self.beta,
            eps=self.eps, theta=self.theta, step_size=self.step_size,
            prior_walk=self.prior_walk, M=self.M, B=self.B if B is None else B,
            adam_b1=self.adam_b1, adam_b2=self.adam_b2, adam_eps=self.adam_eps,
            update_priors=self.update_priors, seed=self.seed)


# --------------------------------------------------------------------------
# configuration sources
# --------------------------------------------------------------------------

def _field_kind(f) -> str:
    ann = str(f.type)
    if ann.startswith("list"):
        return "list"
    if "bool" in ann:
        return "bool"
    if "int" in ann:
        return "int"
    if "float" in ann:
        return "float"
    return "str"


_KINDS = {f.name: _field_kind(f) for f in fields(RunConfig)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _coerce(name: str, value):
    """Convert a file/env/flag value to the field's type."""
    kind = _KINDS[name]
    if value is None:
        return None
    try:
        if kind == "list":
            if isinstance(value, str):
                value = [v for v in value.replace(" ", "").split(",") if v]
            return [int(v) for v in value]
        if kind == "bool":
            return value if isinstance(value, bool) else _parse_bool(str(value))
        if isinstance(value, str) and value.strip().lower() in ("none", "null", ""):
            return None
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"{value} is not an integer")
            return int(value)
        if kind == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {value!r} ({exc})") from None


def load_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(text)
        else:
            data = tomllib.loads(text.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping")
    unknown = sorted(set(data) - set(_KINDS))
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return {key: _coerce(key, val) for key, val in data.items()}


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for name in _KINDS:
        key = ENV_PREFIX + name.upper()
        if key in environ:
            out[name] = _coerce(name, environ[key])
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tilestream",
        description="Streaming manifold tiling with multi-step probabilistic prediction.")
    sub = parser.add_subparsers(dest="mode", required=True)
    helps = {
        "run": "learn on a stream and write metrics, summary, timing and a checkpoint",
        "bench": "time the learner and the predictor",
        "reduce": "run only the dimensionality reduction and write the reduced matrix",
        "simulate": "generate a trajectory and write it as a matrix file",
    }
    for mode in MODES:
        p = sub.add_parser(mode, help=helps[mode])
        p.add_argument("--config", help="TOML or JSON file with RunConfig fields")
        p.add_argument("-v", "--verbose", action="store_true")
        for f in fields(RunConfig):
            if f.name == "mode":
                continue
            kind = _KINDS[f.name]
            if kind == "bool":
                p.add_argument(f"--{f.name}", dest=f.name, default=None,
                               action=argparse.BooleanOptionalAction)
            else:
                p.add_argument(f"--{f.name}", dest=f.name, default=None, metavar=kind.upper())
    return parser


def resolve_config(argv=None, environ=None) -> tuple[RunConfig, argparse.Namespace]:
    args = build_parser().parse_args(argv)
    values: dict = {}
    if args.config:
        values.update(load_config_file(args.config))
    values.update(env_overrides(environ))
    for name in _KINDS:
        if name == "mode":
            continue
        val = getattr(args, name, None)
        if val is not None:
            values[name] = _coerce(name, val)
    values["mode"] = args.mode
    return RunConfig(**values).validate(), args


# --------------------------------------------------------------------------
# pipeline pieces
# --------------------------------------------------------------------------

def load_source(cfg: RunConfig) -> np.ndarray:
    """Observed (dims, steps) data: a file, or a (possibly lifted) trajectory."""
    if cfg.input:
        data = load_matrix(cfg.input)
    else:
        _, data = generate(cfg.trajectory())
        if cfg.d is not None and cfg.d > data.shape[0]:
            data = lift(data, cfg.d, seed=cfg.seed, lift_noise=cfg.lift_noise)
    if not np.all(np.isfinite(data)):
        raise DataError("input contains non-finite values")
    return data


def reduce_stream(cfg: RunConfig, data: np.ndarray) -> np.ndarray:
    """Stream ``data`` through the reducer in blocks of ``cfg.b`` columns."""
    d = data.shape[0]
    n = cfg.n if cfg.n is not None else d
    k = cfg.k if cfg.k is not None else n
    if not k <= n <= d:
        raise ConfigError(f"need k <= n <= d, got k={k}, n={n}, d={d}")
    if k == n == d:
        return data
    reducer = Reducer(d, n, k, seed=cfg.seed, mode=cfg.projection, decay=cfg.decay)
    out = [Y for Y in (reducer.transform_block(blk) for blk in stream(data, cfg.b))
           if Y is not None]
    return np.hstack(out)


def _percentiles(values) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        return {"count": 0, "mean": None, "p50": None, "p95": None, "p99": None}
    p50, p95, p99 = np.percentile(arr, [50, 95, 99])
    return {"count": int(arr.size), "mean": float(arr.mean()),
            "p50": float(p50), "p95": float(p95), "p99": float(p99)}


def timing_report(series: MetricsSeries, phases: dict, n_samples: int, total: float) -> dict:
    """Per-phase totals plus learn/predict percentiles after the warm-up."""
    t_col = series.column("t")
    steps, first = np.unique(t_col, return_index=True)
    t_min = steps[0] if steps.size else 0
    learn = series.column("learn_time")[first][steps >= t_min + WARMUP]
    predict = series.column("predict_time")[t_col >= t_min + WARMUP]
    learn_total = sum(v for name, v in phases.items() if name != "prediction")
    return {
        "phases_seconds": {name: float(v) for name, v in phases.items()},
        "total_seconds": float(total),
        "samples": int(n_samples),
        "warmup_excluded": WARMUP,
        "amortized_learn_seconds": learn_total / max(1, n_samples),
        "learn_per_sample": _percentiles(learn),
        "predict_per_call": _percentiles(predict),
    }


def _threaded_eval(X, T_list, model, timer):
    """Learner on a worker thread; this thread scores the published snapshots."""
    M = model.hyper.M
    steps = X.shape[0]
    rw = RandomWalkBaseline()
    for s in range(1, M):
        rw.update(X[s] - X[s - 1])
    series = MetricsSeries(max_entropy_nats=math.log(model.N))
    channel: queue.Queue = queue.Queue(maxsize=64)
    failure: list = []

    def learner():
        try:
            for t in range(M, steps):
                c0 = time.perf_counter()
                model.observe(X[t], timer=timer)
                c1 = time.perf_counter()
                rw.update(X[t] - X[t - 1])
                channel.put((t, model.snapshot(), rw.sigma2, c1 - c0))
        except BaseException as exc:  # surfaced on the consumer side
            failure.append(exc)
        finally:
            channel.put(None)

    worker = threading.Thread(target=learner, name="tilestream-learner", daemon=True)
    worker.start()
    pred_timer: dict = {}
    while True:
        item = channel.get()
        if item is None:
            break
        t, snap, sigma2, learn_time = item
        score_snapshot(series, snap, X, t, T_list, sigma2, learn_time, model.kernels, pred_timer)
    worker.join()
    if failure:
        raise failure[0]
    timer["prediction"] = timer.get("prediction", 0.0) + pred_timer.get("prediction", 0.0)
    return series, series.summary(), model


def cmd_run(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_source(cfg)
    t0 = time.perf_counter()
    Z = reduce_stream(cfg, data)
    t_reduce = time.perf_counter() - t0
    k = Z.shape[0]
    hyper = cfg.hyperparameters(k)
    timer: dict = {}
    t1 = time.perf_counter()
    if cfg.threaded:
        X = np.ascontiguousarray(Z.T)
        if X.shape[0] < 2 * max(cfg.T) + hyper.M:
            raise InsufficientDataError(
                f"stream of {X.shape[0]} samples is shorter than 2*max(T) + M")
        model = init_model(X[:hyper.M], hyper, backend=cfg.backend)
        series, summary, model = _threaded_eval(X, sorted(set(cfg.T)), model, timer)
    else:
        series, summary, model = eval_stream(Z, cfg.T, hyper, backend=cfg.backend, timer=timer)
    total = time.perf_counter() - t1

    series.to_csv(out / "metrics.csv")
    series.to_jsonl(out / "metrics.jsonl")
    doc = {
        "config": {k: v for k, v in asdict(cfg).items() if k != "out"},
        "data_shape": list(data.shape),
        "reduced_dim": k,
        "samples_scored": int(Z.shape[1] - hyper.M),
        "teleports": int(model.n_teleports),
        "horizons": summary,
    }
    # timing-free so identical configs give identical files
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    report = timing_report(series, timer, Z.shape[1] - hyper.M, total)
    report["reduce_seconds"] = t_reduce
    report["backend"] = model.kernels.name
    (out / "timing.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    save_checkpoint(model, out / "model.ckpt")
    for T, s in summary.items():
        log.info("T=%s  log_pred_prob %.4f +- %.4f  (random walk %.4f)  entropy %.3f bits",
                 T, s["log_pred_prob_mean"], s["log_pred_prob_std"],
                 s["rw_log_pred_prob_mean"], s["entropy_bits_mean"])
    return doc


def _bench_stream(k: int, steps: int, seed: int) -> np.ndarray:
    """(steps, k) samples: a noisy Lorenz trajectory lifted to k dimensions."""
    _, traj = generate(TrajectoryConfig(system="lorenz", steps=steps, seed=seed))
    traj = (traj - traj.mean(axis=1, keepdims=True)) / traj.std(axis=1, keepdims=True)
    if k > traj.shape[0]:
        traj = lift(traj, k, seed=seed, lift_noise=0.05)
    else:
        traj = traj[:k]
    return np.ascontiguousarray(traj.T)


def _time_learning(X, hyper, backend, samples, B):
    model = init_model(X[:hyper.M], hyper, backend=backend)
    start = hyper.M
    for x in X[start:start + WARMUP]:
        model.observe(x)
    phases: dict = {}
    per_sample = []
    begin = start + WARMUP
    c0 = time.perf_counter()
    for x in X[begin:begin + samples]:
        s0 = time.perf_counter()
        model.observe(x, timer=phases, period=B)
        per_sample.append(time.perf_counter() - s0)
    total = time.perf_counter() - c0
    return model, phases, per_sample, total


def cmd_bench(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    k = cfg.bench_k
    Ns = sorted(set(cfg.bench_N))
    X = _bench_stream(k, cfg.M + WARMUP + cfg.bench_samples + 1, cfg.seed)
    report: dict = {"k": k, "samples": cfg.bench_samples, "warmup_excluded": WARMUP,
                    "backend": _kernels.resolve(cfg.backend).name, "scaling": [], "batch": {}}
    model = None
    for N in Ns:
        hyper = cfg.hyperparameters(k, N=N, B=1)
        model, phases, per_sample, total = _time_learning(X, hyper, cfg.backend,
                                                          cfg.bench_samples, 1)
        entry = {"N": N, "learn_per_sample": _percentiles(per_sample),
                 "amortized_seconds": total / cfg.bench_samples,
                 "phases_per_sample": {p: v / cfg.bench_samples for p, v in phases.items()}}
        report["scaling"].append(entry)
        log.info("N=%5d  learn p50 %.3f ms  E-step %.3f ms  M-step %.3f ms", N,
                 1e3 * entry["learn_per_sample"]["p50"],
                 1e3 * entry["phases_per_sample"].get("estep", 0.0),
                 1e3 * entry["phases_per_sample"].get("mstep", 0.0))

    N = Ns[-1]
    for B in (1, 30):
        hyper = cfg.hyperparameters(k, N=N, B=B)
        _, phases, per_sample, total = _time_learning(X, hyper, cfg.backend,
                                                      cfg.bench_samples, B)
        report["batch"][str(B)] = {"N": N, "amortized_seconds": total / cfg.bench_samples,
                                   "learn_per_sample": _percentiles(per_sample)}
        log.info("B=%2d  amortized %.3f ms/sample", B, 1e3 * total / cfg.bench_samples)

    snap = model.snapshot()
    rng = np.random.default_rng(cfg.seed)
    idx = rng.integers(0, X.shape[0], size=cfg.bench_predictions + WARMUP)
    times = []
    for i, j in enumerate(idx):
        s0 = time.perf_counter()
        log_pred_prob(snap, X[j], 1, model.kernels)
        if i >= WARMUP:
            times.append(time.perf_counter() - s0)
    report["prediction"] = {"N": N, "T": 1, **_percentiles(times)}
    log.info("prediction N=%d: p50 %.3f ms  p95 %.3f ms  p99 %.3f ms", N,
             1e3 * report["prediction"]["p50"], 1e3 * report["prediction"]["p95"],
             1e3 * report["prediction"]["p99"])
    (out / "bench.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def _matrix_path(out: Path, stem: str, fmt: str) -> Path:
    return out / f"{stem}.{'csv' if fmt == 'csv' else 'mflw'}"


def cmd_reduce(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    data = load_source(cfg)
    Z = reduce_stream(cfg, data)
    path = _matrix_path(out, "reduced", cfg.format)
    write_matrix(path, Z)
    log.info("reduced %s -> %s, wrote %s", data.shape, Z.shape, path)
    return {"input_shape": list(data.shape), "output_shape": list(Z.shape), "path": str(path)}


def cmd_simulate(cfg: RunConfig) -> dict:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    clean, noisy = generate(cfg.trajectory())
    if cfg.d is not None and cfg.d > clean.shape[0]:
        clean = lift(clean, cfg.d, seed=cfg.seed)
        noisy = lift(noisy, cfg.d, seed=cfg.seed, lift_noise=cfg.lift_noise)
    paths = {}
    for stem, arr in (("clean", clean), ("noisy", noisy)):
        paths[stem] = str(_matrix_path(out, stem, cfg.format))
        write_matrix(paths[stem], arr)
    log.info("wrote %s and %s (%d x %d)", paths["clean"], paths["noisy"], *noisy.shape)
    return paths


COMMANDS = {"run": cmd_run, "bench": cmd_bench, "reduce": cmd_reduce, "simulate": cmd_simulate}


def main(argv=None) -> int:
    try:
        cfg, args = resolve_config(argv)
    except ConfigError as exc:
        print(f"tilestream: invalid configuration: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(message)s")
    try:
        COMMANDS[cfg.mode](cfg)
    except ConfigError as exc:
        print(f"tilestream: invalid configuration: {exc}", file=sys.stderr)
        return 2
    except (DataError, FormatError, InsufficientDataError, ShapeError, IntegrationDiverged,
            NumericalError, OSError) as exc:
        print(f"tilestream: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
