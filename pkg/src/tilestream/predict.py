"""Closed-form multi-step prediction, transition entropy and stream evaluation."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import _kernels
from .errors import InsufficientDataError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ModelSnapshot:
    """Read-only parameters for the prediction path.

    ``L`` holds precision Cholesky factors (``inv(Sigma_j) = L_j L_j^T``);
    :attr:`Sigma` converts on demand.
    """

    A: np.ndarray
    mu: np.ndarray
    L: np.ndarray
    alpha: np.ndarray
    t: int = 0

    def __post_init__(self):
        for name in ("A", "mu", "L", "alpha"):
            arr = getattr(self, name)
            if arr.flags.writeable:
                arr = arr.copy()
                arr.flags.writeable = False
                object.__setattr__(self, name, arr)

    @classmethod
    def from_covariances(cls, A, mu, Sigma, alpha, t=0) -> "ModelSnapshot":
        Sigma = np.asarray(Sigma, dtype=np.float64)
        L = np.linalg.cholesky(np.linalg.inv(Sigma))
        return cls(np.asarray(A, dtype=np.float64), np.asarray(mu, dtype=np.float64),
                   L, np.asarray(alpha, dtype=np.float64), t)

    @property
    def N(self) -> int:
        return self.mu.shape[0]

    @property
    def k(self) -> int:
        return self.mu.shape[1]

    @property
    def Sigma(self) -> np.ndarray:
        P = self.L @ np.swapaxes(self.L, 1, 2)
        return np.linalg.inv(P)

    def equals(self, other: "ModelSnapshot") -> bool:
        return all(np.array_equal(getattr(self, n), getattr(other, n))
                   for n in ("A", "mu", "L", "alpha"))


def _propagate(alpha, A, T):
    w = alpha
    for _ in range(T):
        w = w @ A
    return w


def predict_mixture(snap: ModelSnapshot, T: int):
    """Tile weights T steps ahead and the components they mix.

    Returns ``(w, (mu, L))`` with ``w_j = sum_i alpha_i (A^T)_ij``, computed by
    T vector-matrix products.
    """
    if T < 0:
        raise ValueError(f"T must be >= 0, got {T}")
    return _propagate(snap.alpha, snap.A, int(T)), (snap.mu, snap.L)


def mixture_logpdf(w, mu, L, x, kernels=None) -> float:
    """``log sum_j w_j N(x; mu_j, Sigma_j)`` via log-sum-exp."""
    K = _kernels.resolve(kernels)
    logb = K.node_logpdf(mu, L, x)
    return float(logsumexp(logb, b=w))


def log_pred_prob(snap: ModelSnapshot, x_future, T: int, kernels=None) -> float:
    """Log predictive density (nats) of ``x_future`` T steps ahead."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    x = np.asarray(x_future, dtype=np.float64)
    if x.shape != (snap.k,):
        raise ShapeError(f"expected length-{snap.k} vector, got {x.shape}")
    w, (mu, L) = predict_mixture(snap, T)
    return mixture_logpdf(w, mu, L, x, kernels)


def entropy_of(w) -> tuple[float, float]:
    """Shannon entropy of a probability vector in (nats, bits)."""
    w = np.asarray(w)
    pos = w[w > 0]
    h = float(-np.sum(pos * np.log(pos)))
    h = max(h, 0.0)
    return h, h / math.log(2.0)


def entropy(snap: ModelSnapshot, T: int) -> tuple[float, float]:
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    w, _ = predict_mixture(snap, T)
    return entropy_of(w)


# --------------------------------------------------------------------------
# random-walk baseline
# --------------------------------------------------------------------------

def random_walk_baseline(sigma2: float, x_t, x_future, T: int) -> float:
    """``log N(x_future; x_t, T * sigma2 * I)`` in nats."""
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    x_t = np.asarray(x_t, dtype=np.float64)
    diff = np.asarray(x_future, dtype=np.float64) - x_t
    k = x_t.shape[0]
    var = T * sigma2
    return float(-0.5 * k * (LOG_2PI + math.log(var)) - 0.5 * (diff @ diff) / var)


class RandomWalkBaseline:
    """Isotropic random walk whose step variance is an exponential smooth of
    the mean squared one-step residual."""

    FLOOR = 1e-12

    def __init__(self, rate: float = 0.01, sigma2: float | None = None):
        self.rate = rate
        self.sigma2 = sigma2

    def update(self, residual) -> float:
        r2 = float(np.mean(np.square(residual)))
        if self.sigma2 is None:
            self.sigma2 = r2
        else:
            self.sigma2 = (1.0 - self.rate) * self.sigma2 + self.rate * r2
        return self.sigma2

    def logpdf(self, x_t, x_future, T: int) -> float:
        s2 = max(self.FLOOR, self.sigma2 if self.sigma2 is not None else 1.0)
        return random_walk_baseline(s2, x_t, x_future, T)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

COLUMNS = ("t", "T", "log_pred_prob", "entropy_nats", "entropy_bits",
           "learn_time", "predict_time", "rw_log_pred_prob")
_INT_COLUMNS = ("t", "T")


class MetricsSeries:
    """Column store of per-(t, T) evaluation records."""

    def __init__(self, columns: dict | None = None, max_entropy_nats: float | None = None):
        self._rows: dict[str, list] = {c: [] for c in COLUMNS}
        self.max_entropy_nats = max_entropy_nats
        if columns is not None:
            for c in COLUMNS:
                self._rows[c] = list(columns[c])

    def append(self, **rec) -> None:
        for c in COLUMNS:
            self._rows[c].append(rec[c])

    def __len__(self) -> int:
        return len(self._rows["t"])

    def column(self, name: str) -> np.ndarray:
        dtype = np.int64 if name in _INT_COLUMNS else np.float64
        return np.asarray(self._rows[name], dtype=dtype)

    def records(self):
        for i in range(len(self)):
            yield {c: self._rows[c][i] for c in COLUMNS}

    def for_T(self, T: int) -> dict:
        mask = self.column("T") == T
        return {c: self.column(c)[mask] for c in COLUMNS}

    def T_values(self) -> list[int]:
        return sorted(set(int(v) for v in self._rows["T"]))

    def summary(self) -> dict:
        """Mean and std over the last half of the records for each T."""
        out = {}
        for T in self.T_values():
            rec = self.for_T(T)
            order = np.argsort(rec["t"], kind="stable")
            half = len(order) // 2
            sel = order[half:]
            lp = rec["log_pred_prob"][sel]
            rw = rec["rw_log_pred_prob"][sel]
            ent = rec["entropy_bits"][sel]
            out[str(T)] = {
                "count": int(sel.size),
                "t_start": int(rec["t"][sel].min()) if sel.size else None,
                "log_pred_prob_mean": float(lp.mean()),
                "log_pred_prob_std": float(lp.std()),
                "rw_log_pred_prob_mean": float(rw.mean()),
                "rw_log_pred_prob_std": float(rw.std()),
                "entropy_bits_mean": float(ent.mean()),
                "entropy_nats_mean": float(rec["entropy_nats"][sel].mean()),
            }
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(COLUMNS)
            for rec in self.records():
                writer.writerow([rec[c] if c in _INT_COLUMNS else repr(float(rec[c]))
                                 for c in COLUMNS])

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records():
                fh.write(json.dumps({c: (int(rec[c]) if c in _INT_COLUMNS else float(rec[c]))
                                     for c in COLUMNS}) + "\n")

    @classmethod
    def from_csv(cls, path) -> "MetricsSeries":
        cols = {c: [] for c in COLUMNS}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                for c in COLUMNS:
                    cols[c].append(int(row[c]) if c in _INT_COLUMNS else float(row[c]))
        return cls(cols)

    @classmethod
    def from_jsonl(cls, path) -> "MetricsSeries":
        cols = {c: [] for c in COLUMNS}
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                for c in COLUMNS:
                    cols[c].append(rec[c])
        return cls(cols)


def eval_stream(data, T_list, hyper=None, *, model=None, backend=None,
                publish=None, timer=None):
    """Learn on a stream and score strictly causal T-step predictions.

    Parameters
    ----------
    data : ndarray (k, steps)
        Reduced observations, one sample per column.
    T_list : sequence of int
        Prediction horizons.
    hyper : Hyperparameters
        Used to initialize a model from the first ``hyper.M`` samples when
        ``model`` is not given.
    model : Model, optional
        An already initialized model; it is fed ``data`` from column
        ``model.hyper.M`` on.
    publish : callable, optional
        Called with each fresh snapshot (e.g. to hand it to reader threads).
    timer : dict, optional
        Accumulates per-phase learn times and ``prediction``.

    Returns
    -------
    (MetricsSeries, summary dict, Model)
    """
    from .model import init_model

    X = np.ascontiguousarray(np.asarray(data, dtype=np.float64).T)
    steps = X.shape[0]
    T_list = sorted({int(T) for T in T_list})
    if not T_list or T_list[0] < 1:
        raise ValueError("T_list must contain horizons >= 1")
    if model is None:
        if hyper is None:
            raise ValueError("either hyper or model must be given")
        M = hyper.M
    else:
        M = model.hyper.M
    if steps < 2 * T_list[-1] + M:
        raise InsufficientDataError(
            f"stream of {steps} samples is shorter than 2*max(T) + M = {2 * T_list[-1] + M}")
    if model is None:
        model = init_model(X[:M], hyper, backend=backend)
    if X.shape[1] != model.k:
        raise ShapeError(f"data has {X.shape[1]} dimensions, model expects {model.k}")

    K = model.kernels
    rw = RandomWalkBaseline()
    for s in range(1, M):
        rw.update(X[s] - X[s - 1])

    series = MetricsSeries(max_entropy_nats=math.log(model.N))
    clock = time.perf_counter
    for t in range(M, steps):
        x = X[t]
        c0 = clock()
        model.observe(x, timer=timer)
        c1 = clock()
        rw.update(x - X[t - 1])
        snap = model.snapshot()
        if publish is not None:
            publish(snap)
        score_snapshot(series, snap, X, t, T_list, rw.sigma2, c1 - c0, K, timer)
    return series, series.summary(), model


def score_snapshot(series, snap, X, t, T_list, rw_sigma2, learn_time, kernels=None,
                   timer=None):
    """Append one record per horizon for a snapshot taken right after ``X[t]``.

    ``X`` is the (steps, k) stream. Only ``X[t]`` (for the baseline) and the
    realized futures ``X[t + T]`` are read.
    """
    x = X[t]
    steps = X.shape[0]
    K = _kernels.resolve(kernels)
    clock = time.perf_counter
    w = snap.alpha
    done = 0
    for T in T_list:
        if t + T >= steps:
            break
        p0 = clock()
        w = _propagate(w, snap.A, T - done)
        done = T
        lp = mixture_logpdf(w, snap.mu, snap.L, X[t + T], K)
        h_nats, h_bits = entropy_of(w)
        p1 = clock()
        if timer is not None:
            timer["prediction"] = timer.get("prediction", 0.0) + (p1 - p0)
        series.append(t=t, T=T, log_pred_prob=lp, entropy_nats=h_nats,
                      entropy_bits=h_bits, learn_time=learn_time, predict_time=p1 - p0,
                      rw_log_pred_prob=random_walk_baseline(
                          max(RandomWalkBaseline.FLOOR, rw_sigma2), x, X[t + T], T))
