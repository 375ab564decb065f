"""Synthetic trajectories, random lifts and matrix file I/O.

Data matrices are (dims, steps): one sample per column. On disk the binary
``MFLW`` format stores the same orientation; CSV stores one sample per row.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IntegrationDiverged

SYSTEMS = ("van_der_pol", "lorenz")
DIVERGENCE_LIMIT = 1e8

MAGIC = b"MFLW"
VERSION = 1
_HEADER = struct.Struct("<4sIQQ")

_DEFAULT_PARAMS = {
    "van_der_pol": {"mu": 1.0},
    "lorenz": {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0},
}
_DEFAULT_DT = {"van_der_pol": 0.1, "lorenz": 0.01}


@dataclass
class TrajectoryConfig:
    system: str = "van_der_pol"
    steps: int = 20000
    noise_frac: float = 0.05
    seed: int = 0
    dt: float | None = None
    params: dict = field(default_factory=dict)
    burn_in: int = 0

    def __post_init__(self):
        if self.system not in SYSTEMS:
            raise ValueError(f"unknown system {self.system!r}; expected one of {SYSTEMS}")
        if self.dt is None:
            self.dt = _DEFAULT_DT[self.system]
        merged = dict(_DEFAULT_PARAMS[self.system])
        merged.update(self.params or {})
        self.params = merged
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.noise_frac < 0:
            raise ValueError(f"noise_frac must be >= 0, got {self.noise_frac}")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")

    @property
    def dim(self) -> int:
        return 2 if self.system == "van_der_pol" else 3


def van_der_pol(state, mu):
    x, y = state
    return np.array([y, mu * (1.0 - x * x) * y - x])


def lorenz(state, sigma, rho, beta):
    x, y, z = state
    return np.array([sigma * (y - x), x * (rho - z) - y, x * y - beta * z])


def _rk4(f, state, dt, n, args):
    out = np.empty((n, state.size))
    s = state.astype(np.float64)
    half = 0.5 * dt
    for i in range(n):
        k1 = f(s, *args)
        k2 = f(s + half * k1, *args)
        k3 = f(s + half * k2, *args)
        k4 = f(s + dt * k3, *args)
        s = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.abs(s) < DIVERGENCE_LIMIT):
            raise IntegrationDiverged(f"state left |x| < {DIVERGENCE_LIMIT:g} at step {i}")
        out[i] = s
    return out


def generate(config: TrajectoryConfig) -> tuple[np.ndarray, np.ndarray]:
    """Integrate the configured system with fixed-step RK4.

    Returns ``(clean, noisy)``, both (dim, steps). Observation noise is
    i.i.d. Gaussian with per-dimension standard deviation ``noise_frac``
    times that dimension's standard deviation in the clean trajectory.
    """
    rng = np.random.default_rng(config.seed)
    if config.system == "van_der_pol":
        f = van_der_pol
        args = (config.params["mu"],)
        x0 = rng.uniform(-2.0, 2.0, size=2)
    else:
        f = lorenz
        args = (config.params["sigma"], config.params["rho"], config.params["beta"])
        x0 = np.array([1.0, 1.0, 1.0]) + rng.normal(scale=0.1, size=3)
    traj = _rk4(f, x0, config.dt, config.burn_in + config.steps, args)[config.burn_in:]
    clean = np.ascontiguousarray(traj.T)
    if config.noise_frac == 0:
        return clean, clean.copy()
    scale = config.noise_frac * clean.std(axis=1)
    noisy = clean + scale[:, None] * rng.standard_normal(clean.shape)
    return clean, noisy


def lift(trajectory, d: int, seed: int = 0, lift_noise: float = 0.0) -> np.ndarray:
    """Embed a (D, steps) trajectory into d dimensions with an orthonormal map."""
    trajectory = np.asarray(trajectory, dtype=np.float64)
    D = trajectory.shape[0]
    if d < D:
        raise ValueError(f"cannot lift {D}-dimensional data into d={d}")
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((d, D)))
    out = basis @ trajectory
    if lift_noise > 0:
        out += lift_noise * rng.standard_normal(out.shape)
    return out


def lift_basis(d: int, D: int, seed: int = 0) -> np.ndarray:
    """The orthonormal (d, D) map used by :func:`lift` for the same seed."""
    rng = np.random.default_rng(seed)
    basis, _ = np.linalg.qr(rng.standard_normal((d, D)))
    return basis


# --------------------------------------------------------------------------
# matrix files
# --------------------------------------------------------------------------

def write_matrix(path, X) -> None:
    """Write a 2-D float64 matrix; ``.csv`` paths get the CSV layout."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {X.shape}")
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"dim{i}" for i in range(X.shape[0])])
            for col in X.T:
                writer.writerow([repr(float(v)) for v in col])
        return
    rows, cols = X.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows, cols))
        fh.write(np.ascontiguousarray(X, dtype="<f8").tobytes())


def _load_binary(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = len(raw) - _HEADER.size
    if rows * cols * 8 != payload:
        raise FormatError(f"{path}: header says {rows}x{cols} but payload has {payload} bytes")
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size, count=rows * cols)
    return data.reshape(rows, cols).astype(np.float64)


def _load_csv(path: Path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty CSV file") from None
        if not header or not all(h.strip().startswith("dim") for h in header):
            raise FormatError(f"{path}: expected a dim0,dim1,... header row")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    return np.asarray(rows, dtype=np.float64).reshape(-1, len(header)).T.copy()


def load_matrix(path) -> np.ndarray:
    """Load a (dims, steps) matrix from the binary or the CSV format."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return _load_binary(path)
    if path.suffix.lower() == ".csv":
        return _load_csv(path)
    raise FormatError(f"{path}: not an MFLW file and not a .csv")


def stream(X, b: int):
    """Yield consecutive (dims, <=b) column blocks of ``X``."""
    if b < 1:
        raise ValueError(f"batch size must be >= 1, got {b}")
    X = np.asarray(X)
    for start in range(0, X.shape[1], b):
        yield X[:, start:start + b]
