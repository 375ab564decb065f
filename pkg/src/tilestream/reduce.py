"""Two-stage streaming dimensionality reduction.

Stage one multiplies by a fixed sparse random sign matrix (d -> n). Stage two
tracks the top-k left singular subspace of the projected stream with an
incremental block SVD whose basis is rotated at every step, by the solution
of an orthogonal Procrustes problem, to stay as close as possible to the
previous basis (n -> k).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse

from .errors import DataError, NumericalError, RankDeficientError, ShapeError

MODES = ("achlioptas", "very-sparse")

_ROW_CHUNK = 4096


@dataclass(frozen=True)
class SparseProjection:
    """Random d x n matrix with entries in {+s, 0, -s}, stored as CSR."""

    d: int
    n: int
    seed: int
    mode: str
    matrix: scipy.sparse.csr_matrix = field(repr=False, compare=False)

    @property
    def scale(self) -> float:
        if self.mode == "achlioptas":
            return float(np.sqrt(3.0 / self.n))
        return float(np.sqrt(np.sqrt(self.d) / self.n))

    @property
    def density(self) -> float:
        if self.mode == "achlioptas":
            return 1.0 / 3.0
        return 1.0 / np.sqrt(self.d)

    def project(self, X):
        return project(self, X)


def build_projection(d: int, n: int, seed: int = 0, mode: str = "achlioptas") -> SparseProjection:
    """Build the sparse projection for ``(d, n, seed, mode)``.

    In ``achlioptas`` mode each entry is ``+-sqrt(3/n)`` with probability 1/6
    each and zero otherwise. ``very-sparse`` keeps an entry with probability
    ``1/sqrt(d)`` at scale ``sqrt(sqrt(d)/n)``. Both give
    ``E ||P^T x||^2 = ||x||^2``. The matrix is a pure function of the four
    arguments.
    """
    d = int(d)
    n = int(n)
    if n <= 0 or d <= 0:
        raise ValueError(f"projection dimensions must be positive, got d={d}, n={n}")
    if n > d:
        raise ValueError(f"cannot project from d={d} up to n={n}")
    if mode not in MODES:
        raise ValueError(f"unknown projection mode {mode!r}; expected one of {MODES}")

    if mode == "achlioptas":
        p_nonzero = 1.0 / 3.0
        scale = np.sqrt(3.0 / n)
    else:
        p_nonzero = 1.0 / np.sqrt(d)
        scale = np.sqrt(np.sqrt(d) / n)

    rng = np.random.default_rng(seed)
    rows, cols, vals = [], [], []
    for start in range(0, d, _ROW_CHUNK):
        stop = min(d, start + _ROW_CHUNK)
        u = rng.random((stop - start, n))
        r, c = np.nonzero(u < p_nonzero)
        # lower half of the nonzero band is +s, upper half -s
        sign = np.where(u[r, c] < 0.5 * p_nonzero, 1.0, -1.0)
        rows.append(r + start)
        cols.append(c)
        vals.append(sign * scale)
    matrix = scipy.sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(d, n),
    )
    matrix.sort_indices()
    return SparseProjection(d=d, n=n, seed=int(seed), mode=mode, matrix=matrix)


def project(P: SparseProjection, X) -> np.ndarray:
    """Return ``P^T X`` for a (d, b) block or a length-d vector."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != P.d:
        raise ShapeError(f"expected {P.d} rows, got array of shape {X.shape}")
    return np.asarray(P.matrix.T @ X)


# --------------------------------------------------------------------------
# Procrustean streaming SVD
# --------------------------------------------------------------------------

def _qr_positive(X):
    """Reduced QR with a non-negative diagonal on R."""
    Q, R = np.linalg.qr(X, mode="reduced")
    s = np.sign(np.diag(R))
    s[s == 0] = 1.0
    return Q * s[None, :], R * s[:, None]


def _polar_factor(M):
    """Orthogonal factor ``U V^T`` of the SVD of a square matrix."""
    try:
        Ut, _, Vt = np.linalg.svd(M)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed in Procrustes step: {exc}") from exc
    return Ut @ Vt


class ProSVD:
    """Streaming top-k left singular subspace with a stable basis.

    Attributes
    ----------
    Q : ndarray (n, k)
        Orthonormal basis of the tracked subspace.
    R : ndarray (k, k)
        Inner block; its singular values are the discounted top-k singular
        values of the data seen so far.
    decay : float
        Discount applied to the singular values at every update, in (0, 1].
    procrustes : bool
        When False the basis is left as the raw leading singular vectors
        (``Q_hat @ U1``). Only useful as a stability baseline.
    """

    ORTHO_TOL = 1e-8
    RPERP_FLOOR = 1e-14

    def __init__(self, Q, R, decay=1.0, samples_seen=0, procrustes=True):
        if not 0.0 < decay <= 1.0:
            raise ValueError(f"decay must lie in (0, 1], got {decay}")
        self.Q = np.ascontiguousarray(Q, dtype=np.float64)
        self.R = np.ascontiguousarray(R, dtype=np.float64)
        self.decay = float(decay)
        self.samples_seen = int(samples_seen)
        self.procrustes = bool(procrustes)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def k(self) -> int:
        return self.Q.shape[1]

    @classmethod
    def from_data(cls, X0, k, decay=1.0, procrustes=True):
        return prosvd_init(X0, k, decay=decay, procrustes=procrustes)

    def copy(self) -> "ProSVD":
        return ProSVD(self.Q.copy(), self.R.copy(), self.decay,
                      self.samples_seen, self.procrustes)

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.R, compute_uv=False)

    def update(self, X_new) -> "ProSVD":
        """Absorb ``b`` new columns in place and return ``self``."""
        X_new = np.asarray(X_new, dtype=np.float64)
        if X_new.ndim == 1:
            X_new = X_new[:, None]
        if X_new.ndim != 2 or X_new.shape[0] != self.n:
            raise ShapeError(f"expected ({self.n}, b) block, got {X_new.shape}")
        if X_new.shape[1] == 0:
            return self
        if not np.all(np.isfinite(X_new)):
            raise DataError("non-finite values in proSVD input block")

        Q, R, k = self.Q, self.R, self.k
        b = X_new.shape[1]

        # block Gram-Schmidt against Q, applied twice for stability
        C = Q.T @ X_new
        X_perp = X_new - Q @ C
        C2 = Q.T @ X_perp
        X_perp -= Q @ C2
        C += C2
        Q_perp, R_perp = _qr_positive(X_perp)
        diag = np.diag(R_perp).copy()
        small = diag < self.RPERP_FLOOR
        if np.any(small):
            idx = np.arange(diag.size)[small]
            R_perp[idx, idx] = self.RPERP_FLOOR

        kb = R_perp.shape[0]
        Q_hat = np.hstack([Q, Q_perp])
        R_hat = np.zeros((k + kb, k + b))
        R_hat[:k, :k] = R
        R_hat[:k, k:] = C
        R_hat[k:, k:] = R_perp

        try:
            U, sigma, Vt = np.linalg.svd(R_hat, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"SVD of augmented block did not converge: {exc}") from exc
        sigma = self.decay * sigma

        U1 = U[:, :k]
        if self.procrustes:
            # Q_{t-1}^T Q_hat U1 is just the leading k rows of U1
            T = _polar_factor(U1[:k, :])
        else:
            T = np.eye(k)
        Q_new = Q_hat @ (U1 @ T.T)

        V1 = Vt[:k, :].T
        _, R_v = _qr_positive(V1)
        R_new = T @ (sigma[:k, None] * R_v.T)

        if not (np.all(np.isfinite(Q_new)) and np.all(np.isfinite(R_new))):
            raise NumericalError("proSVD update produced non-finite values")
        if np.abs(Q_new.T @ Q_new - np.eye(k)).max() > self.ORTHO_TOL:
            Q_new, fix = _qr_positive(Q_new)
            R_new = fix @ R_new

        self.Q = Q_new
        self.R = R_new
        self.samples_seen += b
        return self

    def project(self, x) -> np.ndarray:
        return prosvd_project(self, x)


def prosvd_init(X0, k, decay=1.0, procrustes=True) -> ProSVD:
    """Start a tracker from an (n, l) block with ``l >= k``.

    The basis is the first ``k`` columns of the QR factor of ``X0`` and the
    inner block is the leading ``k x k`` block of ``R``.
    """
    X0 = np.asarray(X0, dtype=np.float64)
    if X0.ndim != 2:
        raise ShapeError(f"initial data must be 2-D, got shape {X0.shape}")
    n, l = X0.shape
    k = int(k)
    if k < 1 or k > n:
        raise ValueError(f"k must lie in [1, n={n}], got {k}")
    if l < k:
        raise ValueError(f"need at least k={k} initial columns, got {l}")
    if not np.all(np.isfinite(X0)):
        raise DataError("non-finite values in initial proSVD data")
    Q, R = _qr_positive(X0)
    scale = np.abs(R).max() if R.size else 0.0
    diag = np.abs(np.diag(R)[:k])
    if scale == 0.0 or np.any(diag < 1e-12 * scale):
        raise RankDeficientError(f"initial data has rank < k={k}")
    return ProSVD(Q[:, :k], R[:k, :k], decay=decay, samples_seen=l, procrustes=procrustes)


def prosvd_update(state: ProSVD, X_new) -> ProSVD:
    return state.update(X_new)


def prosvd_project(state: ProSVD, x) -> np.ndarray:
    """Coordinates ``Q^T x`` of a length-n vector (or (n, b) block)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != state.n:
        raise ShapeError(f"expected leading dimension {state.n}, got {x.shape}")
    return state.Q.T @ x


def principal_angles(A, B) -> np.ndarray:
    """Principal angles (radians) between the column spans of A and B."""
    return scipy.linalg.subspace_angles(A, B)


class Reducer:
    """Chains the projection and the tracker over a column stream.

    Either stage may be absent: with ``n == d`` the projection is skipped and
    with ``k == n`` the tracker is skipped. ``transform_block`` updates the
    tracker with the block first and then returns the block's coordinates in
    the refreshed basis.
    """

    def __init__(self, d, n, k, seed=0, mode="achlioptas", decay=1.0):
        if not (1 <= k <= n <= d):
            raise ValueError(f"need 1 <= k <= n <= d, got k={k}, n={n}, d={d}")
        self.d, self.n, self.k = int(d), int(n), int(k)
        self.projection = build_projection(d, n, seed, mode) if n < d else None
        self.decay = decay
        self.svd: ProSVD | None = None
        self._pending = None

    @property
    def uses_svd(self) -> bool:
        return self.k < self.n

    def _stage1(self, X):
        return X if self.projection is None else project(self.projection, X)

    def transform_block(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[:, None]
        Y = self._stage1(X)
        if not self.uses_svd:
            return Y
        if self.svd is None:
            buf = Y if self._pending is None else np.hstack([self._pending, Y])
            if buf.shape[1] < self.k:
                self._pending = buf
                return None
            self.svd = prosvd_init(buf[:, :self.k], self.k, decay=self.decay)
            if buf.shape[1] > self.k:
                self.svd.update(buf[:, self.k:])
            self._pending = None
            return self.svd.Q.T @ buf
        self.svd.update(Y)
        return self.svd.Q.T @ Y
