"""Hot inner loops of the learner and predictor.

Every kernel exists twice: a vectorized numpy version and a numba ``@njit``
version with identical signature and semantics. The active set is chosen at
import time; set ``TILESTREAM_NO_NUMBA=1`` to force the numpy path (or when
numba is not installed). ``get_kernels("numpy" | "numba")`` returns either
set explicitly, which is what the backend benchmark uses.

Conventions shared by both sets:

* ``mu`` is (N, k), ``L`` is (N, k, k) lower-triangular precision Cholesky
  factors (``inv(Sigma_j) = L_j @ L_j.T``).
* Arrays the model publishes to snapshots (``A``, ``alpha``) are returned
  in fresh storage (``transition_adam`` may be handed a retired buffer that
  no reader holds via ``out``); ``Nhat``, ``S1``, ``S2``, the logits and the
  optimizer moments are updated in place.
"""
from __future__ import annotations

import math
import os
from types import SimpleNamespace

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# numpy reference implementations
# --------------------------------------------------------------------------

def _np_node_logpdf(mu, L, x):
    k = mu.shape[1]
    diff = x[None, :] - mu
    # y_j = L_j^T (x - mu_j)
    y = np.einsum("nij,ni->nj", L, diff)
    logdet = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    return -0.5 * k * LOG_2PI + logdet - 0.5 * np.einsum("nj,nj->n", y, y)


def _np_filter_accumulate(alpha_prev, A, logb, Nhat, keep):
    shift = logb.max()
    b = np.exp(logb - shift)
    u = (alpha_prev @ A) * b
    Z = u.sum()
    if not (Z > 0.0 and math.isfinite(Z)):
        return u, Nhat.sum(axis=0), -math.inf
    alpha_new = u / Z
    Nhat *= keep
    Nhat += alpha_prev[:, None] * A * (b / Z)[None, :]
    return alpha_new, Nhat.sum(axis=0), math.log(Z) + shift


def _np_accumulate_moments(S1, S2, alpha, x, keep):
    S1 *= keep
    S1 += alpha[:, None] * x[None, :]
    S2 *= keep
    S2 += alpha[:, None, None] * np.outer(x, x)[None, :, :]


def _np_row_softmax(a, out=None):
    out = np.subtract(a, a.max(axis=1, keepdims=True), out=out)
    np.exp(out, out=out)
    out *= (1.0 / out.sum(axis=1))[:, None]
    return out


def _np_transition_adam(a, Nhat, beta_m1, A, m, v, lr, b1, b2, eps, bc1, bc2, out=None):
    C = Nhat + beta_m1
    g = C - A * C.sum(axis=1, keepdims=True)
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    a += lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return _np_row_softmax(a, out)


def _np_node_gradients(mu, L, S1, S2, nhat, mu0, lam, nu, Psi):
    k = mu.shape[1]
    P = L @ np.swapaxes(L, 1, 2)
    w = lam + nhat
    vvec = S1 + lam[:, None] * mu0
    g_mu = np.einsum("nij,nj->ni", P, vvec - w[:, None] * mu)
    W = (Psi[None, :, :] + S2
         + lam[:, None, None] * mu0[:, :, None] * mu0[:, None, :]
         + w[:, None, None] * mu[:, :, None] * mu[:, None, :])
    cross = mu[:, :, None] * vvec[:, None, :]
    G0 = 0.5 * (cross + np.swapaxes(cross, 1, 2)) - 0.5 * W
    g_L = np.tril(2.0 * G0 @ L)
    c = nu + nhat + k + 2.0
    idx = np.arange(k)
    g_L[:, idx, idx] += c[:, None] / L[:, idx, idx]
    return g_mu, g_L


NUMPY_KERNELS = SimpleNamespace(
    name="numpy",
    node_logpdf=_np_node_logpdf,
    filter_accumulate=_np_filter_accumulate,
    accumulate_moments=_np_accumulate_moments,
    row_softmax=_np_row_softmax,
    transition_adam=_np_transition_adam,
    node_gradients=_np_node_gradients,
)


# --------------------------------------------------------------------------
# numba implementations
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_node_logpdf(mu, L, x):
        N, k = mu.shape
        out = np.empty(N)
        const = -0.5 * k * LOG_2PI
        diff = np.empty(k)
        for j in range(N):
            for r in range(k):
                diff[r] = x[r] - mu[j, r]
            ld = 0.0
            q = 0.0
            for c in range(k):
                ld += math.log(L[j, c, c])
                y = 0.0
                for r in range(c, k):
                    y += L[j, r, c] * diff[r]
                q += y * y
            out[j] = const + ld - 0.5 * q
        return out

    @njit(cache=True)
    def _nb_filter_accumulate(alpha_prev, A, logb, Nhat, keep):
        N = A.shape[0]
        shift = logb.max()
        b = np.empty(N)
        for j in range(N):
            b[j] = math.exp(logb[j] - shift)
        v = np.zeros(N)
        for i in range(N):
            ai = alpha_prev[i]
            for j in range(N):
                v[j] += ai * A[i, j]
        Z = 0.0
        u = np.empty(N)
        for j in range(N):
            u[j] = v[j] * b[j]
            Z += u[j]
        nhat = np.zeros(N)
        if not (Z > 0.0 and math.isfinite(Z)):
            for i in range(N):
                for j in range(N):
                    nhat[j] += Nhat[i, j]
            return u, nhat, -math.inf
        alpha_new = np.empty(N)
        bz = np.empty(N)
        for j in range(N):
            alpha_new[j] = u[j] / Z
            bz[j] = b[j] / Z
        for i in range(N):
            ai = alpha_prev[i]
            for j in range(N):
                val = Nhat[i, j] * keep + ai * A[i, j] * bz[j]
                Nhat[i, j] = val
                nhat[j] += val
        return alpha_new, nhat, math.log(Z) + shift

    @njit(cache=True)
    def _nb_accumulate_moments(S1, S2, alpha, x, keep):
        N, k = S1.shape
        for j in range(N):
            aj = alpha[j]
            for r in range(k):
                S1[j, r] = S1[j, r] * keep + aj * x[r]
                axr = aj * x[r]
                for c in range(k):
                    S2[j, r, c] = S2[j, r, c] * keep + axr * x[c]

    @njit(cache=True)
    def _nb_row_softmax(a):
        N, M = a.shape
        out = np.empty((N, M))
        for i in range(N):
            mx = a[i, 0]
            for j in range(1, M):
                if a[i, j] > mx:
                    mx = a[i, j]
            s = 0.0
            for j in range(M):
                e = math.exp(a[i, j] - mx)
                out[i, j] = e
                s += e
            for j in range(M):
                out[i, j] /= s
        return out

    @njit(cache=True, fastmath=True)
    def _nb_logit_adam(a, Nhat, beta_m1, A, m, v, lr, b1, b2, eps, bc1, bc2, out):
        # fused gradient + moment + logit update; writes row-shifted logits
        N, M = a.shape
        step = lr / bc1
        inv_sqrt_bc2 = 1.0 / math.sqrt(bc2)
        for i in range(N):
            rs = M * beta_m1
            for j in range(M):
                rs += Nhat[i, j]
            best = -np.inf
            for j in range(M):
                g = Nhat[i, j] + beta_m1 - A[i, j] * rs
                mij = b1 * m[i, j] + (1.0 - b1) * g
                vij = b2 * v[i, j] + (1.0 - b2) * g * g
                m[i, j] = mij
                v[i, j] = vij
                aij = a[i, j] + step * mij / (math.sqrt(vij) * inv_sqrt_bc2 + eps)
                a[i, j] = aij
                best = max(best, aij)
            for j in range(M):
                out[i, j] = a[i, j] - best

    @njit(cache=True, fastmath=True)
    def _nb_normalize_rows(E):
        N, M = E.shape
        for i in range(N):
            s = 0.0
            for j in range(M):
                s += E[i, j]
            inv = 1.0 / s
            for j in range(M):
                E[i, j] *= inv

    def _nb_transition_adam(a, Nhat, beta_m1, A, m, v, lr, b1, b2, eps, bc1, bc2, out=None):
        if out is None:
            out = np.empty_like(a)
        _nb_logit_adam(a, Nhat, beta_m1, A, m, v, lr, b1, b2, eps, bc1, bc2, out)
        # numpy's vectorized exp is several times faster than numba's scalar one
        np.exp(out, out=out)
        _nb_normalize_rows(out)
        return out

    @njit(cache=True)
    def _nb_node_gradients(mu, L, S1, S2, nhat, mu0, lam, nu, Psi):
        N, k = mu.shape
        g_mu = np.empty((N, k))
        g_L = np.zeros((N, k, k))
        P = np.empty((k, k))
        G0 = np.empty((k, k))
        vv = np.empty(k)
        for j in range(N):
            w = lam[j] + nhat[j]
            for r in range(k):
                vv[r] = S1[j, r] + lam[j] * mu0[j, r]
            for r in range(k):
                for c in range(k):
                    s = 0.0
                    for q in range(min(r, c) + 1):
                        s += L[j, r, q] * L[j, c, q]
                    P[r, c] = s
            for r in range(k):
                s = 0.0
                for c in range(k):
                    s += P[r, c] * (vv[c] - w * mu[j, c])
                g_mu[j, r] = s
            for r in range(k):
                for c in range(k):
                    Wrc = (Psi[r, c] + S2[j, r, c]
                           + lam[j] * mu0[j, r] * mu0[j, c]
                           + w * mu[j, r] * mu[j, c])
                    G0[r, c] = 0.5 * (mu[j, r] * vv[c] + vv[r] * mu[j, c]) - 0.5 * Wrc
            cj = nu[j] + nhat[j] + k + 2.0
            for r in range(k):
                for c in range(r + 1):
                    s = 0.0
                    for q in range(c, k):
                        s += G0[r, q] * L[j, q, c]
                    g_L[j, r, c] = 2.0 * s
                g_L[j, r, r] += cj / L[j, r, r]
        return g_mu, g_L

    NUMBA_KERNELS = SimpleNamespace(
        name="numba",
        node_logpdf=_nb_node_logpdf,
        filter_accumulate=_nb_filter_accumulate,
        accumulate_moments=_nb_accumulate_moments,
        row_softmax=_nb_row_softmax,
        transition_adam=_nb_transition_adam,
        node_gradients=_nb_node_gradients,
    )
else:  # pragma: no cover
    NUMBA_KERNELS = None


def get_kernels(name=None):
    """Return the kernel set called ``name``; ``None`` picks the default."""
    if name is None:
        name = DEFAULT_BACKEND
    if name == "numpy":
        return NUMPY_KERNELS
    if name == "numba":
        if NUMBA_KERNELS is None:
            raise ValueError("numba backend requested but numba is not installed")
        return NUMBA_KERNELS
    raise ValueError(f"unknown kernel backend {name!r}")


def resolve(kernels=None):
    """Accept a kernel namespace, a backend name, or None."""
    if hasattr(kernels, "node_logpdf"):
        return kernels
    return get_kernels(kernels)


def _default_backend():
    flag = os.environ.get("TILESTREAM_NO_NUMBA", "").strip().lower()
    if flag in ("1", "true", "yes", "on") or not HAVE_NUMBA:
        return "numpy"
    return "numba"


DEFAULT_BACKEND = _default_backend()
