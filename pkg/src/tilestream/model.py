"""Online EM for a Gaussian-mixture tiling with Markov transitions between tiles.

Each of ``N`` nodes is a Gaussian ``N(mu_j, Sigma_j)`` with a Normal-inverse-
Wishart prior; the tile index follows a Markov chain with transition matrix
``A = softmax(a)`` row-wise. Per sample the model

1. relocates ("teleports") a node onto the sample if no node explains it,
2. runs one forward-filter step and folds the result into exponentially
   forgotten sufficient statistics,
3. refreshes the empirical-Bayes priors from those statistics, and
4. takes one Adam ascent step on the estimated evidence lower bound.

Steps 3 and 4 can be amortized over ``B`` samples. Arrays that are published
through :meth:`Model.snapshot` (``A``, ``mu``, ``L``, ``alpha``) are never
modified in place; every update allocates a fresh array, so a snapshot is a
set of references that stays valid after the model moves on.
"""
from __future__ import annotations

import logging
import math
import sys
import time
from dataclasses import asdict, dataclass, fields

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from . import _kernels
from .errors import DataError, FilterDegenerate, NumericalError, ShapeError
from .predict import ModelSnapshot

log = logging.getLogger(__name__)
_LOG_2PI = math.log(2.0 * math.pi)

ALPHA_FLOOR = 1e-16
JITTER_REL = 1e-6


@dataclass
class Hyperparameters:
    """Model and optimizer settings.

    ``theta=None`` means ``-10 * k``; ``theta=-inf`` turns teleporting off.
    When ``eps_c`` is set the forgetting rate follows
    ``eps_t = min(1, eps_c / (t + eps_t0))`` instead of the constant ``eps``.
    """

    N: int
    k: int
    lam: float = 1e-3
    nu: float = 1e-3
    beta: float = 1.0
    eps: float = 0.01
    eps_c: float | None = None
    eps_t0: float = 1.0
    theta: float | None = None
    step_size: float = 1e-3
    prior_walk: float = 0.02
    M: int = 30
    B: int = 1
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    update_priors: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.eps <= 1.0:
            raise ValueError(f"eps must lie in [0, 1], got {self.eps}")
        if self.lam <= 0 or self.nu <= 0:
            raise ValueError("lam and nu must be positive")
        if self.B < 1:
            raise ValueError(f"B must be >= 1, got {self.B}")
        if self.M < 2:
            raise ValueError(f"M must be >= 2, got {self.M}")
        if not 0.0 <= self.prior_walk <= 1.0:
            raise ValueError("prior_walk must lie in [0, 1]")

    @property
    def threshold(self) -> float:
        return -10.0 * self.k if self.theta is None else float(self.theta)

    def forgetting(self, t: int) -> float:
        if self.eps_c is None:
            return self.eps
        return min(1.0, self.eps_c / (t + self.eps_t0))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        names = {f.name for f in fields(cls)}
        return cls(**{key: val for key, val in d.items() if key in names})


@dataclass
class SuffStats:
    N_hat: np.ndarray
    n_hat: np.ndarray
    S1: np.ndarray
    S2: np.ndarray
    alpha: np.ndarray

    @classmethod
    def zeros(cls, N: int, k: int) -> "SuffStats":
        return cls(
            N_hat=np.zeros((N, N)),
            n_hat=np.zeros(N),
            S1=np.zeros((N, k)),
            S2=np.zeros((N, k, k)),
            alpha=_frozen(np.full(N, 1.0 / N)),
        )

    def copy(self) -> "SuffStats":
        return SuffStats(self.N_hat.copy(), self.n_hat.copy(), self.S1.copy(),
                         self.S2.copy(), self.alpha.copy())


@dataclass
class NodeParams:
    """Unconstrained node parameters plus the cached row-softmax ``A``."""

    mu: np.ndarray
    L: np.ndarray
    a: np.ndarray
    A: np.ndarray

    def copy(self) -> "NodeParams":
        return NodeParams(self.mu.copy(), self.L.copy(), self.a.copy(), self.A.copy())


@dataclass
class Priors:
    mu0: np.ndarray
    Psi: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    mu_bar: np.ndarray
    Sigma_bar: np.ndarray
    eta: np.ndarray

    def copy(self) -> "Priors":
        return Priors(*(getattr(self, f.name).copy() for f in fields(self)))


@dataclass
class AdamState:
    m_a: np.ndarray
    v_a: np.ndarray
    m_mu: np.ndarray
    v_mu: np.ndarray
    m_L: np.ndarray
    v_L: np.ndarray
    steps: int = 0

    @classmethod
    def zeros(cls, N: int, k: int) -> "AdamState":
        return cls(np.zeros((N, N)), np.zeros((N, N)), np.zeros((N, k)),
                   np.zeros((N, k)), np.zeros((N, k, k)), np.zeros((N, k, k)))

    def reset_node(self, j: int) -> None:
        self.m_a[j] = 0.0
        self.v_a[j] = 0.0
        self.m_mu[j] = 0.0
        self.v_mu[j] = 0.0
        self.m_L[j] = 0.0
        self.v_L[j] = 0.0


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


def jitter(S: np.ndarray) -> float:
    """Diagonal load for a k x k covariance: 1e-6 of its mean variance."""
    k = S.shape[0]
    scale = float(np.trace(S)) / k
    return JITTER_REL * scale if scale > 0.0 else JITTER_REL


def psd_floor(S: np.ndarray) -> np.ndarray:
    """Symmetrize and clip negative eigenvalues to zero."""
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.min() >= 0.0:
        return S
    w = np.maximum(w, 0.0)
    return (V * w) @ V.T


def packing_scale(Sigma: np.ndarray, N: int) -> np.ndarray:
    """Prior scale for N bubbles sharing the data volume, plus jitter."""
    k = Sigma.shape[0]
    Psi = Sigma / N ** (2.0 / k)
    return Psi + jitter(Psi) * np.eye(k)


def precision_cholesky(Sigma: np.ndarray) -> np.ndarray:
    """Lower-triangular ``L`` with ``L @ L.T == inv(Sigma)``."""
    k = Sigma.shape[0]
    try:
        c = scipy.linalg.cho_factor(Sigma, lower=True)
        P = scipy.linalg.cho_solve(c, np.eye(k))
        L = np.linalg.cholesky(0.5 * (P + P.T))
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        raise NumericalError(f"covariance is not positive definite: {exc}") from exc
    return L


def gaussian_logpdf(mu, L, x) -> float:
    """Log density of ``x`` under ``N(mu, inv(L L^T))``."""
    mu = np.asarray(mu, dtype=np.float64)
    L = np.asarray(L, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    k = mu.shape[0]
    if L.shape != (k, k) or x.shape != (k,):
        raise ShapeError(f"incompatible shapes mu={mu.shape}, L={L.shape}, x={x.shape}")
    d = np.diag(L)
    if np.any(d <= 0):
        raise ValueError("Cholesky factor must have a positive diagonal")
    y = np.tril(L).T @ (x - mu)
    return float(-0.5 * k * math.log(2 * math.pi) + np.log(d).sum() - 0.5 * y @ y)


def prior_walk_step(mu0, mu_bar, eta, rate, rng) -> np.ndarray:
    """One step of the mean-reverting random walk on the prior means."""
    noise = rng.standard_normal(mu0.shape) * eta
    return (1.0 - rate) * mu0 + rate * mu_bar + noise


# --------------------------------------------------------------------------
# ELBO and its gradient
# --------------------------------------------------------------------------

def _check_finite(value, what):
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite value in {what}")


def elbo(params: NodeParams, stats: SuffStats, priors: Priors, hyper: Hyperparameters) -> float:
    """Estimated evidence lower bound in the unconstrained variables."""
    k = params.mu.shape[1]
    logA = params.a - logsumexp(params.a, axis=1, keepdims=True)
    C = stats.N_hat + (hyper.beta - 1.0)
    trans = float(np.sum(C * logA))

    mu, L = params.mu, params.L
    lam, nu, n = priors.lam, priors.nu, stats.n_hat
    P = L @ np.swapaxes(L, 1, 2)
    v = stats.S1 + lam[:, None] * priors.mu0
    lin = np.einsum("ni,nij,nj->", v, P, mu)
    W = (priors.Psi[None] + stats.S2
         + lam[:, None, None] * np.einsum("ni,nj->nij", priors.mu0, priors.mu0)
         + (lam + n)[:, None, None] * np.einsum("ni,nj->nij", mu, mu))
    quad = -0.5 * np.einsum("nij,nji->", W, P)
    logdiag = np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    logdet = np.sum((nu + n + k + 2.0) * logdiag)
    value = trans + lin + quad + logdet
    _check_finite(value, "ELBO")
    return float(value)


def elbo_gradient(params: NodeParams, stats: SuffStats, priors: Priors,
                  hyper: Hyperparameters, kernels=None) -> dict:
    """Gradients of :func:`elbo` w.r.t. the logits ``a``, ``mu`` and ``L``.

    The ``L`` gradient is lower-triangular; entries above the diagonal are
    zero because they are not free parameters.
    """
    K = _kernels.resolve(kernels)
    C = stats.N_hat + (hyper.beta - 1.0)
    g_a = C - params.A * C.sum(axis=1, keepdims=True)
    g_mu, g_L = K.node_gradients(params.mu, params.L, stats.S1, stats.S2, stats.n_hat,
                                 priors.mu0, priors.lam, priors.nu, priors.Psi)
    _check_finite(g_mu, "mu gradient")
    _check_finite(g_L, "L gradient")
    return {"a": g_a, "mu": g_mu, "L": g_L}


# --------------------------------------------------------------------------
# E-step pieces as pure functions
# --------------------------------------------------------------------------

def forward_filter(model: "Model", x) -> tuple[np.ndarray, np.ndarray]:
    """One forward-algorithm step, returning ``(Gamma, alpha_new)``.

    ``Gamma[i, j] = A[i, j] b_j / Z`` with ``Z = sum_ij alpha_i A_ij b_j`` and
    ``alpha_new = alpha @ Gamma``. The model is not modified; the learner
    uses a fused kernel that never materializes ``Gamma``.
    """
    x = model._check_x(x)
    logb = model.kernels.node_logpdf(model.params.mu, model.params.L, x)
    shift = logb.max()
    b = np.exp(logb - shift)
    A = model.params.A
    Z = float(model.stats.alpha @ A @ b)
    if not (Z > 0.0 and math.isfinite(Z)):
        raise FilterDegenerate("forward-filter normalizer underflowed")
    Gamma = A * (b / Z)[None, :]
    alpha_new = model.stats.alpha @ Gamma
    return Gamma, alpha_new


def update_suff_stats(stats: SuffStats, alpha_prev, Gamma, x, eps: float) -> SuffStats:
    """Return statistics after one forgetting step with weight ``1 - eps``."""
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"eps must lie in [0, 1], got {eps}")
    N, k = stats.S1.shape
    x = np.asarray(x, dtype=np.float64)
    if Gamma.shape != (N, N) or alpha_prev.shape != (N,) or x.shape != (k,):
        raise ShapeError("suff-stat update received mismatched shapes")
    keep = 1.0 - eps
    N_hat = keep * stats.N_hat + alpha_prev[:, None] * Gamma
    alpha = alpha_prev @ Gamma
    return SuffStats(
        N_hat=N_hat,
        n_hat=N_hat.sum(axis=0),
        S1=keep * stats.S1 + alpha[:, None] * x[None, :],
        S2=keep * stats.S2 + alpha[:, None, None] * np.outer(x, x)[None],
        alpha=alpha,
    )


# --------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------

class Model:
    """Learner state. Single writer: only one thread may call ``observe``."""

    def __init__(self, hyper, params, priors, stats, opt, t=0, dead=None,
                 rng=None, backend=None, steps_since_m=0):
        self.hyper = hyper
        self.params = params
        self.priors = priors
        self.stats = stats
        self.opt = opt
        self.t = int(t)
        self.dead = np.ones(hyper.N, dtype=bool) if dead is None else dead
        self.rng = np.random.default_rng(hyper.seed) if rng is None else rng
        self.kernels = _kernels.get_kernels(backend)
        self.steps_since_m = int(steps_since_m)
        self.n_teleports = 0
        self._retired: list[np.ndarray] = []
        self._warned_threshold = False

    # -- construction ------------------------------------------------------

    @classmethod
    def from_buffer(cls, buffer, hyper: Hyperparameters, backend=None) -> "Model":
        return init_model(buffer, hyper, backend=backend)

    # -- convenience views ---------------------------------------------------

    @property
    def N(self) -> int:
        return self.hyper.N

    @property
    def k(self) -> int:
        return self.hyper.k

    @property
    def A(self) -> np.ndarray:
        return self.params.A

    @property
    def alpha(self) -> np.ndarray:
        return self.stats.alpha

    @property
    def dead_nodes(self) -> set:
        return set(np.flatnonzero(self.dead).tolist())

    def _check_x(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.k,):
            raise ShapeError(f"expected a length-{self.k} observation, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError("non-finite observation")
        return x

    def logpdfs(self, x) -> np.ndarray:
        return self.kernels.node_logpdf(self.params.mu, self.params.L, self._check_x(x))

    def default_precision_cholesky(self) -> np.ndarray:
        return precision_cholesky(self.priors.Psi)

    # -- heuristics ----------------------------------------------------------

    def maybe_teleport(self, x, logb=None) -> tuple[bool, np.ndarray]:
        """Relocate a node onto ``x`` if every node gives it log-density < theta.

        Returns ``(teleported, logb)`` where ``logb`` are the per-node log
        densities of ``x`` after any relocation.
        """
        x = self._check_x(x)
        if logb is None:
            logb = self.kernels.node_logpdf(self.params.mu, self.params.L, x)
        theta = self.hyper.threshold
        if not logb.max() < theta:
            return False, logb

        if self.dead.any():
            J = int(np.argmax(self.dead))
        else:
            J = int(np.argmin(self.stats.n_hat))

        st = self.stats
        # only J's own occupancy: clearing row J would strip mass from the
        # other nodes' counts while their moments keep it
        st.N_hat[:, J] = 0.0
        st.n_hat = st.N_hat.sum(axis=0)
        st.S1[J] = 0.0
        st.S2[J] = 0.0

        p = self.params
        mu = p.mu.copy()
        mu[J] = x
        L = p.L.copy()
        L[J] = self.default_precision_cholesky()
        A = p.A.copy()
        A[J] = 1.0 / self.N
        p.a[J] = 0.0
        p.mu, p.L, p.A = _frozen(mu), _frozen(L), _frozen(A)
        self.opt.reset_node(J)

        alpha = np.zeros(self.N)
        alpha[J] = 1.0
        st.alpha = _frozen(alpha)
        self.dead[J] = False
        self.n_teleports += 1

        logb = logb.copy()
        logb[J] = gaussian_logpdf(mu[J], L[J], x)
        # the peak density of the default covariance bounds what a teleport can reach
        peak = float(np.log(np.abs(np.diag(L[J]))).sum()) - 0.5 * self.k * _LOG_2PI
        if peak >= theta:
            assert logb[J] >= theta, "teleported node does not explain its own sample"
        elif not self._warned_threshold:
            self._warned_threshold = True
            log.warning("teleport threshold %.3g exceeds the peak log-density %.3g of the "
                        "default covariance; teleported nodes cannot explain their sample",
                        theta, peak)
        return True, logb

    # -- E-step ----------------------------------------------------------------

    def estep(self, x, logb=None) -> float:
        """Filter one sample and fold it into the statistics.

        Returns the log normalizer of the filter step (log p(x_t | x_{1:t-1})
        up to the stabilizing shift, exact).
        """
        x = self._check_x(x)
        if logb is None:
            logb = self.kernels.node_logpdf(self.params.mu, self.params.L, x)
        keep = 1.0 - self.hyper.forgetting(self.t)
        st = self.stats
        alpha_new, n_hat, logZ = self.kernels.filter_accumulate(
            st.alpha, self.params.A, logb, st.N_hat, keep)
        if not math.isfinite(logZ):
            raise FilterDegenerate("forward-filter normalizer underflowed")
        # moments take the unfloored posterior, the same weights N_hat received
        self.kernels.accumulate_moments(st.S1, st.S2, alpha_new, x, keep)
        if alpha_new.min() < ALPHA_FLOOR:
            alpha_new = np.maximum(alpha_new, ALPHA_FLOOR)
            alpha_new /= alpha_new.sum()
        st.alpha = _frozen(alpha_new)
        st.n_hat = n_hat
        self.dead &= ~(n_hat > 10.0 * self.priors.lam)
        return logZ

    # -- priors ------------------------------------------------------------------

    def update_priors(self) -> bool:
        """Refresh global moments and the NIW priors. Returns False if skipped."""
        st, pr, hy = self.stats, self.priors, self.hyper
        total = float(st.n_hat.sum())
        if not total > 0.0:
            return False
        mu_bar = st.S1.sum(axis=0) / total
        Sigma_bar = psd_floor(st.S2.sum(axis=0) / total - np.outer(mu_bar, mu_bar))
        pr.mu_bar = mu_bar
        pr.Sigma_bar = Sigma_bar
        pr.eta = np.sqrt(hy.prior_walk * np.diag(Sigma_bar))
        pr.mu0 = prior_walk_step(pr.mu0, mu_bar, pr.eta, hy.prior_walk, self.rng)
        pr.Psi = packing_scale(Sigma_bar, hy.N)
        return True

    # -- M-step --------------------------------------------------------------------

    def mstep(self) -> None:
        """One Adam ascent step on the ELBO for ``a``, ``mu`` and ``L``.

        ``L`` is stepped with its diagonal in log space so it stays positive.
        """
        hy, p, st, pr, opt = self.hyper, self.params, self.stats, self.priors, self.opt
        opt.steps += 1
        b1, b2, eps, lr = hy.adam_b1, hy.adam_b2, hy.adam_eps, hy.step_size
        bc1 = 1.0 - b1 ** opt.steps
        bc2 = 1.0 - b2 ** opt.steps

        g_mu, g_L = self.kernels.node_gradients(p.mu, p.L, st.S1, st.S2, st.n_hat,
                                                pr.mu0, pr.lam, pr.nu, pr.Psi)
        if not (np.all(np.isfinite(g_mu)) and np.all(np.isfinite(g_L))):
            raise NumericalError("non-finite node gradient")
        A_new = self.kernels.transition_adam(p.a, st.N_hat, hy.beta - 1.0, p.A,
                                             opt.m_a, opt.v_a, lr, b1, b2, eps, bc1, bc2,
                                             self._reusable_buffer())

        idx = np.arange(self.k)
        diagL = p.L[:, idx, idx]
        g_L[:, idx, idx] *= diagL
        step_mu = _adam_step(g_mu, opt.m_mu, opt.v_mu, lr, b1, b2, eps, bc1, bc2)
        step_L = _adam_step(g_L, opt.m_L, opt.v_L, lr, b1, b2, eps, bc1, bc2)

        mu_new = p.mu + step_mu
        L_new = p.L + np.tril(step_L, -1)
        L_new[:, idx, idx] = diagL * np.exp(step_L[:, idx, idx])

        self._retire(p.A)
        p.mu, p.L, p.A = _frozen(mu_new), _frozen(L_new), _frozen(A_new)

    # Recycling N x N transition buffers avoids an 8 MB page-faulting
    # allocation per step at N=1000. A retired array is reused only when the
    # pool holds the sole reference, so no snapshot can observe the write.
    _POOL = 2

    def _retire(self, A: np.ndarray) -> None:
        if A.base is None and A.flags.c_contiguous:
            self._retired.append(A)
            if len(self._retired) > self._POOL:
                self._retired.pop(0)

    def _reusable_buffer(self):
        for i in range(len(self._retired)):
            # references: the pool list and getrefcount's own argument
            if sys.getrefcount(self._retired[i]) <= 2:
                buf = self._retired.pop(i)
                buf.flags.writeable = True
                return buf
        return None

    # -- full loop body ----------------------------------------------------------

    def observe(self, x, timer: dict | None = None, period: int | None = None) -> "Model":
        """Process one sample. ``period`` overrides ``hyper.B`` for this call."""
        x = self._check_x(x)
        B = self.hyper.B if period is None else int(period)
        clock = time.perf_counter
        t0 = clock()
        logb = self.kernels.node_logpdf(self.params.mu, self.params.L, x)
        _, logb = self.maybe_teleport(x, logb)
        t1 = clock()
        self.estep(x, logb)
        t2 = clock()
        self.t += 1
        self.steps_since_m += 1
        t3 = t4 = t2
        if self.steps_since_m >= B:
            self.steps_since_m = 0
            if self.hyper.update_priors and self.t >= self.hyper.M:
                self.update_priors()
            t3 = clock()
            self.mstep()
            t4 = clock()
        if timer is not None:
            timer["teleport"] = timer.get("teleport", 0.0) + (t1 - t0)
            timer["estep"] = timer.get("estep", 0.0) + (t2 - t1)
            timer["priors"] = timer.get("priors", 0.0) + (t3 - t2)
            timer["mstep"] = timer.get("mstep", 0.0) + (t4 - t3)
        return self

    def observe_batch(self, X, B: int | None = None, timer: dict | None = None) -> "Model":
        """Observe the rows of ``X`` (shape (b, k)); priors and the gradient
        step run once every ``B`` samples."""
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.k:
            raise ShapeError(f"expected (b, {self.k}) batch, got {X.shape}")
        B = self.hyper.B if B is None else int(B)
        if B < 1:
            raise ValueError(f"B must be >= 1, got {B}")
        for x in X:
            self.observe(x, timer=timer, period=B)
        return self

    # -- objective ---------------------------------------------------------------

    def elbo(self) -> float:
        return elbo(self.params, self.stats, self.priors, self.hyper)

    def elbo_gradient(self) -> dict:
        return elbo_gradient(self.params, self.stats, self.priors, self.hyper, self.kernels)

    # -- publication ---------------------------------------------------------------

    def snapshot(self) -> ModelSnapshot:
        """Immutable view of ``(A, mu, L, alpha)`` at this instant.

        The published arrays are read-only and the model replaces rather than
        mutates them, so no copy is needed.
        """
        p = self.params
        return ModelSnapshot(A=p.A, mu=p.mu, L=p.L, alpha=self.stats.alpha, t=self.t)

    def check_invariants(self, atol: float = 1e-10) -> None:
        """Raise AssertionError if any state invariant is violated."""
        st, p = self.stats, self.params
        assert np.all(st.alpha >= 0) and abs(st.alpha.sum() - 1.0) < atol
        assert np.allclose(st.n_hat, st.N_hat.sum(axis=0), rtol=1e-8, atol=1e-300)
        assert np.all(st.N_hat >= 0)
        assert np.allclose(st.S2, np.swapaxes(st.S2, 1, 2), atol=atol)
        idx = np.arange(self.k)
        assert np.all(p.L[:, idx, idx] > 0)
        assert np.allclose(p.L, np.tril(p.L))
        assert np.all(p.A > 0) and np.allclose(p.A.sum(axis=1), 1.0, atol=1e-12)
        assert np.all(np.isfinite(p.mu)) and np.all(np.isfinite(p.L))
        # moments and occupancy carry the same weights, so n*S2 - S1 S1^T is PSD
        scatter = st.n_hat[:, None, None] * st.S2 - st.S1[:, :, None] * st.S1[:, None, :]
        scale = np.abs(st.n_hat[:, None, None] * st.S2).max(axis=(1, 2)) + 1e-300
        assert np.all(np.linalg.eigvalsh(scatter).min(axis=1) >= -1e-8 * scale)
        assert self.t >= 0


def _adam_step(g, m, v, lr, b1, b2, eps, bc1, bc2):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    return lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def init_model(buffer, hyper: Hyperparameters, backend=None) -> Model:
    """Initialize every node at the buffer mean with the packed covariance.

    ``buffer`` has shape (M, k). All nodes start eligible for teleporting.
    """
    buffer = np.asarray(buffer, dtype=np.float64)
    if buffer.ndim != 2 or buffer.shape[1] != hyper.k:
        raise ShapeError(f"buffer must have shape (M, {hyper.k}), got {buffer.shape}")
    if buffer.shape[0] < 2:
        raise ValueError("initialization buffer needs at least 2 samples")
    if not np.all(np.isfinite(buffer)):
        raise DataError("non-finite values in initialization buffer")
    N, k = hyper.N, hyper.k

    mean = buffer.mean(axis=0)
    cov = psd_floor(np.atleast_2d(np.cov(buffer, rowvar=False, bias=True)))
    Psi = packing_scale(cov, N)
    L0 = precision_cholesky(Psi)

    a = np.zeros((N, N))
    params = NodeParams(
        mu=_frozen(np.tile(mean, (N, 1))),
        L=_frozen(np.tile(L0, (N, 1, 1))),
        a=a,
        A=_frozen(np.full((N, N), 1.0 / N)),
    )
    priors = Priors(
        mu0=np.tile(mean, (N, 1)),
        Psi=Psi,
        lam=np.full(N, float(hyper.lam)),
        nu=np.full(N, float(hyper.nu)),
        mu_bar=mean.copy(),
        Sigma_bar=cov,
        eta=np.sqrt(hyper.prior_walk * np.diag(cov)),
    )
    return Model(hyper, params, priors, SuffStats.zeros(N, k), AdamState.zeros(N, k),
                 backend=backend)


# functional aliases mirroring the method API

def maybe_teleport(model: Model, x) -> tuple[Model, bool]:
    teleported, _ = model.maybe_teleport(x)
    return model, teleported


def update_priors(model: Model) -> Model:
    model.update_priors()
    return model


def observe(model: Model, x) -> Model:
    return model.observe(x)


def observe_batch(model: Model, X, B: int) -> Model:
    return model.observe_batch(X, B)


def snapshot(model: Model) -> ModelSnapshot:
    return model.snapshot()
