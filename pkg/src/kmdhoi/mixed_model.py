"""Restricted maximum likelihood for the multi-kernel linear mixed model.

The model is ``y ~ N(X beta, Theta)`` with

    Theta = sigma2 * I + sum_i tau_i * K_i.

Variance components are estimated by a few EM steps followed by Fisher
scoring, restarted from a grid of initial ``tau`` values; the best converged
start (largest restricted log-likelihood) wins.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.linalg import lapack

from .numerics import NumericalError, cholesky_jitter, logdet_from_cholesky

log = logging.getLogger(__name__)

DEFAULT_START_GRID = (0.0, 1e-5, 1e-4, 1e-3, 1e-2, 0.1, 1.0)


class ReMLError(RuntimeError):
    pass


class ReMLConvergenceError(ReMLError):
    """No start converged; ``best`` holds the highest-likelihood attempt."""

    def __init__(self, message: str, best: "ReMLFit | None" = None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class VarianceComponents:
    sigma2: float
    tau: tuple[float, ...] = ()

    def __post_init__(self):
        if self.sigma2 < 0 or any(t < 0 for t in self.tau):
            raise ValueError("variance components must be non-negative")

    @classmethod
    def from_vector(cls, v) -> "VarianceComponents":
        v = np.asarray(v, dtype=float)
        return cls(float(v[0]), tuple(float(t) for t in v[1:]))

    def as_vector(self) -> np.ndarray:
        return np.array((self.sigma2, *self.tau), dtype=float)

    @property
    def lambdas(self) -> tuple[float, ...]:
        return tuple(math.inf if t == 0 else self.sigma2 / t for t in self.tau)


@dataclass
class ReMLFit:
    theta: VarianceComponents
    beta: np.ndarray
    restricted_loglik: float
    iterations: int
    converged: bool
    start_index: int
    jitter: float = 0.0
    frozen: tuple[int, ...] = ()
    trace: list[float] = field(default_factory=list, repr=False)


@dataclass(frozen=True)
class ReMLOptions:
    tol: float = 1e-5
    max_iter: int = 50
    em_steps: int = 5
    start_grid: tuple[float, ...] = DEFAULT_START_GRID
    max_halvings: int = 20
    freeze_after: int = 3
    sigma2_floor: float = 1e-9  # relative to Var(y)


@dataclass(frozen=True)
class BlupEffects:
    effects: tuple[np.ndarray, ...]
    residual: np.ndarray


def _as_arrays(kernels) -> list[np.ndarray]:
    return [np.asarray(getattr(k, "values", k), dtype=float) for k in kernels]


def _theta_vector(theta) -> np.ndarray:
    if isinstance(theta, VarianceComponents):
        return theta.as_vector()
    return np.asarray(theta, dtype=float).ravel()


def covariance(theta, kernels) -> np.ndarray:
    t = _theta_vector(theta)
    Ks = _as_arrays(kernels)
    if not Ks or len(t) != len(Ks) + 1:
        raise ValueError(f"theta has {len(t)} entries but {len(Ks)} kernels were given")
    Theta = t[0] * np.eye(Ks[0].shape[0])
    for tau, K in zip(t[1:], Ks):
        if tau:
            Theta += tau * K
    return Theta


class _Evaluation:
    """Everything the fitter needs at one value of theta.

    ``Py`` is ``W y`` where ``W = Theta^-1 - Theta^-1 X (X'Theta^-1 X)^-1 X'Theta^-1``.
    """

    def __init__(self, theta: np.ndarray, y: np.ndarray, X: np.ndarray, Ks: list[np.ndarray]):
        n = y.shape[0]
        Theta = np.zeros((n, n))
        Theta.flat[:: n + 1] = theta[0]
        for tau, K in zip(theta[1:], Ks):
            if tau:
                Theta += tau * K
        self.theta = theta
        self.L, self.jitter = cholesky_jitter(Theta)
        cf = (self.L, True)
        TiX = linalg.cho_solve(cf, X, check_finite=False)
        XtTiX = X.T @ TiX
        Lx, _ = cholesky_jitter(0.5 * (XtTiX + XtTiX.T))
        Tiy = linalg.cho_solve(cf, y, check_finite=False)
        self.beta = linalg.cho_solve((Lx, True), X.T @ Tiy, check_finite=False)
        r = y - X @ self.beta
        self.Py = linalg.cho_solve(cf, r, check_finite=False)
        self.quad = float(r @ self.Py)
        self.loglik = -0.5 * (logdet_from_cholesky(self.L) + logdet_from_cholesky(Lx) + self.quad)
        self._TiX, self._Lx, self._Ks, self._W = TiX, Lx, Ks, None

    @property
    def W(self) -> np.ndarray:
        if self._W is None:
            Linv, info = lapack.dtrtri(self.L, lower=1)
            if info != 0:
                raise NumericalError("triangular inverse failed")
            Ti = Linv.T @ Linv
            A = linalg.solve_triangular(self._Lx, self._TiX.T, lower=True, check_finite=False)
            W = Ti - A.T @ A
            self._W = 0.5 * (W + W.T)
        return self._W

    def score_and_information(self, active: Sequence[int]):
        """Score vector and expected information for the parameters in ``active``.

        Parameter 0 is sigma2 (derivative matrix I); parameter i > 0 is tau_i.
        """
        W = self.W
        WG = []
        score = np.empty(len(active))
        for a, idx in enumerate(active):
            if idx == 0:
                M = W
                g = self.Py @ self.Py
                tr = np.trace(W)
            else:
                K = self._Ks[idx - 1]
                M = W @ K
                g = self.Py @ (K @ self.Py)
                tr = np.trace(M)
            WG.append(M)
            score[a] = 0.5 * (g - tr)
        m = len(active)
        info = np.empty((m, m))
        for a in range(m):
            for b in range(a, m):
                # tr(A B) = sum(A * B^T)
                info[a, b] = info[b, a] = 0.5 * float(np.sum(WG[a] * WG[b].T))
        return score, info


def _prepare(y, X, kernels):
    y = np.asarray(y, dtype=float).ravel()
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    Ks = _as_arrays(kernels)
    n = y.shape[0]
    if X.shape[0] != n or any(K.shape != (n, n) for K in Ks):
        raise ValueError("y, X and kernels disagree on the number of subjects")
    if n <= X.shape[1]:
        raise ValueError("need more subjects than fixed effects")
    return y, X, Ks


def restricted_loglik(theta, y, X, kernels) -> float:
    """Restricted log-likelihood (additive constant ``-(n-q)/2 log 2pi`` dropped)."""
    y, X, Ks = _prepare(y, X, kernels)
    return _Evaluation(_theta_vector(theta), y, X, Ks).loglik


def gls_beta(theta, y, X, kernels) -> np.ndarray:
    y, X, Ks = _prepare(y, X, kernels)
    return _Evaluation(_theta_vector(theta), y, X, Ks).beta


def reml_score(theta, y, X, kernels) -> np.ndarray:
    """Gradient of the restricted log-likelihood, ordered (sigma2, tau_1, ...)."""
    y, X, Ks = _prepare(y, X, kernels)
    t = _theta_vector(theta)
    score, _ = _Evaluation(t, y, X, Ks).score_and_information(range(len(t)))
    return score


def expected_information(theta, y, X, kernels) -> np.ndarray:
    """Expected information with entries ``tr(W G_i W G_j) / 2``."""
    y, X, Ks = _prepare(y, X, kernels)
    t = _theta_vector(theta)
    _, info = _Evaluation(t, y, X, Ks).score_and_information(range(len(t)))
    return info


def ols_null_fit(y, X) -> ReMLFit:
    """REML fit of the model with no random effects: sigma2 = RSS / (n - q)."""
    y, X, _ = _prepare(y, X, [])
    n, q = X.shape
    beta, *_ = linalg.lstsq(X, y)
    r = y - X @ beta
    sigma2 = float(r @ r) / (n - q)
    ll = -0.5 * (n * math.log(sigma2) + np.linalg.slogdet(X.T @ X / sigma2)[1] + float(r @ r) / sigma2)
    return ReMLFit(VarianceComponents(sigma2), beta, ll, 0, True, 0)


def _ascent_directions(p, active, score, info, theta):
    """Fisher-scoring direction, then a diagonally scaled gradient as fallback."""
    if not active:
        return
    try:
        # near-collinear kernels make info ill-conditioned; the line search and
        # the gradient fallback below cope with a poor step
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", linalg.LinAlgWarning)
            step = linalg.solve(info, score, assume_a="sym", check_finite=False)
    except (linalg.LinAlgError, ValueError):
        step = linalg.lstsq(info, score)[0]
    if not np.all(np.isfinite(step)):
        step = linalg.lstsq(info, score)[0]
    d = np.zeros(p)
    d[active] = step
    yield d
    diag = np.maximum(np.diag(info), 1e-300)
    d = np.zeros(p)
    d[active] = score / diag
    yield d


def _released(ev: "_Evaluation", frozen: set[int], tol: float) -> set[int]:
    """Frozen parameters whose one-step predicted gain ``score^2 / (2 info)`` exceeds ``tol``."""
    if not frozen:
        return set()
    idx = sorted(frozen)
    score, info = ev.score_and_information(idx)
    gain = np.where(score > 0, score**2 / (2.0 * np.maximum(np.diag(info), 1e-300)), 0.0)
    return {i for i, g in zip(idx, gain) if g > tol}


def _line_search(y, X, Ks, theta, direction, ev, opts: ReMLOptions, floor: float):
    t = 1.0
    for _ in range(opts.max_halvings + 1):
        cand = np.maximum(theta + t * direction, 0.0)
        cand[0] = max(cand[0], floor)
        try:
            cev = _Evaluation(cand, y, X, Ks)
        except NumericalError:
            t *= 0.5
            continue
        if cev.loglik >= ev.loglik - 1e-12 * max(1.0, abs(ev.loglik)):
            return cev
        t *= 0.5
    return None


def _fit_from_start(y, X, Ks, theta0: np.ndarray, opts: ReMLOptions, floor: float):
    theta = theta0.copy()
    theta[0] = max(theta[0], floor)
    n = y.shape[0]
    p = theta.size
    ev = _Evaluation(theta, y, X, Ks)
    trace = [ev.loglik]

    for _ in range(opts.em_steps):
        score, _ = ev.score_and_information(range(p))
        # EM update: theta_i + theta_i^2 (y'P G_i P y - tr(P G_i)) / n
        theta = theta + 2.0 * theta**2 * score / n
        theta = np.maximum(theta, 0.0)
        theta[0] = max(theta[0], floor)
        ev = _Evaluation(theta, y, X, Ks)
        trace.append(ev.loglik)

    frozen: set[int] = set()
    at_zero = np.zeros(p, dtype=int)
    converged = False
    iterations = 0
    for iterations in range(1, opts.max_iter + 1):
        candidates = [i for i in range(p) if i not in frozen]
        score, info = ev.score_and_information(candidates)
        # parameters on the boundary whose score pushes outward stay put
        keep = [a for a, i in enumerate(candidates) if theta[i] > 0 or score[a] > 0]
        active = [candidates[a] for a in keep]
        score, info = score[keep], info[np.ix_(keep, keep)]
        accepted = None
        for direction in _ascent_directions(p, active, score, info, theta):
            accepted = _line_search(y, X, Ks, theta, direction, ev, opts, floor)
            if accepted is not None:
                break
        if accepted is not None:
            change = accepted.loglik - ev.loglik
            theta, ev = accepted.theta, accepted
            trace.append(ev.loglik)
            for i in range(1, p):
                at_zero[i] = at_zero[i] + 1 if theta[i] == 0.0 else 0
                if at_zero[i] >= opts.freeze_after:
                    frozen.add(i)
            if abs(change) >= opts.tol:
                continue
        else:
            trace.append(ev.loglik)
        # stationary along the active set; release frozen parameters that want back in
        released = _released(ev, frozen, opts.tol)
        if not released:
            converged = True
            break
        frozen -= released
        at_zero[list(released)] = 0
    return ev, iterations, converged, tuple(sorted(frozen)), trace


def fit_reml(y, X, kernels, options: ReMLOptions | None = None) -> ReMLFit:
    """Fit variance components by EM-initialised Fisher scoring with multi-starts.

    With an empty kernel list this is the ordinary linear model and
    ``sigma2 = RSS / (n - q)`` is returned directly.
    """
    opts = options or ReMLOptions()
    y, X, Ks = _prepare(y, X, kernels)
    if not Ks:
        return ols_null_fit(y, X)
    var_y = float(np.var(y, ddof=1))
    if not var_y > 0:
        raise ReMLError("phenotype has zero variance")
    floor = opts.sigma2_floor * var_y

    best: ReMLFit | None = None
    best_any: ReMLFit | None = None
    for idx, start in enumerate(opts.start_grid):
        theta0 = np.array([var_y] + [start] * len(Ks))
        try:
            ev, iters, conv, frozen, trace = _fit_from_start(y, X, Ks, theta0, opts, floor)
        except NumericalError as exc:
            log.debug("start %d failed: %s", idx, exc)
            continue
        fit = ReMLFit(
            theta=VarianceComponents.from_vector(ev.theta),
            beta=ev.beta,
            restricted_loglik=ev.loglik,
            iterations=iters,
            converged=conv,
            start_index=idx,
            jitter=ev.jitter,
            frozen=frozen,
            trace=trace,
        )
        if best_any is None or fit.restricted_loglik > best_any.restricted_loglik:
            best_any = fit
        if conv and (best is None or fit.restricted_loglik > best.restricted_loglik):
            best = fit
    if best is None:
        raise ReMLConvergenceError("no REML start converged", best_any)
    return best


def blup_effects(fit: ReMLFit, y, X, kernels) -> BlupEffects:
    """Best linear unbiased predictors ``h_i = tau_i K_i Theta^-1 (y - X beta)``."""
    y, X, Ks = _prepare(y, X, kernels)
    theta = fit.theta.as_vector()
    if len(theta) != len(Ks) + 1:
        raise ValueError("fit and kernel list disagree in length")
    ev = _Evaluation(theta, y, X, Ks)
    effects = tuple(tau * (K @ ev.Py) for tau, K in zip(theta[1:], Ks))
    residual = y - X @ ev.beta - sum(effects, np.zeros_like(y))
    return BlupEffects(effects, residual)


def solve_first_order_system(y, X, kernels, lambdas):
    """Solve the penalised least-squares normal equations for ``beta`` and the ``alpha_i``.

    Kernels with an infinite penalty carry ``alpha_i = 0`` and are left out of
    the block system. Returns ``(beta, [alpha_1, ...])``.
    """
    y, X, Ks = _prepare(y, X, kernels)
    lambdas = [float(v) for v in lambdas]
    if len(lambdas) != len(Ks):
        raise ValueError("one penalty per kernel is required")
    n, q = X.shape
    live = [i for i, lam in enumerate(lambdas) if math.isfinite(lam)]
    blocks = [X] + [Ks[i] for i in live]
    size = q + n * len(live)
    A = np.zeros((size, size))
    rhs = np.zeros(size)
    offsets = np.cumsum([0] + [b.shape[1] for b in blocks])
    for a, Ba in enumerate(blocks):
        sa = slice(offsets[a], offsets[a + 1])
        rhs[sa] = Ba.T @ y
        for b, Bb in enumerate(blocks):
            sb = slice(offsets[b], offsets[b + 1])
            A[sa, sb] = Ba.T @ Bb
        if a > 0:
            A[sa, sa] += lambdas[live[a - 1]] * Ba
    sol, *_ = linalg.lstsq(A, rhs, cond=1e-13)
    beta = sol[:q]
    alphas = [np.zeros(n) for _ in Ks]
    for a, i in enumerate(live):
        alphas[i] = sol[offsets[a + 1] : offsets[a + 2]]
    return beta, alphas
