"""Principal-component comparison methods for three-way interaction detection.

* pPCAR: regress on covariates, every raw view column and the product of the
  three first principal components; t-test on the product coefficient.
* fPCAR: regress on covariates, the leading PCs of each view and every
  three-way product of them; F-test on the block of products.
* SKAT-style: variance-component score test with the fPCAR product features
  as random effects, PC main effects kept as covariates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg, stats

from .score_tests import TestResult, projected_score_test

DEFAULT_VARIANCE_TARGET = 0.85
_RANK_TOL = 1e-9


@dataclass(frozen=True)
class PcaBasis:
    component_scores: np.ndarray
    loadings: np.ndarray
    explained_fraction: np.ndarray
    cumulative_fraction: np.ndarray

    @property
    def n_components(self) -> int:
        return self.component_scores.shape[1]


@dataclass
class RegressionTest:
    kind: str
    estimate: np.ndarray
    statistic: float
    df: tuple[int, int]
    p_value: float
    rank_deficient: bool = False
    degenerate: bool = False


def pca(view_slice, variance_target: float | int = DEFAULT_VARIANCE_TARGET) -> PcaBasis:
    """Principal component scores of the column-centred data.

    A float target keeps the fewest components whose cumulative explained
    variance reaches it; an int keeps exactly that many. Each component is
    signed so that its largest-magnitude loading is positive.
    """
    M = np.asarray(view_slice, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.shape[0] < 2:
        raise ValueError("pca needs at least two rows")
    Mc = M - M.mean(axis=0)
    U, s, Vt = linalg.svd(Mc, full_matrices=False)
    var = s**2
    total = var.sum()
    if not total > 0:
        raise ValueError("zero-variance input")
    frac = var / total
    cum = np.cumsum(frac)
    if isinstance(variance_target, (int, np.integer)) and not isinstance(variance_target, bool):
        ell = int(variance_target)
        if not 1 <= ell <= len(s):
            raise ValueError(f"cannot keep {ell} components out of {len(s)}")
    else:
        ell = int(np.searchsorted(cum, float(variance_target) - 1e-12) + 1)
        ell = min(ell, len(s))
    # drop numerically null directions
    ell = min(ell, int(np.sum(s > s[0] * 1e-10)))
    Vt = Vt[:ell].copy()
    U = U[:, :ell].copy()
    for k in range(ell):
        if Vt[k, np.argmax(np.abs(Vt[k]))] < 0:
            Vt[k] *= -1
            U[:, k] *= -1
    return PcaBasis(U * s[:ell], Vt.T, frac[:ell], cum[:ell])


def independent_columns(M: np.ndarray, base: np.ndarray | None = None, tol: float = _RANK_TOL) -> np.ndarray:
    """Indices of a maximal set of columns of ``M`` independent of each other and of ``base``.

    Columns are chosen by QR with column pivoting on ``M`` after projecting out
    ``base``; the returned indices are sorted.
    """
    M = np.asarray(M, dtype=float)
    if M.shape[1] == 0:
        return np.arange(0)
    R = M
    scale = np.linalg.norm(M, axis=0)
    if base is not None and base.shape[1]:
        Q, _ = linalg.qr(base, mode="economic")
        R = M - Q @ (Q.T @ M)
    _, Rf, piv = linalg.qr(R, mode="economic", pivoting=True)
    diag = np.abs(np.diag(Rf))
    ref = max(float(scale.max()), 1e-300)
    keep = piv[: int(np.sum(diag > tol * ref))]
    return np.sort(keep)


def nested_f_test(y, D0, Z, kind: str = "F") -> RegressionTest:
    """Classical F-test that the coefficients of ``Z`` vanish given ``D0``.

    Columns of ``D0`` (beyond the first, which must be full rank) and of ``Z``
    that are linearly dependent are dropped and flagged as rank deficiency.
    """
    y = np.asarray(y, dtype=float).ravel()
    D0 = np.asarray(D0, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    n = y.shape[0]
    keep0 = independent_columns(D0)
    keepz = independent_columns(Z, D0[:, keep0])
    rank_def = len(keep0) < D0.shape[1] or len(keepz) < Z.shape[1]
    D0s, Zs = D0[:, keep0], Z[:, keepz]
    df1 = Zs.shape[1]
    D = np.hstack([D0s, Zs])
    df2 = n - D.shape[1]
    if df1 == 0 or df2 <= 0:
        return RegressionTest(kind, np.zeros(0), math.nan, (df1, df2), 1.0, rank_def, True)
    coef, *_ = linalg.lstsq(D, y)
    rss1 = float(np.sum((y - D @ coef) ** 2))
    c0, *_ = linalg.lstsq(D0s, y)
    rss0 = float(np.sum((y - D0s @ c0) ** 2))
    est = coef[D0s.shape[1]:]
    if rss1 <= 0:
        return RegressionTest(kind, est, math.inf, (df1, df2), 0.0, rank_def)
    F = ((rss0 - rss1) / df1) / (rss1 / df2)
    F = max(F, 0.0)
    return RegressionTest(kind, est, F, (df1, df2), float(stats.f.sf(F, df1, df2)), rank_def)


def _pc_scores(views, target) -> list[np.ndarray]:
    return [pca(v, target).component_scores for v in views]


def triple_products(U1: np.ndarray, U2: np.ndarray, U3: np.ndarray) -> np.ndarray:
    """All column products ``U1[:, a] * U2[:, b] * U3[:, c]`` in (a, b, c) lexicographic order."""
    Z = U1[:, :, None, None] * U2[:, None, :, None] * U3[:, None, None, :]
    return Z.reshape(U1.shape[0], -1)


def ppcar_test(y, X, views) -> RegressionTest:
    """t-test on the first-PC triple product with all raw view columns as main effects."""
    views = [np.atleast_2d(np.asarray(v, dtype=float).T).T for v in views]
    first = [s[:, :1] for s in _pc_scores(views, 1)]
    z = triple_products(*first)
    D0 = np.hstack([np.asarray(X, dtype=float)] + views)
    res = nested_f_test(y, D0, z, "baseline-pPCAR")
    if res.df[0] == 1 and math.isfinite(res.statistic):
        # report the signed t-statistic; two-sided p equals the F p-value
        res.statistic = math.copysign(math.sqrt(res.statistic), res.estimate[0])
        res.p_value = float(2.0 * stats.t.sf(abs(res.statistic), res.df[1]))
    return res


def fpcar_test(y, X, views, variance_target=DEFAULT_VARIANCE_TARGET) -> RegressionTest:
    """F-test on every product of the leading PCs given covariates and PC main effects."""
    scores = _pc_scores(views, variance_target)
    Z = triple_products(*scores)
    D0 = np.hstack([np.asarray(X, dtype=float)] + scores)
    return nested_f_test(y, D0, Z, "baseline-fPCAR")


def skat_style_test(y, X, views, variance_target=DEFAULT_VARIANCE_TARGET) -> TestResult:
    """Score test with unit-weighted PC-product features ``Z`` as random effects (``K = Z Z'``)."""
    scores = _pc_scores(views, variance_target)
    Z = triple_products(*scores)
    D0 = np.hstack([np.asarray(X, dtype=float)] + scores)
    D0 = D0[:, independent_columns(D0)]
    return projected_score_test(y, D0, Z @ Z.T, "baseline-SKAT")
