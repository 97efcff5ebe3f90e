"""Special functions and symmetric-matrix helpers used by the statistical modules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4)

_EPS = 1e-16
_TINY = 1e-300
_MAX_TERMS = 10_000


class NumericalError(RuntimeError):
    """Raised when a factorization fails even at the largest jitter."""


@dataclass(frozen=True)
class SpdSolveReport:
    jitter_used: float
    condition_estimate: float


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite input: {v!r}")


def _gamma_p_series(a: float, x: float) -> float:
    # P(a, x) = x^a e^{-x} / Gamma(a+1) * sum_k x^k / ((a+1)...(a+k))
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(_MAX_TERMS):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * _EPS:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_q_contfrac(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    b = x + 1.0 - a
    c = 1.0 / _TINY
    d = 1.0 / b
    h = d
    for i in range(1, _MAX_TERMS):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < _TINY:
            d = _TINY
        c = b + an / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def regularized_gamma(a: float, x: float) -> tuple[float, float]:
    """Return ``(P(a, x), Q(a, x))``, the lower and upper regularized gammas.

    The power series is used for ``x < a + 1`` and the continued fraction
    otherwise; the other tail is taken as the complement so the pair always
    sums to one.
    """
    _check_finite(a, x)
    if a <= 0:
        raise ValueError("shape parameter must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 0.0, 1.0
    if x < a + 1.0:
        p = min(max(_gamma_p_series(a, x), 0.0), 1.0)
        return p, 1.0 - p
    q = min(max(_gamma_q_contfrac(a, x), 0.0), 1.0)
    return 1.0 - q, q


def chi_square_sf(x: float, df: float) -> float:
    """Upper tail probability of a chi-square variable with ``df`` degrees of freedom."""
    _check_finite(x, df)
    if df <= 0:
        raise ValueError("df must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    return regularized_gamma(0.5 * df, 0.5 * x)[1]


def chi_square_cdf(x: float, df: float) -> float:
    _check_finite(x, df)
    if df <= 0:
        raise ValueError("df must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    return regularized_gamma(0.5 * df, 0.5 * x)[0]


def cholesky_jitter(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Lower Cholesky factor of ``A + delta*I`` for the smallest workable delta.

    Jitter is relative to the mean diagonal so that it is scale free.
    """
    A = np.asarray(A, dtype=float)
    scale = float(np.mean(np.abs(np.diag(A)))) if A.size else 1.0
    if not math.isfinite(scale):
        raise NumericalError("matrix has non-finite entries")
    scale = scale if scale > 0 else 1.0
    eye = np.eye(A.shape[0])
    for delta in JITTER_LADDER:
        try:
            L = linalg.cholesky(A + (delta * scale) * eye if delta else A, lower=True, check_finite=False)
        except linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)) and np.all(np.diag(L) > 0):
            return L, delta
    raise NumericalError("matrix is not positive definite at the maximum jitter 1e-4")


def solve_spd(A: np.ndarray, B: np.ndarray) -> tuple[np.ndarray, SpdSolveReport]:
    """Solve ``A Z = B`` for symmetric positive (semi)definite ``A``.

    On a failed factorization the solve is retried on ``A + delta I`` with
    ``delta`` escalating from 1e-10 to 1e-4 (relative to the mean diagonal).
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError("A must be square")
    L, delta = cholesky_jitter(A)
    Z = linalg.cho_solve((L, True), B, check_finite=False)
    d = np.diag(L)
    cond = float((d.max() / d.min()) ** 2)
    return Z, SpdSolveReport(jitter_used=delta, condition_estimate=cond)


def sym_eig_min(A: np.ndarray) -> float:
    """Smallest eigenvalue of a symmetric matrix."""
    A = np.asarray(A, dtype=float)
    return float(linalg.eigvalsh(A, subset_by_index=[0, 0], check_finite=False)[0])


def logdet_from_cholesky(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))
