"""Synthetic three-view data and the size / power / ROC experiment drivers.

One replicate consists of two covariates (height, weight) plus intercept, a
genotype view of one gene, a two-dimensional "topology" view of points on
three noisy circles, and a one-hot categorical view. The phenotype mixes
main, pairwise and three-way effects with weights ``alphas``.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit, logit

log = logging.getLogger(__name__)

METHODS = ("overall", "hoi", "ppcar", "fpcar", "skat")
ROC_THRESHOLDS = np.round(np.arange(0, 10001) * 1e-4, 4)


@dataclass(frozen=True)
class SimConfig:
    n: int = 500
    alphas: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sigma_noise: float = 1e-2
    replicates: int = 500
    seed: int = 20190101
    noise_topo: float = 0.05
    n_snps: int = 10
    n_categories: int = 10
    beta: float = 0.5
    latent_loading: float = 0.5
    maf_range: tuple[float, float] = (0.1, 0.4)
    literal_index: bool = False

    def __post_init__(self):
        if self.n < 20:
            raise ValueError("simulation needs n >= 20")
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")


@dataclass
class PowerRow:
    alphas: tuple[float, float, float]
    rates: dict[str, float]
    replicates: int
    failures: dict[str, int] = field(default_factory=dict)


@dataclass
class RocCurve:
    method: str
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


@dataclass
class Replicate:
    y: np.ndarray
    X: np.ndarray
    genotype: np.ndarray
    topology: np.ndarray
    categorical: np.ndarray

    @property
    def views(self):
        return (self.genotype, self.topology, self.categorical)


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def replicate_seed(base: int, index: int) -> int:
    return int(base) ^ int(index)


def gen_covariates(n: int, seed=None, noiseless: bool = False) -> np.ndarray:
    """Intercept plus height and weight ramps on [50, 80] and [60, 225] with 3 N(0,1) noise."""
    if n < 2:
        raise ValueError("need n >= 2")
    rng = _rng(seed)
    height = np.linspace(50.0, 80.0, n)
    weight = np.linspace(60.0, 225.0, n)
    if not noiseless:
        height = height + 3.0 * rng.standard_normal(n)
        weight = weight + 3.0 * rng.standard_normal(n)
    return np.column_stack([np.ones(n), height, weight])


def gen_genotypes(
    n: int,
    n_snps: int = 10,
    seed=None,
    latent_loading: float = 0.5,
    maf_range: tuple[float, float] = (0.1, 0.4),
    maf: Sequence[float] | None = None,
) -> np.ndarray:
    """Genotypes of one gene coupled through a shared latent factor.

    Subject ``i`` has latent ``z_i ~ N(0, 1)`` and SNP ``b`` is
    ``Binomial(2, p_ib)`` with ``logit(p_ib) = loading * z_i + logit(maf_b)``.
    Passing ``maf`` overrides the uniform draw of minor-allele frequencies; a
    frequency of exactly 0 gives an all-zero column.
    """
    if n < 2:
        raise ValueError("need n >= 2")
    rng = _rng(seed)
    z = rng.standard_normal(n)
    if maf is None:
        maf = rng.uniform(maf_range[0], maf_range[1], size=n_snps)
    maf = np.asarray(maf, dtype=float)
    with np.errstate(divide="ignore"):
        p = expit(latent_loading * z[:, None] + logit(maf)[None, :])
    p = np.where(maf[None, :] == 0.0, 0.0, p)
    return rng.binomial(2, p).astype(float)


def gen_topology(n: int, seed=None, noise: float = 0.05, noiseless: bool = False) -> np.ndarray:
    """Points on circles of radius 1, 0.5 and 0.25 at angles drawn from U[-1, 1]."""
    rng = _rng(seed)
    sizes = [len(part) for part in np.array_split(np.arange(n), 3)]
    radius = np.repeat([1.0, 0.5, 0.25], sizes)
    angle = rng.uniform(-1.0, 1.0, size=n)
    T = radius[:, None] * np.column_stack([np.cos(angle), np.sin(angle)])
    if not noiseless:
        T = T + noise * rng.standard_normal((n, 2))
    return T


def gen_categorical(n: int, k: int = 10, seed=None) -> np.ndarray:
    """One-hot coding of ``n`` draws from ``k`` equiprobable categories."""
    rng = _rng(seed)
    labels = rng.integers(0, k, size=n)
    out = np.zeros((n, k))
    out[np.arange(n), labels] = 1.0
    return out


def effect_terms(S, T, C, literal_index: bool = False):
    """Main effect functions ``(h_S, h_T, h_C)`` of the phenotype model.

    ``h_S = sum_a S_a cos S_a``, ``h_T = sum_b 2 T_b sin T_b`` and
    ``h_C = sum_c 1 / (sqrt(2) exp(C_c))``. With ``literal_index`` the last
    term is multiplied by the 1-based subject index.
    """
    S, T, C = (np.asarray(v, dtype=float) for v in (S, T, C))
    h_s = np.sum(S * np.cos(S), axis=1)
    h_t = np.sum(2.0 * T * np.sin(T), axis=1)
    h_c = np.sum(1.0 / (math.sqrt(2.0) * np.exp(C)), axis=1)
    if literal_index:
        h_c = h_c * np.arange(1, len(h_c) + 1)
    return h_s, h_t, h_c


def gen_phenotype(views, covariates, alphas, sigma: float = 1e-2, seed=None, beta: float = 0.5,
                  literal_index: bool = False) -> np.ndarray:
    """Phenotype with main, pairwise and triple effects scaled by ``alphas``."""
    S, T, C = views
    X = np.asarray(covariates, dtype=float)
    rng = _rng(seed)
    a1, a2, a3 = alphas
    h_s, h_t, h_c = effect_terms(S, T, C, literal_index)
    main = h_s + h_t + h_c
    pair = h_s * 2 * h_t + h_s * 3 * h_c + 2 * h_t * 3 * h_c
    triple = h_s * 2 * h_t * 3 * h_c
    y = X @ np.full(X.shape[1], beta)
    for a, term in ((a1, main), (a2, pair), (a3, triple)):
        if a:
            y = y + a * term
    return y + sigma * rng.standard_normal(X.shape[0])


def gen_replicate(config: SimConfig, index: int = 0, alphas=None) -> Replicate:
    rng = np.random.default_rng(replicate_seed(config.seed, index))
    X = gen_covariates(config.n, rng)
    S = gen_genotypes(config.n, config.n_snps, rng, config.latent_loading, config.maf_range)
    T = gen_topology(config.n, rng, config.noise_topo)
    C = gen_categorical(config.n, config.n_categories, rng)
    alphas = config.alphas if alphas is None else alphas
    y = gen_phenotype((S, T, C), X, alphas, config.sigma_noise, rng, config.beta, config.literal_index)
    return Replicate(y, X, S, T, C)


SIM_KERNELS = ("ibs", "gauss", "gauss")


def replicate_pvalues(rep: Replicate, methods: Iterable[str], reml_options=None) -> dict[str, float]:
    """p-values of each requested method on one replicate; NaN marks a failure."""
    from . import baselines
    from .kernels import gram, interaction_set
    from .mixed_model import ReMLConvergenceError
    from .numerics import NumericalError
    from .score_tests import hoi_test, overall_test

    methods = list(methods)
    out: dict[str, float] = {}
    kernel_set = None
    if "overall" in methods or "hoi" in methods:
        mains = [gram(v, k) for v, k in zip(rep.views, SIM_KERNELS)]
        kernel_set = interaction_set(*mains)
    for m in methods:
        try:
            if m == "overall":
                out[m] = overall_test(rep.y, rep.X, kernel_set).p_value
            elif m == "hoi":
                out[m] = hoi_test(rep.y, rep.X, kernel_set, reml_options).p_value
            elif m == "ppcar":
                out[m] = baselines.ppcar_test(rep.y, rep.X, rep.views).p_value
            elif m == "fpcar":
                out[m] = baselines.fpcar_test(rep.y, rep.X, rep.views).p_value
            elif m == "skat":
                out[m] = baselines.skat_style_test(rep.y, rep.X, rep.views).p_value
            else:
                raise ValueError(f"unknown method {m!r}")
        except (ReMLConvergenceError, NumericalError) as exc:
            log.warning("method %s failed: %s", m, exc)
            out[m] = math.nan
    return out


def _power_job(args):
    config, index, methods, reml_options = args
    return replicate_pvalues(gen_replicate(config, index), methods, reml_options)


def _map(fn: Callable, jobs: list, threads: int):
    if threads <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * threads))))


def simulate_pvalues(config: SimConfig, methods=METHODS, threads: int = 1, reml_options=None) -> dict[str, np.ndarray]:
    """p-values of every method on every replicate (one dataset per replicate, shared by all methods)."""
    methods = tuple(methods)
    jobs = [(config, i, methods, reml_options) for i in range(config.replicates)]
    results = _map(_power_job, jobs, threads)
    return {m: np.array([r[m] for r in results]) for m in methods}


def rejection_rate(pvalues: np.ndarray, threshold: float = 0.05) -> tuple[float, int]:
    """Rejection rate among successful replicates and the number of failures."""
    p = np.asarray(pvalues, dtype=float)
    ok = np.isfinite(p)
    if not ok.any():
        return math.nan, int((~ok).sum())
    return float(np.mean(p[ok] <= threshold)), int((~ok).sum())


def power_study(config: SimConfig, methods=METHODS, alpha_grid=None, threshold: float = 0.05,
                threads: int = 1, reml_options=None) -> list[PowerRow]:
    """Rejection rates at ``threshold`` for each setting of ``alphas``."""
    rows = []
    for alphas in alpha_grid or [config.alphas]:
        cfg = SimConfig(**{**config.__dict__, "alphas": tuple(alphas)})
        pv = simulate_pvalues(cfg, methods, threads, reml_options)
        rates, fails = {}, {}
        for m, p in pv.items():
            rates[m], fails[m] = rejection_rate(p, threshold)
        rows.append(PowerRow(tuple(alphas), rates, cfg.replicates, fails))
    return rows


def roc_curve(pvalues, labels, thresholds=ROC_THRESHOLDS, method: str = "") -> RocCurve:
    """Sensitivity against 1 - specificity as the p-value cut-off sweeps ``thresholds``.

    The curve is anchored at (0, 0) and (1, 1) and the area is computed by the
    trapezoid rule. Failed replicates (NaN) are treated as p = 1.
    """
    p = np.where(np.isfinite(pvalues), pvalues, 1.0)
    labels = np.asarray(labels, dtype=bool)
    pos = np.sort(p[labels])
    neg = np.sort(p[~labels])
    if pos.size == 0 or neg.size == 0:
        raise ValueError("ROC needs both positive and negative runs")
    tpr = np.searchsorted(pos, thresholds, side="right") / pos.size
    fpr = np.searchsorted(neg, thresholds, side="right") / neg.size
    fx = np.concatenate([[0.0], fpr, [1.0]])
    ty = np.concatenate([[0.0], tpr, [1.0]])
    auc = float(np.sum(np.diff(fx) * (ty[1:] + ty[:-1]) / 2.0))
    return RocCurve(method, np.asarray(thresholds), fpr, tpr, auc)


def roc_alphas(config: SimConfig, index: int, variant: str = "a") -> tuple[tuple[float, float, float], bool]:
    """Effect weights of one ROC run and whether it carries a three-way effect.

    With probability 1/2 the random weight is U[0, 1], otherwise exactly 0.
    Variant ``a`` randomises only the three-way weight (alpha1 = alpha2 = 1);
    variant ``b`` sets alpha2 = alpha3 to the random weight (alpha1 = 1).
    """
    rng = np.random.default_rng([int(config.seed), int(index), 7])
    weight = rng.uniform(0.0, 1.0) if rng.uniform() < 0.5 else 0.0
    if variant == "a":
        return (1.0, 1.0, weight), weight > 0
    if variant == "b":
        return (1.0, weight, weight), weight > 0
    raise ValueError("variant must be 'a' or 'b'")


def _roc_job(args):
    config, index, methods, variant, reml_options = args
    alphas, label = roc_alphas(config, index, variant)
    rep = gen_replicate(config, index, alphas)
    kernel_methods = [m for m in methods if m != "uniform"]
    pv = replicate_pvalues(rep, kernel_methods, reml_options)
    if "uniform" in methods:
        pv["uniform"] = float(np.random.default_rng([int(config.seed), int(index), 11]).uniform())
    return pv, label


def roc_study(config: SimConfig, methods=("hoi", "ppcar", "fpcar", "skat"), variant: str = "a",
              threads: int = 1, reml_options=None, thresholds=ROC_THRESHOLDS) -> dict[str, RocCurve]:
    """ROC curves of each method over ``config.replicates`` randomised runs."""
    methods = tuple(methods)
    jobs = [(config, i, methods, variant, reml_options) for i in range(config.replicates)]
    results = _map(_roc_job, jobs, threads)
    labels = np.array([lab for _, lab in results])
    curves = {}
    for m in methods:
        p = np.array([r[m] for r, _ in results])
        curves[m] = roc_curve(p, labels, thresholds, m)
    return curves
