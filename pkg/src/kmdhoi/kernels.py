"""Gram matrices for single views and their interactions.

Kernels are written down by a short spec string (the manifest format):
``linear``, ``poly:c=<real>,d=<int>``, ``gauss`` (median-heuristic
bandwidth), ``gauss:sigma=<real>`` and ``ibs``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from scipy.spatial.distance import pdist, squareform

if TYPE_CHECKING:
    from .dataio import MultiViewDataset, Triplet

KERNEL_LABELS = ("1", "2", "3", "1x2", "1x3", "2x3", "1x2x3")

_KINDS = ("linear", "polynomial", "gaussian", "ibs")


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: str
    c: float = 0.0
    d: int = 1
    bandwidth: float | None = None  # None means median heuristic

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise KernelError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "polynomial":
            if self.d < 1 or int(self.d) != self.d:
                raise KernelError("polynomial kernel needs an integer degree d >= 1")
            if self.c < 0:
                raise KernelError("polynomial kernel needs c >= 0")
        if self.kind == "gaussian" and self.bandwidth is not None and not self.bandwidth > 0:
            raise KernelError("gaussian bandwidth must be positive")

    @classmethod
    def parse(cls, text: str) -> "KernelSpec":
        text = text.strip()
        name, _, args = text.partition(":")
        params: dict[str, str] = {}
        if args:
            for item in args.split(","):
                key, eq, value = item.partition("=")
                if not eq:
                    raise KernelError(f"malformed kernel argument {item!r} in {text!r}")
                params[key.strip()] = value.strip()
        try:
            if name == "linear" and not params:
                return cls("linear")
            if name == "ibs" and not params:
                return cls("ibs")
            if name == "gauss":
                if not params:
                    return cls("gaussian")
                if set(params) == {"sigma"}:
                    return cls("gaussian", bandwidth=float(params["sigma"]))
            if name == "poly" and set(params) <= {"c", "d"}:
                d = float(params.get("d", 2))
                if d != int(d):
                    raise KernelError("polynomial degree must be an integer")
                return cls("polynomial", c=float(params.get("c", 0.0)), d=int(d))
        except ValueError as exc:
            if isinstance(exc, KernelError):
                raise
            raise KernelError(f"bad numeric value in kernel spec {text!r}") from exc
        raise KernelError(f"unrecognised kernel spec {text!r}")

    def __str__(self) -> str:
        if self.kind == "linear":
            return "linear"
        if self.kind == "ibs":
            return "ibs"
        if self.kind == "polynomial":
            return f"poly:c={self.c:g},d={self.d}"
        return "gauss" if self.bandwidth is None else f"gauss:sigma={self.bandwidth:g}"


@dataclass(frozen=True)
class GramMatrix:
    values: np.ndarray
    source: str

    @property
    def n(self) -> int:
        return self.values.shape[0]


def _as_2d(view_slice) -> np.ndarray:
    M = np.asarray(view_slice, dtype=float)
    if M.ndim == 1:
        M = M[:, None]
    if M.ndim != 2 or M.shape[1] < 1:
        raise KernelError("view slice must be an n x p matrix with p >= 1")
    return M


def median_bandwidth(view_slice) -> float:
    """Median of the pairwise Euclidean distances, ignoring exact zeros."""
    M = _as_2d(view_slice)
    if M.shape[0] < 2:
        raise KernelError("median heuristic needs at least two rows")
    dist = pdist(M)
    dist = dist[dist > 0]
    if dist.size == 0:
        raise KernelError("degenerate bandwidth: all pairwise distances are zero")
    return float(np.median(dist))


def _symmetrize(K: np.ndarray) -> np.ndarray:
    return 0.5 * (K + K.T)


def ibs_gram(G: np.ndarray) -> np.ndarray:
    G = _as_2d(G)
    if not np.all(np.isin(G, (0.0, 1.0, 2.0))):
        raise KernelError("ibs kernel requires genotype codes in {0, 1, 2}")
    s = G.shape[1]
    # sum_b |G_ib - G_jb| is the cityblock distance
    K = 1.0 - squareform(pdist(G, metric="cityblock")) / (2.0 * s)
    np.fill_diagonal(K, 1.0)
    return K


def gaussian_gram(M: np.ndarray, bandwidth: float | None = None) -> np.ndarray:
    M = _as_2d(M)
    sigma = median_bandwidth(M) if bandwidth is None else float(bandwidth)
    if not sigma > 0:
        raise KernelError("gaussian bandwidth must be positive")
    sq = squareform(pdist(M, metric="sqeuclidean"))
    K = np.exp(-sq / (2.0 * sigma * sigma))
    np.fill_diagonal(K, 1.0)
    return K


def gram(view_slice, spec: KernelSpec | str, source: str = "", view_kind: str | None = None) -> GramMatrix:
    """Gram matrix of ``spec`` evaluated on the rows of ``view_slice``.

    ``view_kind`` (``genotype``, ``quantitative`` or ``categorical``) is
    checked against the kernel when given; IBS is only valid on genotypes.
    """
    if isinstance(spec, str):
        spec = KernelSpec.parse(spec)
    M = _as_2d(view_slice)
    if spec.kind == "ibs":
        if view_kind is not None and view_kind != "genotype":
            raise KernelError("ibs kernel requested on a non-genotype view")
        K = ibs_gram(M)
    elif spec.kind == "gaussian":
        K = gaussian_gram(M, spec.bandwidth)
    elif spec.kind == "linear":
        K = M @ M.T
    else:
        K = (M @ M.T + spec.c) ** spec.d
    return GramMatrix(_symmetrize(K), source or str(spec))


def hadamard(a: GramMatrix, b: GramMatrix) -> GramMatrix:
    if a.values.shape != b.values.shape:
        raise KernelError(f"dimension mismatch: {a.values.shape} vs {b.values.shape}")
    return GramMatrix(a.values * b.values, f"{a.source}x{b.source}")


def interaction_set(k1: GramMatrix, k2: GramMatrix, k3: GramMatrix) -> list[GramMatrix]:
    """The seven kernels ``K1, K2, K3, K1oK2, K1oK3, K2oK3, K1oK2oK3``."""
    k12 = hadamard(k1, k2)
    k13 = hadamard(k1, k3)
    k23 = hadamard(k2, k3)
    k123 = hadamard(k12, k3)
    out = [k1, k2, k3, k12, k13, k23, k123]
    return [GramMatrix(k.values, label) for k, label in zip(out, KERNEL_LABELS)]


def build_kernel_set(dataset: "MultiViewDataset", triplet: "Triplet") -> list[GramMatrix]:
    """Seven Gram matrices for one testing unit triplet, in the fixed order."""
    mains = []
    for view, cols in zip(dataset.views, triplet.columns):
        mains.append(gram(view.matrix[:, cols], view.kernel, view_kind=view.kind))
    return interaction_set(*mains)
