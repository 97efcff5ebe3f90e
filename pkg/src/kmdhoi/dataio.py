"""Loading, validating and organising multi-view data.

A manifest is a plain-text file of ``key = value`` lines (``#`` starts a
comment). Relative paths are resolved against the manifest's directory::

    phenotype   = pheno.tsv
    covariates  = covar.tsv          # optional; an intercept is always added
    standardize = false              # z-score quantitative view columns
    view1       = snps.tsv
    view1.kind  = genotype           # genotype | quantitative | categorical
    view1.kernel = ibs
    view1.units = snp_units.tsv      # optional: unit TAB col,col,...
    view2 ...
    view3 ...

Every matrix file is a UTF-8 TSV whose first row holds column names and
whose first column holds subject IDs; an empty cell is a missing value.
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .kernels import KernelSpec

log = logging.getLogger(__name__)

VIEW_KINDS = ("genotype", "quantitative", "categorical")
N_VIEWS = 3


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureView:
    name: str
    kind: str
    matrix: np.ndarray
    kernel: KernelSpec
    columns: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in VIEW_KINDS:
            raise DataError(f"unknown view kind {self.kind!r}")
        M = self.matrix
        if M.ndim != 2 or M.shape[1] < 1:
            raise DataError(f"view {self.name!r} must be an n x p matrix with p >= 1")
        if not np.all(np.isfinite(M)):
            raise DataError(f"view {self.name!r} contains missing values")
        if self.kind == "genotype" and not np.all(np.isin(M, (0.0, 1.0, 2.0))):
            raise DataError(f"invalid genotype code in view {self.name!r}")
        if self.columns and len(self.columns) != M.shape[1]:
            raise DataError(f"view {self.name!r}: {len(self.columns)} names for {M.shape[1]} columns")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class MultiViewDataset:
    y: np.ndarray
    X: np.ndarray
    views: tuple[FeatureView, FeatureView, FeatureView]
    subject_ids: tuple[str, ...] = ()
    covariate_names: tuple[str, ...] = ()
    dropped: int = 0

    def __post_init__(self):
        n = self.y.shape[0]
        if n == 0:
            raise DataError("empty dataset after filtering")
        if len(self.views) != N_VIEWS:
            raise DataError("exactly three views are required")
        if self.X.shape[0] != n or any(v.n != n for v in self.views):
            raise DataError("dimension mismatch between phenotype, covariates and views")
        if not np.all(self.X[:, 0] == 1.0):
            raise DataError("first covariate column must be the intercept")
        q = self.X.shape[1]
        if q > n - 1 or np.linalg.matrix_rank(self.X) < q:
            raise DataError("rank-deficient covariate matrix X")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def q(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class Unit:
    name: str
    columns: tuple[int, ...]


@dataclass(frozen=True)
class Triplet:
    units: tuple[Unit, Unit, Unit]

    @property
    def columns(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(np.asarray(u.columns, dtype=int) for u in self.units)

    @property
    def names(self) -> tuple[str, str, str]:
        return tuple(u.name for u in self.units)

    @property
    def label(self) -> str:
        return "|".join(self.names)


@dataclass(frozen=True)
class TripletCatalog:
    units_per_view: tuple[tuple[Unit, ...], tuple[Unit, ...], tuple[Unit, ...]]

    def __len__(self) -> int:
        return math.prod(len(u) for u in self.units_per_view)

    def __iter__(self) -> Iterator[Triplet]:
        return enumerate_triplets(self)

    def validate(self, dataset: MultiViewDataset) -> None:
        for units, view in zip(self.units_per_view, dataset.views):
            if not units:
                raise DataError(f"view {view.name!r} has no units")
            p = view.matrix.shape[1]
            for u in units:
                if not u.columns or min(u.columns) < 0 or max(u.columns) >= p:
                    raise DataError(f"unit {u.name!r} references columns outside view {view.name!r}")

    @classmethod
    def whole_views(cls, dataset: MultiViewDataset) -> "TripletCatalog":
        """One unit per view spanning all its columns."""
        return cls(tuple((Unit(v.name, tuple(range(v.matrix.shape[1]))),) for v in dataset.views))


def enumerate_triplets(catalog: TripletCatalog) -> Iterator[Triplet]:
    """Lazily yield every unit triplet in lexicographic order (view 3 varies fastest)."""
    for combo in itertools.product(*catalog.units_per_view):
        yield Triplet(combo)


# -- reading ------------------------------------------------------------------


@dataclass
class _Table:
    ids: list[str]
    columns: list[str]
    cells: list[list[str]] = field(repr=False)


def read_tsv(path: Path) -> _Table:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = rows[0]
    if len(header) < 2:
        raise DataError(f"{path}: need a subject ID column and at least one data column")
    body = [r for r in rows[1:] if r]
    for k, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}:{k}: expected {len(header)} cells, found {len(r)}")
    ids = [r[0] for r in body]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicated subject IDs")
    return _Table(ids, header[1:], [r[1:] for r in body])


def _numeric(table: _Table, path) -> np.ndarray:
    out = np.empty((len(table.ids), len(table.columns)))
    for i, row in enumerate(table.cells):
        for j, cell in enumerate(row):
            cell = cell.strip()
            if cell == "":
                out[i, j] = np.nan
                continue
            try:
                out[i, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: non-numeric cell {cell!r} in column {table.columns[j]!r}") from None
    return out


def _one_hot(table: _Table) -> tuple[np.ndarray, list[str], dict[str, list[int]]]:
    """Expand raw categorical columns; returns matrix, new names and raw -> expanded index map."""
    blocks, names, mapping = [], [], {}
    for j, col in enumerate(table.columns):
        values = [row[j].strip() for row in table.cells]
        levels = sorted({v for v in values if v != ""}, key=_level_key)
        block = np.zeros((len(values), len(levels)))
        for i, v in enumerate(values):
            if v == "":
                block[i] = np.nan
            else:
                block[i, levels.index(v)] = 1.0
        mapping[col] = list(range(len(names), len(names) + len(levels)))
        names.extend(f"{col}={lev}" for lev in levels)
        blocks.append(block)
    M = np.hstack(blocks) if blocks else np.zeros((len(table.ids), 0))
    return M, names, mapping


def _level_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def read_manifest(path) -> dict[str, str]:
    entries: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for k, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise DataError(f"{path}:{k}: expected 'key = value'")
            entries[key.strip()] = value.strip()
    return entries


def _flag(text: str | None) -> bool:
    if text is None:
        return False
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise DataError(f"bad boolean value {text!r}")


def _aligned(table: _Table, values: np.ndarray, order: list[str], path) -> np.ndarray:
    if len(table.ids) != len(order) or set(table.ids) != set(order):
        raise DataError(f"dimension mismatch: {path} does not list the same subjects as the phenotype file")
    pos = {sid: i for i, sid in enumerate(table.ids)}
    return values[[pos[s] for s in order]]


def read_units(path, columns: Sequence[str], expanded: dict[str, list[int]] | None = None) -> tuple[Unit, ...]:
    """Unit definitions: one line per unit, ``name TAB col,col,...``."""
    index = {c: i for i, c in enumerate(columns)}
    units = []
    with open(path, encoding="utf-8") as fh:
        for k, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            name, tab, cols = line.partition("\t")
            if not tab:
                raise DataError(f"{path}:{k}: expected 'unit<TAB>columns'")
            idx: list[int] = []
            for c in (c.strip() for c in cols.split(",") if c.strip()):
                if expanded is not None and c in expanded:
                    idx.extend(expanded[c])
                elif c in index:
                    idx.append(index[c])
                else:
                    raise DataError(f"{path}:{k}: unknown column {c!r}")
            if not idx:
                raise DataError(f"{path}:{k}: unit {name!r} has no columns")
            units.append(Unit(name.strip(), tuple(idx)))
    if not units:
        raise DataError(f"{path}: no units defined")
    return tuple(units)


def load_dataset(manifest_path, with_catalog: bool = False):
    """Read, align and validate the files named by a manifest.

    Subjects with any missing value are dropped (the count is logged and
    stored as ``dataset.dropped``). With ``with_catalog`` a
    ``(dataset, catalog)`` pair is returned; views without a units file
    contribute a single unit spanning all their columns.
    """
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    m = read_manifest(manifest_path)
    if "phenotype" not in m:
        raise DataError("manifest lacks a 'phenotype' entry")

    ph_path = base / m["phenotype"]
    ph = read_tsv(ph_path)
    order = ph.ids
    y = _numeric(ph, ph_path)[:, 0]

    if "covariates" in m:
        cv_path = base / m["covariates"]
        cv = read_tsv(cv_path)
        Z = _aligned(cv, _numeric(cv, cv_path), order, cv_path)
        cov_names = list(cv.columns)
    else:
        Z, cov_names = np.zeros((len(order), 0)), []

    standardize = _flag(m.get("standardize"))
    raw_views = []
    for v in range(1, N_VIEWS + 1):
        key = f"view{v}"
        if key not in m:
            raise DataError(f"manifest lacks a '{key}' entry")
        vpath = base / m[key]
        kind = m.get(f"{key}.kind", "quantitative")
        if kind not in VIEW_KINDS:
            raise DataError(f"{key}: unknown view kind {kind!r}")
        kernel = KernelSpec.parse(m.get(f"{key}.kernel", "ibs" if kind == "genotype" else "gauss"))
        table = read_tsv(vpath)
        expanded = None
        if kind == "categorical" and m.get(f"{key}.encoding", "raw") != "onehot":
            M, names, expanded = _one_hot(table)
        else:
            M, names = _numeric(table, vpath), list(table.columns)
        M = _aligned(table, M, order, vpath)
        units = None
        if f"{key}.units" in m:
            units = read_units(base / m[f"{key}.units"], names, expanded)
        name = m.get(f"{key}.name", Path(m[key]).stem)
        raw_views.append((name, kind, M, kernel, names, units))

    keep = np.isfinite(y) & np.all(np.isfinite(Z), axis=1)
    for _, _, M, *_ in raw_views:
        keep &= np.all(np.isfinite(M), axis=1)
    dropped = int(np.sum(~keep))
    if dropped:
        log.info("dropped %d of %d subjects with missing values", dropped, len(order))
    if not keep.any():
        raise DataError("empty dataset after filtering")

    views = []
    for name, kind, M, kernel, names, _ in raw_views:
        M = M[keep]
        if standardize and kind == "quantitative":
            sd = M.std(axis=0, ddof=1)
            M = (M - M.mean(axis=0)) / np.where(sd > 0, sd, 1.0)
        views.append(FeatureView(name, kind, M, kernel, tuple(names)))

    Z = Z[keep]
    if Z.shape[1] and np.all(Z[:, 0] == 1.0):
        X, names = Z, cov_names
    else:
        X, names = np.hstack([np.ones((Z.shape[0], 1)), Z]), ["intercept"] + cov_names
    ds = MultiViewDataset(
        y=y[keep],
        X=X,
        views=tuple(views),
        subject_ids=tuple(s for s, k in zip(order, keep) if k),
        covariate_names=tuple(names),
        dropped=dropped,
    )
    if not with_catalog:
        return ds
    units = [u if u is not None else (Unit(view.name, tuple(range(view.matrix.shape[1]))),)
             for (*_, u), view in zip(raw_views, ds.views)]
    catalog = TripletCatalog(tuple(units))
    catalog.validate(ds)
    return ds, catalog


# -- writing ------------------------------------------------------------------


def _write_tsv(path: Path, ids, columns, M: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", *columns])
        for sid, row in zip(ids, M):
            # repr round-trips doubles exactly
            w.writerow([sid, *(repr(float(x)) for x in row)])


def write_dataset(dataset: MultiViewDataset, directory, catalog: TripletCatalog | None = None) -> Path:
    """Write ``dataset`` as TSV files plus a manifest; returns the manifest path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    n = dataset.n
    ids = dataset.subject_ids or tuple(f"s{i + 1}" for i in range(n))
    cov_names = dataset.covariate_names or ("intercept",) + tuple(f"x{j}" for j in range(1, dataset.q))
    _write_tsv(d / "phenotype.tsv", ids, ["y"], dataset.y[:, None])
    _write_tsv(d / "covariates.tsv", ids, cov_names, dataset.X)
    lines = ["phenotype = phenotype.tsv", "covariates = covariates.tsv", "standardize = false"]
    for v, view in enumerate(dataset.views, start=1):
        cols = view.columns or tuple(f"{view.name}_{j + 1}" for j in range(view.matrix.shape[1]))
        fname = f"view{v}.tsv"
        _write_tsv(d / fname, ids, cols, view.matrix)
        lines += [f"view{v} = {fname}", f"view{v}.name = {view.name}", f"view{v}.kind = {view.kind}",
                  f"view{v}.kernel = {view.kernel}"]
        if view.kind == "categorical":
            lines.append(f"view{v}.encoding = onehot")
        if catalog is not None:
            uname = f"view{v}_units.tsv"
            with open(d / uname, "w", encoding="utf-8") as fh:
                for u in catalog.units_per_view[v - 1]:
                    fh.write(f"{u.name}\t{','.join(cols[i] for i in u.columns)}\n")
            lines.append(f"view{v}.units = {uname}")
    path = d / "manifest.txt"
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
