"""Command-line interface: ``kmdhoi <subcommand> [options]``.

Exit status is 0 on success, 2 on invalid input and 1 on internal errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import baselines, netmetrics, simgen
from .dataio import DataError, MultiViewDataset, Triplet, enumerate_triplets, load_dataset
from .kernels import KERNEL_LABELS, KernelError, build_kernel_set
from .mixed_model import DEFAULT_START_GRID, ReMLConvergenceError, ReMLError, ReMLOptions, blup_effects, fit_reml
from .numerics import NumericalError
from .score_tests import interaction_score_test, overall_test

log = logging.getLogger("kmdhoi")

SCAN_METHODS = ("overall", "hoi", "ppcar", "fpcar", "skat")
THRESHOLDS = (0.05, 0.01, 0.001)
THETA_FIELDS = ("sigma2",) + tuple(f"tau_{k}" for k in KERNEL_LABELS)


class UsageError(ValueError):
    pass


# -- scan ---------------------------------------------------------------------


@dataclass
class ScanRecord:
    triplet: str
    unit1: str
    unit2: str
    unit3: str
    theta: dict = field(default_factory=lambda: dict.fromkeys(THETA_FIELDS, math.nan))
    p: dict = field(default_factory=dict)
    hoi_p_bonferroni: float = math.nan
    hoi_p_bh: float = math.nan
    degenerate: bool = False
    rank_deficient: bool = False
    non_converged: bool = False
    error: str = ""

    def row(self, methods) -> dict:
        out = {"triplet": self.triplet, "unit1": self.unit1, "unit2": self.unit2, "unit3": self.unit3}
        out.update(self.theta)
        for m in methods:
            out[f"{m}_p"] = self.p.get(m, math.nan)
        out["hoi_p_bonferroni"] = self.hoi_p_bonferroni
        out["hoi_p_bh"] = self.hoi_p_bh
        out["degenerate"] = int(self.degenerate)
        out["rank_deficient"] = int(self.rank_deficient)
        out["non_converged"] = int(self.non_converged)
        out["error"] = self.error
        return out


def _fit_or_best(y, X, kernels, opts):
    """Converged fit, or the best attempt with a non-converged flag."""
    try:
        return fit_reml(y, X, kernels, opts), False
    except ReMLConvergenceError as exc:
        if exc.best is None:
            raise
        return exc.best, True


def scan_triplet(dataset: MultiViewDataset, triplet: Triplet, methods, opts: ReMLOptions) -> ScanRecord:
    """Every requested test on one triplet; failures become flags, never exceptions."""
    rec = ScanRecord(triplet.label, *triplet.names)
    y, X = dataset.y, dataset.X
    slices = [v.matrix[:, c] for v, c in zip(dataset.views, triplet.columns)]
    problems = []
    kernels = None
    if {"overall", "hoi"} & set(methods):
        try:
            kernels = build_kernel_set(dataset, triplet)
        except (KernelError, ValueError, NumericalError) as exc:
            rec.degenerate = True
            problems.append(f"kernel: {exc}")
    if kernels is not None:
        try:
            full, nc = _fit_or_best(y, X, kernels, opts)
            rec.non_converged |= nc
            rec.theta = dict(zip(THETA_FIELDS, map(float, full.theta.as_vector())))
        except (ReMLError, NumericalError, ValueError) as exc:
            rec.non_converged = True
            problems.append(f"full fit: {exc}")
    for m in methods:
        try:
            if m in ("overall", "hoi") and kernels is None:
                res = None
            elif m == "overall":
                res = overall_test(y, X, kernels)
            elif m == "hoi":
                null, nc = _fit_or_best(y, X, kernels[:6], opts)
                rec.non_converged |= nc
                res = interaction_score_test(y, X, kernels[:6], kernels[6], null, "hoi")
            elif m == "ppcar":
                res = baselines.ppcar_test(y, X, slices)
            elif m == "fpcar":
                res = baselines.fpcar_test(y, X, slices)
            elif m == "skat":
                res = baselines.skat_style_test(y, X, slices)
            else:
                raise UsageError(f"unknown method {m!r}")
        except UsageError:
            raise
        except (ReMLError, NumericalError, ValueError, np.linalg.LinAlgError) as exc:
            res = None
            if isinstance(exc, ReMLError):
                rec.non_converged = True
            else:
                rec.degenerate = True
            problems.append(f"{m}: {exc}")
        if res is None:
            rec.p[m] = math.nan
            continue
        rec.p[m] = float(res.p_value)
        rec.degenerate |= bool(getattr(res, "degenerate", False))
        rec.rank_deficient |= bool(getattr(res, "rank_deficient", False))
    rec.error = "; ".join(problems)
    return rec


def adjust_pvalues(p: np.ndarray, m_total: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Bonferroni and Benjamini-Hochberg adjustments; NaN entries stay NaN.

    Both use ``m_total`` tests (default: the number of entries).
    """
    p = np.asarray(p, dtype=float)
    m = len(p) if m_total is None else m_total
    ok = np.isfinite(p)
    bonf = np.full_like(p, np.nan)
    bh = np.full_like(p, np.nan)
    bonf[ok] = np.minimum(p[ok] * m, 1.0)
    if ok.any():
        # pad untested slots with p = 1 so BH sees the full family
        padded = np.concatenate([p[ok], np.ones(m - ok.sum())])
        bh[ok] = stats.false_discovery_control(padded, method="bh")[: ok.sum()]
    return bonf, bh


_WORKER: dict = {}


def _init_worker(dataset, methods, opts):
    _WORKER.update(dataset=dataset, methods=methods, opts=opts)


def _scan_job(triplet):
    return scan_triplet(_WORKER["dataset"], triplet, _WORKER["methods"], _WORKER["opts"])


def run_scan(dataset, catalog, methods, opts, threads=1) -> list[ScanRecord]:
    triplets = list(enumerate_triplets(catalog))
    if threads <= 1:
        records = [scan_triplet(dataset, t, methods, opts) for t in triplets]
    else:
        with ProcessPoolExecutor(threads, initializer=_init_worker, initargs=(dataset, methods, opts)) as pool:
            records = list(pool.map(_scan_job, triplets, chunksize=max(1, len(triplets) // (8 * threads))))
    if "hoi" in methods:
        bonf, bh = adjust_pvalues(np.array([r.p.get("hoi", math.nan) for r in records]), len(records))
        for r, b, h in zip(records, bonf, bh):
            r.hoi_p_bonferroni, r.hoi_p_bh = float(b), float(h)
    return records


def scan_summary(records, methods) -> list[dict]:
    rows = []
    for m in methods:
        p = np.array([r.p.get(m, math.nan) for r in records])
        for t in THRESHOLDS:
            rows.append({"method": m, "threshold": t, "count": int(np.sum(p <= t))})
    if "hoi" in methods:
        b = np.array([r.hoi_p_bonferroni for r in records])
        rows.append({"method": "hoi_bonferroni", "threshold": 0.05, "count": int(np.sum(b <= 0.05))})
    return rows


def neglog10_table(records, methods) -> list[dict]:
    out = []
    for k, r in enumerate(records, start=1):
        row = {"index": k, "triplet": r.triplet}
        for m in methods:
            p = r.p.get(m, math.nan)
            row[f"neglog10_{m}"] = -math.log10(p) if p > 0 else (math.inf if p == 0 else math.nan)
        out.append(row)
    return out


# -- output helpers -------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("nan" if math.isnan(v) else ("inf" if v > 0 else "-inf"))
    return str(v)


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, (np.floating, np.integer)):
        return _jsonable(v.item())
    return v


def write_rows(rows: list[dict], dest, fmt: str = "tsv") -> None:
    """Write dict rows to ``dest`` (path, ``-`` or None for stdout) as TSV or JSON lines."""
    if dest in (None, "-"):
        _emit(rows, sys.stdout, fmt)
        return
    Path(dest).parent.mkdir(parents=True, exist_ok=True)
    with open(dest, "w", newline="", encoding="utf-8") as fh:
        _emit(rows, fh, fmt)


def _emit(rows, fh, fmt):
    if fmt == "jsonl":
        for r in rows:
            fh.write(json.dumps({k: _jsonable(v) for k, v in r.items()}) + "\n")
        return
    if not rows:
        return
    w = csv.writer(fh, delimiter="\t", lineterminator="\n")
    keys = list(rows[0])
    w.writerow(keys)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in keys])


def _sibling(output, suffix: str):
    if output in (None, "-"):
        return None
    p = Path(output)
    return p.with_name(p.stem + suffix)


# -- argument parsing -----------------------------------------------------------


def _float_list(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _alphas(text: str) -> tuple[float, float, float]:
    vals = _float_list(text)
    if len(vals) != 3:
        raise argparse.ArgumentTypeError("alphas need exactly three values a1,a2,a3")
    return vals


def _methods(text: str) -> tuple[str, ...]:
    return tuple(m.strip() for m in text.split(",") if m.strip())


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=20190101, help="base random seed")
    g.add_argument("--threads", type=int, default=1, help="worker processes")
    g.add_argument("--methods", type=_methods, default=None, help="comma-separated subset of " + ",".join(SCAN_METHODS))
    g.add_argument("--reml-tol", type=float, default=1e-5)
    g.add_argument("--reml-max-iter", type=int, default=50)
    g.add_argument("--reml-starts", type=_float_list, default=DEFAULT_START_GRID,
                   help="comma-separated initial tau values")
    g.add_argument("--em-steps", type=int, default=5)
    g.add_argument("--output", "-o", default=None, help="output file (default stdout)")
    g.add_argument("--format", choices=("tsv", "jsonl"), default="tsv")
    g.add_argument("--log-level", default="WARNING")
    return p


def _sim_options(p: argparse.ArgumentParser, reps: int) -> None:
    p.add_argument("--n", type=int, default=500, help="subjects per replicate")
    p.add_argument("--reps", type=int, default=reps)
    p.add_argument("--noise-topo", type=float, default=0.05, help="noise sd of the topology view")
    p.add_argument("--sigma", type=float, default=1e-2, help="phenotype noise sd")
    p.add_argument("--literal-index", action="store_true",
                   help="multiply the categorical main effect by the subject index")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="kmdhoi", description="Kernel tests for three-way interactions between data views.")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("test", parents=[common], help="scan every unit triplet of a dataset")
    t.add_argument("manifest")
    t.add_argument("--summary", default=None, help="threshold-count table (default <output>.summary.tsv)")
    t.add_argument("--neglog10", default=None, help="-log10 p table (default <output>.neglog10.tsv)")

    s = sub.add_parser("simulate", parents=[common], help="per-replicate p-values of simulated data")
    _sim_options(s, 1)
    s.add_argument("--alphas", type=_alphas, default=(0.0, 0.0, 0.0))

    w = sub.add_parser("power", parents=[common], help="rejection rates for one or more effect settings")
    _sim_options(w, 500)
    w.add_argument("--alphas", type=_alphas, action="append", default=None,
                   help="a1,a2,a3; repeat for several rows")
    w.add_argument("--threshold", type=float, default=0.05)

    r = sub.add_parser("roc", parents=[common], help="ROC curves over randomised three-way effects")
    _sim_options(r, 150)
    r.add_argument("--variant", choices=("a", "b"), default="a")
    r.add_argument("--auc-output", default=None, help="AUC table (default <output>.auc.tsv)")

    g = sub.add_parser("netmetrics", parents=[common], help="node metrics of per-group correlation networks")
    g.add_argument("table", help="TSV: subject ID, group column, node columns")
    g.add_argument("--group-column", required=True)
    g.add_argument("--threshold", type=float, default=0.5)
    g.add_argument("--units", default=None, help="unit definitions; node value = weighted mean of its columns")
    g.add_argument("--weights", choices=("sd", "uniform"), default="sd")

    e = sub.add_parser("effects", parents=[common], help="three-way BLUP effect by outcome x risk regime")
    e.add_argument("manifest")
    e.add_argument("--triplet", required=True, help="unit1|unit2|unit3")
    e.add_argument("--groups", required=True, help="TSV with subject ID, outcome and risk columns")
    e.add_argument("--outcome-column", required=True)
    e.add_argument("--risk-column", required=True)
    return parser


def reml_options(args) -> ReMLOptions:
    if args.reml_tol <= 0 or args.reml_max_iter < 1 or args.em_steps < 0 or not args.reml_starts:
        raise UsageError("invalid ReML options")
    if any(s < 0 for s in args.reml_starts):
        raise UsageError("initial tau values must be non-negative")
    return ReMLOptions(tol=args.reml_tol, max_iter=args.reml_max_iter, em_steps=args.em_steps,
                       start_grid=tuple(args.reml_starts))


def _check_methods(methods, allowed) -> tuple[str, ...]:
    bad = [m for m in methods if m not in allowed]
    if bad or not methods:
        raise UsageError(f"unknown or empty method list {','.join(methods)}; choose from {','.join(allowed)}")
    return tuple(methods)


def _sim_config(args, alphas=(0.0, 0.0, 0.0)) -> simgen.SimConfig:
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return simgen.SimConfig(n=args.n, alphas=tuple(alphas), sigma_noise=args.sigma, replicates=args.reps,
                            seed=args.seed, noise_topo=args.noise_topo, literal_index=args.literal_index)


# -- subcommands -----------------------------------------------------------------


def cmd_test(args) -> int:
    methods = _check_methods(args.methods or SCAN_METHODS, SCAN_METHODS)
    opts = reml_options(args)
    dataset, catalog = load_dataset(args.manifest, with_catalog=True)
    if dataset.dropped:
        log.warning("dropped %d subjects with missing values", dataset.dropped)
    records = run_scan(dataset, catalog, methods, opts, args.threads)
    write_rows([r.row(methods) for r in records], args.output, args.format)
    summary = scan_summary(records, methods)
    dest = args.summary or _sibling(args.output, ".summary.tsv")
    if dest is None:
        _emit(summary, sys.stderr, "tsv")
    else:
        write_rows(summary, dest)
    write_rows(neglog10_table(records, methods), args.neglog10 or _sibling(args.output, ".neglog10.tsv") or "/dev/null")
    return 0


def cmd_simulate(args) -> int:
    methods = _check_methods(args.methods or simgen.METHODS, simgen.METHODS)
    cfg = _sim_config(args, args.alphas)
    pv = simgen.simulate_pvalues(cfg, methods, args.threads, reml_options(args))
    rows = [{"replicate": i, **{m: float(pv[m][i]) for m in methods}} for i in range(cfg.replicates)]
    write_rows(rows, args.output, args.format)
    return 0


def cmd_power(args) -> int:
    methods = _check_methods(args.methods or simgen.METHODS, simgen.METHODS)
    cfg = _sim_config(args)
    grid = args.alphas or [(0.0, 0.0, 0.0)]
    result = simgen.power_study(cfg, methods, grid, args.threshold, args.threads, reml_options(args))
    rows = []
    for row in result:
        out = {"alpha1": row.alphas[0], "alpha2": row.alphas[1], "alpha3": row.alphas[2], "replicates": row.replicates}
        for m in methods:
            out[m] = row.rates[m]
        for m in methods:
            out[f"{m}_failures"] = row.failures[m]
        rows.append(out)
    write_rows(rows, args.output, args.format)
    return 0


def cmd_roc(args) -> int:
    allowed = ("hoi", "ppcar", "fpcar", "skat", "uniform")
    methods = _check_methods(args.methods or ("hoi", "ppcar", "fpcar", "skat"), allowed)
    cfg = _sim_config(args)
    curves = simgen.roc_study(cfg, methods, args.variant, args.threads, reml_options(args))
    rows = []
    for k, thr in enumerate(simgen.ROC_THRESHOLDS):
        row = {"threshold": float(thr)}
        for m, c in curves.items():
            row[f"{m}_fpr"] = float(c.fpr[k])
            row[f"{m}_tpr"] = float(c.tpr[k])
        rows.append(row)
    write_rows(rows, args.output, args.format)
    auc = [{"method": m, "auc": c.auc} for m, c in curves.items()]
    dest = args.auc_output or _sibling(args.output, ".auc.tsv")
    if dest is None:
        _emit(auc, sys.stderr, "tsv")
    else:
        write_rows(auc, dest, args.format)
    return 0


def _read_table(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh, delimiter="\t") if r]
    if len(rows) < 2:
        raise DataError(f"{path}: need a header and at least one row")
    return rows[0], rows[1:]


def cmd_netmetrics(args) -> int:
    header, body = _read_table(args.table)
    if args.group_column not in header:
        raise DataError(f"group column {args.group_column!r} not found")
    gcol = header.index(args.group_column)
    cols = [j for j in range(1, len(header)) if j != gcol]
    try:
        values = np.array([[float(r[j]) for j in cols] for r in body])
    except ValueError:
        raise DataError("node columns must be numeric") from None
    names = [header[j] for j in cols]
    if args.units:
        from .dataio import read_units
        units = read_units(args.units, names)
        labels = [u.name for u in units]
        summaries = lambda M: np.column_stack([netmetrics.roi_summary(M[:, list(u.columns)], args.weights) for u in units])
    else:
        labels = names
        summaries = lambda M: M
    groups = sorted({r[gcol] for r in body})
    out_rows = []
    for grp in groups:
        mask = np.array([r[gcol] == grp for r in body])
        g = netmetrics.correlation_graph(summaries(values[mask]), args.threshold, labels)
        table = netmetrics.node_table(g)
        rows = [asdict(t) for t in table]
        rows.append({"node": "__global_mean__", "transitivity": float(np.mean([t.transitivity for t in table])),
                     "degree": float(np.mean([t.degree for t in table])),
                     "nodal_efficiency": netmetrics.global_efficiency(g)})
        if args.output in (None, "-"):
            out_rows.extend({"group": grp, **r} for r in rows)
        else:
            base = Path(args.output)
            write_rows(rows, base.with_name(f"{base.stem}.{grp}{base.suffix or '.tsv'}"), args.format)
    if args.output in (None, "-"):
        write_rows(out_rows, None, args.format)
    return 0


def regime_summary(values, outcome, risk) -> list[dict]:
    """Count, min, quartiles and max of ``values`` in each outcome x risk cell."""
    values = np.asarray(values, dtype=float)
    levels_o = sorted(set(outcome))
    levels_r = sorted(set(risk))
    for lv, name in ((levels_o, "outcome"), (levels_r, "risk")):
        if len(lv) > 2:
            raise DataError(f"{name} column must be binary")
    lo = (levels_o + ["(none)"])[:2] if len(levels_o) < 2 else levels_o
    lr = (levels_r + ["(none)"])[:2] if len(levels_r) < 2 else levels_r
    rows = []
    for o in lo:
        for r in lr:
            mask = np.array([a == o and b == r for a, b in zip(outcome, risk)], dtype=bool)
            v = values[mask]
            row = {"outcome": o, "risk": r, "count": int(v.size)}
            q = np.quantile(v, [0, 0.25, 0.5, 0.75, 1]) if v.size else [math.nan] * 5
            row.update(zip(("min", "q1", "median", "q3", "max"), map(float, q)))
            rows.append(row)
    return rows


def cmd_effects(args) -> int:
    dataset, catalog = load_dataset(args.manifest, with_catalog=True)
    matches = [t for t in enumerate_triplets(catalog) if t.label == args.triplet]
    if not matches:
        raise DataError(f"triplet {args.triplet!r} not found")
    kernels = build_kernel_set(dataset, matches[0])
    fit = fit_reml(dataset.y, dataset.X, kernels, reml_options(args))
    h = blup_effects(fit, dataset.y, dataset.X, kernels).effects[6]
    header, body = _read_table(args.groups)
    for col in (args.outcome_column, args.risk_column):
        if col not in header:
            raise DataError(f"column {col!r} not found in {args.groups}")
    io, ir = header.index(args.outcome_column), header.index(args.risk_column)
    lookup = {r[0]: (r[io], r[ir]) for r in body}
    missing = [s for s in dataset.subject_ids if s not in lookup]
    if missing:
        raise DataError(f"{len(missing)} subjects lack outcome/risk values, e.g. {missing[0]!r}")
    outcome = [lookup[s][0] for s in dataset.subject_ids]
    risk = [lookup[s][1] for s in dataset.subject_ids]
    write_rows(regime_summary(h, outcome, risk), args.output, args.format)
    return 0


COMMANDS = {
    "test": cmd_test,
    "simulate": cmd_simulate,
    "power": cmd_power,
    "roc": cmd_roc,
    "netmetrics": cmd_netmetrics,
    "effects": cmd_effects,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, DataError, KernelError, FileNotFoundError) as exc:
        print(f"kmdhoi: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"kmdhoi: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"kmdhoi: internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
