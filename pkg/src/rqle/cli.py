"""Command-line interface.

Subcommands::

    rqle estimate     per-gene isoform abundances from a JSON-Lines gene file
    rqle dispersion   cohort dispersion from single-isoform genes
    rqle robustness   full vs truncated data Spearman concordance per method
    rqle simulate     simulation table cells (RMSE) and dispersion table cells
    rqle convert      TSV block format -> JSON-Lines

Settings resolve as command-line flag, then ``RQLE_<NAME>`` environment
variable, then built-in default.  Exit codes: 0 success, 1 usage error,
2 I/O error, 3 nothing processable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Iterator, Sequence, TextIO

import numpy as np
from scipy.stats import spearmanr

from . import sim
from .dispersion import DEFAULT_ALPHA, DEFAULT_BETA_GRID, DispersionError, estimate_phi_cohort
from .estimator import poisson_mle_em, rqle_estimate
from .model import GeneModel, Method, RobustConfig

logger = logging.getLogger("rqle")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_EMPTY = 0, 1, 2, 3
ENV_PREFIX = "RQLE_"


class UsageError(Exception):
    pass


def fmt(x: float) -> str:
    return f"{x:.6g}"


# --- ingestion ------------------------------------------------------------------

def gene_to_record(g: GeneModel) -> dict:
    return {"gene_id": g.gene_id, "isoform_ids": list(g.isoform_ids),
            "A": g.A.tolist(), "counts": g.counts.tolist()}


def gene_to_line(g: GeneModel) -> str:
    return json.dumps(gene_to_record(g), separators=(",", ":"))


def record_to_gene(obj) -> GeneModel:
    if not isinstance(obj, dict):
        raise ValueError("record is not a JSON object")
    missing = [k for k in ("gene_id", "isoform_ids", "A", "counts") if k not in obj]
    if missing:
        raise ValueError(f"missing field(s): {', '.join(missing)}")
    if not isinstance(obj["gene_id"], str):
        raise ValueError("gene_id must be a string")
    A = obj["A"]
    if not (isinstance(A, list) and A and all(isinstance(r, list) for r in A)):
        raise ValueError("A must be an array of arrays")
    if len({len(r) for r in A}) != 1:
        raise ValueError("rows of A have different lengths")
    counts = obj["counts"]
    if not isinstance(counts, list) or any(isinstance(c, bool) or not isinstance(c, int) for c in counts):
        raise ValueError("counts must be an array of integers")
    return GeneModel(obj["gene_id"], tuple(obj["isoform_ids"]), np.array(A, dtype=float),
                     np.array(counts, dtype=np.int64))


@dataclass
class ReadStats:
    malformed: int = 0


def iter_genes(stream: TextIO, stats: ReadStats | None = None) -> Iterator[GeneModel]:
    """Parse JSON-Lines gene records, reporting bad lines on stderr and moving on."""
    for lineno, line in enumerate(stream, 1):
        if not line.strip():
            continue
        try:
            yield record_to_gene(json.loads(line))
        except (ValueError, TypeError) as exc:
            if stats is not None:
                stats.malformed += 1
            print(f"line {lineno}: rejected: {exc}", file=sys.stderr)


def read_genes(path: str, stats: ReadStats | None = None) -> list[GeneModel]:
    with open(path, encoding="utf-8") as fh:
        return list(iter_genes(fh, stats))


def convert_tsv(stream: TextIO) -> Iterator[GeneModel]:
    """Genes from the TSV block format.

    Each line is ``gene_id<TAB>label<TAB>v1<TAB>v2...``.  Lines whose label is
    an isoform id carry one row of ``A``; the line labelled ``#counts`` carries
    the read-type counts and closes the gene's block.
    """
    rows: list[tuple[str, list[float]]] = []
    current = None
    for lineno, line in enumerate(stream, 1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise ValueError(f"line {lineno}: expected gene, label and values")
        gene, label, values = parts[0], parts[1], parts[2:]
        if current is not None and gene != current:
            raise ValueError(f"line {lineno}: gene {current} has no #counts line")
        current = gene
        if label == "#counts":
            counts = [int(v) for v in values]
            yield GeneModel(gene, tuple(r[0] for r in rows),
                            np.array([r[1] for r in rows], dtype=float), np.array(counts))
            rows, current = [], None
        else:
            rows.append((label, [float(v) for v in values]))
    if rows:
        raise ValueError(f"gene {current} has no #counts line")


# --- settings ---------------------------------------------------------------------

def env_default(name: str, default, kind=float):
    raw = os.environ.get(ENV_PREFIX + name.upper())
    if raw is None:
        return default
    try:
        if kind is int:
            return int(raw.strip(), 10)
        if kind is float:
            value = float(raw.strip())
            if not np.isfinite(value):
                raise ValueError
            return value
        return kind(raw.strip())
    except ValueError:
        raise UsageError(f"environment variable {ENV_PREFIX}{name.upper()}={raw!r} is not a valid {kind.__name__}")


def parse_methods(text: str) -> tuple[Method, ...]:
    try:
        methods = tuple(Method(m.strip().upper()) for m in text.split(",") if m.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"unknown method in {text!r}; choose from RQLE, MLE")
    if not methods:
        raise argparse.ArgumentTypeError("no method given")
    return methods


def parse_grid(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid beta grid {text!r}")


def open_output(path: str | None):
    if path is None or path == "-":
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline=""), True


def pmap(fn, items: list, threads: int):
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (8 * threads))))


# --- estimate -----------------------------------------------------------------

def estimate_gene(args) -> list[tuple[Method, np.ndarray, bool]]:
    g, cfg, methods = args
    mle = poisson_mle_em(g)
    out = []
    for m in methods:
        if m == Method.MLE:
            out.append((m, mle.theta, mle.converged))
        else:
            est = rqle_estimate(g, cfg, start=mle.theta)
            out.append((m, est.theta, est.converged))
    return out


def cmd_estimate(args) -> int:
    stats = ReadStats()
    genes = read_genes(args.input, stats)
    kept = [g for g in genes if g.total_reads >= args.min_reads]
    skipped = len(genes) - len(kept)
    cfg = RobustConfig(c=args.c, phi=args.phi)
    results = pmap(estimate_gene, [(g, cfg, args.methods) for g in kept], args.threads)
    out, close = open_output(args.output)
    try:
        w = csv.writer(out, delimiter="\t", lineterminator="\n")
        w.writerow(["gene_id", "isoform_id", "theta_hat", "gene_total", "method", "converged"])
        for g, per_method in zip(kept, results):
            for method, theta, converged in per_method:
                total = fmt(float(np.sum(theta)))
                for iso, value in zip(g.isoform_ids, theta):
                    w.writerow([g.gene_id, iso, fmt(float(value)), total, method.value,
                                "true" if converged else "false"])
    finally:
        if close:
            out.close()
    print(f"estimated {len(kept)} genes; skipped {skipped} with fewer than {args.min_reads} reads; "
          f"{stats.malformed} malformed lines", file=sys.stderr)
    return EXIT_OK if kept else EXIT_EMPTY


# --- dispersion ---------------------------------------------------------------

def cmd_dispersion(args) -> int:
    genes = read_genes(args.input)
    try:
        cohort = estimate_phi_cohort(genes, args.min_read_types, args.min_median_count,
                                     args.alpha, args.beta_grid)
    except DispersionError as exc:
        print(f"error: {exc} (need single-isoform genes with at least {args.min_read_types} "
              f"read types and median count at least {args.min_median_count})", file=sys.stderr)
        return EXIT_EMPTY
    out, close = open_output(args.output)
    try:
        w = csv.writer(out, delimiter="\t", lineterminator="\n")
        w.writerow(["gene_id", "theta_hat", "phi_hat"])
        for gene_id, fit in cohort.fits.items():
            w.writerow([gene_id, fmt(fit.theta_hat), fmt(fit.phi_extrapolated)])
        w.writerow(["__cohort_mean__", "", fmt(cohort.phi)])
    finally:
        if close:
            out.close()
    excluded = ", ".join(f"{k}={v}" for k, v in sorted(cohort.excluded.items())) or "none"
    print(f"cohort dispersion {fmt(cohort.phi)} from {cohort.n_genes} genes; excluded: {excluded}",
          file=sys.stderr)
    return EXIT_OK


# --- robustness -----------------------------------------------------------------

def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    return float(spearmanr(x, y).statistic)


def truncate_gene(g: GeneModel, fraction: float) -> GeneModel | None:
    """Drop the first ``floor(fraction J)`` read types; ``None`` if nothing is left."""
    k = int(np.floor(fraction * g.n_read_types))
    if k >= g.n_read_types:
        return None
    return g.drop_columns(np.arange(k))


def _gene_totals(args) -> dict[Method, float] | None:
    g, fraction, cfg, methods = args
    cut = truncate_gene(g, fraction)
    if cut is None:
        return None
    out = {}
    for label, gene in (("full", g), ("cut", cut)):
        for m, theta, _ in estimate_gene((gene, cfg, methods)):
            out[(m, label)] = float(np.sum(theta))
    return out


def robustness_spearman(genes: Sequence[GeneModel], phi: float, fraction: float = 0.25,
                        c: float = 2.5, methods: Sequence[Method] = (Method.RQLE, Method.MLE),
                        threads: int = 1) -> tuple[dict[Method, float], int]:
    """Spearman correlation of gene totals between full and truncated data, per method."""
    cfg = RobustConfig(c=c, phi=phi)
    rows = pmap(_gene_totals, [(g, fraction, cfg, tuple(methods)) for g in genes], threads)
    rows = [r for r in rows if r is not None]
    if len(rows) < 2:
        raise ValueError("need at least two genes that survive truncation")
    rho = {m: spearman([r[(m, "full")] for r in rows], [r[(m, "cut")] for r in rows])
           for m in methods}
    return rho, len(rows)


def cmd_robustness(args) -> int:
    genes = [g for g in read_genes(args.input) if g.total_reads >= args.min_reads]
    phi = args.phi
    if phi is None:
        try:
            phi = estimate_phi_cohort(genes, alpha=DEFAULT_ALPHA).phi
        except DispersionError as exc:
            print(f"error: {exc}; pass --phi", file=sys.stderr)
            return EXIT_EMPTY
        print(f"using cohort dispersion {fmt(phi)} for full and truncated data", file=sys.stderr)
    try:
        rho, n = robustness_spearman(genes, phi, args.fraction, args.c, args.methods, args.threads)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    out, close = open_output(args.output)
    try:
        w = csv.writer(out, delimiter="\t", lineterminator="\n")
        w.writerow(["method", "n_genes", "phi", "fraction_removed", "spearman"])
        for m, value in rho.items():
            w.writerow([m.value, n, fmt(phi), fmt(args.fraction), fmt(value)])
    finally:
        if close:
            out.close()
    return EXIT_OK


# --- simulate -----------------------------------------------------------------------

DISPERSION_COLUMNS = ("phi_true", "b", "genes_per_group", "groups", "outlier_fraction",
                      "phi_mean", "phi_se")


def all_cell_specs(reps: int, seed: int) -> list[tuple[sim.SimSpec, float | None]]:
    cells = []
    for scheme in sim.Scheme:
        cells += [(s, None) for s in sim.table_specs(scheme, reps, seed)]
    cells += [(s, 0.3) for s in sim.table_specs(sim.Scheme.FIVE, reps, seed)]
    return cells


def dispersion_rows(groups: int, genes: int, seed: int, threads: int) -> list[list[str]]:
    rows = []
    for phi in (0.2, 0.4, 0.6):
        for b in (10, 100, 1000):
            mean, se = sim.run_dispersion_experiment(b, phi, genes, groups, 0.1, seed,
                                                     workers=threads)
            rows.append([fmt(phi), fmt(b), str(genes), str(groups), fmt(0.1), fmt(mean), fmt(se)])
    return rows


def cmd_simulate(args) -> int:
    if args.all_cells:
        cells = all_cell_specs(args.reps, args.seed)
    else:
        missing = [f for f in ("scheme", "b", "phi", "side") if getattr(args, f) is None]
        if missing:
            raise UsageError("simulate needs --" + ", --".join(missing) + " (or --all-cells)")
        cells = [(sim.SimSpec(args.scheme, args.b, args.phi, args.side, args.outlier_fraction,
                              args.reps, args.seed), args.phi_used)]
    rows = []
    for spec, phi_used in cells:
        used = spec.phi if phi_used is None else phi_used
        for res in sim.run_experiment(spec, args.methods, used, args.c, args.threads):
            rows.append((spec, used, res))
    out, close = open_output(args.output)
    try:
        out.write(sim.results_tsv(rows))
    finally:
        if close:
            out.close()
    if args.all_cells:
        drows = dispersion_rows(args.reps, 100, args.seed, args.threads)
        path = args.dispersion_output
        if path is None and args.output not in (None, "-"):
            path = args.output + ".dispersion.tsv"
        dout, close = open_output(path)
        try:
            if not close:
                dout.write("\n")
            w = csv.writer(dout, delimiter="\t", lineterminator="\n")
            w.writerow(DISPERSION_COLUMNS)
            w.writerows(drows)
        finally:
            if close:
                dout.close()
    return EXIT_OK


def cmd_simulate_dispersion(args) -> int:
    mean, se = sim.run_dispersion_experiment(args.b, args.phi, args.genes, args.groups,
                                             args.outlier_fraction, args.seed,
                                             workers=args.threads)
    out, close = open_output(args.output)
    try:
        w = csv.writer(out, delimiter="\t", lineterminator="\n")
        w.writerow(DISPERSION_COLUMNS)
        w.writerow([fmt(args.phi), fmt(args.b), args.genes, args.groups,
                    fmt(args.outlier_fraction), fmt(mean), fmt(se)])
    finally:
        if close:
            out.close()
    return EXIT_OK


def cmd_convert(args) -> int:
    out, close = open_output(args.output)
    try:
        with open(args.input, encoding="utf-8") as fh:
            for g in convert_tsv(fh):
                out.write(gene_to_line(g) + "\n")
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    finally:
        if close:
            out.close()
    return EXIT_OK


# --- parser ---------------------------------------------------------------------------

def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError("must be nonnegative")
    return value


def build_parser() -> argparse.ArgumentParser:
    threads = env_default("threads", os.cpu_count() or 1, int)
    c_default = env_default("c", 2.5)

    p = argparse.ArgumentParser(prog="rqle", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, with_c=True):
        sp.add_argument("--threads", type=_positive_int, default=threads,
                        help="parallel worker processes (default: available cores)")
        sp.add_argument("-o", "--output", default=None, help="output TSV (default: stdout)")
        if with_c:
            sp.add_argument("--c", type=float, default=c_default, help="Huber cutoff")

    e = sub.add_parser("estimate", help="estimate isoform abundances")
    e.add_argument("input")
    e.add_argument("--phi", type=_nonneg_float, default=env_default("phi", 0.0))
    e.add_argument("--min-reads", type=int, default=env_default("min_reads", 100, int))
    e.add_argument("--methods", type=parse_methods, default=(Method.RQLE, Method.MLE))
    common(e)
    e.set_defaults(func=cmd_estimate)

    d = sub.add_parser("dispersion", help="cohort dispersion from single-isoform genes")
    d.add_argument("input")
    d.add_argument("--min-read-types", type=int, default=env_default("min_read_types", 20, int))
    d.add_argument("--min-median-count", type=float, default=env_default("min_median_count", 10.0))
    d.add_argument("--alpha", type=float, default=env_default("alpha", DEFAULT_ALPHA))
    d.add_argument("--beta-grid", type=parse_grid, default=DEFAULT_BETA_GRID)
    common(d, with_c=False)
    d.set_defaults(func=cmd_dispersion)

    r = sub.add_parser("robustness", help="full vs truncated data concordance")
    r.add_argument("input")
    r.add_argument("--fraction", type=float, default=env_default("fraction", 0.25))
    r.add_argument("--phi", type=_nonneg_float, default=env_default("phi", None),
                   help="dispersion for both fits (default: cohort estimate from the input)")
    r.add_argument("--min-reads", type=int, default=env_default("min_reads", 100, int))
    r.add_argument("--methods", type=parse_methods, default=(Method.RQLE, Method.MLE))
    common(r)
    r.set_defaults(func=cmd_robustness)

    s = sub.add_parser("simulate", help="simulation table cells")
    s.add_argument("--scheme", type=int, choices=[1, 2, 3, 4])
    s.add_argument("--b", type=float)
    s.add_argument("--phi", type=_nonneg_float)
    s.add_argument("--side", choices=[x.value for x in sim.Side])
    s.add_argument("--outlier-fraction", type=float, default=0.0)
    s.add_argument("--phi-used", type=_nonneg_float, default=None,
                   help="dispersion used for estimation (default: the true one)")
    s.add_argument("--reps", type=_positive_int, default=env_default("reps", 100, int))
    s.add_argument("--seed", type=int, default=env_default("seed", 1, int))
    s.add_argument("--methods", type=parse_methods, default=(Method.RQLE, Method.MLE))
    s.add_argument("--all-cells", action="store_true",
                   help="every RMSE table cell plus the dispersion table")
    s.add_argument("--dispersion-output", default=None)
    common(s)
    s.set_defaults(func=cmd_simulate)

    sd = sub.add_parser("simulate-dispersion", help="one dispersion table cell")
    sd.add_argument("--b", type=float, required=True)
    sd.add_argument("--phi", type=_nonneg_float, required=True)
    sd.add_argument("--genes", type=_positive_int, default=100)
    sd.add_argument("--groups", type=_positive_int, default=100)
    sd.add_argument("--outlier-fraction", type=float, default=0.1)
    sd.add_argument("--seed", type=int, default=env_default("seed", 1, int))
    common(sd, with_c=False)
    sd.set_defaults(func=cmd_simulate_dispersion)

    cv = sub.add_parser("convert", help="TSV block format to JSON-Lines")
    cv.add_argument("input")
    cv.add_argument("-o", "--output", default=None)
    cv.set_defaults(func=cmd_convert)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    try:
        parser = build_parser()
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
