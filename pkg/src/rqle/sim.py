"""Simulation schemes, outlier injection and the replicated RMSE experiments.

Every replicate draws from its own generator seeded by
``(seed, rep_index, stream)``, so results do not depend on the order or the
process in which replicates run.
"""

from __future__ import annotations

import csv
import enum
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .dispersion import DEFAULT_ALPHA, DEFAULT_BETA_GRID, fit_single_gene
from .estimator import poisson_mle_em, rqle_estimate
from .model import GeneModel, Method, RobustConfig, effective_phi

J_BY_SCHEME = {1: 50, 2: 50, 3: 50, 4: 100}
I_BY_SCHEME = {1: 1, 2: 2, 3: 2, 4: 5}
OUTLIER_FACTOR = 20

STREAM_INSTANCE = 0
STREAM_DISPERSION = 1
STREAM_COHORT = 2


class Scheme(enum.IntEnum):
    ONE_ISOFORM = 1
    TWO_BOTH = 2
    TWO_ONE_ZERO = 3
    FIVE = 4


class Side(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"
    NONE = "none"


@dataclass(frozen=True)
class SimSpec:
    scheme: Scheme
    b: float
    phi: float
    outlier_side: Side = Side.NONE
    outlier_fraction: float = 0.0
    reps: int = 100
    seed: int = 1

    def __post_init__(self):
        object.__setattr__(self, "scheme", Scheme(self.scheme))
        object.__setattr__(self, "outlier_side", Side(self.outlier_side))
        if not self.b > 0:
            raise ValueError("count scale b must be positive")
        if not self.phi >= 0:
            raise ValueError("phi must be nonnegative")
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if self.reps < 1:
            raise ValueError("reps must be positive")


@dataclass(frozen=True)
class SimResult:
    method: Method
    rmse_mean: float
    rmse_se: float


def rng_for(seed: int, rep_index: int, stream: int = STREAM_INSTANCE) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(rep_index, stream)))


def sample_nb(rng: np.random.Generator, mu: np.ndarray, phi: float) -> np.ndarray:
    """Negative binomial counts with mean ``mu`` and dispersion ``phi``."""
    mu = np.asarray(mu, dtype=float)
    phi = effective_phi(phi)
    if phi == 0.0:
        return rng.poisson(mu)
    r = 1.0 / phi
    return rng.negative_binomial(r, r / (r + mu))


def _uniform_rates(rng, shape):
    return rng.uniform(0.1, 2.0, size=shape)


def design(scheme: Scheme, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Unscaled sampling matrix ``A'`` and true abundances for one scheme."""
    scheme = Scheme(scheme)
    J = J_BY_SCHEME[scheme]
    if scheme == Scheme.ONE_ISOFORM:
        return _uniform_rates(rng, (1, J)), np.array([1.0])
    if scheme in (Scheme.TWO_BOTH, Scheme.TWO_ONE_ZERO):
        A = _uniform_rates(rng, (2, J))
        A[1, J // 2:] = 0.0
        theta = np.array([0.8, 0.2]) if scheme == Scheme.TWO_BOTH else np.array([1.0, 0.0])
        return A, theta
    raw = rng.uniform(0.0, 1.0, size=5)
    raw[rng.integers(5)] = 0.0
    theta = raw / raw.sum()
    A = np.where(rng.random((5, J)) < 0.5, _uniform_rates(rng, (5, J)), 0.0)
    empty = A.max(axis=0) == 0
    while np.any(empty):
        k = int(empty.sum())
        A[:, empty] = np.where(rng.random((5, k)) < 0.5, _uniform_rates(rng, (5, k)), 0.0)
        empty = A.max(axis=0) == 0
    return A, theta


def inject_outliers(counts: np.ndarray, mu: np.ndarray, idx, sides) -> np.ndarray:
    """Replace ``counts[idx]`` by ``round(20 mu)`` (right) or 0 (left)."""
    counts = counts.copy()
    for j, side in zip(np.atleast_1d(idx), sides):
        counts[j] = int(np.rint(OUTLIER_FACTOR * mu[j])) if Side(side) == Side.RIGHT else 0
    return counts


def random_outliers(rng: np.random.Generator, counts, mu, fraction: float) -> np.ndarray:
    """Contaminate ``round(fraction J)`` random read types, each side with probability 1/2."""
    k = int(round(fraction * len(counts)))
    if k == 0:
        return np.asarray(counts).copy()
    idx = rng.choice(len(counts), size=k, replace=False)
    sides = [Side.RIGHT if u < 0.5 else Side.LEFT for u in rng.random(k)]
    return inject_outliers(np.asarray(counts), mu, idx, sides)


def generate_instance(spec: SimSpec, rep_index: int) -> tuple[GeneModel, np.ndarray]:
    rng = rng_for(spec.seed, rep_index, STREAM_INSTANCE)
    A_unit, theta = design(spec.scheme, rng)
    A = spec.b * A_unit
    mu = theta @ A
    counts = sample_nb(rng, mu, spec.phi)
    if spec.outlier_fraction > 0:
        counts = random_outliers(rng, counts, mu, spec.outlier_fraction)
    elif spec.outlier_side != Side.NONE:
        idx = [0, 1] if spec.scheme == Scheme.FIVE else [0]
        counts = inject_outliers(counts, mu, idx, [spec.outlier_side] * len(idx))
    gene_id = f"s{int(spec.scheme)}_rep{rep_index}"
    return GeneModel(gene_id, tuple(f"{gene_id}.{i + 1}" for i in range(len(theta))),
                     A, counts), theta


def rmse(theta_hat, theta_true) -> float:
    theta_hat = np.asarray(theta_hat, dtype=float)
    theta_true = np.asarray(theta_true, dtype=float)
    if theta_hat.shape != theta_true.shape:
        raise ValueError(f"shape mismatch: {theta_hat.shape} vs {theta_true.shape}")
    return float(np.sqrt(np.mean((theta_hat - theta_true) ** 2)))


def _replicate(args) -> dict[Method, float]:
    spec, rep, methods, cfg = args
    g, theta = generate_instance(spec, rep)
    mle = poisson_mle_em(g)
    out = {}
    if Method.MLE in methods:
        out[Method.MLE] = rmse(mle.theta, theta)
    if Method.RQLE in methods:
        out[Method.RQLE] = rmse(rqle_estimate(g, cfg, start=mle.theta).theta, theta)
    return out


def _map(fn, items: list, workers: int | None):
    if workers is None or workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def mean_se(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


def run_experiment(spec: SimSpec, methods: Iterable[Method] = (Method.RQLE, Method.MLE),
                   phi_for_estimation: float | None = None, c: float = 2.5,
                   workers: int | None = None) -> list[SimResult]:
    """Mean and standard error of the per-replicate RMSE for each method.

    All methods see the same simulated counts within a replicate.
    ``phi_for_estimation`` defaults to the true dispersion.
    """
    methods = tuple(Method(m) for m in methods)
    phi_used = spec.phi if phi_for_estimation is None else phi_for_estimation
    cfg = RobustConfig(c=c, phi=phi_used)
    per_rep = _map(_replicate, [(spec, r, methods, cfg) for r in range(spec.reps)], workers)
    results = []
    for m in methods:
        mean, se = mean_se([d[m] for d in per_rep])
        results.append(SimResult(m, mean, se))
    return results


def _dispersion_group(args) -> float:
    b, phi, genes, fraction, seed, group, alpha, beta_grid = args
    rng = rng_for(seed, group, STREAM_DISPERSION)
    estimates = []
    for _ in range(genes):
        A_unit, theta = design(Scheme.ONE_ISOFORM, rng)
        A = b * A_unit
        mu = theta @ A
        counts = random_outliers(rng, sample_nb(rng, mu, phi), mu, fraction)
        g = GeneModel("g", ("g.1",), A, counts)
        estimates.append(fit_single_gene(g, alpha, beta_grid).phi_extrapolated)
    return float(np.mean(estimates))


def run_dispersion_experiment(b: float, phi: float, genes_per_group: int = 100,
                              groups: int = 100, outlier_fraction: float = 0.1,
                              seed: int = 1, alpha: float = DEFAULT_ALPHA,
                              beta_grid: Sequence[float] = DEFAULT_BETA_GRID,
                              workers: int | None = None) -> tuple[float, float]:
    """Mean and standard error over groups of the group-averaged dispersion estimate."""
    if genes_per_group < 1 or groups < 1:
        raise ValueError("genes_per_group and groups must be positive")
    items = [(b, phi, genes_per_group, outlier_fraction, seed, k, alpha, tuple(beta_grid))
             for k in range(groups)]
    return mean_se(_map(_dispersion_group, items, workers))


TSV_COLUMNS = ("scheme", "b", "phi_true", "phi_used", "side", "method", "rmse_mean", "rmse_se")


def fmt(x: float) -> str:
    return f"{x:.6g}"


def results_tsv(rows: Iterable[tuple[SimSpec, float, SimResult]], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    if header:
        w.writerow(TSV_COLUMNS)
    for spec, phi_used, res in rows:
        w.writerow([int(spec.scheme), fmt(spec.b), fmt(spec.phi), fmt(phi_used),
                    spec.outlier_side.value, res.method.value,
                    fmt(res.rmse_mean), fmt(res.rmse_se)])
    return buf.getvalue()


def table_specs(scheme: Scheme, reps: int = 100, seed: int = 1) -> list[SimSpec]:
    """The 18 cells (b x phi x side) of one RMSE table."""
    return [SimSpec(scheme, b, phi, side, 0.0, reps, seed)
            for b in (10, 100, 1000) for phi in (0.0, 0.4, 1.0)
            for side in (Side.LEFT, Side.RIGHT)]


def with_seed(spec: SimSpec, seed: int) -> SimSpec:
    return replace(spec, seed=seed)


def simulate_cohort(n_genes: int, seed: int, run: int = 0, phi: float = 0.3,
                    outlier_fraction: float = 0.1, level_range: tuple[float, float] = (2.0, 200.0),
                    rate_scale: float = 5.0) -> list[GeneModel]:
    """A cohort of genes with designs drawn from all four schemes.

    Gene expression levels are log-uniform on ``level_range`` so totals span
    two orders of magnitude; each gene's abundance vector is its scheme's
    unit-total vector times the level.  A random ``outlier_fraction`` of
    every gene's counts is contaminated as in the dispersion experiment.
    """
    if n_genes < 1:
        raise ValueError("n_genes must be positive")
    rng = rng_for(seed, run, STREAM_COHORT)
    lo, hi = np.log(level_range[0]), np.log(level_range[1])
    genes = []
    for k in range(n_genes):
        scheme = Scheme(int(rng.integers(1, 5)))
        A_unit, theta = design(scheme, rng)
        A = rate_scale * A_unit
        mu = (np.exp(rng.uniform(lo, hi)) * theta) @ A
        counts = random_outliers(rng, sample_nb(rng, mu, phi), mu, outlier_fraction)
        gid = f"gene{k:04d}"
        genes.append(GeneModel(gid, tuple(f"{gid}.{i + 1}" for i in range(len(theta))), A, counts))
    return genes
