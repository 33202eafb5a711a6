"""Outlier-resistant dispersion estimation from single-isoform genes.

For a single-isoform gene the ratios ``m_j = n_j / a_j`` all have mean
``theta``.  A trimmed ratio estimator gives ``theta``; a moment estimator on
the read types whose ratio lies inside the ``[beta, 1 - beta]`` quantile band
gives ``phi(beta)``.  Trimming biases ``phi(beta)`` downwards, so it is
computed over a grid of ``beta`` and a natural cubic spline through those
values is evaluated at ``beta = 0``.

Quantiles use linear interpolation between order statistics (numpy's
default, R's type 7); band membership is inclusive at both ends.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .model import GeneModel

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.25
# Trim levels below the one-sided outlier share let outliers into S_beta and
# the extrapolation then amplifies them; starting at 0.15 leaves margin for
# 10% contamination split over both tails.
DEFAULT_BETA_GRID = (0.15, 0.175, 0.20, 0.225, 0.25)


class DispersionError(ValueError):
    pass


@dataclass(frozen=True)
class DispersionFit:
    theta_hat: float
    beta_grid: tuple[float, ...]
    phi_at_beta: tuple[float, ...]
    phi_extrapolated: float
    alpha: float
    linear_fallback: bool = False


@dataclass(frozen=True)
class CohortDispersion:
    phi: float
    fits: "OrderedDict[str, DispersionFit]"
    excluded: dict[str, int] = field(default_factory=dict)

    @property
    def n_genes(self) -> int:
        return len(self.fits)


def _ratios(g: GeneModel) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if g.n_isoforms != 1:
        raise DispersionError(f"{g.gene_id}: expected a single-isoform gene, got I={g.n_isoforms}")
    a = g.A[0]
    if np.any(a <= 0):
        raise DispersionError(f"{g.gene_id}: all sampling rates must be positive")
    n = g.counts.astype(float)
    return n, a, n / a


def quantile_band(m: np.ndarray, level: float) -> np.ndarray:
    """Mask of ratios between the ``level`` and ``1 - level`` quantiles (inclusive)."""
    lo, hi = np.quantile(m, [level, 1.0 - level])
    return (m >= lo) & (m <= hi)


def robust_theta_single(g: GeneModel, alpha: float = DEFAULT_ALPHA) -> float:
    if not 0.0 <= alpha <= 0.25:
        raise DispersionError(f"alpha must lie in [0, 0.25], got {alpha}")
    n, a, m = _ratios(g)
    keep = quantile_band(m, alpha)
    if not np.any(keep):
        raise DispersionError(f"{g.gene_id}: no read types survive trimming; use a smaller alpha")
    return float(n[keep].sum() / a[keep].sum())


def phi_at_beta(g: GeneModel, theta_hat: float, beta: float) -> float:
    """Moment estimate of ``phi`` on the ``beta``-trimmed read types (may be negative)."""
    if not theta_hat > 0:
        raise DispersionError(f"{g.gene_id}: theta_hat must be positive, got {theta_hat}")
    if not 0.0 <= beta <= 0.5:
        raise DispersionError(f"beta must lie in [0, 0.5], got {beta}")
    n, a, m = _ratios(g)
    keep = quantile_band(m, beta)
    if not np.any(keep):
        raise DispersionError(f"{g.gene_id}: empty trimmed set at beta={beta}")
    mu = a[keep] * theta_hat
    return float((np.sum((n[keep] - mu) ** 2) - np.sum(mu)) / np.sum(mu * mu))


def phi_extrapolate(betas: Sequence[float], phis: Sequence[float]) -> tuple[float, bool]:
    """Value at ``beta = 0`` of the natural cubic spline through ``(beta, phi)``.

    A natural spline is linear outside its knots, so the spline is continued
    from the smallest knot with its slope there.  Fewer than four distinct
    knots fall back to a least-squares line (second value ``True``).
    The result is floored at 0.
    """
    x = np.asarray(betas, dtype=float)
    y = np.asarray(phis, dtype=float)
    order = np.argsort(x)
    x, y = x[order], y[order]
    if np.unique(x).size != x.size:
        raise DispersionError("beta values must be distinct")
    if x.size < 4:
        logger.warning("only %d beta values; extrapolating linearly", x.size)
        if x.size == 1:
            return max(0.0, float(y[0])), True
        slope, intercept = np.polyfit(x, y, 1)
        return max(0.0, float(intercept)), True
    spline = CubicSpline(x, y, bc_type="natural")
    x0 = x[0]
    value = spline(0.0) if x0 <= 0.0 else spline(x0) - x0 * spline(x0, 1)
    return max(0.0, float(value)), False


def fit_single_gene(g: GeneModel, alpha: float = DEFAULT_ALPHA,
                    beta_grid: Sequence[float] = DEFAULT_BETA_GRID) -> DispersionFit:
    betas = tuple(float(b) for b in beta_grid)
    if any(b2 <= b1 for b1, b2 in zip(betas, betas[1:])):
        raise DispersionError("beta grid must be strictly increasing")
    if betas and (betas[0] <= 0 or betas[-1] > alpha):
        raise DispersionError(f"beta grid must lie in (0, alpha={alpha}]")
    theta_hat = robust_theta_single(g, alpha)
    phis = tuple(phi_at_beta(g, theta_hat, b) for b in betas)
    value, fallback = phi_extrapolate(betas, phis)
    return DispersionFit(theta_hat, betas, phis, value, alpha, fallback)


def passes_filters(g: GeneModel, min_read_types: int = 20, min_median_count: float = 10) -> str | None:
    """Reason a gene is excluded from dispersion estimation, or ``None``."""
    if g.n_isoforms != 1:
        return "multi_isoform"
    if g.n_read_types < min_read_types:
        return "few_read_types"
    if np.median(g.counts) < min_median_count:
        return "low_median_count"
    if np.any(g.A[0] <= 0):
        return "zero_sampling_rate"
    return None


def estimate_phi_cohort(genes: Iterable[GeneModel], min_read_types: int = 20,
                        min_median_count: float = 10, alpha: float = DEFAULT_ALPHA,
                        beta_grid: Sequence[float] = DEFAULT_BETA_GRID) -> CohortDispersion:
    """Average of per-gene extrapolated dispersions over qualifying single-isoform genes."""
    fits: OrderedDict[str, DispersionFit] = OrderedDict()
    excluded: dict[str, int] = {}
    for g in genes:
        reason = passes_filters(g, min_read_types, min_median_count)
        if reason is None:
            try:
                fits[g.gene_id] = fit_single_gene(g, alpha, beta_grid)
                continue
            except DispersionError as exc:
                logger.info("skipping %s: %s", g.gene_id, exc)
                reason = "fit_failed"
        excluded[reason] = excluded.get(reason, 0) + 1
    if not fits:
        raise DispersionError("no gene qualifies for dispersion estimation")
    phi = float(np.mean([f.phi_extrapolated for f in fits.values()]))
    return CohortDispersion(phi, fits, excluded)


def column_groups(A: np.ndarray) -> list[np.ndarray]:
    """Indices of read types grouped by identical columns of ``A``, in first-seen order."""
    _, first, inverse = np.unique(np.asarray(A).T, axis=0, return_index=True, return_inverse=True)
    inverse = np.ravel(inverse)
    return [np.flatnonzero(inverse == k) for k in np.argsort(first)]


def estimate_phi_grouped_columns(g: GeneModel, alpha: float = DEFAULT_ALPHA,
                                 beta_grid: Sequence[float] = DEFAULT_BETA_GRID,
                                 min_group: int = 10) -> float:
    """Dispersion for a gene with a 0/1 sampling matrix.

    Read types with identical columns share one mean, so each large enough
    group is treated as a single-isoform gene with unit rates.  Group
    estimates are averaged with weights proportional to group size.
    """
    A = g.A
    if not np.all((A == 0) | (A == 1)):
        raise DispersionError(f"{g.gene_id}: sampling matrix is not 0/1")
    estimates, sizes = [], []
    for idx in column_groups(A):
        if idx.size < min_group or g.counts[idx].sum() == 0:
            continue
        sub = GeneModel(f"{g.gene_id}:group", ("pooled",), np.ones((1, idx.size)), g.counts[idx])
        estimates.append(fit_single_gene(sub, alpha, beta_grid).phi_extrapolated)
        sizes.append(idx.size)
    if not estimates:
        raise DispersionError(
            f"{g.gene_id}: no column group with at least {min_group} read types and "
            "nonzero counts; estimate a cohort dispersion from single-isoform genes instead")
    return float(np.average(estimates, weights=sizes))
