"""Domain types and negative binomial primitives.

The negative binomial is parameterized by its mean ``mu`` and dispersion
``phi`` so that ``var = mu + phi * mu**2``.  Internally the size is
``r = 1 / phi`` and the per-trial success probability is ``r / (r + mu)``.
Dispersions at or below ``POISSON_PHI`` are treated as the Poisson limit.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import betainc, gammaincc, gammaln

POISSON_PHI = 1e-8
DEFAULT_MU_FLOOR = 1e-8


class Method(str, enum.Enum):
    RQLE = "RQLE"
    MLE = "MLE"


def effective_phi(phi: float) -> float:
    """Dispersion actually used by the formulas (0 in the Poisson limit)."""
    return 0.0 if phi <= POISSON_PHI else float(phi)


@dataclass(frozen=True, eq=False)
class GeneModel:
    """One gene: its I x J sampling-rate matrix and J read-type counts."""

    gene_id: str
    isoform_ids: tuple[str, ...]
    A: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.ndim == 1:
            A = A[None, :]
        if A.ndim != 2 or A.shape[0] < 1 or A.shape[1] < 1:
            raise ValueError(f"{self.gene_id}: A must be a non-empty I x J matrix")
        if not np.all(np.isfinite(A)) or np.any(A < 0):
            raise ValueError(f"{self.gene_id}: A has negative or non-finite entries")
        if np.any(A.max(axis=0) <= 0):
            bad = int(np.flatnonzero(A.max(axis=0) <= 0)[0])
            raise ValueError(f"{self.gene_id}: read type {bad} has no positive sampling rate")

        raw = np.asarray(self.counts)
        if raw.ndim != 1 or raw.shape[0] != A.shape[1]:
            raise ValueError(
                f"{self.gene_id}: expected {A.shape[1]} counts, got shape {raw.shape}")
        counts = raw.astype(np.int64)
        if np.any(counts != raw) or np.any(counts < 0):
            raise ValueError(f"{self.gene_id}: counts must be nonnegative integers")

        isoforms = tuple(str(i) for i in self.isoform_ids)
        if len(isoforms) != A.shape[0]:
            raise ValueError(
                f"{self.gene_id}: {len(isoforms)} isoform ids for {A.shape[0]} rows of A")

        A.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "isoform_ids", isoforms)

    @property
    def n_isoforms(self) -> int:
        return self.A.shape[0]

    @property
    def n_read_types(self) -> int:
        return self.A.shape[1]

    @property
    def total_reads(self) -> int:
        return int(self.counts.sum())

    def drop_columns(self, columns) -> "GeneModel":
        keep = np.setdiff1d(np.arange(self.n_read_types), np.asarray(columns, dtype=int))
        return GeneModel(self.gene_id, self.isoform_ids, self.A[:, keep], self.counts[keep])

    def __eq__(self, other):
        if not isinstance(other, GeneModel):
            return NotImplemented
        return (self.gene_id == other.gene_id
                and self.isoform_ids == other.isoform_ids
                and np.array_equal(self.A, other.A)
                and np.array_equal(self.counts, other.counts))


@dataclass(frozen=True)
class RobustConfig:
    """Tuning for the robust quasi-likelihood fit.

    ``quad_tol`` is the absolute tolerance per unit length of integration
    range used when tabulating the integral of the expected score.
    ``opt_tol`` bounds the infinity norm of the projected gradient.
    """

    c: float = 2.5
    phi: float = 0.0
    weights: np.ndarray | None = None
    mu_floor: float = DEFAULT_MU_FLOOR
    quad_tol: float = 1e-8
    opt_tol: float = 1e-6
    max_iter: int = 500

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError("Huber cutoff c must be positive")
        if not self.phi >= 0:
            raise ValueError("dispersion phi must be nonnegative")
        if not self.mu_floor > 0:
            raise ValueError("mu_floor must be positive")
        if not (self.quad_tol > 0 and self.opt_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.ndim != 1 or np.any(~(w > 0)):
                raise ValueError("weights must be a vector of positive reals")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)

    def weights_for(self, n_read_types: int) -> np.ndarray:
        if self.weights is None:
            return np.ones(n_read_types)
        if self.weights.shape[0] != n_read_types:
            raise ValueError(
                f"{self.weights.shape[0]} weights for {n_read_types} read types")
        return self.weights


@dataclass(frozen=True)
class ThetaEstimate:
    theta: np.ndarray
    objective: float
    grad_norm: float
    converged: bool
    iterations: int
    method: Method

    @property
    def gene_total(self) -> float:
        return float(np.sum(self.theta))


@dataclass(frozen=True)
class NBParams:
    mu: float
    phi: float = 0.0

    def __post_init__(self):
        if not self.mu > 0:
            raise ValueError(f"NB mean must be positive, got {self.mu}")
        if not self.phi >= 0:
            raise ValueError(f"NB dispersion must be nonnegative, got {self.phi}")

    @property
    def variance(self) -> float:
        return self.mu + self.phi * self.mu ** 2


def nb_logpmf(s, mu, phi):
    """Vectorized log pmf; ``s`` must be nonnegative integers."""
    s = np.asarray(s, dtype=float)
    mu = np.asarray(mu, dtype=float)
    phi = effective_phi(phi)
    if phi == 0.0:
        return s * np.log(mu) - mu - gammaln(s + 1)
    r = 1.0 / phi
    return (gammaln(s + r) - gammaln(r) - gammaln(s + 1)
            + r * (np.log(r) - np.log(mu + r)) + s * (np.log(mu) - np.log(mu + r)))


def nb_pmf(s: int, p: NBParams) -> float:
    if s < 0 or int(s) != s:
        raise ValueError(f"support point must be a nonnegative integer, got {s}")
    return float(np.exp(nb_logpmf(s, p.mu, p.phi)))


def nb_cdf_array(k, mu, phi):
    """P(Y <= k) elementwise, zero for k < 0.

    Uses the regularized incomplete beta (gamma in the Poisson limit).
    """
    k = np.floor(np.asarray(k, dtype=float))
    mu = np.asarray(mu, dtype=float)
    k, mu = np.broadcast_arrays(k, mu)
    out = np.zeros(k.shape)
    ok = k >= 0
    if not np.any(ok):
        return out
    phi = effective_phi(phi)
    if phi == 0.0:
        out[ok] = gammaincc(k[ok] + 1.0, mu[ok])
    else:
        r = 1.0 / phi
        out[ok] = betainc(r, k[ok] + 1.0, r / (r + mu[ok]))
    return out


def nb_cdf(s: int, p: NBParams) -> float:
    return float(nb_cdf_array(s, p.mu, p.phi))


def mean_vector(A: np.ndarray, theta, mu_floor: float = DEFAULT_MU_FLOOR) -> np.ndarray:
    """Expected counts ``mu_j = sum_i theta_i a_ij`` clamped below at ``mu_floor``."""
    A = np.asarray(A, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if theta.ndim != 1 or theta.shape[0] != A.shape[0]:
        raise ValueError(f"theta has shape {theta.shape}, A has {A.shape[0]} rows")
    if np.any(theta < 0):
        raise ValueError("theta must be componentwise nonnegative")
    return np.maximum(theta @ A, mu_floor)


def make_gene(A, counts, gene_id: str = "gene", isoform_ids: Sequence[str] | None = None) -> GeneModel:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if isoform_ids is None:
        isoform_ids = [f"{gene_id}.{i + 1}" for i in range(A.shape[0])]
    return GeneModel(gene_id, tuple(isoform_ids), A, np.asarray(counts))
