"""Robust quasi-likelihood score, its expectation and the primitive objective.

The score of one read type is the Huber-clipped Pearson residual scaled by
``1/sqrt(V)`` with ``V = mu + phi mu^2``.  Its expectation under the negative
binomial has a closed form in terms of two NB distribution functions:
``Y ~ NB(mu, phi)`` and ``Y~ ~ NB((1 + phi) mu, phi / (1 + phi))``.

The objective minimized by the solver is the negated primitive

    -sum_j w_j * integral_{n_j}^{mu_j} [nu(n_j, t) - E nu(t)] dt,

whose gradient is minus the estimating-equation vector.  The integral of
``nu(n, t)`` has a closed form between the Huber breakpoints; the integral of
``E nu(t)`` is tabulated once per ``(phi, c)`` (see ``ExpectedScoreIntegral``).
"""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre

from .model import GeneModel, RobustConfig, effective_phi, mean_vector, nb_cdf_array


def huber_psi(r, c: float):
    """First derivative of the Huber loss: ``r`` clipped to ``[-c, c]``."""
    return np.clip(r, -c, c) if np.ndim(r) else float(min(max(r, -c), c))


def variance(mu, phi: float):
    return mu + effective_phi(phi) * mu * mu


def nu_array(n, mu, phi: float, c: float):
    n = np.asarray(n, dtype=float)
    mu = np.asarray(mu, dtype=float)
    sd = np.sqrt(variance(mu, phi))
    return np.clip((n - mu) / sd, -c, c) / sd


def nu(n: int, mu: float, cfg: RobustConfig) -> float:
    return float(nu_array(n, max(mu, cfg.mu_floor), cfg.phi, cfg.c))


@dataclass(frozen=True)
class ScoreTerms:
    k1: int
    k2: int
    enu: float
    v: float


def expected_nu_array(mu, phi: float, c: float):
    """Closed-form ``E[nu(Y, mu)]`` for ``Y ~ NB(mu, phi)``, vectorized in ``mu``."""
    mu = np.asarray(mu, dtype=float)
    phi = effective_phi(phi)
    v = mu + phi * mu * mu
    sd = np.sqrt(v)
    k1 = np.floor(mu - c * sd)
    k2 = np.floor(mu + c * sd)
    F1 = nb_cdf_array(k1, mu, phi)
    F2 = nb_cdf_array(k2, mu, phi)
    # Y~ shares the success probability of Y, with size 1/phi + 1
    mu_t = (1.0 + phi) * mu
    phi_t = phi / (1.0 + phi)
    G1 = nb_cdf_array(k1 - 1, mu_t, phi_t)
    G2 = nb_cdf_array(k2 - 1, mu_t, phi_t)
    return (c / sd) * ((1.0 - F2) - F1) + (mu / v) * ((G2 - G1) - (F2 - F1))


def expected_nu(mu: float, cfg: RobustConfig) -> float:
    return float(expected_nu_array(max(mu, cfg.mu_floor), cfg.phi, cfg.c))


def score_terms(mu: float, cfg: RobustConfig) -> ScoreTerms:
    mu = max(mu, cfg.mu_floor)
    v = float(variance(mu, cfg.phi))
    sd = math.sqrt(v)
    return ScoreTerms(k1=math.floor(mu - cfg.c * sd), k2=math.floor(mu + cfg.c * sd),
                      enu=expected_nu(mu, cfg), v=v)


def _check_theta(g: GeneModel, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (g.n_isoforms,):
        raise ValueError(f"theta has shape {theta.shape}, expected ({g.n_isoforms},)")
    return theta


def score_vector(g: GeneModel, theta, cfg: RobustConfig) -> np.ndarray:
    """Left-hand side of the robust estimating equations, one entry per isoform."""
    theta = _check_theta(g, theta)
    mu = mean_vector(g.A, theta, cfg.mu_floor)
    w = cfg.weights_for(g.n_read_types)
    resid = nu_array(g.counts, mu, cfg.phi, cfg.c) - expected_nu_array(mu, cfg.phi, cfg.c)
    return g.A @ (w * resid)


# --- closed-form integral of nu(n, t) over t --------------------------------

def huber_breakpoints(n, phi: float, c: float):
    """Mean values ``t`` where ``|n - t| = c sqrt(V(t))``.

    ``nu(n, t)`` is unclipped for ``t`` in ``[lo, hi]``; ``hi`` is infinite
    when ``c^2 phi >= 1`` (the upper residual never reaches the cutoff).
    """
    n = np.asarray(n, dtype=float)
    phi = effective_phi(phi)
    a = 1.0 - c * c * phi
    disc = c * c * (4.0 * n + c * c + 4.0 * phi * n * n)
    q = 0.5 * (2.0 * n + c * c + np.sqrt(disc))
    lo = n * n / q
    hi = q / a if a > 0 else np.full_like(q, np.inf)
    return lo, hi


def _huber_part(n, a, b, phi):
    """``integral_a^b (n - t) / V(t) dt``."""
    with np.errstate(divide="ignore", invalid="ignore"):
        log_part = np.where(n > 0, n * np.log(b / a), 0.0)
    if phi == 0.0:
        return log_part - (b - a)
    return log_part - (n + 1.0 / phi) * np.log1p(phi * (b - a) / (1.0 + phi * a))


def _clip_part(a, b, phi):
    """``integral_a^b V(t)^(-1/2) dt``."""
    if phi == 0.0:
        return 2.0 * (np.sqrt(b) - np.sqrt(a))
    sp = math.sqrt(phi)
    return (2.0 / sp) * (np.arcsinh(np.sqrt(phi * b)) - np.arcsinh(np.sqrt(phi * a)))


def nu_integral(n, x, phi: float, c: float):
    """``integral_n^x nu(n, t) dt`` in closed form (elementwise)."""
    n = np.asarray(n, dtype=float)
    x = np.asarray(x, dtype=float)
    n, x = np.broadcast_arrays(n, x)
    phi = effective_phi(phi)
    lo, hi = huber_breakpoints(n, phi, c)
    inner = np.clip(x, lo, hi)
    out = _huber_part(n, n, inner, phi)
    below = x < lo
    above = x > hi
    if np.any(below):
        out = out + np.where(below, c * _clip_part(lo, np.where(below, x, lo), phi), 0.0)
    if np.any(above):
        hi_safe = np.where(above, hi, x)
        out = out - np.where(above, c * _clip_part(hi_safe, x, phi), 0.0)
    return out


# --- tabulated integral of E nu(t) -------------------------------------------

_XGK = np.array([
    0.991455371120812639206854697526329, 0.949107912342758524526189684047851,
    0.864864423359769072789712788640926, 0.741531185599394439863864773280788,
    0.586087235467691130294144845693013, 0.405845151377397166906606412076961,
    0.207784955007898467600689403773245, 0.0])
_WGK = np.array([
    0.022935322010529224963732008058970, 0.063092092629978553290700663189204,
    0.104790010322250183839876322541518, 0.140653259715525918745189590510238,
    0.169004726639267902826583426598550, 0.190350578064785409913256402421014,
    0.204432940075298892414161999234649, 0.209482141084727828012999174891714])
_WG = np.array([
    0.129484966168869693270611432679082, 0.279705391489276667901467771423780,
    0.381830050505118944950369775488975, 0.417959183673469387755102040816327])

# 15 Kronrod nodes on [-1, 1]; the 7 Gauss nodes are the odd-indexed ones
K15_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
K15_WEIGHTS = np.concatenate([_WGK[:-1], _WGK[::-1]])
G7_WEIGHTS = np.zeros(15)
G7_WEIGHTS[[1, 3, 5, 7, 9, 11, 13]] = np.concatenate([_WG[:-1], _WG[::-1]])

# Maps the 15 node values of a panel to the Legendre coefficients of the
# antiderivative (from -1) of their interpolating polynomial.  K15 is the
# interpolatory rule on its nodes, so at z = 1 this reproduces the K15 sum.
_ANTIDERIV = legendre.legint(np.linalg.inv(legendre.legvander(K15_NODES, 14)), lbnd=-1.0, axis=0)

_CHUNK = 1024
_FULL_CHUNKS = 16
_MAX_DEPTH = 40


def _k15(f, a, b, from_origin):
    """Kronrod-15 and Gauss-7 estimates of ``integral_a^b f`` for panel arrays.

    Panels starting at the origin use ``t = a + (b - a) s^2`` to absorb the
    ``sqrt(t)`` behaviour of the integrand there.
    """
    a = a[:, None]
    b = b[:, None]
    u = 0.5 * (K15_NODES + 1.0)
    lin = a + (b - a) * u
    sq = a + (b - a) * u * u
    use_sq = from_origin[:, None]
    t = np.where(use_sq, sq, lin)
    jac = np.where(use_sq, 2.0 * u, 1.0) * 0.5 * (b - a)
    vals = f(t) * jac
    k = vals @ K15_WEIGHTS
    g = vals @ G7_WEIGHTS
    mean = k / 2.0
    resasc = np.abs(vals - mean[:, None]) @ K15_WEIGHTS
    err = np.abs(k - g)
    with np.errstate(divide="ignore", invalid="ignore"):
        scaled = np.where(resasc > 0, resasc * np.minimum(1.0, (200.0 * err / resasc) ** 1.5), err)
    return k, scaled, vals


class ExpectedScoreIntegral:
    """Antiderivative ``G(x) = integral_0^x E nu(t) dt`` for fixed ``(phi, c)``.

    The positive axis is cut into panels whose ends are the points where
    ``t + c sqrt(V)`` or ``t - c sqrt(V)`` crosses an integer, i.e. where
    the clipping thresholds ``k1``/``k2`` of the expectation change and the
    integrand has a kink.  Far out, only every ``2^p``-th such point is kept.
    Each panel is bisected until its Gauss-Kronrod error estimate is at most
    ``tol`` times its length.  Panel integrals and their prefix sums are
    built in fixed chunks, so ``G`` does not depend on how far the table
    has been extended.  Within a panel ``G`` is the prefix sum plus the
    integral of the polynomial interpolating the panel's 15 Kronrod samples,
    which equals the panel's K15 value at its right end, so ``G`` is
    continuous.
    """

    def __init__(self, phi: float, c: float, tol: float = 1e-8):
        self.phi = effective_phi(phi)
        self.c = float(c)
        self.tol = float(tol)
        # panel left ends, G at them, origin flags, widths, antiderivative coefficients
        self._panels = (np.zeros(0), np.zeros(0), np.zeros(0, dtype=bool), np.zeros(0),
                        np.zeros((0, _ANTIDERIV.shape[0])))
        self._end = 0.0
        self._total = 0.0
        self._chunks = 0
        self._lock = threading.Lock()

    def integrand(self, t):
        return expected_nu_array(t, self.phi, self.c)

    def _upper_kink(self, k):
        # t with t + c sqrt(V(t)) = k
        return huber_breakpoints(k, self.phi, self.c)[0]

    def _lower_kink(self, k):
        # t with t - c sqrt(V(t)) = k (exists only when c^2 phi < 1)
        return huber_breakpoints(k, self.phi, self.c)[1]

    def _chunk_edges(self, m: int) -> np.ndarray:
        stride = 1 if m < _FULL_CHUNKS else min(_CHUNK, 2 ** int(math.log2(m / (_FULL_CHUNKS / 2))))
        ks = np.arange(m * _CHUNK, (m + 1) * _CHUNK + 1, stride, dtype=float)
        upper = self._upper_kink(ks)
        start, stop = (0.0 if m == 0 else upper[0]), upper[-1]
        edges = [upper]
        if self.c * self.c * self.phi < 1.0:
            # t - c sqrt(V) is increasing wherever it is nonnegative
            k_first = max(0.0, np.floor(start - self.c * math.sqrt(start + self.phi * start * start)))
            k_last = max(0.0, np.ceil(stop - self.c * math.sqrt(stop + self.phi * stop * stop)))
            klo = np.arange(k_first - k_first % stride, k_last + 1.0, stride)
            lower = self._lower_kink(klo)
            edges.append(lower[(lower > start) & (lower < stop)])
        edges = np.unique(np.concatenate(edges + [[start]]))
        return edges[(edges >= start) & (edges <= stop)]

    def _build_chunk(self, m: int):
        edges = self._chunk_edges(m)
        a, b = edges[:-1], edges[1:]
        keep = b > a
        a, b = a[keep], b[keep]
        done_a, done_b, done_i, done_v = [], [], [], []
        depth = 0
        while a.size:
            origin = a == 0.0
            est, err, vals = _k15(self.integrand, a, b, origin)
            ok = (err <= self.tol * (b - a)) | (depth >= _MAX_DEPTH) | ((b - a) <= 1e-12 * np.maximum(1.0, b))
            done_a.append(a[ok])
            done_b.append(b[ok])
            done_i.append(est[ok])
            done_v.append(vals[ok])
            mid = 0.5 * (a[~ok] + b[~ok])
            a, b = np.concatenate([a[~ok], mid]), np.concatenate([mid, b[~ok]])
            depth += 1
        lefts = np.concatenate(done_a)
        order = np.argsort(lefts, kind="stable")
        lefts = lefts[order]
        ints = np.concatenate(done_i)[order]
        rights = np.concatenate(done_b)[order]
        coefs = np.concatenate(done_v)[order] @ _ANTIDERIV.T
        prefix = self._total + np.concatenate([[0.0], np.cumsum(ints)[:-1]])
        lefts0, prefix0, origin0, widths0, coefs0 = self._panels
        # one assignment so concurrent readers see a consistent table
        self._panels = (np.concatenate([lefts0, lefts]), np.concatenate([prefix0, prefix]),
                        np.concatenate([origin0, lefts == 0.0]),
                        np.concatenate([widths0, rights - lefts]), np.concatenate([coefs0, coefs]))
        self._total = self._total + float(np.sum(ints))
        self._end = float(rights[-1])
        self._chunks += 1

    def _ensure(self, xmax: float):
        if xmax < self._end:
            return
        with self._lock:
            while xmax >= self._end:
                self._build_chunk(self._chunks)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        flat = x.ravel()
        if flat.size == 0:
            return np.zeros(x.shape)
        if np.any(flat < 0):
            raise ValueError("integration limits must be nonnegative")
        self._ensure(float(flat.max()))
        lefts, prefix, origin, widths, coefs = self._panels
        idx = np.searchsorted(lefts, flat, side="right") - 1
        u = np.minimum((flat - lefts[idx]) / widths[idx], 1.0)
        u = np.where(origin[idx], np.sqrt(u), u)
        basis = legendre.legvander(2.0 * u - 1.0, _ANTIDERIV.shape[0] - 1)
        out = prefix[idx] + np.einsum("ij,ij->i", basis, coefs[idx])
        return out.reshape(x.shape)


_TABLES: "OrderedDict[tuple[float, float, float], ExpectedScoreIntegral]" = OrderedDict()
_TABLES_LOCK = threading.Lock()
_MAX_TABLES = 32


def expected_score_integral(phi: float, c: float, tol: float = 1e-8) -> ExpectedScoreIntegral:
    key = (effective_phi(phi), float(c), float(tol))
    with _TABLES_LOCK:
        table = _TABLES.get(key)
        if table is None:
            table = _TABLES[key] = ExpectedScoreIntegral(*key)
            while len(_TABLES) > _MAX_TABLES:
                _TABLES.popitem(last=False)
        else:
            _TABLES.move_to_end(key)
    return table


# --- objective -----------------------------------------------------------------

def _objective_terms(g: GeneModel, theta, cfg: RobustConfig):
    theta = _check_theta(g, theta)
    mu = mean_vector(g.A, theta, cfg.mu_floor)
    w = cfg.weights_for(g.n_read_types)
    n = g.counts.astype(float)
    table = expected_score_integral(cfg.phi, cfg.c, cfg.quad_tol)
    both = table(np.concatenate([mu, n]))
    enu_integral = both[: mu.size] - both[mu.size:]
    q = np.sum(w * (nu_integral(n, mu, cfg.phi, cfg.c) - enu_integral))
    return -float(q), mu, w


def objective(g: GeneModel, theta, cfg: RobustConfig) -> float:
    """Negated primitive of the estimating equations (minimized at their root)."""
    return _objective_terms(g, theta, cfg)[0]


def objective_gradient(g: GeneModel, theta, cfg: RobustConfig) -> np.ndarray:
    return -score_vector(g, theta, cfg)


def objective_and_gradient(g: GeneModel, theta, cfg: RobustConfig):
    value, mu, w = _objective_terms(g, theta, cfg)
    resid = nu_array(g.counts, mu, cfg.phi, cfg.c) - expected_nu_array(mu, cfg.phi, cfg.c)
    return value, -(g.A @ (w * resid))
