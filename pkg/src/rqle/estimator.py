"""Isoform abundance solvers.

``poisson_mle_em`` is the EM algorithm for the identity-link Poisson model
(reads are latent mixtures of isoforms).  ``rqle_estimate`` minimizes the
robust primitive objective under ``theta >= 0`` with L-BFGS-B, started from
the EM estimate, and then polishes the result with projected Newton steps on
the exact estimating equations.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.optimize import minimize

from .model import GeneModel, Method, RobustConfig, ThetaEstimate
from .score import objective, objective_and_gradient, objective_gradient

logger = logging.getLogger(__name__)

START_FLOOR = 1e-6


def uniform_start(g: GeneModel) -> np.ndarray:
    """Equal abundances whose expected total matches the observed total."""
    return np.full(g.n_isoforms, g.counts.sum() / g.A.sum())


def poisson_loglik(g: GeneModel, theta) -> float:
    mu = np.asarray(theta, dtype=float) @ g.A
    n = g.counts
    pos = n > 0
    if np.any(mu[pos] <= 0):
        return -np.inf
    return float(np.sum(n[pos] * np.log(mu[pos])) - np.sum(mu))


def em_step(g: GeneModel, theta: np.ndarray) -> np.ndarray:
    """One EM update ``theta_i <- theta_i sum_j n_j a_ij / mu_j / sum_j a_ij``.

    Isoforms with no read types (possible after dropping columns) get 0.
    """
    mu = theta @ g.A
    ratio = np.divide(g.counts, mu, out=np.zeros_like(mu), where=mu > 0)
    rows = g.A.sum(axis=1)
    return np.divide(theta * (g.A @ ratio), rows, out=np.zeros_like(theta), where=rows > 0)


def poisson_mle_em(g: GeneModel, tol: float = 1e-8, max_iter: int = 10_000) -> ThetaEstimate:
    """Poisson maximum likelihood by EM.

    Iterates until the largest change of any component, relative to the
    largest component, drops below ``tol``.
    """
    theta = uniform_start(g)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new = em_step(g, theta)
        scale = max(float(new.max()), np.finfo(float).tiny)
        change = float(np.max(np.abs(new - theta))) / scale
        theta = new
        if change < tol:
            converged = True
            break
    if not converged:
        logger.debug("EM did not converge for %s after %d iterations", g.gene_id, max_iter)
    return ThetaEstimate(theta=theta, objective=-poisson_loglik(g, theta),
                         grad_norm=float("nan"), converged=converged,
                         iterations=it, method=Method.MLE)


def projected_gradient(theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Gradient with components pointing out of the box at ``theta_i = 0`` removed."""
    return np.where((theta <= 0) & (grad > 0), 0.0, grad)


def _pg_norm(theta, grad) -> float:
    return float(np.max(np.abs(projected_gradient(theta, grad))))


def _newton_polish(g: GeneModel, theta: np.ndarray, cfg: RobustConfig, steps: int = 20):
    """Projected Newton iterations on the estimating equations.

    The Jacobian is a forward difference of the exact gradient.  A step is
    kept only if it lowers the projected-gradient norm; the objective is
    never consulted, so quadrature-level noise cannot stall the iteration.
    """
    grad = objective_gradient(g, theta, cfg)
    best = _pg_norm(theta, grad)
    for _ in range(steps):
        if best <= cfg.opt_tol:
            break
        free = ~((theta <= 0) & (grad > 0))
        if not np.any(free):
            break
        idx = np.flatnonzero(free)
        H = np.empty((idx.size, idx.size))
        for col, i in enumerate(idx):
            h = 1e-7 * max(1.0, abs(theta[i]))
            bumped = theta.copy()
            bumped[i] += h
            H[:, col] = (objective_gradient(g, bumped, cfg)[idx] - grad[idx]) / h
        try:
            step = np.linalg.solve(H, -grad[idx])
        except np.linalg.LinAlgError:
            break
        improved = False
        for frac in (1.0, 0.5, 0.25, 0.125):
            trial = theta.copy()
            trial[idx] = np.maximum(theta[idx] + frac * step, 0.0)
            trial_grad = objective_gradient(g, trial, cfg)
            norm = _pg_norm(trial, trial_grad)
            if norm < best:
                theta, grad, best, improved = trial, trial_grad, norm, True
                break
        if not improved:
            break
    return theta, grad, best


def _lbfgsb(g: GeneModel, start: np.ndarray, cfg: RobustConfig):
    res = minimize(lambda th: objective_and_gradient(g, th, cfg), start, jac=True,
                   method="L-BFGS-B", bounds=[(0.0, None)] * g.n_isoforms,
                   options={"maxcor": 10, "gtol": cfg.opt_tol, "ftol": 1e-15,
                            "maxiter": cfg.max_iter, "maxls": 30})
    theta = np.maximum(res.x, 0.0)
    return theta, int(res.nit)


def _solve_from(g: GeneModel, start: np.ndarray, cfg: RobustConfig):
    theta, nit = _lbfgsb(g, start, cfg)
    theta, grad, norm = _newton_polish(g, theta, cfg)
    return theta, objective(g, theta, cfg), norm, nit


def rqle_estimate(g: GeneModel, cfg: RobustConfig, start: np.ndarray | None = None) -> ThetaEstimate:
    """Robust quasi-likelihood estimate of isoform abundances."""
    if start is None:
        start = poisson_mle_em(g).theta
    start = np.maximum(np.asarray(start, dtype=float), START_FLOOR)
    f_start = objective(g, start, cfg)

    theta, f, norm, nit = _solve_from(g, start, cfg)
    if not (norm <= cfg.opt_tol and f <= f_start):
        logger.debug("restarting %s from the uniform vector (pg=%.3g)", g.gene_id, norm)
        alt = _solve_from(g, np.maximum(uniform_start(g), START_FLOOR), cfg)
        nit += alt[3]
        if alt[1] < f or not np.isfinite(f):
            theta, f, norm = alt[0], alt[1], alt[2]
    if f > f_start:
        theta, f, norm = start, f_start, _pg_norm(start, objective_gradient(g, start, cfg))
    # unidentified isoforms carry no information; report them as absent
    theta = np.where(g.A.sum(axis=1) > 0, theta, 0.0)
    return ThetaEstimate(theta=theta, objective=f, grad_norm=norm,
                         converged=bool(norm <= cfg.opt_tol), iterations=nit,
                         method=Method.RQLE)
