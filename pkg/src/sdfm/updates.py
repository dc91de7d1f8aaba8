"""Closed-form coordinate updates for q(Phi, Sigma_u), q(Lambda, Sigma_eps) and q(Z).

Each update is the exact conditional optimum of the evidence lower bound
given the smoothed factor moments; they take the form of conjugate Bayesian
linear regressions with availability- and inclusion-weighted sufficient-like
statistics.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import expit

from .core import (
    NumericalError,
    Panel,
    PriorSpec,
    SmoothedMoments,
    VariationalState,
    inv_from_chol,
    loading_second_moment,
    selector_second_moment,
    symmetrize,
)

log = logging.getLogger(__name__)

LOGIT_CLAMP = 700.0
RESID_TOL = -1e-10
SCALE_FLOOR = 1e-12


def _residual_scale(nu, tau2, data_ss, fitted_ss, dof, what: str) -> np.ndarray:
    """(nu tau^2 + residual sum) / dof with the completed square checked >= 0."""
    resid = data_ss - fitted_ss
    bad = resid < RESID_TOL * np.maximum(np.abs(data_ss), 1.0)
    if np.any(bad):
        log.warning("negative completed-square residual in %s at indices %s",
                    what, np.nonzero(bad)[0])
    scale = (nu * tau2 + np.maximum(resid, 0.0)) / dof
    return np.maximum(scale, SCALE_FLOOR)


def update_transition(moments: SmoothedMoments, prior: PriorSpec
                      ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Update q(phi_j, sigma2_u_j) for all j from the smoothed factor sums.

    Returns (M_phi (r,s), Sigma_phi (r,s,s), psi2_u (r,)).
    """
    r = prior.V_phi.shape[0]
    T = moments.T
    N = prior.V_phi_inv + moments.S_prev[None, :, :]
    h = moments.S_cross[:r, :]
    try:
        L = np.linalg.cholesky(symmetrize(N))
    except np.linalg.LinAlgError:
        raise NumericalError("non-PD transition normal equations: corrupted moments") from None
    mu = np.linalg.solve(N, h[:, :, None])[:, :, 0]
    Sigma = inv_from_chol(L)
    f2 = np.diag(moments.S_curr)[:r]
    psi2 = _residual_scale(prior.nu_u, prior.tau2_u, f2, np.einsum("jk,jk->j", h, mu),
                           prior.nu_u + T, "psi2_u")
    return mu, Sigma, psi2


def update_loadings(moments: SmoothedMoments, panel: Panel, prior: PriorSpec,
                    B: np.ndarray, P: np.ndarray
                    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Update q(lambda_i, sigma2_eps_i) for all i given current selectors.

    Uses the previous-sweep B and P (the selector update runs after this
    one). Returns (M_lambda, Sigma_lambda, psi2_eps, R).
    """
    N = P * moments.Q + prior.V_lambda_inv
    h = B * moments.g
    try:
        L = np.linalg.cholesky(symmetrize(N))
    except np.linalg.LinAlgError:
        raise NumericalError("non-PD loading normal equations: corrupted moments") from None
    mu = np.linalg.solve(N, h[:, :, None])[:, :, 0]
    Sigma = inv_from_chol(L)
    psi2 = _residual_scale(prior.nu_eps, prior.tau2_eps, panel.sum_y2,
                           np.einsum("ik,ik->i", h, mu),
                           prior.nu_eps + panel.T_i, "psi2_eps")
    if np.any(psi2 <= 0):
        raise NumericalError("psi2_eps <= 0: inconsistent moments")
    R = loading_second_moment(Sigma, mu, psi2)
    return mu, Sigma, psi2, R


def dogmatic_logit(beta: np.ndarray) -> np.ndarray:
    """logit with output clamped to +-700 so beta in {0, 1} stays finite."""
    with np.errstate(divide="ignore"):
        out = np.log(beta) - np.log1p(-np.asarray(beta, dtype=float))
    return np.clip(out, -LOGIT_CLAMP, LOGIT_CLAMP)


def update_selectors(state: VariationalState, moments: SmoothedMoments, prior: PriorSpec
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Update q(z_{i,k}) for all i, k and rebuild the second moments P_i.

    Within each variable the sweep runs in ascending k, using this sweep's
    values for m < k and the previous sweep's for m > k; variables are
    independent and processed together.
    """
    s = state.B.shape[1]
    RQ = state.R * moments.Q
    lin = state.M_lambda * moments.g / state.psi2_eps[:, None]
    logit_beta = dogmatic_logit(prior.beta)
    B = np.array(state.B)
    for k in range(s):
        dot = np.einsum("im,im->i", B, RQ[:, k, :]) - B[:, k] * RQ[:, k, k]
        gamma = lin[:, k] - 0.5 * RQ[:, k, k] - dot
        B[:, k] = expit(gamma + logit_beta[:, k])
    B = np.where(prior.beta <= 0.0, 0.0, np.where(prior.beta >= 1.0, 1.0, B))
    return B, selector_second_moment(B)


def bayesian_regression_init(F_path: np.ndarray, panel: Panel, prior: PriorSpec
                             ) -> VariationalState:
    """Conjugate Bayesian regressions of data and factors on an observed path.

    Point-mass moments of ``F_path`` ((T+1) x s) are pushed through the same
    update operations as the latent-factor case, with full inclusion.
    """
    moments = SmoothedMoments.from_factor_path(F_path, panel)
    n, s = panel.n, F_path.shape[1]
    B = np.ones((n, s))
    P = np.ones((n, s, s))
    M_phi, Sigma_phi, psi2_u = update_transition(moments, prior)
    M_lambda, Sigma_lambda, psi2_eps, R = update_loadings(moments, panel, prior, B, P)
    return VariationalState(
        M_lambda=M_lambda,
        Sigma_lambda=Sigma_lambda,
        psi2_eps=psi2_eps,
        M_phi=M_phi,
        Sigma_phi=Sigma_phi,
        psi2_u=psi2_u,
        B=B,
        P=selector_second_moment(B),
        R=R,
    )
