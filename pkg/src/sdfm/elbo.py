"""Evidence lower bound, grouped into the six additive term families.

The F-group is assembled from Kalman-filter byproducts of the collapsed
system (predictive residuals and variances, collapse residuals, pseudo-
observation quadratic forms and log-determinant ratios); the remaining
groups are the negated KL divergences of the parameter and selector blocks
merged with their data-dependent scale terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, xlogy

from .core import (
    NumericalError,
    Panel,
    PriorSpec,
    SmoothedMoments,
    VariationalState,
    spd_logdet,
)
from .kalman import FilterByproducts


@dataclass(frozen=True)
class ElboBreakdown:
    f_terms: float
    lambda_terms: float
    phi_terms: float
    sigma_eps_terms: float
    sigma_u_terms: float
    z_terms: float

    @property
    def total(self) -> float:
        return (self.f_terms + self.lambda_terms + self.phi_terms
                + self.sigma_eps_terms + self.sigma_u_terms + self.z_terms)

    def as_tuple(self) -> tuple[float, ...]:
        return (self.total, self.f_terms, self.lambda_terms, self.phi_terms,
                self.sigma_eps_terms, self.sigma_u_terms, self.z_terms)


def kl_gaussian_conditional(mu: np.ndarray, Sigma: np.ndarray, V: np.ndarray,
                            psi2: np.ndarray, V_inv: np.ndarray | None = None
                            ) -> np.ndarray:
    """Expected KL between scaled Gaussians N(mu, sig2*Sigma) and N(0, sig2*V),
    the expectation taken over the residual-scale block with E[1/sig2] = 1/psi2.

    The scale cancels everywhere except the mean term: -s/2 +
    tr(V^-1 Sigma)/2 + mu'V^-1 mu / (2 psi2) + log(det V / det Sigma)/2.
    Batched over a leading axis.
    """
    if V_inv is None:
        V_inv = np.linalg.inv(V)
    s = mu.shape[-1]
    tr = np.einsum("...km,...mk->...", V_inv, Sigma)
    quad = np.einsum("...k,...km,...m->...", mu, V_inv, mu) / psi2
    return 0.5 * (tr + quad - s + spd_logdet(V) - spd_logdet(Sigma))


def kl_scaled_inv_chi2(nu: np.ndarray, tau2: np.ndarray, T_add: np.ndarray,
                       psi2: np.ndarray) -> np.ndarray:
    """KL between Scaled-Inv-chi2(nu + T_add, psi2) and Scaled-Inv-chi2(nu, tau2)."""
    nu_q = nu + T_add
    return (T_add / 2.0 * digamma(nu_q / 2.0)
            - gammaln(nu_q / 2.0) + gammaln(nu / 2.0)
            + nu / 2.0 * (np.log(nu_q * psi2) - np.log(nu * tau2))
            + nu * tau2 / (2.0 * psi2) - nu_q / 2.0)


def kl_bernoulli(b: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """Elementwise Bernoulli KL with the 0*log0 = 0 convention."""
    b = np.asarray(b, dtype=float)
    beta = np.asarray(beta, dtype=float)
    return (xlogy(b, b) - xlogy(b, beta)
            + xlogy(1.0 - b, 1.0 - b) - xlogy(1.0 - b, 1.0 - beta))


def compute_elbo(state: VariationalState, moments: SmoothedMoments,
                 byproducts: FilterByproducts, panel: Panel,
                 prior: PriorSpec) -> ElboBreakdown:
    """Evaluate the bound for the q(F) that produced ``byproducts`` together
    with the parameter/selector blocks that defined that q(F)."""
    sys = byproducts.system
    T_i = panel.T_i
    T = moments.T
    n, s = state.M_lambda.shape
    r = state.M_phi.shape[0]

    quad_pred = float(np.einsum("tk,tk->", byproducts.eps_pred, byproducts.Ginv_eps))
    resid = panel.y - sys.M_zl @ sys.y_star.T
    quad_collapse = float(np.sum(panel.mask * resid**2 / state.psi2_eps[:, None]))
    quad_pseudo = float(np.einsum("tk,tkm,tm->", sys.y_star, sys.Sigma_thetaZ, sys.y_star))
    f_terms = (-0.5 * float(T_i.sum()) * np.log(np.pi)
               - 0.5 * (float(spd_logdet(prior.V_F0)) - float(spd_logdet(sys.Sigma_F0)))
               - 0.5 * float(np.sum(byproducts.logdet_G - sys.logdet_H_star))
               - 0.5 * quad_pred - 0.5 * quad_collapse - 0.5 * quad_pseudo)

    lambda_terms = -float(np.sum(kl_gaussian_conditional(
        state.M_lambda, state.Sigma_lambda, prior.V_lambda, state.psi2_eps,
        prior.V_lambda_inv)))
    phi_terms = -float(np.sum(kl_gaussian_conditional(
        state.M_phi, state.Sigma_phi, prior.V_phi, state.psi2_u,
        prior.V_phi_inv)))

    nu_e, tau2_e = prior.nu_eps, prior.tau2_eps
    dof_e = nu_e + T_i
    sigma_eps_terms = float(np.sum(
        gammaln(dof_e / 2.0) - gammaln(nu_e / 2.0)
        - dof_e / 2.0 * np.log(dof_e * state.psi2_eps)
        + nu_e / 2.0 * np.log(nu_e * tau2_e)
        - nu_e * tau2_e / (2.0 * state.psi2_eps)
        + dof_e / 2.0))

    nu_u, tau2_u = prior.nu_u, prior.tau2_u
    dof_u = nu_u + T
    sigma_u_terms = float(np.sum(
        gammaln(dof_u / 2.0) - gammaln(nu_u / 2.0)
        - nu_u / 2.0 * np.log(dof_u * state.psi2_u)
        + nu_u / 2.0 * np.log(nu_u * tau2_u)
        - nu_u * tau2_u / (2.0 * state.psi2_u)
        + dof_u / 2.0
        - T / 2.0 * np.log(dof_u / 2.0)))

    z_terms = -float(np.sum(kl_bernoulli(state.B, prior.beta)))

    out = ElboBreakdown(f_terms, lambda_terms, phi_terms,
                        sigma_eps_terms, sigma_u_terms, z_terms)
    for name, val in zip(("f", "lambda", "phi", "sigma_eps", "sigma_u", "z"), out.as_tuple()[1:]):
        if not np.isfinite(val):
            raise NumericalError(f"non-finite ELBO term group {name!r}")
    return out
