"""Fully independent ELBO evaluation for models without loading lags (p = 0).

Every expectation is written out in closed form against the exact joint
Gaussian q(F) obtained by dense conditioning; nothing is shared with the
production bound except the collapsed-system inputs that define q(F).
"""

from __future__ import annotations

import numpy as np
from scipy.special import digamma, gammaln, xlogy

from oracles import dense_smoothed_moments


def dense_joint_posterior(y, mask, M, psi2_eps, Sigma_thetaZ, A, psi2_u, Sigma_F0):
    """Joint smoothed mean and covariance of the stacked path (F_0..F_T)."""
    n, T = y.shape
    s = A.shape[0]
    r = psi2_u.shape[0]
    dim = s * (T + 1)
    Q = np.zeros((s, s))
    Q[np.arange(r), np.arange(r)] = psi2_u

    cov = np.zeros((dim, dim))
    var_t = [Sigma_F0]
    for t in range(1, T + 1):
        var_t.append(A @ var_t[-1] @ A.T + Q)
    for t in range(T + 1):
        cov[t * s:(t + 1) * s, t * s:(t + 1) * s] = var_t[t]
        block = var_t[t]
        for u in range(t + 1, T + 1):
            block = A @ block
            cov[u * s:(u + 1) * s, t * s:(t + 1) * s] = block
            cov[t * s:(t + 1) * s, u * s:(u + 1) * s] = block.T

    rows, obs, noise_blocks = [], [], []
    from scipy.linalg import block_diag
    for t in range(1, T + 1):
        avail = np.nonzero(mask[:, t - 1])[0]
        for i in avail:
            h = np.zeros(dim)
            h[t * s:(t + 1) * s] = M[i]
            rows.append(h)
            obs.append(y[i, t - 1])
            noise_blocks.append(np.array([[psi2_eps[i]]]))
        h = np.zeros((s, dim))
        h[:, t * s:(t + 1) * s] = np.eye(s)
        rows.extend(h)
        obs.extend(np.zeros(s))
        noise_blocks.append(np.linalg.inv(Sigma_thetaZ[t - 1]))
    H = np.array(rows)
    obs = np.array(obs)
    Rn = block_diag(*noise_blocks)
    S = H @ cov @ H.T + Rn
    K = cov @ H.T @ np.linalg.inv(S)
    mean_post = K @ obs
    cov_post = cov - K @ H @ cov
    return mean_post, cov_post


def reference_elbo(state, panel, prior, dims, system) -> float:
    """Term-by-term ELBO; requires p = 0 so q(F) has full rank."""
    n, T, r, s = dims.n, dims.T, dims.r, dims.s
    assert dims.p == 0
    M = state.B * state.M_lambda
    A = system.A_phi
    mean_post, cov_post = dense_joint_posterior(
        panel.y, panel.mask, M, state.psi2_eps, system.Sigma_thetaZ, A,
        state.psi2_u, system.Sigma_F0)
    means = mean_post.reshape(T + 1, s)
    V = np.array([cov_post[t * s:(t + 1) * s, t * s:(t + 1) * s]
                  + np.outer(means[t], means[t]) for t in range(T + 1)])
    X = np.array([cov_post[(t + 1) * s:(t + 2) * s, t * s:(t + 1) * s]
                  + np.outer(means[t + 1], means[t]) for t in range(T)])

    T_i = panel.T_i
    dof_e = prior.nu_eps + T_i
    dof_u = prior.nu_u + T
    Elns2_e = np.log(dof_e * state.psi2_eps / 2.0) - digamma(dof_e / 2.0)
    Elns2_u = np.log(dof_u * state.psi2_u / 2.0) - digamma(dof_u / 2.0)

    # E ln p(y | F, theta, Z) over available cells
    PR = state.P * state.R
    lp_y = 0.0
    for i in range(n):
        for t in range(T):
            if not panel.mask[i, t]:
                continue
            quad = (panel.y[i, t] ** 2 / state.psi2_eps[i]
                    - 2.0 * panel.y[i, t] * (state.B[i] * state.M_lambda[i]) @ means[t + 1]
                    / state.psi2_eps[i]
                    + np.trace(PR[i] @ V[t + 1]))
            lp_y += -0.5 * (np.log(2 * np.pi) + Elns2_e[i] + quad)

    # E ln p(F | Phi, Sigma_u) including the initial-state prior
    lp_F = (-0.5 * s * np.log(2 * np.pi)
            - 0.5 * np.linalg.slogdet(prior.V_F0)[1]
            - 0.5 * np.trace(np.linalg.inv(prior.V_F0) @ V[0]))
    for j in range(r):
        mu = state.M_phi[j]
        Rphi = state.Sigma_phi[j] + np.outer(mu, mu) / state.psi2_u[j]
        for t in range(1, T + 1):
            quad = (V[t][j, j] / state.psi2_u[j]
                    - 2.0 * mu @ X[t - 1][j, :] / state.psi2_u[j]
                    + np.trace(Rphi @ V[t - 1]))
            lp_F += -0.5 * (np.log(2 * np.pi) + Elns2_u[j] + quad)

    # E ln p(theta)
    lp_theta = 0.0
    for i in range(n):
        lp_theta += (-0.5 * s * np.log(2 * np.pi) - 0.5 * s * Elns2_e[i]
                     - 0.5 * np.linalg.slogdet(prior.V_lambda[i])[1]
                     - 0.5 * np.trace(np.linalg.inv(prior.V_lambda[i]) @ state.R[i]))
        nu, tau2 = prior.nu_eps[i], prior.tau2_eps[i]
        lp_theta += (nu / 2 * np.log(nu * tau2 / 2) - gammaln(nu / 2)
                     - (1 + nu / 2) * Elns2_e[i] - nu * tau2 / (2 * state.psi2_eps[i]))
    for j in range(r):
        mu = state.M_phi[j]
        Rphi = state.Sigma_phi[j] + np.outer(mu, mu) / state.psi2_u[j]
        lp_theta += (-0.5 * s * np.log(2 * np.pi) - 0.5 * s * Elns2_u[j]
                     - 0.5 * np.linalg.slogdet(prior.V_phi[j])[1]
                     - 0.5 * np.trace(np.linalg.inv(prior.V_phi[j]) @ Rphi))
        nu, tau2 = prior.nu_u[j], prior.tau2_u[j]
        lp_theta += (nu / 2 * np.log(nu * tau2 / 2) - gammaln(nu / 2)
                     - (1 + nu / 2) * Elns2_u[j] - nu * tau2 / (2 * state.psi2_u[j]))

    lp_Z = float(np.sum(xlogy(state.B, prior.beta) + xlogy(1 - state.B, 1 - prior.beta)))

    # entropies / E ln q
    dim = (T + 1) * s
    sign, ld = np.linalg.slogdet(cov_post)
    lq_F = -(0.5 * dim * (1 + np.log(2 * np.pi)) + 0.5 * ld)

    lq_theta = 0.0
    for i in range(n):
        nu_q = dof_e[i]
        lq_theta += (-0.5 * s * np.log(2 * np.pi) - 0.5 * s * Elns2_e[i]
                     - 0.5 * np.linalg.slogdet(state.Sigma_lambda[i])[1] - 0.5 * s)
        lq_theta += (nu_q / 2 * np.log(nu_q * state.psi2_eps[i] / 2) - gammaln(nu_q / 2)
                     - (1 + nu_q / 2) * Elns2_e[i] - nu_q / 2)
    for j in range(r):
        nu_q = dof_u[j]
        lq_theta += (-0.5 * s * np.log(2 * np.pi) - 0.5 * s * Elns2_u[j]
                     - 0.5 * np.linalg.slogdet(state.Sigma_phi[j])[1] - 0.5 * s)
        lq_theta += (nu_q / 2 * np.log(nu_q * state.psi2_u[j] / 2) - gammaln(nu_q / 2)
                     - (1 + nu_q / 2) * Elns2_u[j] - nu_q / 2)

    lq_Z = float(np.sum(xlogy(state.B, state.B) + xlogy(1 - state.B, 1 - state.B)))

    return float(lp_y + lp_F + lp_theta + lp_Z - lq_F - lq_theta - lq_Z)
