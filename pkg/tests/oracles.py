"""Independent reference computations used only by the tests.

Everything here deliberately avoids the production code paths: dense
joint-Gaussian conditioning, a plain textbook filter over the uncollapsed
augmented system, conjugate-regression closed forms and a brute-force
evidence quadrature.
"""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.special import gammaln


def companion_matrix(M_phi, s):
    r = M_phi.shape[0]
    A = np.zeros((s, s))
    A[:r, :] = M_phi
    if s > r:
        A[r:, : s - r] = np.eye(s - r)
    return A


def dense_smoothed_moments(y, mask, M, psi2_eps, Sigma_thetaZ, A, psi2_u, Sigma_F0):
    """Condition the stacked Gaussian state path on all observations.

    The state path (F_0, ..., F_T) is jointly Gaussian under the transition;
    observations are the available data rows (noise psi2_eps) plus, for every
    t >= 1, s pseudo-observations of zero with covariance Sigma_thetaZ[t]^-1.
    Returns per-t smoothed means, covariances and lag-one cross covariances.
    """
    n, T = y.shape
    s = A.shape[0]
    r = psi2_u.shape[0]
    dim = s * (T + 1)
    Q = np.zeros((s, s))
    Q[np.arange(r), np.arange(r)] = psi2_u

    # Joint covariance of the stacked state path.
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

    # Observation design: available data rows then pseudo rows per time.
    rows = []
    obs = []
    noise_blocks = []
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
    from scipy.linalg import block_diag
    Rn = block_diag(*noise_blocks)

    S = H @ cov @ H.T + Rn
    K = cov @ H.T @ np.linalg.inv(S)
    mean_post = K @ obs
    cov_post = cov - K @ H @ cov

    means = mean_post.reshape(T + 1, s)
    covs = np.array([cov_post[t * s:(t + 1) * s, t * s:(t + 1) * s] for t in range(T + 1)])
    cross = np.array([cov_post[(t + 1) * s:(t + 2) * s, t * s:(t + 1) * s] for t in range(T)])
    return means, covs, cross


def augmented_filter_smoother(y, mask, M, psi2_eps, Sigma_thetaZ, A, psi2_u, Sigma_F0):
    """Textbook filter/smoother over the uncollapsed (n_t + s)-row system."""
    n, T = y.shape
    s = A.shape[0]
    r = psi2_u.shape[0]
    Q = np.zeros((s, s))
    Q[np.arange(r), np.arange(r)] = psi2_u

    m_f = [np.zeros(s)]
    P_f = [Sigma_F0]
    m_p, P_p = [], []
    for t in range(T):
        mp = A @ m_f[-1]
        Pp = A @ P_f[-1] @ A.T + Q
        avail = np.nonzero(mask[:, t])[0]
        H = np.vstack([M[avail], np.eye(s)])
        z = np.concatenate([y[avail, t], np.zeros(s)])
        from scipy.linalg import block_diag
        Rn = block_diag(np.diag(psi2_eps[avail]) if avail.size else np.zeros((0, 0)),
                        np.linalg.inv(Sigma_thetaZ[t]))
        S = H @ Pp @ H.T + Rn
        K = Pp @ H.T @ np.linalg.inv(S)
        m_new = mp + K @ (z - H @ mp)
        P_new = Pp - K @ H @ Pp
        m_f.append(m_new)
        P_f.append(0.5 * (P_new + P_new.T))
        m_p.append(mp)
        P_p.append(Pp)

    m_s = list(m_f)
    P_s = list(P_f)
    cross = [None] * T
    for t in range(T - 1, -1, -1):
        J = P_f[t] @ A.T @ np.linalg.inv(P_p[t])
        m_s[t] = m_f[t] + J @ (m_s[t + 1] - m_p[t])
        P_s[t] = P_f[t] + J @ (P_s[t + 1] - P_p[t]) @ J.T
        cross[t] = P_s[t + 1] @ J.T + np.outer(m_s[t + 1], m_s[t])
    return np.array(m_s), np.array(P_s), np.array(cross)


def conjugate_regression(X, yv, V, nu, tau2):
    """Posterior of a Bayesian regression y = X b + e with N-Inv-chi2 prior."""
    N = X.T @ X + np.linalg.inv(V)
    Sigma = np.linalg.inv(N)
    mu = Sigma @ X.T @ yv
    m = yv.shape[0]
    psi2 = (nu * tau2 + yv @ yv - mu @ N @ mu) / (nu + m)
    return mu, Sigma, psi2


def nix_log_marginal(X, yv, V, nu, tau2):
    """Log marginal likelihood of the same conjugate regression."""
    m = yv.shape[0]
    N = X.T @ X + np.linalg.inv(V)
    Vn = np.linalg.inv(N)
    mu = Vn @ X.T @ yv
    scale_n = nu * tau2 + yv @ yv - mu @ N @ mu
    _, ld_Vn = np.linalg.slogdet(Vn)
    _, ld_V = np.linalg.slogdet(V)
    return (-0.5 * m * math.log(math.pi) + 0.5 * (ld_Vn - ld_V)
            + gammaln((nu + m) / 2.0) - gammaln(nu / 2.0)
            + 0.5 * nu * math.log(nu * tau2)
            - 0.5 * (nu + m) * math.log(scale_n))


def _nix_scalar_log_marginal(q, c, yy, m, V, nu, tau2):
    """Vectorized scalar-regressor NIX marginal: q = x'x, c = x'y, yy = y'y."""
    Vn = 1.0 / (q + 1.0 / V)
    # yy - c^2 Vn >= 0 by Cauchy-Schwarz; clamp the float cancellation
    scale_n = nu * tau2 + np.maximum(yy - c * c * Vn, 0.0)
    return (-0.5 * m * math.log(math.pi) + 0.5 * (np.log(Vn) - math.log(V))
            + gammaln((nu + m) / 2.0) - gammaln(nu / 2.0)
            + 0.5 * nu * math.log(nu * tau2)
            - 0.5 * (nu + m) * np.log(scale_n))


def grid_log_evidence(y, V_lambda, nu_eps, tau2_eps, V_phi, nu_u, tau2_u, V_F0,
                      scale=4.0, points=201):
    """Brute-force log evidence of the scalar-factor model (n=1, r=1, p=0, T=2)
    by quadrature over the factor path (f0, f1, f2).

    Conditional on the path, both parameter blocks integrate analytically via
    the conjugate-regression marginal. The marginals have Student-t tails, so
    each axis is integrated through f = scale * tan(u), which maps the whole
    real line onto a finite interval.
    """
    assert y.shape == (2,)
    eps = 1e-6
    u = np.linspace(-math.pi / 2 + eps, math.pi / 2 - eps, points)
    f_ax = scale * np.tan(u)
    jac_ax = scale / np.cos(u) ** 2
    f0, f1, f2 = np.meshgrid(f_ax, f_ax, f_ax, indexing="ij")

    lp_y = _nix_scalar_log_marginal(f1**2 + f2**2, f1 * y[0] + f2 * y[1],
                                    float(y @ y), 2, V_lambda, nu_eps, tau2_eps)
    lp_f = _nix_scalar_log_marginal(f0**2 + f1**2, f0 * f1 + f1 * f2,
                                    f1**2 + f2**2, 2, V_phi, nu_u, tau2_u)
    lp_f0 = -0.5 * (math.log(2 * math.pi * V_F0) + f0 * f0 / V_F0)
    log_h = lp_y + lp_f + lp_f0

    w1 = _simpson_weights(points, u[1] - u[0]) * jac_ax
    w = np.einsum("i,j,k->ijk", w1, w1, w1)
    mx = log_h.max()
    return float(mx + math.log(float(np.sum(w * np.exp(log_h - mx)))))


def _simpson_weights(npts, h):
    assert npts % 2 == 1
    w = np.ones(npts)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * h / 3.0


def best_alignment_exhaustive(F_hat, F_true):
    """Best permutation/sign assignment by exhaustive search over r! options."""
    r = F_true.shape[1]
    corr = np.corrcoef(F_hat.T, F_true.T)[:r, r:]
    best, best_score = None, -np.inf
    for perm in itertools.permutations(range(r)):
        score = sum(abs(corr[perm[j], j]) for j in range(r))
        if score > best_score:
            best_score = score
            best = perm
    signs = np.array([1.0 if corr[best[j], j] >= 0 else -1.0 for j in range(r)])
    return np.array(best), signs
