"""Smoothed factor moments of the collapsed state-space representation of q(F).

The length-n observation vector plus s zero pseudo-observations (which carry
parameter and selector uncertainty) are collapsed into a single s-dimensional
observation with identity loading matrix, so the filter cost per step is
O(s^3) regardless of n. A fixed-interval smoother then yields the first,
second and lag-one cross moments and all time sums the block updates need.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .core import (
    ModelDims,
    NumericalError,
    Panel,
    PriorSpec,
    SmoothedMoments,
    VariationalState,
    spd_inv,
    symmetrize,
)

log = logging.getLogger(__name__)

RIDGE_EIG_TOL = 1e-12
RIDGE = 1e-10

_ridge_warned = False


def _warn_ridge(count: int) -> None:
    # warn once per process, then keep the detail at debug level
    global _ridge_warned
    level = logging.DEBUG if _ridge_warned else logging.WARNING
    _ridge_warned = True
    log.log(level, "ridge added to %d degenerate pseudo-observation precision(s)", count)


def companion(M_phi: np.ndarray, s: int) -> np.ndarray:
    """Stack an r x s coefficient block over the shift-identity block."""
    r = M_phi.shape[0]
    A = np.zeros((s, s))
    A[:r, :] = M_phi
    if s > r:
        A[r:, : s - r] = np.eye(s - r)
    return A


def state_innovation_cov(psi2_u: np.ndarray, s: int) -> np.ndarray:
    """S diag(psi2_u) S': innovation variance on the current-factor block only."""
    Q = np.zeros((s, s))
    r = psi2_u.shape[0]
    Q[np.arange(r), np.arange(r)] = psi2_u
    return Q


@dataclass(frozen=True)
class CollapsedSystem:
    """Collapsed observations plus transition of the q(F) state space.

    Omega[t] = M' A_t Psi_eps^-1 M + Sigma_thetaZ[t] is the collapse
    precision; H_star[t] is its inverse (the collapsed noise covariance)
    and y_star[t] the collapsed observation.
    """

    y_star: np.ndarray
    H_star: np.ndarray
    Omega: np.ndarray
    logdet_H_star: np.ndarray
    Sigma_thetaZ: np.ndarray
    M_zl: np.ndarray
    A_phi: np.ndarray
    Q_state: np.ndarray
    Sigma_F0: np.ndarray
    ridged: int


@dataclass(frozen=True)
class FilterByproducts:
    """Predictive filter quantities consumed by the evidence lower bound."""

    eps_pred: np.ndarray
    G: np.ndarray
    logdet_G: np.ndarray
    Ginv_eps: np.ndarray
    m_pred: np.ndarray
    P_pred: np.ndarray
    system: CollapsedSystem


def build_collapsed_system(state: VariationalState, panel: Panel, prior: PriorSpec,
                           dims: ModelDims) -> CollapsedSystem:
    """Assemble the collapsed observation sequence from the current blocks."""
    n, T, s = dims.n, dims.T, dims.s
    a = panel.mask.astype(float)
    psi2 = state.psi2_eps
    M = state.B * state.M_lambda

    W = (state.B * (1.0 - state.B) * state.M_lambda**2) / psi2[:, None]
    C = state.P * state.Sigma_lambda
    idx = np.arange(s)
    C[:, idx, idx] += W
    Sigma_thetaZ = np.einsum("it,ikm->tkm", a, C)
    sum_phi = state.Sigma_phi.sum(axis=0)
    Sigma_thetaZ[:-1] += sum_phi

    eigmin = Sigma_thetaZ[:, 0, 0] if s == 1 else np.linalg.eigvalsh(Sigma_thetaZ)[:, 0]
    need_ridge = eigmin < RIDGE_EIG_TOL
    ridged = int(need_ridge.sum())
    if ridged:
        _warn_ridge(ridged)
        Sigma_thetaZ[need_ridge, idx, idx] += RIDGE

    D = np.einsum("ik,im->ikm", M, M) / psi2[:, None, None]
    Omega = Sigma_thetaZ + np.einsum("it,ikm->tkm", a, D)
    Omega = symmetrize(Omega)
    eta = ((a * panel.y) / psi2[:, None]).T @ M

    if s == 1:
        om = Omega[:, 0, 0]
        if np.any(om <= 0) or not np.all(np.isfinite(om)):
            raise NumericalError("singular collapse matrix: degenerate Psi_eps or Sigma_thetaZ")
        logdet_Omega = np.log(om)
        H_star = (1.0 / om)[:, None, None]
        y_star = eta / om[:, None]
    else:
        try:
            L = np.linalg.cholesky(Omega)
        except np.linalg.LinAlgError:
            raise NumericalError("singular collapse matrix: degenerate Psi_eps or Sigma_thetaZ") from None
        logdet_Omega = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)
        eye = np.broadcast_to(np.eye(s), (T, s, s)).copy()
        Linv = np.linalg.solve(L, eye)
        H_star = symmetrize(np.swapaxes(Linv, -1, -2) @ Linv)
        y_star = np.einsum("tkm,tm->tk", H_star, eta)

    Sigma_F0 = spd_inv(spd_inv(prior.V_F0) + sum_phi)
    return CollapsedSystem(
        y_star=y_star,
        H_star=H_star,
        Omega=Omega,
        logdet_H_star=-logdet_Omega,
        Sigma_thetaZ=Sigma_thetaZ,
        M_zl=M,
        A_phi=companion(state.M_phi, s),
        Q_state=state_innovation_cov(state.psi2_u, s),
        Sigma_F0=Sigma_F0,
        ridged=ridged,
    )


def smooth(system: CollapsedSystem, dims: ModelDims, panel: Panel
           ) -> tuple[SmoothedMoments, FilterByproducts]:
    """Kalman filter + fixed-interval smoother over the collapsed system.

    Returns exact Gaussian smoothed means, marginal second moments and
    lag-one cross moments, together with the sufficient-like time sums,
    the per-variable g_i and Q_i, and the predictive byproducts the ELBO
    needs. Covariance updates use the Joseph form with explicit
    symmetrization.
    """
    T, s = dims.T, dims.s
    if s == 1:
        m_s, P_s, cross, filt = _forward_backward_scalar(system, T)
    else:
        m_s, P_s, cross, filt = _forward_backward(system, T, s)
    m_pred, P_pred, eps_pred, G_all, logdet_G, Ginv_eps = filt
    moments = moments_from_path(m_s, P_s, cross, panel)
    byproducts = FilterByproducts(
        eps_pred=eps_pred,
        G=G_all,
        logdet_G=logdet_G,
        Ginv_eps=Ginv_eps,
        m_pred=m_pred,
        P_pred=P_pred,
        system=system,
    )
    return moments, byproducts


def _forward_backward(system: CollapsedSystem, T: int, s: int):
    A, Q = system.A_phi, system.Q_state
    eye = np.eye(s)

    m_f = np.zeros((T + 1, s))
    P_f = np.zeros((T + 1, s, s))
    m_pred = np.zeros((T, s))
    P_pred = np.zeros((T, s, s))
    eps_pred = np.zeros((T, s))
    G_all = np.zeros((T, s, s))
    logdet_G = np.zeros(T)
    Ginv_eps = np.zeros((T, s))

    P_f[0] = system.Sigma_F0
    for t in range(T):
        mp = A @ m_f[t]
        Pp = symmetrize(A @ P_f[t] @ A.T + Q)
        H = system.H_star[t]
        G = symmetrize(Pp + H)
        try:
            Lg = np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            raise NumericalError(f"non-PD innovation covariance at t={t + 1}") from None
        innov = system.y_star[t] - mp
        sol = np.linalg.solve(G, np.concatenate([innov[:, None], Pp], axis=1))
        Ginv_innov = sol[:, 0]
        K = sol[:, 1:].T
        m_new = mp + K @ innov
        IK = eye - K
        P_new = symmetrize(IK @ Pp @ IK.T + K @ H @ K.T)
        if not np.all(np.isfinite(m_new)):
            raise NumericalError(f"non-finite filter mean at t={t + 1}")
        m_f[t + 1] = m_new
        P_f[t + 1] = P_new
        m_pred[t] = mp
        P_pred[t] = Pp
        eps_pred[t] = innov
        G_all[t] = G
        logdet_G[t] = 2.0 * np.log(np.diag(Lg)).sum()
        Ginv_eps[t] = Ginv_innov

    m_s, P_s, cross = rts_backward(A, m_f, P_f, m_pred, P_pred)
    return m_s, P_s, cross, (m_pred, P_pred, eps_pred, G_all, logdet_G, Ginv_eps)


def moments_from_path(m_s, P_s, cross, panel: Panel) -> SmoothedMoments:
    """Assemble moment sums and the per-variable g_i, Q_i from smoother output."""
    T = cross.shape[0]
    second = P_s + np.einsum("tk,tm->tkm", m_s, m_s)
    a = panel.mask.astype(float)
    return SmoothedMoments(
        means=m_s,
        second=second,
        cross=cross,
        S_prev=second[:-1].sum(axis=0),
        S_cross=cross.sum(axis=0),
        S_curr=second[1:].sum(axis=0),
        g=(a * panel.y) @ m_s[1:],
        Q=np.einsum("it,tkm->ikm", a, second[1:]),
        T=T,
    )


def rts_backward(A, m_f, P_f, m_pred, P_pred):
    """Fixed-interval smoother pass; also returns lag-one cross moments
    E[F_{t+1} F_t'] = P^s_{t+1} J_t' + m^s_{t+1} m^s_t'."""
    T = len(m_pred)
    m_s = np.array(m_f)
    P_s = np.array(P_f)
    cross = np.zeros((T,) + P_f[0].shape)
    for t in range(T - 1, -1, -1):
        J = np.linalg.solve(P_pred[t], A @ P_f[t]).T
        m_s[t] = m_f[t] + J @ (m_s[t + 1] - m_pred[t])
        P_s[t] = symmetrize(P_f[t] + J @ (P_s[t + 1] - P_pred[t]) @ J.T)
        cross[t] = P_s[t + 1] @ J.T + np.outer(m_s[t + 1], m_s[t])
    return m_s, P_s, cross


def rts_backward_scalar(a, m_f, p_f, m_pred, p_pred):
    """Scalar-state smoother pass mirroring :func:`rts_backward`."""
    T = len(m_pred)
    m_s = list(m_f)
    p_s = list(p_f)
    cross = [0.0] * T
    for t in range(T - 1, -1, -1):
        j = p_f[t] * a / p_pred[t]
        m_s[t] = m_f[t] + j * (m_s[t + 1] - m_pred[t])
        p_s[t] = p_f[t] + j * (p_s[t + 1] - p_pred[t]) * j
        cross[t] = p_s[t + 1] * j + m_s[t + 1] * m_s[t]
    return m_s, p_s, cross


def _forward_backward_scalar(system: CollapsedSystem, T: int):
    """Plain-float filter/smoother for s == 1; same math as the general path."""
    a = float(system.A_phi[0, 0])
    q = float(system.Q_state[0, 0])
    y_star = system.y_star[:, 0].tolist()
    h_star = system.H_star[:, 0, 0].tolist()

    m_f = [0.0] * (T + 1)
    p_f = [0.0] * (T + 1)
    m_pred = [0.0] * T
    p_pred = [0.0] * T
    eps_pred = [0.0] * T
    g_all = [0.0] * T
    p_f[0] = float(system.Sigma_F0[0, 0])
    for t in range(T):
        mp = a * m_f[t]
        pp = a * p_f[t] * a + q
        h = h_star[t]
        g = pp + h
        if not g > 0.0:
            raise NumericalError(f"non-PD innovation covariance at t={t + 1}")
        innov = y_star[t] - mp
        k = pp / g
        m_new = mp + k * innov
        if not np.isfinite(m_new):
            raise NumericalError(f"non-finite filter mean at t={t + 1}")
        ik = 1.0 - k
        m_f[t + 1] = m_new
        p_f[t + 1] = ik * pp * ik + k * h * k
        m_pred[t] = mp
        p_pred[t] = pp
        eps_pred[t] = innov
        g_all[t] = g

    m_s, p_s, cross = rts_backward_scalar(a, m_f, p_f, m_pred, p_pred)

    g_arr = np.array(g_all)
    filt = (np.array(m_pred)[:, None], np.array(p_pred)[:, None, None],
            np.array(eps_pred)[:, None], g_arr[:, None, None], np.log(g_arr),
            (np.array(eps_pred) / g_arr)[:, None])
    return (np.array(m_s)[:, None], np.array(p_s)[:, None, None],
            np.array(cross)[:, None, None], filt)


def smooth_state(state: VariationalState, panel: Panel, prior: PriorSpec,
                 dims: ModelDims) -> tuple[SmoothedMoments, FilterByproducts]:
    """Convenience wrapper: build the collapsed system and smooth it."""
    system = build_collapsed_system(state, panel, prior, dims)
    return smooth(system, dims, panel)
