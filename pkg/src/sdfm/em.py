"""Maximum-likelihood DFM estimation by EM with arbitrary missing data.

The E-step runs a Kalman smoother on the point-parameter model with
time-varying observation selection (missing entries simply drop out of the
update); the M-step solves the standard least-squares updates from smoothed
moments. The factor innovation covariance is fixed to the identity, which
resolves the scale indeterminacy and matches unit-innovation data generating
processes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import (
    InvalidModelError,
    ModelDims,
    NumericalError,
    Panel,
    SmoothedMoments,
    inv_from_chol,
    symmetrize,
)
from .kalman import companion, moments_from_path, rts_backward, rts_backward_scalar

log = logging.getLogger(__name__)

VAR_FLOOR = 1e-12
INIT_STATE_VAR = 10.0


@dataclass(frozen=True)
class EmParams:
    """Point parameters: loadings (n,s), transition block (r,s), noise (n,)."""

    Lambda: np.ndarray
    Phi: np.ndarray
    sigma2_eps: np.ndarray


@dataclass(frozen=True)
class EmConfig:
    tol: float = 1e-8
    max_iter: int = 1000


@dataclass
class EmReport:
    params: EmParams
    loglik_trace: list[float]
    iterations: int
    converged: bool
    factors: np.ndarray
    moments: SmoothedMoments

    @property
    def loglik(self) -> float:
        return self.loglik_trace[-1]


def pca_factor_path(panel: Panel, dims: ModelDims) -> np.ndarray:
    """Principal-component factor estimates stacked with p lags, ((T+1) x s).

    Missing cells are imputed with the per-variable available mean; factors
    are scaled to unit sample variance with a deterministic sign convention.
    Pre-sample lags are zero.
    """
    n, T, r, p = dims.n, dims.T, dims.r, dims.p
    if r > min(n, T):
        raise InvalidModelError(f"cannot extract {r} components from a {n}x{T} panel")
    T_i = np.maximum(panel.T_i, 1)
    mu = panel.y.sum(axis=1) / T_i
    X = np.where(panel.mask, panel.y, mu[:, None])
    _, _, Vt = np.linalg.svd(X, full_matrices=False)
    f = np.sqrt(T) * Vt[:r].T
    loads = X @ f
    flip = loads[np.abs(loads).argmax(axis=0), np.arange(r)] < 0
    f[:, flip] *= -1.0
    f_ext = np.vstack([np.zeros((p + 1, r)), f])
    cols = [f_ext[p - l : p - l + T + 1] for l in range(p + 1)]
    return np.concatenate(cols, axis=1)


def _m_step(moments: SmoothedMoments, panel: Panel, dims: ModelDims,
            prev: EmParams | None) -> EmParams:
    """Least-squares parameter updates from smoothed moments.

    Variables with no available observations keep their previous values
    (the likelihood does not depend on them).
    """
    n, r, s = dims.n, dims.r, dims.s
    T_i = panel.T_i
    Lambda = np.zeros((n, s)) if prev is None else np.array(prev.Lambda)
    sigma2 = np.ones(n) if prev is None else np.array(prev.sigma2_eps)
    active = T_i > 0
    if np.any(active):
        Q_act = moments.Q[active]
        try:
            np.linalg.cholesky(symmetrize(Q_act))
        except np.linalg.LinAlgError:
            raise NumericalError(
                "non-PD M-step normal equations: too many factors for the data") from None
        lam = np.linalg.solve(Q_act, moments.g[active][:, :, None])[:, :, 0]
        Lambda[active] = lam
        fitted = (2.0 * np.einsum("ik,ik->i", lam, moments.g[active])
                  - np.einsum("ik,ikm,im->i", lam, Q_act, lam))
        sigma2[active] = np.maximum(
            (panel.sum_y2[active] - fitted) / T_i[active], VAR_FLOOR)
    try:
        np.linalg.cholesky(symmetrize(moments.S_prev))
    except np.linalg.LinAlgError:
        raise NumericalError(
            "non-PD M-step normal equations: too many factors for the data") from None
    Phi = np.linalg.solve(moments.S_prev, moments.S_cross[:r].T).T
    return EmParams(Lambda=Lambda, Phi=Phi, sigma2_eps=sigma2)


def _e_step(panel: Panel, dims: ModelDims, params: EmParams, V0: np.ndarray,
            miss_idx: list[np.ndarray]) -> tuple[SmoothedMoments, float]:
    """Masked Kalman smoother at point parameters; returns moments and loglik.

    Observation updates run in information form. Because masked entries of y
    are stored as zero, the per-step information vector and quadratic form
    are plain matrix products; only the information matrix needs a per-step
    correction for the missing rows.
    """
    n, T, r, s = dims.n, dims.T, dims.r, dims.s
    A = companion(params.Phi, s)
    Q = np.zeros((s, s))
    Q[np.arange(r), np.arange(r)] = 1.0

    rinv = 1.0 / params.sigma2_eps
    W = params.Lambda * rinv[:, None]
    C_full = W.T @ params.Lambda
    u_base = panel.y.T @ W
    yy_r = np.einsum("it,it,i->t", panel.y, panel.y, rinv)
    n_t = panel.mask.sum(axis=0)
    logs2_t = panel.mask.T.astype(float) @ np.log(params.sigma2_eps)
    log2pi = np.log(2.0 * np.pi)

    if s == 1:
        return _e_step_scalar(panel, dims, params, V0, miss_idx, A, rinv, C_full,
                              u_base, yy_r, n_t, logs2_t)

    m_f = np.zeros((T + 1, s))
    P_f = np.zeros((T + 1, s, s))
    m_p = np.zeros((T, s))
    P_p = np.zeros((T, s, s))
    P_f[0] = V0
    loglik = 0.0
    for t in range(T):
        mp = A @ m_f[t]
        Pp = symmetrize(A @ P_f[t] @ A.T + Q)
        if n_t[t] == 0:
            m_new, P_new = mp, Pp
        else:
            miss = miss_idx[t]
            C = C_full
            if miss.size:
                Xm = params.Lambda[miss]
                C = C - (Xm.T * rinv[miss]) @ Xm
            try:
                Lp = np.linalg.cholesky(Pp)
            except np.linalg.LinAlgError:
                raise NumericalError(f"non-PD predictive covariance at t={t + 1}") from None
            Pp_inv = inv_from_chol(Lp)
            Prec = symmetrize(Pp_inv + C)
            try:
                Lq = np.linalg.cholesky(Prec)
            except np.linalg.LinAlgError:
                raise NumericalError(f"non-PD filter precision at t={t + 1}") from None
            P_new = inv_from_chol(Lq)
            u = u_base[t] - C @ mp
            m_new = mp + P_new @ u
            quad = float(yy_r[t] - 2.0 * u_base[t] @ mp + mp @ C @ mp - u @ P_new @ u)
            logdet_S = (logs2_t[t]
                        + 2.0 * float(np.sum(np.log(np.diag(Lq))))
                        + 2.0 * float(np.sum(np.log(np.diag(Lp)))))
            loglik += -0.5 * (n_t[t] * log2pi + logdet_S + quad)
            if not np.isfinite(loglik):
                raise NumericalError(f"non-finite likelihood at t={t + 1}")
        m_f[t + 1] = m_new
        P_f[t + 1] = symmetrize(P_new)
        m_p[t] = mp
        P_p[t] = Pp

    m_s, P_s, cross = rts_backward(A, m_f, P_f, m_p, P_p)
    return moments_from_path(m_s, P_s, cross, panel), loglik


def _e_step_scalar(panel, dims, params, V0, miss_idx, A, rinv, C_full,
                   u_base, yy_r, n_t, logs2_t):
    """Plain-float information filter for s == 1."""
    T = dims.T
    a = float(A[0, 0])
    c_full = float(C_full[0, 0])
    ub = u_base[:, 0]
    lam2r = params.Lambda[:, 0] ** 2 * rinv
    c_t = np.full(T, c_full)
    for t in range(T):
        miss = miss_idx[t]
        if miss.size:
            c_t[t] -= float(lam2r[miss].sum())
    log2pi = float(np.log(2.0 * np.pi))

    m_f = [0.0] * (T + 1)
    p_f = [0.0] * (T + 1)
    m_p = [0.0] * T
    p_p = [0.0] * T
    p_f[0] = float(V0[0, 0])
    loglik = 0.0
    for t in range(T):
        mp = a * m_f[t]
        pp = a * p_f[t] * a + 1.0
        if n_t[t] == 0:
            m_new, p_new = mp, pp
        else:
            c = c_t[t]
            prec = 1.0 / pp + c
            if not prec > 0.0:
                raise NumericalError(f"non-PD filter precision at t={t + 1}")
            p_new = 1.0 / prec
            u = ub[t] - c * mp
            m_new = mp + p_new * u
            quad = yy_r[t] - 2.0 * ub[t] * mp + c * mp * mp - u * p_new * u
            loglik += -0.5 * (n_t[t] * log2pi + logs2_t[t]
                              + np.log(prec) + np.log(pp) + quad)
        m_f[t + 1] = m_new
        p_f[t + 1] = p_new
        m_p[t] = mp
        p_p[t] = pp
    if not np.isfinite(loglik):
        raise NumericalError("non-finite likelihood in scalar filter")

    m_s, p_s, cross = rts_backward_scalar(a, m_f, p_f, m_p, p_p)
    m_arr = np.array(m_s)[:, None]
    P_arr = np.array(p_s)[:, None, None]
    cross_arr = np.array(cross)[:, None, None]
    return moments_from_path(m_arr, P_arr, cross_arr, panel), float(loglik)


def run_em(panel: Panel, dims: ModelDims, cfg: EmConfig = EmConfig(),
           init: EmParams | None = None) -> EmReport:
    """Iterate E and M steps to likelihood convergence on a standardized panel."""
    if init is None:
        F0_path = pca_factor_path(panel, dims)
        init = _m_step(SmoothedMoments.from_factor_path(F0_path, panel), panel, dims, None)
    params = init
    V0 = INIT_STATE_VAR * np.eye(dims.s)
    miss_idx = [np.nonzero(~panel.mask[:, t])[0] for t in range(dims.T)]
    trace: list[float] = []
    moments = None
    converged = False
    for it in range(1, cfg.max_iter + 1):
        moments, ll = _e_step(panel, dims, params, V0, miss_idx)
        if trace and ll < trace[-1] - 1e-8 * (abs(trace[-1]) + 1.0):
            raise NumericalError(
                f"EM likelihood decreased at iteration {it}: {trace[-1]:.10g} -> {ll:.10g}")
        rel = abs(ll - trace[-1]) / (abs(ll) + 1.0) if trace else np.inf
        trace.append(ll)
        if rel < cfg.tol:
            converged = True
            break
        params = _m_step(moments, panel, dims, params)
    return EmReport(params=params, loglik_trace=trace, iterations=len(trace),
                    converged=converged, factors=moments.means, moments=moments)
