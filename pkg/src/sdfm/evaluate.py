"""Evaluation statistics against simulation truth: inclusion accuracy,
scale-adjusted loading RMSE and factor-space precision, with column/sign
alignment of estimated factors to the truth."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidModelError


@dataclass(frozen=True)
class Alignment:
    """Column permutation and signs mapping estimated factors onto true ones.

    ``perm[j]`` is the estimated column matched to true factor j and
    ``signs[j]`` the sign of their correlation.
    """

    perm: np.ndarray
    signs: np.ndarray

    def apply_factors(self, F_hat: np.ndarray) -> np.ndarray:
        return F_hat[:, self.perm] * self.signs[None, :]

    def apply_loadings(self, L_hat: np.ndarray, r: int) -> np.ndarray:
        """Reorder and re-sign loading columns consistently for every lag block."""
        n, s = L_hat.shape
        out = np.empty_like(L_hat)
        for block in range(s // r):
            cols = block * r + self.perm
            out[:, block * r: (block + 1) * r] = L_hat[:, cols] * self.signs[None, :]
        return out

    def apply_inclusion(self, B_hat: np.ndarray, r: int) -> np.ndarray:
        """Reorder inclusion probabilities (signs do not apply)."""
        n, s = B_hat.shape
        out = np.empty_like(B_hat)
        for block in range(s // r):
            cols = block * r + self.perm
            out[:, block * r: (block + 1) * r] = B_hat[:, cols]
        return out


def align(F_hat: np.ndarray, F_true: np.ndarray) -> Alignment:
    """Greedy maximum-|correlation| matching of estimated to true factor columns."""
    r = F_true.shape[1]
    if F_hat.shape != F_true.shape:
        raise InvalidModelError("factor paths must share shape for alignment")
    sd_hat = F_hat.std(axis=0)
    if np.any(sd_hat <= 0):
        raise InvalidModelError("zero-variance estimated factor: alignment undefined")
    corr = np.corrcoef(F_hat.T, F_true.T)[:r, r:]
    perm = np.full(r, -1)
    signs = np.ones(r)
    absco = np.abs(np.array(corr))
    for _ in range(r):
        e, t = np.unravel_index(np.argmax(absco), absco.shape)
        perm[t] = e
        signs[t] = 1.0 if corr[e, t] >= 0 else -1.0
        absco[e, :] = -np.inf
        absco[:, t] = -np.inf
    return Alignment(perm=perm, signs=signs)


def inclusion_accuracy(B: np.ndarray, Z_true: np.ndarray) -> float:
    """Share of loadings whose 0.5-thresholded inclusion matches the truth."""
    picked = B > 0.5
    return float(np.mean(picked == Z_true.astype(bool)))


def loading_rmse(lambda_hat: np.ndarray, Lambda_true: np.ndarray,
                 sd_f_true: np.ndarray, sd_f_hat: np.ndarray,
                 sd_y: np.ndarray) -> float:
    """Root mean square loading error with both sides put on a common scale.

    True loadings are scaled by sd(true factor j)/sd(raw y_i); estimates,
    which come from unit-variance standardized data, by sd(estimated factor
    j) only.
    """
    n, s = Lambda_true.shape
    r = sd_f_true.shape[0]
    if np.any(sd_y <= 0):
        raise InvalidModelError("zero-variance variable: loading RMSE undefined")
    scale_true = np.tile(sd_f_true, s // r)[None, :] / sd_y[:, None]
    scale_hat = np.tile(sd_f_hat, s // r)[None, :]
    diff = Lambda_true * scale_true - lambda_hat * scale_hat
    return float(np.sqrt(np.mean(diff**2)))


def factor_precision(F_hat: np.ndarray, F_true: np.ndarray) -> float:
    """Trace R^2 of the true factors on the column space of the estimates."""
    gram = F_hat.T @ F_hat
    try:
        np.linalg.cholesky(gram)
    except np.linalg.LinAlgError:
        raise InvalidModelError("rank-deficient estimated factors") from None
    proj = F_hat @ np.linalg.solve(gram, F_hat.T @ F_true)
    return float(np.trace(F_true.T @ proj) / np.trace(F_true.T @ F_true))


@dataclass(frozen=True)
class EvalResult:
    P_Z: float | None
    E_Lambda: float
    P_F: float


def evaluate_fit(lambda_hat: np.ndarray, f_hat: np.ndarray, truth,
                 sd_y: np.ndarray, B_hat: np.ndarray | None = None) -> EvalResult:
    """Align an estimate to the truth and compute all three statistics.

    ``lambda_hat`` is the point estimate on standardized data (b * mu for the
    variational fit, the plain ML estimate for EM); ``f_hat`` the (T, r)
    estimated dynamic factors; ``truth`` a SimTruth; ``sd_y`` the raw
    per-variable standard deviations. P_Z is only computed when inclusion
    probabilities ``B_hat`` are supplied.
    """
    r = truth.alphas.shape[0]
    al = align(f_hat, truth.f)
    f_al = al.apply_factors(f_hat)
    lam_al = al.apply_loadings(lambda_hat, r)
    P_Z = None
    if B_hat is not None:
        P_Z = inclusion_accuracy(al.apply_inclusion(B_hat, r), truth.Z)
    E_L = loading_rmse(lam_al, truth.Lambda,
                       truth.f.std(axis=0), f_al.std(axis=0), sd_y)
    P_F = factor_precision(f_hat, truth.f)
    return EvalResult(P_Z=P_Z, E_Lambda=E_L, P_F=P_F)
