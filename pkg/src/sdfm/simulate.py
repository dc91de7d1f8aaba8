"""Synthetic DFM panels: data generating process and missing-data patterns.

Factors follow independent AR(1) processes with unit innovation variance;
loadings are standard normal on a uniformly sampled subset of positions and
zero elsewhere; idiosyncratic variances are set so each variable's
signal-to-noise ratio equals a uniform draw.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import InvalidModelError, ModelDims, Panel

PATTERNS = ("none", "experiment2")


@dataclass(frozen=True)
class SimConfig:
    dims: ModelDims
    omega: float
    seed: int
    pattern: str = "none"

    def __post_init__(self):
        if not 0.0 <= self.omega <= 1.0:
            raise InvalidModelError("omega outside [0, 1]")
        if self.pattern not in PATTERNS:
            raise InvalidModelError(f"unknown missing pattern {self.pattern!r}")


@dataclass(frozen=True)
class SimTruth:
    """Ground truth of one simulated system.

    Lambda (n,s) loadings with exact zeros off the inclusion set; Z (n,s)
    binary inclusion indicators; alphas (r,) AR coefficients (Phi_1 diagonal);
    sigma2_eps (n,) idiosyncratic variances; F (T,s) stacked factor path.
    """

    Lambda: np.ndarray
    Z: np.ndarray
    alphas: np.ndarray
    sigma2_eps: np.ndarray
    F: np.ndarray
    xis: np.ndarray

    @property
    def Phi1(self) -> np.ndarray:
        return np.diag(self.alphas)

    @property
    def f(self) -> np.ndarray:
        """Dynamic factors (T, r): the first r state entries."""
        r = self.alphas.shape[0]
        return self.F[:, :r]


def round_nearest(x: float) -> int:
    """Round to nearest integer, half away from zero (fixed for reproducibility)."""
    return int(np.floor(x + 0.5))


def idiosyncratic_variances(Lambda: np.ndarray, alphas: np.ndarray, xis: np.ndarray) -> np.ndarray:
    """Per-variable noise variances implied by loadings, persistence and SNR draws.

    zeta_i sums lambda_{i,l*r+j}^2 / (1 - alpha_j^2) over lags l and factors j;
    the variance is xi/(1-xi) * zeta when zeta > 0 and 1 otherwise.
    """
    n, s = Lambda.shape
    r = alphas.shape[0]
    stat_var = 1.0 / (1.0 - alphas**2)
    zeta = np.einsum("ik,k->i", Lambda**2, np.tile(stat_var, s // r))
    return np.where(zeta > 0, xis / (1.0 - xis) * zeta, 1.0)


def _stationary_factor_path(alphas: np.ndarray, T: int, p: int, rng: np.random.Generator) -> np.ndarray:
    """Dynamic factor draws f_t for t = 1-p .. T, started at stationarity."""
    r = alphas.shape[0]
    total = T + p
    f = np.empty((total, r))
    f[0] = rng.standard_normal(r) / np.sqrt(1.0 - alphas**2)
    shocks = rng.standard_normal((total - 1, r))
    for t in range(1, total):
        f[t] = alphas * f[t - 1] + shocks[t - 1]
    return f


def _stack_lags(f: np.ndarray, T: int, p: int) -> np.ndarray:
    """Stacked state F_t = [f_t, f_{t-1}, ..., f_{t-p}] for t = 1..T, (T, s)."""
    cols = [f[p - l : p - l + T] for l in range(p + 1)]
    return np.concatenate(cols, axis=1)


def simulate_dfm(cfg: SimConfig) -> tuple[Panel, SimTruth]:
    """Draw one panel and its ground truth; bit-identical for identical cfg.

    The root seed is split into independent streams for (system draw,
    factor/noise path, missing pattern) so patterns can also be re-applied
    separately with the same result.
    """
    dims = cfg.dims
    n, T, r, p, s = dims.n, dims.T, dims.r, dims.p, dims.s
    ss_system, ss_path, ss_pattern = np.random.SeedSequence(cfg.seed).spawn(3)

    rng = np.random.default_rng(ss_system)
    n_incl = round_nearest(cfg.omega * n * s)
    included = rng.choice(n * s, size=n_incl, replace=False)
    Z = np.zeros(n * s, dtype=bool)
    Z[included] = True
    Z = Z.reshape(n, s)
    Lambda = np.where(Z, rng.standard_normal((n, s)), 0.0)
    alphas = rng.uniform(-0.95, 0.95, size=r)
    xis = rng.uniform(0.1, 0.9, size=n)
    sigma2_eps = idiosyncratic_variances(Lambda, alphas, xis)

    rng_path = np.random.default_rng(ss_path)
    f = _stationary_factor_path(alphas, T, p, rng_path)
    F = _stack_lags(f, T, p)
    eps = rng_path.standard_normal((n, T)) * np.sqrt(sigma2_eps)[:, None]
    y = Lambda @ F.T + eps

    panel = Panel.from_arrays(y, np.ones((n, T), dtype=bool))
    if cfg.pattern != "none":
        panel = apply_missing_pattern(panel, cfg.pattern, ss_pattern)
    truth = SimTruth(Lambda=Lambda, Z=Z, alphas=alphas, sigma2_eps=sigma2_eps, F=F, xis=xis)
    return panel, truth


def apply_missing_pattern(panel: Panel, pattern: str, seed) -> Panel:
    """Impose one of the named availability patterns on a fully observed panel.

    ``experiment2`` splits variables into four equal blocks: (1) fully
    available, (2) only each third time point available (the last of each
    block of three, 1-indexed t = 3, 6, ...), (3) leading observations
    removed variable-by-variable until 20% of the block is missing,
    (4) 20% removed uniformly at random.
    """
    if pattern == "none":
        return panel
    if pattern != "experiment2":
        raise InvalidModelError(f"unknown missing pattern {pattern!r}")
    n, T = panel.n, panel.T
    if n % 4 != 0:
        raise InvalidModelError("experiment2 pattern requires n divisible by 4")
    rng = np.random.default_rng(seed)
    nb = n // 4
    mask = np.array(panel.mask)

    lowfreq = (np.arange(1, T + 1) % 3) == 0
    mask[nb : 2 * nb, :] = lowfreq[None, :]

    target = round_nearest(0.2 * nb * T)
    block3 = slice(2 * nb, 3 * nb)
    removed = 0
    next_missing = np.zeros(nb, dtype=int)
    while removed < target:
        i = int(rng.integers(nb))
        if next_missing[i] >= T:
            continue
        mask[2 * nb + i, next_missing[i]] = False
        next_missing[i] += 1
        removed += 1

    cells = rng.choice(nb * T, size=round_nearest(0.2 * nb * T), replace=False)
    flat = mask[3 * nb :, :].reshape(-1)
    flat[cells] = False
    mask[3 * nb :, :] = flat.reshape(nb, T)

    return Panel.from_arrays(np.where(mask, panel.y, 0.0), mask)
