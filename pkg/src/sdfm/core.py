"""Core data containers: dimensions, panel data, priors and variational state.

All containers are plain dataclasses holding float64 numpy arrays. They are
treated as immutable after construction; the fit driver replaces whole
arrays rather than mutating entries in place.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np


class SdfmError(Exception):
    """Base class for errors raised by this package."""


class InvalidModelError(SdfmError):
    """Inconsistent shapes, invalid priors or malformed configuration."""


class NumericalError(SdfmError):
    """Numerical failure during estimation (non-finite values, blow-ups)."""


SPD_DIAG_TOL = 1e-10


def as_float_array(x, shape=None, name="array") -> np.ndarray:
    a = np.asarray(x, dtype=float)
    if shape is not None and a.shape != tuple(shape):
        raise InvalidModelError(f"{name}: expected shape {tuple(shape)}, got {a.shape}")
    return a


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Symmetric part (A + A') / 2, batched over leading axes."""
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def check_spd(a: np.ndarray, name: str) -> None:
    """Check symmetric positive definiteness by attempted Cholesky factorization.

    A diagonal tolerance of ``SPD_DIAG_TOL`` absorbs round-off on the
    factor diagonal.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise InvalidModelError(f"non-SPD prior: {name} is not square, shape {a.shape}")
    if not np.allclose(a, a.T, atol=1e-8, rtol=1e-8):
        raise InvalidModelError(f"non-SPD prior: {name} is not symmetric")
    scale = max(np.max(np.abs(np.diag(a))), 1.0)
    try:
        np.linalg.cholesky(0.5 * (a + a.T) + SPD_DIAG_TOL * scale * np.eye(a.shape[0]))
    except np.linalg.LinAlgError:
        raise InvalidModelError(f"non-SPD prior: {name} failed factorization") from None


def inv_from_chol(L: np.ndarray) -> np.ndarray:
    """Inverse of (a stack of) SPD matrices given lower Cholesky factors."""
    eye = np.broadcast_to(np.eye(L.shape[-1]), L.shape).copy()
    Linv = np.linalg.solve(L, eye)
    return symmetrize(np.swapaxes(Linv, -1, -2) @ Linv)


def spd_inv(a: np.ndarray) -> np.ndarray:
    """Inverse of an SPD matrix (or a stack of them) via Cholesky."""
    a = np.asarray(a, dtype=float)
    return inv_from_chol(np.linalg.cholesky(a))


def spd_logdet(a: np.ndarray) -> np.ndarray:
    """log det of an SPD matrix (or a stack of them) via Cholesky."""
    L = np.linalg.cholesky(np.asarray(a, dtype=float))
    d = np.diagonal(L, axis1=-2, axis2=-1)
    return 2.0 * np.sum(np.log(d), axis=-1)


@dataclass(frozen=True)
class ModelDims:
    """Problem sizes: n variables, T time points, r dynamic factors, p loading lags."""

    n: int
    T: int
    r: int
    p: int

    def __post_init__(self):
        for name in ("n", "T", "r"):
            if int(getattr(self, name)) < 1:
                raise InvalidModelError(f"dims.{name} must be >= 1")
        if int(self.p) < 0:
            raise InvalidModelError("dims.p must be >= 0")

    @property
    def s(self) -> int:
        """State dimension r * (p + 1)."""
        return self.r * (self.p + 1)


@dataclass(frozen=True)
class Panel:
    """n x T observation matrix plus availability mask.

    Entries of ``y`` where ``mask`` is False are stored as 0 so that sums of
    the form a_{i,t} * y_{i,t} need no branching; they are never read as data.
    """

    y: np.ndarray
    mask: np.ndarray

    @staticmethod
    def from_arrays(y, mask=None) -> "Panel":
        y = np.array(y, dtype=float)
        if y.ndim != 2:
            raise InvalidModelError(f"panel y must be 2-d, got shape {y.shape}")
        if mask is None:
            mask = np.isfinite(y)
        mask = np.array(mask)
        if mask.shape != y.shape:
            raise InvalidModelError("panel mask shape does not match y")
        if mask.dtype != bool:
            vals = np.unique(mask)
            if not np.all(np.isin(vals, (0, 1))):
                raise InvalidModelError("mask not binary")
            mask = mask.astype(bool)
        y = np.where(mask, y, 0.0)
        if not np.all(np.isfinite(y)):
            raise InvalidModelError("panel contains non-finite available entries")
        return Panel(y=y, mask=mask)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @cached_property
    def T_i(self) -> np.ndarray:
        """Per-variable count of available observations."""
        return self.mask.sum(axis=1)

    @cached_property
    def sum_y2(self) -> np.ndarray:
        """Per-variable sum of squared available observations."""
        return np.einsum("it,it->i", self.y, self.y)


@dataclass(frozen=True)
class PriorSpec:
    """Hyperparameters of all prior densities.

    Shapes: V_F0 (s,s); V_lambda (n,s,s); nu_eps, tau2_eps (n,);
    V_phi (r,s,s); nu_u, tau2_u (r,); beta (n,s) inclusion probabilities.
    """

    V_F0: np.ndarray
    V_lambda: np.ndarray
    nu_eps: np.ndarray
    tau2_eps: np.ndarray
    V_phi: np.ndarray
    nu_u: np.ndarray
    tau2_u: np.ndarray
    beta: np.ndarray

    @staticmethod
    def default(dims: ModelDims, beta: float | np.ndarray = 0.2,
                shrinkage: float = 2.0, nu: float = 1.0, tau2: float = 1.0) -> "PriorSpec":
        """Heuristic priors for standardized data: nu=1, tau^2=1, diagonal shrinkage 2."""
        s, n, r = dims.s, dims.n, dims.r
        beta_arr = np.broadcast_to(np.asarray(beta, dtype=float), (n, s)).copy()
        return PriorSpec(
            V_F0=shrinkage * np.eye(s),
            V_lambda=np.broadcast_to(shrinkage * np.eye(s), (n, s, s)).copy(),
            nu_eps=np.full(n, float(nu)),
            tau2_eps=np.full(n, float(tau2)),
            V_phi=np.broadcast_to(shrinkage * np.eye(s), (r, s, s)).copy(),
            nu_u=np.full(r, float(nu)),
            tau2_u=np.full(r, float(tau2)),
            beta=beta_arr,
        )

    @cached_property
    def V_lambda_inv(self) -> np.ndarray:
        return spd_inv(self.V_lambda)

    @cached_property
    def V_phi_inv(self) -> np.ndarray:
        return spd_inv(self.V_phi)


@dataclass
class VariationalState:
    """All free parameters of the variational blocks q(theta) and q(Z).

    Shapes: M_lambda (n,s); Sigma_lambda (n,s,s); psi2_eps (n,);
    M_phi (r,s); Sigma_phi (r,s,s); psi2_u (r,); B, (n,s) posterior
    inclusion probabilities; P (n,s,s) selector second moments;
    R (n,s,s) scaled loading second moments.
    """

    M_lambda: np.ndarray
    Sigma_lambda: np.ndarray
    psi2_eps: np.ndarray
    M_phi: np.ndarray
    Sigma_phi: np.ndarray
    psi2_u: np.ndarray
    B: np.ndarray
    P: np.ndarray
    R: np.ndarray

    def copy(self) -> "VariationalState":
        return VariationalState(**{k: np.array(v) for k, v in self.__dict__.items()})


def selector_second_moment(B: np.ndarray) -> np.ndarray:
    """P_i from B: diagonal b_{i,k}, off-diagonal b_{i,k} b_{i,m}."""
    P = np.einsum("ik,im->ikm", B, B)
    s = B.shape[1]
    idx = np.arange(s)
    P[:, idx, idx] = B
    return P


def loading_second_moment(Sigma_lambda, M_lambda, psi2_eps) -> np.ndarray:
    """R_i = Sigma_lambda_i + mu_i mu_i' / psi2_eps_i."""
    outer = np.einsum("ik,im->ikm", M_lambda, M_lambda)
    return Sigma_lambda + outer / psi2_eps[:, None, None]


@dataclass(frozen=True)
class SmoothedMoments:
    """Smoothed factor moments and the time sums the block updates consume.

    means[t], second[t] are E[F_t] and E[F_t F_t'] for t = 0..T;
    cross[t-1] is E[F_t F_{t-1}'] for t = 1..T.  ``S_prev``, ``S_cross``,
    ``S_curr`` are the corresponding sums over t = 1..T, and g (n,s),
    Q (n,s,s) are the availability-weighted per-variable sums.
    """

    means: np.ndarray
    second: np.ndarray
    cross: np.ndarray
    S_prev: np.ndarray
    S_cross: np.ndarray
    S_curr: np.ndarray
    g: np.ndarray
    Q: np.ndarray
    T: int

    @staticmethod
    def from_factor_path(F_path: np.ndarray, panel: Panel) -> "SmoothedMoments":
        """Point-mass moments of an observed factor path F_path ((T+1) x s).

        Used to express conjugate Bayesian regressions on estimated factors
        through the same update formulas as the latent-factor case.
        """
        F_path = np.asarray(F_path, dtype=float)
        T = F_path.shape[0] - 1
        second = np.einsum("tk,tm->tkm", F_path, F_path)
        cross = np.einsum("tk,tm->tkm", F_path[1:], F_path[:-1])
        a = panel.mask.astype(float)
        return SmoothedMoments(
            means=F_path,
            second=second,
            cross=cross,
            S_prev=second[:-1].sum(axis=0),
            S_cross=cross.sum(axis=0),
            S_curr=second[1:].sum(axis=0),
            g=(a * panel.y) @ F_path[1:],
            Q=np.einsum("it,tkm->ikm", a, second[1:]),
            T=T,
        )


@dataclass(frozen=True)
class ModelContext:
    """Bundle of validated, mutually consistent model inputs."""

    dims: ModelDims
    panel: Panel
    prior: PriorSpec


def validate(dims: ModelDims, panel: Panel, prior: PriorSpec) -> ModelContext:
    """Check all type invariants and cross-shape consistency.

    Raises InvalidModelError on the first violation; returns a ModelContext
    otherwise. Re-validating the fields of a returned context is idempotent.
    """
    n, T, r, s = dims.n, dims.T, dims.r, dims.s
    if panel.y.shape != (n, T):
        raise InvalidModelError(f"panel shape {panel.y.shape} does not match dims ({n},{T})")
    as_float_array(prior.V_F0, (s, s), "V_F0")
    as_float_array(prior.V_lambda, (n, s, s), "V_lambda")
    as_float_array(prior.V_phi, (r, s, s), "V_phi")
    for name, arr, length in (("nu_eps", prior.nu_eps, n), ("tau2_eps", prior.tau2_eps, n),
                              ("nu_u", prior.nu_u, r), ("tau2_u", prior.tau2_u, r)):
        a = as_float_array(arr, (length,), name)
        if np.any(a <= 0):
            raise InvalidModelError(f"{name} must be strictly positive")
    beta = as_float_array(prior.beta, (n, s), "beta")
    if np.any(beta < 0) or np.any(beta > 1):
        raise InvalidModelError("inclusion probability out of range [0, 1]")
    check_spd(prior.V_F0, "V_F0")
    for i in range(n):
        check_spd(prior.V_lambda[i], f"V_lambda[{i}]")
    for j in range(r):
        check_spd(prior.V_phi[j], f"V_phi[{j}]")
    return ModelContext(dims=dims, panel=panel, prior=prior)


def prior_state(dims: ModelDims, prior: PriorSpec, B: np.ndarray | None = None) -> VariationalState:
    """Variational state located exactly at the prior (B defaults to all-ones)."""
    n, r, s = dims.n, dims.r, dims.s
    if B is None:
        B = np.ones((n, s))
    M_lambda = np.zeros((n, s))
    Sigma_lambda = np.array(prior.V_lambda, dtype=float)
    psi2_eps = np.array(prior.tau2_eps, dtype=float)
    return VariationalState(
        M_lambda=M_lambda,
        Sigma_lambda=Sigma_lambda,
        psi2_eps=psi2_eps,
        M_phi=np.zeros((r, s)),
        Sigma_phi=np.array(prior.V_phi, dtype=float),
        psi2_u=np.array(prior.tau2_u, dtype=float),
        B=np.array(B, dtype=float),
        P=selector_second_moment(np.asarray(B, dtype=float)),
        R=loading_second_moment(Sigma_lambda, M_lambda, psi2_eps),
    )


def replace_state(state: VariationalState, **kw) -> VariationalState:
    return replace(state, **kw)
