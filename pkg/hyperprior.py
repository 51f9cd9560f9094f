"""
Generalized gamma hyperpriors on the increment variances theta

A parameter set is (r, eta, vartheta) with beta = (eta + 3/2) / r derived.
Phase 1 of the hybrid scheme uses r = 1 (gamma); phase 2 uses 0 < r < 1 or
r = -1 (inverse gamma), with beta and vartheta chosen so both hypermodels
share the baseline variance and the marginal expected variance.
"""
import logging
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.optimize import brentq
from scipy.special import gammaln

from cem_forward import ForwardResult
from errors import ConfigurationError, DomainError, NumericalError
from increments import IncrementOperator

logger = logging.getLogger(__name__)

NEWTON_RTOL = 1e-12
NEWTON_MAX_ITER = 200
BETA_SEARCH_MAX = 1e15
BETA_OFFSET_MIN = 1e-250


@dataclass(frozen=True, eq=False)
class HyperParams:
    r: float
    eta: float
    vartheta: np.ndarray

    def __post_init__(self):
        vartheta = np.atleast_1d(np.asarray(self.vartheta, dtype=float))
        object.__setattr__(self, 'vartheta', vartheta)
        if self.r == 0:
            raise ConfigurationError("r must be nonzero")
        if self.r > 0 and not self.eta > 0:
            raise ConfigurationError(f"eta must be positive for r > 0, got {self.eta}")
        if self.r < 0 and not self.beta > 0:
            raise ConfigurationError(f"beta must be positive for r < 0, got {self.beta}")
        if not (np.isfinite(vartheta).all() and (vartheta > 0).all()):
            raise ConfigurationError("vartheta must be positive and finite")

    @property
    def beta(self) -> float:
        return (self.eta + 1.5) / self.r

    @property
    def baseline(self) -> np.ndarray:
        """theta at zeta = 0: vartheta (eta / r)^(1/r)."""
        return self.vartheta * (self.eta / self.r) ** (1.0 / self.r)

    def describe(self) -> str:
        return (f"r={self.r:g} beta={self.beta:.6g} eta={self.eta:.3g} "
                f"vartheta median={np.median(self.vartheta):.3g}")


@dataclass
class HybridSchedule:
    phase1: HyperParams
    phase2: HyperParams
    k_max1: int = 5
    k_max2: int = 5
    tol: float = 0.0
    inner_linearizations: int = 2

    def __post_init__(self):
        if self.phase1.r != 1:
            raise ConfigurationError(f"phase 1 must use r = 1, got {self.phase1.r}")
        if not (0 < self.phase2.r <= 1 or self.phase2.r == -1):
            raise ConfigurationError(f"phase 2 needs 0 < r <= 1 or r = -1, got {self.phase2.r}")
        if self.k_max1 < 0 or self.k_max2 < 0:
            raise ConfigurationError("iteration caps must be non-negative")
        if self.tol < 0:
            raise ConfigurationError("tol must be non-negative")
        if self.inner_linearizations < 1:
            raise ConfigurationError("at least one linearization per zeta-update is required")


# ==================== SENSITIVITY SCALING ====================

def sensitivity_scaling(forward: Union[ForwardResult, np.ndarray], op: IncrementOperator,
                        vartheta_star: float) -> np.ndarray:
    """vartheta_j = vartheta_star / ||c_j||^2 with c_j the j-th column of DF(0) L^+."""
    if not vartheta_star > 0:
        raise ConfigurationError("vartheta_star must be positive")
    jacobian = forward.jacobian if isinstance(forward, ForwardResult) else np.asarray(forward)
    if jacobian is None:
        raise ConfigurationError("sensitivity scaling needs the Jacobian at xi = 0")

    # rows of L (L^T L)^{-1} J^T are the columns of J L^+
    columns = op.matrix @ op.normal_factor.solve(jacobian.T)
    norms = np.einsum('jm,jm->j', columns, columns)

    dead = ~(norms > 1e-300)
    vartheta = np.empty_like(norms)
    vartheta[~dead] = vartheta_star / norms[~dead]
    if dead.any():
        if dead.all():
            raise NumericalError("every increment has zero sensitivity")
        fill = float(np.median(vartheta[~dead]))
        vartheta[dead] = fill
        logger.warning(f"[Hyperprior] {int(dead.sum())} increments have zero sensitivity; "
                       f"using median scale {fill:.3g}")
    return vartheta


# ==================== PHASE MATCHING ====================

def _log_ratio(eta: float, r: float) -> float:
    """log of (eta/r)^(1/r) Gamma(beta) / Gamma(beta + 1/r)."""
    beta = (eta + 1.5) / r
    return np.log(eta / r) / r + gammaln(beta) - gammaln(beta + 1.0 / r)


def match_phase2(phase1: HyperParams, r2: float) -> HyperParams:
    """Phase-2 (r2, beta2, vartheta2) with equal baseline and equal expected variance."""
    if r2 == phase1.r:
        return phase1
    if not (0 < r2 < 1 or r2 == -1):
        raise ConfigurationError(f"r2 must lie in (0, 1) or equal -1, got {r2}")

    log_k = _log_ratio(phase1.eta, phase1.r)
    if r2 == -1:
        # (beta - 1) / (beta + 3/2) = K has the closed-form root below, valid for K < 1
        k = np.exp(log_k)
        if not k < 1:
            raise ConfigurationError(f"no inverse gamma match for phase 1 ratio {k:.6g}")
        eta2 = -(1.0 + 1.5 * k) / (1.0 - k) - 1.5
    else:
        # unknown u = log(eta2 / r2) = log(beta2 - 3/(2 r2)); beta2 itself loses the small offset
        gap = lambda u: _log_ratio(r2 * np.exp(u), r2) - log_k
        lo, hi = np.log(BETA_OFFSET_MIN), np.log(1e6)
        while gap(hi) < 0:
            if hi >= np.log(BETA_SEARCH_MAX):
                raise ConfigurationError(
                    f"no root for beta2 in [{1.5 / r2 + BETA_OFFSET_MIN:.6g}, {np.exp(hi):.3g}] (r2={r2})")
            hi += np.log(10.0)
        if gap(lo) > 0:
            raise ConfigurationError(
                f"no root for beta2 in [{1.5 / r2 + BETA_OFFSET_MIN:.6g}, {np.exp(hi):.3g}] (r2={r2})")
        eta2 = r2 * np.exp(brentq(gap, lo, hi, xtol=1e-14, maxiter=500))

    scale1 = (phase1.eta / phase1.r) ** (1.0 / phase1.r)
    scale2 = (eta2 / r2) ** (1.0 / r2)
    phase2 = HyperParams(r=r2, eta=float(eta2), vartheta=phase1.vartheta * scale1 / scale2)
    logger.info(f"[Hyperprior] Phase 2 matched: {phase2.describe()}")
    return phase2


# ==================== THETA UPDATE ====================

def theta_objective(theta: np.ndarray, zeta: np.ndarray, params: HyperParams) -> np.ndarray:
    """Componentwise zeta^2/(2 theta) + (theta/vartheta)^r - eta log(theta/vartheta)."""
    ratio = theta / params.vartheta
    return zeta ** 2 / (2.0 * theta) + ratio ** params.r - params.eta * np.log(ratio)


def update_theta(zeta: np.ndarray, params: HyperParams) -> np.ndarray:
    """Componentwise minimizer over theta > 0 of theta_objective."""
    zeta = np.asarray(zeta, dtype=float)
    if zeta.shape != params.vartheta.shape and params.vartheta.size != 1:
        raise ValueError(f"zeta has shape {zeta.shape}, vartheta has {params.vartheta.shape}")
    if not np.isfinite(zeta).all():
        raise DomainError("zeta must be finite")
    r, eta = params.r, params.eta
    vartheta = np.broadcast_to(params.vartheta, zeta.shape)
    half_sq = zeta ** 2 / 2.0

    if r == 1:
        return vartheta * (eta / 2.0 + np.sqrt(eta ** 2 / 4.0 + half_sq / vartheta))
    if r == -1:
        return (half_sq + vartheta) / (params.beta + 1.5)
    if r < 0:
        raise ConfigurationError(f"negative r other than -1 is not supported (r={r})")
    return _newton_theta(half_sq, vartheta, r, eta)


def _newton_theta(half_sq: np.ndarray, vartheta: np.ndarray, r: float, eta: float) -> np.ndarray:
    """Safeguarded Newton in s = log(theta) on r (theta/vartheta)^r - eta - zeta^2/(2 theta) = 0."""
    baseline = vartheta * (eta / r) ** (1.0 / r)
    upper = vartheta * ((eta + half_sq / baseline) / r) ** (1.0 / r)
    lo, hi = np.log(baseline), np.log(upper)
    log_vartheta = np.log(vartheta)
    s = 0.5 * (lo + hi)
    active = half_sq > 0
    s[~active] = lo[~active]

    for _ in range(NEWTON_MAX_ITER):
        if not active.any():
            return np.exp(s)
        power = np.exp(r * (s - log_vartheta))
        decay = half_sq * np.exp(-s)
        g = r * power - eta - decay
        dg = r * r * power + decay
        lo = np.where(g < 0, s, lo)
        hi = np.where(g > 0, s, hi)

        step = g / dg
        proposal = s - step
        outside = (proposal <= lo) | (proposal >= hi)
        proposal = np.where(outside, 0.5 * (lo + hi), proposal)
        change = np.abs(proposal - s)
        s = np.where(active, proposal, s)
        active &= (change > NEWTON_RTOL) & (hi - lo > NEWTON_RTOL) & (g != 0)

    if not active.any():
        return np.exp(s)
    j = int(np.flatnonzero(active)[0])
    raise NumericalError("theta update did not converge", index=j,
                         details={'bracket': (float(np.exp(lo[j])), float(np.exp(hi[j])))})


# ==================== GIBBS ENERGY ====================

def gibbs_energy(zeta: np.ndarray, theta: np.ndarray, params: HyperParams,
                 residual: np.ndarray, noise_scale: float) -> float:
    """0.5 ||res/omega||^2 + 0.5 sum zeta^2/theta + sum (theta/vartheta)^r - eta sum log(theta/vartheta)"""
    theta = np.asarray(theta, dtype=float)
    if not (theta > 0).all():
        raise DomainError("theta must be positive in the Gibbs energy")
    if not noise_scale > 0:
        raise DomainError("noise scale must be positive")
    misfit = 0.5 * float(np.sum((np.asarray(residual) / noise_scale) ** 2))
    return misfit + float(np.sum(theta_objective(theta, np.asarray(zeta, dtype=float), params)))
