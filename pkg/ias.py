"""
Hybrid IAS driver

Alternates a zeta-update (a few linearized, whitened least-squares solves)
with the componentwise theta-update, first under the gamma hyperprior
(r = 1), then under the matched generalized gamma hyperprior. zeta is never
stored: the iterate is xi and zeta = L xi.
"""
import time
import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import cho_factor, cho_solve

from cem_forward import CemModel, Conductivity, CurrentFrame, ForwardResult, MeasurementPattern
from config import DEBUG_MODE
from errors import ConfigurationError, NumericalError
from hyperprior import (HybridSchedule, HyperParams, gibbs_energy, match_phase2,
                        sensitivity_scaling, update_theta)
from increments import IncrementOperator, WhitenedOperator

logger = logging.getLogger(__name__)

MAX_STEP_HALVINGS = 5


# ==================== STATE ====================

@dataclass
class IterationRecord:
    iteration: int
    phase: int
    gibbs_energy: float
    delta_theta: float
    seconds: float
    branch: str
    xi: Optional[np.ndarray] = field(default=None, repr=False)


@dataclass
class IasState:
    xi: np.ndarray
    theta: np.ndarray
    phase: int = 1
    iteration: int = 0
    history: List[IterationRecord] = field(default_factory=list)


@dataclass
class IasReport:
    xi: np.ndarray
    theta: np.ndarray
    history: List[IterationRecord]
    phase1_xi: Optional[np.ndarray] = None
    phase1_theta: Optional[np.ndarray] = None
    clamp_warnings: int = 0
    timings: Dict[str, float] = field(default_factory=dict)
    branch: str = ''

    @property
    def iterations(self) -> int:
        return len(self.history)

    def to_dataframe(self) -> pd.DataFrame:
        columns = ['iteration', 'phase', 'gibbs_energy', 'delta_theta', 'seconds']
        return pd.DataFrame([{c: getattr(rec, c) for c in columns} for rec in self.history],
                            columns=columns)

    def write_diagnostics(self, path: str):
        self.to_dataframe().to_csv(path, index=False)

    def xi_history_frame(self, nodes: Optional[np.ndarray] = None) -> pd.DataFrame:
        """One row per outer iteration: iteration, phase, then xi at every interior node."""
        stacked = np.vstack([rec.xi for rec in self.history]) if self.history else np.empty((0, len(self.xi)))
        if nodes is None:
            nodes = np.arange(stacked.shape[1])
        frame = pd.DataFrame(stacked, columns=[f'xi_{int(k)}' for k in nodes])
        frame.insert(0, 'phase', [rec.phase for rec in self.history])
        frame.insert(0, 'iteration', [rec.iteration for rec in self.history])
        return frame

    def write_xi_history(self, path: str, nodes: Optional[np.ndarray] = None):
        self.xi_history_frame(nodes).to_csv(path, index=False, float_format='%.10g')


# ==================== CONTEXT ====================

@dataclass
class ReconstructionContext:
    """Everything fixed during one reconstruction"""
    model: CemModel
    op: IncrementOperator
    currents: CurrentFrame
    meas: MeasurementPattern
    data: np.ndarray
    noise_scale: float
    sigma0: float
    jacobian_method: str = 'adjoint'
    workers: int = 1
    timings: Dict[str, float] = field(default_factory=dict)
    clamp_warnings: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if not self.noise_scale > 0:
            raise ConfigurationError("reconstruction needs a positive noise scale omega")
        if self.data.shape != (self.meas.n_rows,):
            raise ConfigurationError(
                f"data vector has {self.data.shape[0]} entries, pattern measures {self.meas.n_rows}")
        if self.op.n_cols != self.model.mesh.n_interior:
            raise ConfigurationError("increment operator and forward model use different meshes")

    @property
    def branch(self) -> str:
        """'adjoint' when the data is shorter than the number of increments."""
        return 'adjoint' if self.meas.n_rows < self.op.n_rows else 'primal'

    def forward(self, xi: np.ndarray, jacobian: bool = True) -> ForwardResult:
        result = self.model.forward(Conductivity(self.sigma0, xi), self.currents, self.meas,
                                    jacobian=self.jacobian_method if jacobian else None,
                                    workers=self.workers)
        for stage, seconds in result.timings.items():
            self.timings[stage] = self.timings.get(stage, 0.0) + seconds
        if result.clamped_nodes:
            self.clamp_warnings += 1
        return result

    def residual(self, xi: np.ndarray) -> np.ndarray:
        return self.data - self.forward(xi, jacobian=False).voltages


# ==================== ZETA UPDATE ====================

def solve_whitened(a_transpose: np.ndarray, y: np.ndarray, branch: str) -> np.ndarray:
    """alpha minimizing ||A alpha - y||^2 + ||alpha||^2, given A^T (N x m)."""
    if branch == 'adjoint':
        gram = a_transpose.T @ a_transpose
        gram[np.diag_indices_from(gram)] += 1.0
        return a_transpose @ cho_solve(cho_factor(gram), y)
    if branch == 'primal':
        gram = a_transpose @ a_transpose.T
        gram[np.diag_indices_from(gram)] += 1.0
        return cho_solve(cho_factor(gram), a_transpose @ y)
    raise ConfigurationError(f"unknown branch {branch!r}")


def _forward_with_halving(context: ReconstructionContext, xi: np.ndarray,
                          anchor: Optional[np.ndarray]) -> Tuple[ForwardResult, np.ndarray]:
    try:
        return context.forward(xi), xi
    except NumericalError:
        if anchor is None:
            raise
    for k in range(1, MAX_STEP_HALVINGS + 1):
        xi = anchor + 0.5 * (xi - anchor)
        logger.warning(f"[IAS] Forward solve failed, halving step ({k}/{MAX_STEP_HALVINGS})")
        try:
            return context.forward(xi), xi
        except NumericalError:
            if k == MAX_STEP_HALVINGS:
                raise


def zeta_update(state: IasState, context: ReconstructionContext, inner_count: int,
                whitened: Optional[WhitenedOperator] = None, branch: Optional[str] = None) -> np.ndarray:
    """New xi after `inner_count` linearize-and-solve cycles at fixed theta."""
    if inner_count < 1:
        raise ConfigurationError("inner_count must be at least 1")
    whitened = whitened or context.op.whiten(state.theta)
    branch = branch or context.branch
    xi = np.array(state.xi, dtype=float)
    anchor = None

    for _ in range(inner_count):
        result, xi = _forward_with_halving(context, xi, anchor)
        jac = result.jacobian
        # DF L_theta^+ alpha at alpha = L_theta xi is just DF xi
        y = (context.data - result.voltages + jac @ xi) / context.noise_scale
        a_transpose = whitened.pseudoinverse_transpose_apply(jac.T) / context.noise_scale
        alpha = solve_whitened(a_transpose, y, branch)
        anchor = xi
        xi = whitened.pseudoinverse_apply(alpha)
    return xi


# ==================== PHASES ====================

def run_phase(state: IasState, params: HyperParams, k_max: int, tol: float,
              context: ReconstructionContext, inner_count: int = 2) -> IasState:
    """Alternate zeta- and theta-updates until delta_theta < tol or k_max iterations."""
    branch = context.branch
    k = 0
    while k < k_max:
        start = time.perf_counter()
        whitened = context.op.whiten(state.theta)
        xi = zeta_update(state, context, inner_count, whitened=whitened, branch=branch)
        zeta_done = time.perf_counter()

        zeta = context.op.apply(xi)
        theta = update_theta(zeta, params)
        delta = float(np.linalg.norm(theta - state.theta) / np.linalg.norm(state.theta))
        theta_done = time.perf_counter()

        energy = gibbs_energy(zeta, theta, params, context.residual(xi), context.noise_scale)
        seconds = time.perf_counter() - start
        context.timings['zeta_update'] = context.timings.get('zeta_update', 0.0) + zeta_done - start
        context.timings['theta_update'] = context.timings.get('theta_update', 0.0) + theta_done - zeta_done

        record = IterationRecord(iteration=state.iteration + 1, phase=state.phase,
                                 gibbs_energy=energy, delta_theta=delta, seconds=seconds, branch=branch,
                                 xi=xi.copy())
        state = replace(state, xi=xi, theta=theta, iteration=state.iteration + 1,
                        history=state.history + [record])
        k += 1
        if DEBUG_MODE:
            logger.debug(f"[IAS] phase {state.phase} it {k}: G={energy:.6g} dtheta={delta:.3e} "
                         f"|xi|max={np.abs(xi).max():.3g} ({seconds:.2f}s)")
        if delta < tol:
            break
    logger.info(f"[IAS] Phase {state.phase} finished after {k} iterations")
    return state


def build_schedule(context: ReconstructionContext, eta1: float, vartheta_star: float, r2: float,
                   k_max1: int = 5, k_max2: int = 5, tol: float = 0.0,
                   inner_linearizations: int = 2) -> HybridSchedule:
    """Sensitivity-scaled phase-1 parameters and the matched phase-2 set."""
    at_zero = context.forward(np.zeros(context.op.n_cols))
    vartheta1 = sensitivity_scaling(at_zero, context.op, vartheta_star)
    phase1 = HyperParams(r=1.0, eta=eta1, vartheta=vartheta1)
    phase2 = match_phase2(phase1, r2)
    return HybridSchedule(phase1=phase1, phase2=phase2, k_max1=k_max1, k_max2=k_max2,
                          tol=tol, inner_linearizations=inner_linearizations)


def run_hybrid(schedule: HybridSchedule, context: ReconstructionContext) -> IasReport:
    """Phase 1 from xi = 0 and the baseline theta, then phase 2 from phase 1's final state."""
    start = time.perf_counter()
    state = IasState(xi=np.zeros(context.op.n_cols), theta=schedule.phase1.baseline.copy())
    logger.info(f"[IAS] m={context.meas.n_rows} N={context.op.n_rows}: {context.branch} branch, "
                f"k_max=({schedule.k_max1}, {schedule.k_max2})")

    state = run_phase(state, schedule.phase1, schedule.k_max1, schedule.tol, context,
                      schedule.inner_linearizations)
    phase1_xi, phase1_theta = state.xi.copy(), state.theta.copy()

    state = replace(state, phase=2)
    state = run_phase(state, schedule.phase2, schedule.k_max2, schedule.tol, context,
                      schedule.inner_linearizations)

    timings = dict(context.timings)
    timings['total'] = time.perf_counter() - start
    if context.clamp_warnings:
        logger.warning(f"[IAS] Conductivity was clamped in {context.clamp_warnings} forward solves")
    return IasReport(xi=state.xi, theta=state.theta, history=state.history,
                     phase1_xi=phase1_xi, phase1_theta=phase1_theta,
                     clamp_warnings=context.clamp_warnings, timings=timings, branch=context.branch)
