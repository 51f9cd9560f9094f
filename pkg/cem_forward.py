"""
Complete Electrode Model forward solver

P1 finite elements for the potential u plus L-1 electrode voltage
coefficients in the basis E_k = e_1 - e_{k+1}. The assembled block system

        [ K(sigma) + M    C ] [u   ]   [ 0     ]
        [ C^T             D ] [beta] = [ E^T I ]

is symmetric positive definite; electrode voltages are U = E beta, which
always sums to zero. The Jacobian with respect to the interior nodal
perturbation xi is computed with the adjoint method from one factorization.
"""
import time
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import sparse

from errors import ConfigurationError, ParseError, ValidationError
from factorization import SparseFactor
from mesh import Mesh

logger = logging.getLogger(__name__)

# Nodal conductivities below SIGMA_FLOOR_RATIO * sigma0 are clamped during assembly
SIGMA_FLOOR_RATIO = 1e-4
ZERO_SUM_TOL = 1e-10


# ==================== DATA TYPES ====================

@dataclass
class Conductivity:
    """sigma = sigma0 + sum_nu xi_nu phi_nu over interior nodes"""
    sigma0: float
    xi: np.ndarray

    def nodal(self, mesh: Mesh) -> np.ndarray:
        xi = np.asarray(self.xi, dtype=float)
        if xi.shape != (mesh.n_interior,):
            raise ConfigurationError(
                f"xi has shape {xi.shape}, mesh has {mesh.n_interior} interior nodes")
        sigma = np.full(mesh.n_nodes, float(self.sigma0))
        sigma[mesh.interior_nodes] += xi
        return sigma

    @classmethod
    def homogeneous(cls, mesh: Mesh, sigma0: float) -> 'Conductivity':
        return cls(sigma0=sigma0, xi=np.zeros(mesh.n_interior))


@dataclass
class CurrentFrame:
    """Injected currents, one column (an L-vector, amperes) per injection"""
    patterns: np.ndarray

    def __post_init__(self):
        self.patterns = np.atleast_2d(np.asarray(self.patterns, dtype=float))
        scale = max(1.0, float(np.abs(self.patterns).max(initial=0.0)))
        sums = np.abs(self.patterns.sum(axis=0))
        if (sums > ZERO_SUM_TOL * scale).any():
            k = int(np.argmax(sums))
            raise ConfigurationError(f"current pattern {k} does not sum to zero (sum={sums[k]:.3e})")

    @property
    def n_electrodes(self) -> int:
        return self.patterns.shape[0]

    @property
    def n_injections(self) -> int:
        return self.patterns.shape[1]

    @classmethod
    def from_pairs(cls, pairs: Sequence, n_electrodes: int, amplitude: float = 1.0) -> 'CurrentFrame':
        """+amplitude into the first electrode of each pair, -amplitude out of the second."""
        patterns = np.zeros((n_electrodes, len(pairs)))
        for k, (a, b) in enumerate(pairs):
            patterns[a, k] = amplitude
            patterns[b, k] = -amplitude
        return cls(patterns)


@dataclass
class MeasurementPattern:
    """Per injection, a (rows, L) matrix mapping electrode voltages to measurements.

    Every row is either an adjacent-style difference (one +1, one -1) or a
    full-voltage row (a single +1).
    """
    blocks: List[np.ndarray]

    def __post_init__(self):
        self.blocks = [np.atleast_2d(np.asarray(b, dtype=float)) for b in self.blocks]
        for i, block in enumerate(self.blocks):
            plus = (block == 1).sum(axis=1)
            minus = (block == -1).sum(axis=1)
            other = ((block != 0) & (block != 1) & (block != -1)).sum(axis=1)
            ok = (other == 0) & (plus == 1) & (minus <= 1)
            if not ok.all():
                r = int(np.flatnonzero(~ok)[0])
                raise ConfigurationError(
                    f"measurement row {r} of injection {i} must hold one +1 and at most one -1")

    @property
    def n_injections(self) -> int:
        return len(self.blocks)

    @property
    def n_electrodes(self) -> int:
        return self.blocks[0].shape[1] if self.blocks else 0

    @property
    def n_rows(self) -> int:
        return sum(len(b) for b in self.blocks)

    def stacked_rows(self) -> np.ndarray:
        return np.vstack(self.blocks)

    def row_injection(self) -> np.ndarray:
        return np.concatenate([np.full(len(b), i) for i, b in enumerate(self.blocks)])

    def apply(self, voltages: np.ndarray) -> np.ndarray:
        """Measured vector from electrode voltages (L x injections), stacked per injection."""
        return np.concatenate([b @ voltages[:, i] for i, b in enumerate(self.blocks)])

    @classmethod
    def adjacent(cls, n_injections: int, n_electrodes: int,
                 electrodes: Optional[Sequence[int]] = None, drop_last: bool = False) -> 'MeasurementPattern':
        """Cyclic adjacent-pair differences U_a - U_b over `electrodes` (all by default)."""
        active = list(range(n_electrodes)) if electrodes is None else list(electrodes)
        pairs = [(active[k], active[(k + 1) % len(active)]) for k in range(len(active))]
        if drop_last:
            pairs = pairs[:-1]
        block = np.zeros((len(pairs), n_electrodes))
        for r, (a, b) in enumerate(pairs):
            block[r, a] = 1.0
            block[r, b] = -1.0
        return cls([block.copy() for _ in range(n_injections)])

    @classmethod
    def full(cls, n_injections: int, n_electrodes: int) -> 'MeasurementPattern':
        return cls([np.eye(n_electrodes) for _ in range(n_injections)])


@dataclass
class ForwardResult:
    """Measured voltages (stacked per injection) and d voltages / d xi"""
    voltages: np.ndarray
    jacobian: Optional[np.ndarray] = None
    clamped_nodes: int = 0
    timings: Dict[str, float] = field(default_factory=dict)


@dataclass
class CemSystem:
    """Assembled and factored CEM system at one conductivity"""
    matrix: sparse.csc_matrix
    factor: SparseFactor
    n_nodes: int
    basis: np.ndarray
    sigma: np.ndarray
    clamped: np.ndarray
    assembly_seconds: float = 0.0
    factorization_seconds: float = 0.0

    @property
    def n_electrodes(self) -> int:
        return self.basis.shape[0]

    @property
    def clamped_nodes(self) -> int:
        return int(self.clamped.sum())

    def rhs(self, currents: np.ndarray) -> np.ndarray:
        currents = np.atleast_2d(np.asarray(currents, dtype=float).T).T
        out = np.zeros((self.matrix.shape[0], currents.shape[1]))
        out[self.n_nodes:] = self.basis.T @ currents
        return out

    def solve_states(self, currents: np.ndarray, workers: int = 1) -> np.ndarray:
        """Full (u, beta) states for L-vectors given column-wise."""
        rhs = self.rhs(currents)
        if workers <= 1 or rhs.shape[1] < 2:
            return self.factor.solve(rhs)
        chunks = np.array_split(np.arange(rhs.shape[1]), min(workers, rhs.shape[1]))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda cols: self.factor.solve(rhs[:, cols]), chunks))
        return np.hstack(parts)

    def electrode_voltages(self, states: np.ndarray) -> np.ndarray:
        return self.basis @ states[self.n_nodes:]


def voltage_basis(n_electrodes: int) -> np.ndarray:
    """Columns E_k = e_1 - e_{k+1}, k = 1..L-1."""
    basis = np.zeros((n_electrodes, n_electrodes - 1))
    basis[0, :] = 1.0
    basis[np.arange(1, n_electrodes), np.arange(n_electrodes - 1)] = -1.0
    return basis


# ==================== MODEL ====================

class CemModel:
    """Everything about the CEM discretization that does not depend on sigma"""

    def __init__(self, mesh: Mesh, z):
        if mesh.n_electrodes < 2:
            raise ConfigurationError("the CEM needs at least two electrodes")
        z = np.asarray(z, dtype=float)
        if z.ndim == 0:
            z = np.full(mesh.n_electrodes, float(z))
        if z.shape != (mesh.n_electrodes,):
            raise ConfigurationError(f"expected {mesh.n_electrodes} contact impedances, got {z.shape[0]}")
        if not (z > 0).all():
            raise ConfigurationError(f"contact impedance of electrode {int(np.argmin(z))} is not positive")
        self.mesh = mesh
        self.z = z
        self.basis = voltage_basis(mesh.n_electrodes)

    @property
    def n_electrodes(self) -> int:
        return self.mesh.n_electrodes

    @cached_property
    def _local_stiffness(self) -> np.ndarray:
        """area * grad(phi_i) . grad(phi_j) per triangle, shape (t, 3, 3)."""
        g = self.mesh.basis_gradients
        return self.mesh.triangle_areas[:, None, None] * np.einsum('eid,ejd->eij', g, g)

    @cached_property
    def _stiffness_index(self):
        tri = self.mesh.triangles
        rows = np.repeat(tri, 3, axis=1).ravel()
        cols = np.tile(tri, (1, 3)).ravel()
        return rows, cols

    @cached_property
    def incidence(self) -> sparse.csr_matrix:
        """Triangle-to-node incidence, shape (t, n_nodes)."""
        tri = self.mesh.triangles
        t = len(tri)
        return sparse.csr_matrix((np.ones(3 * t), (np.repeat(np.arange(t), 3), tri.ravel())),
                                 shape=(t, self.mesh.n_nodes))

    @cached_property
    def electrode_blocks(self):
        """Constant blocks M, C, D built from exact P1 edge integrals."""
        mesh = self.mesh
        n, L = mesh.n_nodes, self.n_electrodes
        m_rows, m_cols, m_vals = [], [], []
        s = np.zeros((n, L))
        lengths = np.zeros(L)
        for l, segments in enumerate(mesh.electrode_arcs):
            a, b = segments[:, 0], segments[:, 1]
            h = np.linalg.norm(mesh.points[a] - mesh.points[b], axis=1)
            w = 1.0 / self.z[l]
            m_rows += [a, b, a, b]
            m_cols += [a, b, b, a]
            m_vals += [w * h / 3, w * h / 3, w * h / 6, w * h / 6]
            np.add.at(s[:, l], a, h / 2)
            np.add.at(s[:, l], b, h / 2)
            lengths[l] = h.sum()
        mass = sparse.csr_matrix((np.concatenate(m_vals), (np.concatenate(m_rows), np.concatenate(m_cols))),
                                 shape=(n, n))
        coupling = -(s / self.z) @ self.basis
        electrode = self.basis.T @ np.diag(lengths / self.z) @ self.basis
        return mass, sparse.csr_matrix(coupling), sparse.csr_matrix(electrode)

    def stiffness(self, sigma_nodal: np.ndarray) -> sparse.csr_matrix:
        """Element-mean sigma times the P1 Laplace stiffness."""
        sigma_mean = sigma_nodal[self.mesh.triangles].mean(axis=1)
        rows, cols = self._stiffness_index
        vals = (sigma_mean[:, None, None] * self._local_stiffness).ravel()
        n = self.mesh.n_nodes
        return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))

    def assemble(self, cond: Conductivity) -> CemSystem:
        start = time.perf_counter()
        sigma = cond.nodal(self.mesh)
        if not cond.sigma0 > 0:
            raise ConfigurationError("sigma0 must be positive")
        floor = SIGMA_FLOOR_RATIO * cond.sigma0
        clamped = sigma < floor
        if clamped.any():
            logger.warning(f"[CEM] Clamped {int(clamped.sum())} nodal conductivities to {floor:.3g} S/m")
            sigma = np.where(clamped, floor, sigma)

        mass, coupling, electrode = self.electrode_blocks
        matrix = sparse.bmat([[self.stiffness(sigma) + mass, coupling],
                              [coupling.T, electrode]], format='csc')
        assembled = time.perf_counter()
        factor = SparseFactor(matrix, label='CEM system')
        done = time.perf_counter()
        return CemSystem(matrix=matrix, factor=factor, n_nodes=self.mesh.n_nodes, basis=self.basis,
                         sigma=sigma, clamped=clamped, assembly_seconds=assembled - start,
                         factorization_seconds=done - assembled)

    def forward(self, cond: Conductivity, currents: CurrentFrame, meas: MeasurementPattern,
                jacobian: Optional[str] = 'adjoint', workers: int = 1) -> ForwardResult:
        """Measured voltages and, unless `jacobian` is None, their Jacobian in xi."""
        self._check_patterns(currents, meas)
        system = self.assemble(cond)
        start = time.perf_counter()
        n_inj = currents.n_injections

        if jacobian is None:
            states = system.solve_states(currents.patterns, workers=workers)
            voltages = meas.apply(system.electrode_voltages(states))
            jac = None
        elif jacobian == 'adjoint':
            voltages, jac = self._adjoint_jacobian(system, currents, meas, workers)
        elif jacobian == 'direct':
            states = system.solve_states(currents.patterns, workers=workers)
            voltages = meas.apply(system.electrode_voltages(states))
            jac = self._direct_jacobian(system, states, meas, n_inj)
        else:
            raise ConfigurationError(f"unknown Jacobian method {jacobian!r}")

        timings = {
            'assembly': system.assembly_seconds,
            'factorization': system.factorization_seconds,
            'solves': time.perf_counter() - start,
        }
        return ForwardResult(voltages=voltages, jacobian=jac, clamped_nodes=system.clamped_nodes,
                             timings=timings)

    def _check_patterns(self, currents: CurrentFrame, meas: MeasurementPattern):
        if currents.n_electrodes != self.n_electrodes:
            raise ConfigurationError(
                f"current frame has {currents.n_electrodes} electrodes, mesh has {self.n_electrodes}")
        if meas.n_injections != currents.n_injections:
            raise ConfigurationError(
                f"measurement pattern has {meas.n_injections} blocks for {currents.n_injections} injections")
        if meas.n_electrodes != self.n_electrodes:
            raise ConfigurationError(
                f"measurement pattern has {meas.n_electrodes} columns, mesh has {self.n_electrodes} electrodes")

    def _element_gradients(self, states: np.ndarray) -> np.ndarray:
        """Per-triangle gradients of the potentials, shape (t, 2, columns)."""
        u = states[:self.mesh.n_nodes][self.mesh.triangles]
        return np.einsum('ekd,eks->eds', self.mesh.basis_gradients, u)

    def _adjoint_jacobian(self, system: CemSystem, currents: CurrentFrame,
                          meas: MeasurementPattern, workers: int):
        n_inj = currents.n_injections
        rows = meas.stacked_rows()
        row_inj = meas.row_injection()
        unique_rows, inverse = np.unique(rows, axis=0, return_inverse=True)
        inverse = inverse.ravel()

        # reciprocity: the adjoint field of a measurement row is the forward
        # field of that row used as a current pattern
        states = system.solve_states(np.hstack([currents.patterns, unique_rows.T]), workers=workers)
        voltages = meas.apply(system.electrode_voltages(states[:, :n_inj]))

        grads = self._element_gradients(states)
        weights = self.mesh.triangle_areas / 3.0
        products = np.zeros((len(self.mesh.triangles), len(rows)))
        for d in range(2):
            products += grads[:, d, row_inj] * grads[:, d, n_inj + inverse]
        products *= weights[:, None]

        per_node = np.asarray(self.incidence.T @ products)
        interior = self.mesh.interior_nodes
        active = ~system.clamped[interior]
        jac = -(per_node[interior] * active[:, None]).T
        return voltages, np.ascontiguousarray(jac)

    @cached_property
    def _node_triangles(self) -> sparse.csc_matrix:
        return self.incidence.tocsc()

    def _direct_jacobian(self, system: CemSystem, states: np.ndarray,
                         meas: MeasurementPattern, n_inj: int) -> np.ndarray:
        """Forward sensitivities, one multi-RHS solve per interior node."""
        tri = self.mesh.triangles
        incidence = self._node_triangles
        local = self._local_stiffness / 3.0
        u = states[:self.mesh.n_nodes]
        interior = self.mesh.interior_nodes
        jac = np.zeros((meas.n_rows, len(interior)))
        for k, node in enumerate(interior):
            if system.clamped[node]:
                continue
            elems = incidence.indices[incidence.indptr[node]:incidence.indptr[node + 1]]
            contrib = np.einsum('eij,ejs->eis', local[elems], u[tri[elems]])
            rhs = np.zeros((system.matrix.shape[0], n_inj))
            np.add.at(rhs, tri[elems], contrib)
            d_states = system.factor.solve(-rhs)
            jac[:, k] = meas.apply(system.electrode_voltages(d_states))
        return jac


# ==================== MODULE-LEVEL OPERATIONS ====================

def assemble(mesh: Mesh, cond: Conductivity, z) -> CemSystem:
    return CemModel(mesh, z).assemble(cond)


def solve_forward(system: CemSystem, currents: CurrentFrame, workers: int = 1) -> np.ndarray:
    """Electrode voltages U = R I, one column per injection; columns sum to zero."""
    if currents.n_electrodes != system.n_electrodes:
        raise ConfigurationError(
            f"current frame has {currents.n_electrodes} electrodes, system has {system.n_electrodes}")
    return system.electrode_voltages(system.solve_states(currents.patterns, workers=workers))


def resistance_matrix(system: CemSystem) -> np.ndarray:
    """R_{sigma,z} such that U = R I, assembled column by column."""
    return system.electrode_voltages(system.solve_states(np.eye(system.n_electrodes)))


def forward_with_jacobian(mesh: Mesh, cond: Conductivity, z, currents: CurrentFrame,
                          meas: MeasurementPattern, method: str = 'adjoint') -> ForwardResult:
    return CemModel(mesh, z).forward(cond, currents, meas, jacobian=method)


# ==================== PATTERN FILES ====================

def save_patterns(currents: CurrentFrame, meas: MeasurementPattern, path: str):
    """Write a PATTERNS v1 file with explicit measurement rows."""
    L = currents.n_electrodes
    lines = ['PATTERNS v1', f'INJECTIONS {currents.n_injections} {L}']
    for k in range(currents.n_injections):
        lines.append(' '.join(repr(float(v)) for v in currents.patterns[:, k]))
    lines.append(f'MEASURE explicit {meas.n_rows}')
    for i, block in enumerate(meas.blocks):
        for row in block:
            plus = int(np.flatnonzero(row == 1)[0])
            minus = np.flatnonzero(row == -1)
            lines.append(f"{i} {plus} {int(minus[0]) if len(minus) else '-'}")
    with open(path, 'w', encoding='utf-8') as f:
        f.write("\n".join(lines) + "\n")


def load_patterns(path: str):
    """Parse a PATTERNS v1 file into (CurrentFrame, MeasurementPattern)."""
    with open(path, 'r', encoding='utf-8') as f:
        lines = [(n, raw.split('#', 1)[0].strip()) for n, raw in enumerate(f, start=1)]
    lines = iter([(n, t) for n, t in lines if t])

    def take(what):
        try:
            return next(lines)
        except StopIteration:
            raise ParseError(f"unexpected end of file while reading {what}", path)

    number, text = take('header')
    if text.split() != ['PATTERNS', 'v1']:
        raise ParseError(f"expected header 'PATTERNS v1', got {text!r}", path, number)
    number, text = take('INJECTIONS')
    parts = text.split()
    if len(parts) != 3 or parts[0] != 'INJECTIONS':
        raise ParseError("expected 'INJECTIONS k L'", path, number)
    try:
        k, L = int(parts[1]), int(parts[2])
    except ValueError:
        raise ParseError("invalid injection counts", path, number)

    patterns = np.zeros((L, k))
    for j in range(k):
        number, text = take('currents')
        try:
            row = [float(v) for v in text.split()]
        except ValueError:
            raise ParseError(f"invalid current values {text!r}", path, number)
        if len(row) != L:
            raise ParseError(f"expected {L} currents, got {len(row)}", path, number)
        patterns[:, j] = row
    try:
        currents = CurrentFrame(patterns)
    except ConfigurationError as e:
        raise ParseError(e.message, path)

    number, text = take('MEASURE')
    parts = text.split()
    if len(parts) < 2 or parts[0] != 'MEASURE':
        raise ParseError("expected 'MEASURE adjacent' or 'MEASURE explicit R'", path, number)
    if parts[1] == 'adjacent':
        try:
            electrodes = [int(v) for v in parts[2:]] or None
        except ValueError:
            raise ParseError("invalid electrode list", path, number)
        if electrodes is not None and (min(electrodes) < 0 or max(electrodes) >= L):
            raise ParseError("adjacent electrode index out of range", path, number)
        return currents, MeasurementPattern.adjacent(k, L, electrodes)
    if parts[1] != 'explicit' or len(parts) != 3:
        raise ParseError(f"unknown measurement mode {text!r}", path, number)

    blocks = [[] for _ in range(k)]
    for _ in range(int(parts[2])):
        number, text = take('measurement rows')
        fields_ = text.split()
        try:
            inj, plus = int(fields_[0]), int(fields_[1])
            minus = None if fields_[2] == '-' else int(fields_[2])
        except (ValueError, IndexError):
            raise ParseError(f"measurement row must be 'injection plus minus', got {text!r}", path, number)
        if not (0 <= inj < k) or not (0 <= plus < L) or (minus is not None and not 0 <= minus < L):
            raise ParseError("measurement row index out of range", path, number)
        row = np.zeros(L)
        row[plus] = 1.0
        if minus is not None:
            row[minus] = -1.0
        blocks[inj].append(row)
    if any(len(b) == 0 for b in blocks):
        raise ParseError("every injection needs at least one measurement row", path)
    try:
        return currents, MeasurementPattern([np.array(b) for b in blocks])
    except (ConfigurationError, ValidationError) as e:
        raise ParseError(e.message, path)
