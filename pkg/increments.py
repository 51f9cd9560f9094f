"""
Increment operator L: nodal coefficients xi -> edge increments zeta = L xi

Rows follow the interior-edge order of the mesh. For edge (mu, nu) the row
holds +1 at mu and -1 at nu, with boundary nodes contributing nothing
(their coefficient is pinned to zero).
"""
import logging
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components

from errors import DomainError, MeshConnectivityError, ValidationError
from factorization import SparseFactor
from mesh import Mesh, interior_edges

logger = logging.getLogger(__name__)


def _check_length(vector: np.ndarray, expected: int, what: str) -> np.ndarray:
    vector = np.asarray(vector, dtype=float)
    if vector.shape[0] != expected:
        raise ValueError(f"{what} has length {vector.shape[0]}, expected {expected}")
    return vector


class IncrementOperator:
    """Sparse L (N x n) with a cached factorization of L^T L"""

    def __init__(self, matrix: sparse.csr_matrix, edges: np.ndarray):
        self.matrix = sparse.csr_matrix(matrix)
        self.edges = edges
        self.normal_factor = SparseFactor(self.matrix.T @ self.matrix, label='L^T L')

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_cols(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def build(cls, mesh: Mesh) -> 'IncrementOperator':
        edges = interior_edges(mesh)
        if len(edges) == 0:
            raise ValidationError("mesh has no interior edges")
        column = np.full(mesh.n_nodes, -1)
        column[mesh.interior_nodes] = np.arange(mesh.n_interior)

        rows, cols, vals = [], [], []
        for sign, end in ((1.0, edges[:, 0]), (-1.0, edges[:, 1])):
            inside = column[end] >= 0
            rows.append(np.flatnonzero(inside))
            cols.append(column[end[inside]])
            vals.append(np.full(inside.sum(), sign))
        matrix = sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(len(edges), mesh.n_interior))

        _check_anchored(matrix)
        logger.debug(f"[Increments] L is {matrix.shape[0]} x {matrix.shape[1]}, nnz={matrix.nnz}")
        return cls(matrix, edges)

    def apply(self, xi: np.ndarray) -> np.ndarray:
        return self.matrix @ _check_length(xi, self.n_cols, 'xi')

    def pseudoinverse_apply(self, zeta: np.ndarray) -> np.ndarray:
        """Least-squares preimage (L^T L)^{-1} L^T zeta."""
        zeta = _check_length(zeta, self.n_rows, 'zeta')
        return self.normal_factor.solve(self.matrix.T @ zeta)

    def whiten(self, theta: np.ndarray) -> 'WhitenedOperator':
        return WhitenedOperator(self, theta)


def _check_anchored(matrix: sparse.csr_matrix):
    """Every connected group of interior nodes must touch the boundary."""
    nnz_per_row = np.diff(matrix.indptr)
    pairs = matrix[nnz_per_row == 2]
    n = matrix.shape[1]
    adjacency = sparse.csr_matrix((np.ones(pairs.nnz), (np.repeat(np.arange(pairs.shape[0]), 2), pairs.indices)),
                                  shape=(pairs.shape[0], n))
    adjacency = adjacency.T @ adjacency
    n_components, labels = connected_components(adjacency, directed=False)
    anchored = np.zeros(n_components, dtype=bool)
    anchored[labels[matrix[nnz_per_row == 1].indices]] = True
    if not anchored.all():
        loose = np.flatnonzero(~anchored[labels])
        raise MeshConnectivityError(
            f"{len(loose)} interior nodes are not connected to the boundary (first column {loose[0]})")


class WhitenedOperator:
    """L_theta = D_theta^{-1/2} L for one theta, with L^T D_theta^{-1} L factored"""

    def __init__(self, op: IncrementOperator, theta: np.ndarray):
        theta = _check_length(theta, op.n_rows, 'theta')
        if not (theta > 0).all():
            j = int(np.argmin(theta))
            raise DomainError(f"theta must be positive, theta[{j}] = {theta[j]:.3e}")
        self.op = op
        self.theta = theta
        self.scale = 1.0 / np.sqrt(theta)
        normal = op.matrix.T @ sparse.diags(1.0 / theta) @ op.matrix
        self.factor = op.normal_factor.refactor(normal)

    def apply(self, xi: np.ndarray) -> np.ndarray:
        return self.scale * self.op.apply(xi)

    def pseudoinverse_apply(self, alpha: np.ndarray) -> np.ndarray:
        alpha = _check_length(alpha, self.op.n_rows, 'alpha')
        return self.factor.solve(self.op.matrix.T @ (self.scale * alpha))

    def pseudoinverse_transpose_apply(self, rhs: np.ndarray) -> np.ndarray:
        """(L_theta^+)^T rhs = D^{-1/2} L (L^T D^{-1} L)^{-1} rhs, column-wise."""
        rhs = _check_length(rhs, self.op.n_cols, 'rhs')
        solved = self.factor.solve(rhs)
        scale = self.scale if solved.ndim == 1 else self.scale[:, None]
        return scale * (self.op.matrix @ solved)


def whitened_pseudoinverse_apply(op: IncrementOperator, theta: np.ndarray, alpha: np.ndarray,
                                 whitened: Optional[WhitenedOperator] = None) -> np.ndarray:
    """xi = L_theta^+ alpha; pass `whitened` to reuse a factorization for the same theta."""
    if whitened is None:
        whitened = op.whiten(theta)
    return whitened.pseudoinverse_apply(alpha)
