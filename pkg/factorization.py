"""
Sparse SPD factorizations: CHOLMOD when scikit-sparse is installed, SuperLU otherwise
"""
import logging

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from errors import NumericalError

logger = logging.getLogger(__name__)

try:
    from sksparse.cholmod import analyze as _cholmod_analyze, CholmodError
    CHOLMOD_AVAILABLE = True
except ImportError:
    CHOLMOD_AVAILABLE = False
    CholmodError = RuntimeError


class SparseFactor:
    """Factorization of a sparse symmetric positive definite matrix.

    With CHOLMOD the symbolic analysis can be shared between matrices with
    the same sparsity pattern via `refactor`.
    """

    def __init__(self, matrix, symbolic=None, label: str = 'matrix'):
        matrix = sparse.csc_matrix(matrix)
        self.shape = matrix.shape
        self.label = label
        self.backend = 'cholmod' if CHOLMOD_AVAILABLE else 'superlu'
        self._symbolic = symbolic
        try:
            if CHOLMOD_AVAILABLE:
                if self._symbolic is None:
                    self._symbolic = _cholmod_analyze(matrix)
                self._factor = self._symbolic.cholesky(matrix)
            else:
                # symmetric mode keeps the diagonal pivots of an SPD matrix
                self._factor = splu(matrix, permc_spec='MMD_AT_PLUS_A', diag_pivot_thresh=0.0,
                                    options={'SymmetricMode': True})
        except (RuntimeError, CholmodError) as e:
            raise NumericalError(f"factorization of {label} failed: {e}",
                                 details={'shape': self.shape, 'nnz': matrix.nnz})

    def refactor(self, matrix) -> 'SparseFactor':
        """Factor a matrix with the same pattern, reusing the symbolic analysis."""
        return SparseFactor(matrix, symbolic=self._symbolic, label=self.label)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs, dtype=float)
        if rhs.shape[0] != self.shape[0]:
            raise ValueError(f"right-hand side has {rhs.shape[0]} rows, {self.label} has {self.shape[0]}")
        if CHOLMOD_AVAILABLE:
            out = self._factor(rhs)
        else:
            out = self._factor.solve(rhs)
        if not np.all(np.isfinite(out)):
            raise NumericalError(f"solve with {self.label} produced non-finite values")
        return out
