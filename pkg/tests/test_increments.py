import numpy as np
import pytest
from scipy import sparse

from errors import DomainError, MeshConnectivityError
from increments import IncrementOperator, _check_anchored, whitened_pseudoinverse_apply


class TestIncrementOperator:
    def test_star(self, star_mesh):
        op = IncrementOperator.build(star_mesh)
        assert op.matrix.shape == (3, 1)
        np.testing.assert_array_equal(np.abs(op.matrix.toarray()), np.ones((3, 1)))
        np.testing.assert_allclose((op.matrix.T @ op.matrix).toarray(), [[3.0]])

    def test_entries_and_sparsity(self, small_op):
        assert small_op.matrix.nnz <= 2 * small_op.n_rows
        assert set(np.unique(small_op.matrix.data)) <= {-1.0, 1.0}
        assert (np.diff(small_op.matrix.indptr) >= 1).all()

    def test_full_column_rank(self, small_op):
        assert np.linalg.matrix_rank(small_op.matrix.toarray()) == small_op.n_cols

    def test_pseudoinverse_is_left_inverse(self, small_op, rng):
        xi = rng.standard_normal(small_op.n_cols)
        np.testing.assert_allclose(small_op.pseudoinverse_apply(small_op.apply(xi)), xi, atol=1e-10)

    def test_pseudoinverse_matches_lstsq(self, small_op, rng):
        zeta = rng.standard_normal(small_op.n_rows)
        expected = np.linalg.lstsq(small_op.matrix.toarray(), zeta, rcond=None)[0]
        np.testing.assert_allclose(small_op.pseudoinverse_apply(zeta), expected, atol=1e-10)

    def test_orthogonal_complement_maps_to_zero(self, small_op, rng):
        dense = small_op.matrix.toarray()
        zeta = rng.standard_normal(small_op.n_rows)
        zeta -= dense @ np.linalg.lstsq(dense, zeta, rcond=None)[0]
        assert np.abs(small_op.pseudoinverse_apply(zeta)).max() < 1e-10

    def test_length_mismatch(self, small_op):
        with pytest.raises(ValueError):
            small_op.apply(np.zeros(small_op.n_cols + 1))

    def test_unanchored_component(self):
        with pytest.raises(MeshConnectivityError):
            _check_anchored(sparse.csr_matrix(np.array([[1.0, -1.0]])))


class TestWhitenedOperator:
    def test_unit_theta_is_plain_pseudoinverse(self, small_op, rng):
        alpha = rng.standard_normal(small_op.n_rows)
        theta = np.ones(small_op.n_rows)
        np.testing.assert_allclose(whitened_pseudoinverse_apply(small_op, theta, alpha),
                                   small_op.pseudoinverse_apply(alpha), atol=1e-10)

    def test_recovers_xi(self, small_op, rng):
        theta = rng.uniform(0.1, 10.0, small_op.n_rows)
        xi = rng.standard_normal(small_op.n_cols)
        whitened = small_op.whiten(theta)
        np.testing.assert_allclose(whitened.pseudoinverse_apply(whitened.apply(xi)), xi, atol=1e-9)

    def test_matches_dense_lstsq(self, small_op, rng):
        theta = rng.uniform(0.1, 10.0, small_op.n_rows)
        alpha = rng.standard_normal(small_op.n_rows)
        dense = small_op.matrix.toarray() / np.sqrt(theta)[:, None]
        expected = np.linalg.lstsq(dense, alpha, rcond=None)[0]
        np.testing.assert_allclose(whitened_pseudoinverse_apply(small_op, theta, alpha), expected, atol=1e-9)

    def test_invariant_under_theta_scaling(self, small_op, rng):
        theta = rng.uniform(0.1, 10.0, small_op.n_rows)
        zeta = rng.standard_normal(small_op.n_rows)
        # alpha = D^{-1/2} zeta so xi depends on theta only through its shape
        a = small_op.whiten(theta).pseudoinverse_apply(zeta / np.sqrt(theta))
        b = small_op.whiten(7.0 * theta).pseudoinverse_apply(zeta / np.sqrt(7.0 * theta))
        np.testing.assert_allclose(a, b, atol=1e-10)

    def test_transpose_apply(self, small_op, rng):
        theta = rng.uniform(0.1, 10.0, small_op.n_rows)
        whitened = small_op.whiten(theta)
        rhs = rng.standard_normal((small_op.n_cols, 3))
        dense = np.linalg.pinv(small_op.matrix.toarray() / np.sqrt(theta)[:, None])
        np.testing.assert_allclose(whitened.pseudoinverse_transpose_apply(rhs), dense.T @ rhs, atol=1e-9)

    @pytest.mark.parametrize('bad', [0.0, -1.0])
    def test_nonpositive_theta(self, small_op, bad):
        theta = np.ones(small_op.n_rows)
        theta[3] = bad
        with pytest.raises(DomainError):
            small_op.whiten(theta)
