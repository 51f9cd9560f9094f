import numpy as np
import pytest

from cem_forward import (CemModel, Conductivity, CurrentFrame, MeasurementPattern, assemble,
                         forward_with_jacobian, load_patterns, resistance_matrix, save_patterns, solve_forward)
from errors import ConfigurationError, ParseError
from mesh import build_mesh, generate_disk_mesh

SIGMA0 = 0.79


def random_conductivity(mesh, rng, spread=0.2):
    return Conductivity(SIGMA0, SIGMA0 * spread * rng.uniform(-1, 1, mesh.n_interior))


class TestAssembly:
    def test_stiffness_is_linear_in_sigma(self, small_model, small_mesh):
        ones = np.ones(small_mesh.n_nodes)
        diff = small_model.stiffness(SIGMA0 * ones) - SIGMA0 * small_model.stiffness(ones)
        assert abs(diff).max() < 1e-12

    def test_electrode_blocks_scale_with_impedance(self, small_mesh):
        unit = CemModel(small_mesh, 1.0).electrode_blocks
        tiny = CemModel(small_mesh, 1e-6).electrode_blocks
        for a, b in zip(unit, tiny):
            np.testing.assert_allclose(b.toarray(), 1e6 * a.toarray(), rtol=1e-12)

    def test_system_is_spd(self, small_mesh):
        system = assemble(small_mesh, Conductivity.homogeneous(small_mesh, SIGMA0), 1e-2)
        dense = system.matrix.toarray()
        np.testing.assert_allclose(dense, dense.T, atol=1e-12)
        assert np.linalg.eigvalsh(dense).min() > 0

    def test_nonpositive_impedance_rejected(self, small_mesh):
        with pytest.raises(ConfigurationError):
            CemModel(small_mesh, [1e-2] * 7 + [0.0])

    def test_clamping_is_reported(self, small_model, small_mesh, adjacent_patterns):
        currents, meas = adjacent_patterns
        cond = Conductivity(SIGMA0, np.full(small_mesh.n_interior, -SIGMA0))
        result = small_model.forward(cond, currents, meas)
        assert result.clamped_nodes == small_mesh.n_interior
        assert np.all(result.jacobian == 0)


class TestForward:
    def test_voltages_sum_to_zero(self, small_mesh, adjacent_patterns, rng):
        currents, _ = adjacent_patterns
        system = assemble(small_mesh, random_conductivity(small_mesh, rng), 1e-2)
        voltages = solve_forward(system, currents)
        np.testing.assert_allclose(voltages.sum(axis=0), 0.0, atol=1e-12)

    def test_zero_current_gives_zero_voltage(self, small_mesh):
        system = assemble(small_mesh, Conductivity.homogeneous(small_mesh, SIGMA0), 1e-2)
        assert np.all(solve_forward(system, CurrentFrame(np.zeros((8, 1)))) == 0)

    def test_reciprocity(self, small_mesh, rng):
        for _ in range(3):
            system = assemble(small_mesh, random_conductivity(small_mesh, rng), 1e-2)
            R = resistance_matrix(system)
            assert np.abs(R - R.T).max() / np.abs(R).max() < 1e-10

    def test_doubling_sigma_halves_voltages(self, small_mesh, adjacent_patterns, rng):
        currents, _ = adjacent_patterns
        cond = random_conductivity(small_mesh, rng)
        U = solve_forward(assemble(small_mesh, cond, 1e-6), currents)
        U2 = solve_forward(assemble(small_mesh, Conductivity(2 * cond.sigma0, 2 * cond.xi), 1e-6), currents)
        assert np.abs(U2 - U / 2).max() / np.abs(U / 2).max() < 1e-3

    def test_energy_is_positive(self, small_mesh, adjacent_patterns):
        currents, _ = adjacent_patterns
        system = assemble(small_mesh, Conductivity.homogeneous(small_mesh, SIGMA0), 1e-2)
        U = solve_forward(system, currents)
        assert (np.einsum('lk,lk->k', currents.patterns, U) > 0).all()

    def test_threads_match_serial(self, small_mesh, adjacent_patterns):
        currents, _ = adjacent_patterns
        system = assemble(small_mesh, Conductivity.homogeneous(small_mesh, SIGMA0), 1e-2)
        np.testing.assert_allclose(solve_forward(system, currents, workers=3),
                                   solve_forward(system, currents), rtol=0, atol=1e-14)

    def test_conductive_inclusion_lowers_resistance(self, small_mesh):
        points = small_mesh.points[small_mesh.interior_nodes]
        xi = 1.5 * SIGMA0 * (np.hypot(points[:, 0] - 0.3, points[:, 1] - 0.1) < 0.4)
        assert xi.any()
        R_old = resistance_matrix(assemble(small_mesh, Conductivity.homogeneous(small_mesh, SIGMA0), 1e-2))
        R_new = resistance_matrix(assemble(small_mesh, Conductivity(SIGMA0, xi), 1e-2))
        diff = R_old - R_new
        assert np.linalg.eigvalsh(0.5 * (diff + diff.T)).min() >= -1e-10 * np.abs(R_old).max()
        assert np.abs(diff).max() > 1e-6

    def test_refinement_ratio(self, small_layout, adjacent_patterns):
        currents, _ = adjacent_patterns
        voltages = []
        for h in (0.2, 0.1, 0.05):
            mesh = generate_disk_mesh(1.0, h, small_layout)
            voltages.append(solve_forward(assemble(mesh, Conductivity.homogeneous(mesh, SIGMA0), 1e-2), currents))
        coarse = np.abs(voltages[0] - voltages[1]).max()
        fine = np.abs(voltages[1] - voltages[2]).max()
        assert 1.5 <= coarse / fine <= 4.5

    def test_mirror_symmetry(self, small_mesh):
        L = small_mesh.n_electrodes
        perm = [(L - l) % L for l in range(L)]
        mirrored = build_mesh(small_mesh.points * [1.0, -1.0], small_mesh.is_boundary, small_mesh.triangles,
                              [small_mesh.electrode_nodes[p] for p in perm])
        currents = CurrentFrame.from_pairs([(0, L // 2)], L)
        U = solve_forward(assemble(small_mesh, Conductivity.homogeneous(small_mesh, SIGMA0), 1e-2), currents)
        U_m = solve_forward(assemble(mirrored, Conductivity.homogeneous(mirrored, SIGMA0), 1e-2), currents)
        np.testing.assert_allclose(U_m[:, 0], U[perm, 0], atol=1e-8 * np.abs(U).max())


class TestJacobian:
    def finite_difference(self, model, cond, currents, meas):
        step = 1e-5 * SIGMA0
        columns = []
        for k in range(len(cond.xi)):
            e = np.zeros_like(cond.xi)
            e[k] = step
            plus = model.forward(Conductivity(SIGMA0, cond.xi + e), currents, meas, jacobian=None)
            minus = model.forward(Conductivity(SIGMA0, cond.xi - e), currents, meas, jacobian=None)
            columns.append((plus.voltages - minus.voltages) / (2 * step))
        return np.column_stack(columns)

    @pytest.mark.parametrize('spread', [0.0, 0.3])
    def test_adjoint_matches_finite_differences(self, small_model, small_mesh, adjacent_patterns, rng, spread):
        currents, meas = adjacent_patterns
        cond = random_conductivity(small_mesh, rng, spread)
        result = small_model.forward(cond, currents, meas)
        assert result.jacobian.shape == (meas.n_rows, small_mesh.n_interior)
        fd = self.finite_difference(small_model, cond, currents, meas)
        assert np.abs(result.jacobian - fd).max() / np.abs(fd).max() < 1e-5

    def test_random_direction(self, small_model, small_mesh, adjacent_patterns, rng):
        currents, meas = adjacent_patterns
        eps = 1e-5
        for _ in range(3):
            cond = random_conductivity(small_mesh, rng)
            v = SIGMA0 * rng.uniform(-1, 1, small_mesh.n_interior)
            plus = small_model.forward(Conductivity(SIGMA0, cond.xi + eps * v), currents, meas, jacobian=None)
            minus = small_model.forward(Conductivity(SIGMA0, cond.xi - eps * v), currents, meas, jacobian=None)
            fd = (plus.voltages - minus.voltages) / (2 * eps)
            directional = small_model.forward(cond, currents, meas).jacobian @ v
            assert np.abs(directional - fd).max() / np.abs(fd).max() < 1e-5

    def test_direct_matches_adjoint(self, small_mesh, adjacent_patterns, rng):
        currents, meas = adjacent_patterns
        cond = random_conductivity(small_mesh, rng)
        adjoint = forward_with_jacobian(small_mesh, cond, 1e-2, currents, meas)
        direct = forward_with_jacobian(small_mesh, cond, 1e-2, currents, meas, method='direct')
        np.testing.assert_allclose(direct.voltages, adjoint.voltages, rtol=0, atol=1e-12)
        assert np.abs(direct.jacobian - adjoint.jacobian).max() / np.abs(adjoint.jacobian).max() < 1e-9

    def test_full_voltage_rows(self, small_model, small_mesh, adjacent_patterns, rng):
        currents, _ = adjacent_patterns
        cond = random_conductivity(small_mesh, rng)
        full = MeasurementPattern.full(currents.n_injections, 8)
        result = small_model.forward(cond, currents, full)
        fd = self.finite_difference(small_model, cond, currents, full)
        assert np.abs(result.jacobian - fd).max() / np.abs(fd).max() < 1e-5

    def test_pattern_mismatch_rejected(self, small_model, small_mesh, adjacent_patterns):
        currents, _ = adjacent_patterns
        with pytest.raises(ConfigurationError):
            small_model.forward(Conductivity.homogeneous(small_mesh, SIGMA0), currents,
                                MeasurementPattern.adjacent(3, 8))


class TestPatterns:
    def test_zero_sum_enforced(self):
        with pytest.raises(ConfigurationError):
            CurrentFrame(np.array([[1.0], [0.5], [0.0]]))

    def test_measurement_counts(self):
        assert MeasurementPattern.adjacent(76, 32).n_rows == 76 * 32
        assert MeasurementPattern.adjacent(76, 32, drop_last=True).n_rows == 76 * 31

    def test_adjacent_on_subset_wraps(self):
        block = MeasurementPattern.adjacent(1, 8, electrodes=[0, 1, 2]).blocks[0]
        assert block[2, 2] == 1 and block[2, 0] == -1
        assert not block[:, 3:].any()

    def test_file_round_trip(self, tmp_path, adjacent_patterns):
        currents, meas = adjacent_patterns
        path = str(tmp_path / 'patterns.txt')
        save_patterns(currents, meas, path)
        loaded_currents, loaded_meas = load_patterns(path)
        np.testing.assert_array_equal(loaded_currents.patterns, currents.patterns)
        np.testing.assert_array_equal(loaded_meas.stacked_rows(), meas.stacked_rows())

    def test_adjacent_mode(self, tmp_path):
        path = tmp_path / 'patterns.txt'
        path.write_text("PATTERNS v1\nINJECTIONS 1 4\n1 -1 0 0\nMEASURE adjacent 0 1 2\n")
        _, meas = load_patterns(str(path))
        assert meas.n_rows == 3

    def test_parse_error_has_line(self, tmp_path):
        path = tmp_path / 'patterns.txt'
        path.write_text("PATTERNS v1\nINJECTIONS 1 4\n1 -1 0\nMEASURE adjacent\n")
        with pytest.raises(ParseError) as err:
            load_patterns(str(path))
        assert err.value.line == 3
