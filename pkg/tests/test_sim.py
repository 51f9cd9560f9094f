import numpy as np
import pytest

from cem_forward import MeasurementPattern
from config import LEVEL_INJECTIONS
from errors import ConfigurationError, ParseError, ValidationError
from postproc import CONDUCTIVE, RESISTIVE
from sim import (CONDUCTIVE_VALUE, PHANTOM_PRESETS, RESISTIVE_VALUE, Disk, Phantom, Polygon, injection_pairs,
                 ktc_injection_schedule, level_parameters, load_dataset, make_phantom, rasterize_phantom,
                 rasterize_truth_labels, save_dataset, synthesize)

SIGMA0 = 0.79


def winding_number(point, vertices):
    """Non-zero winding number test."""
    x, y = point
    wn = 0
    for (x0, y0), (x1, y1) in zip(vertices, vertices[1:] + vertices[:1]):
        side = (x1 - x0) * (y - y0) - (x - x0) * (y1 - y0)
        if y0 <= y < y1 and side > 0:
            wn += 1
        elif y1 <= y < y0 and side < 0:
            wn -= 1
    return wn != 0


class TestPhantoms:
    def test_presets(self):
        for name in PHANTOM_PRESETS:
            phantom = make_phantom(name, SIGMA0)
            assert phantom.background == SIGMA0
            assert phantom.validate() is phantom

    def test_unknown_preset(self):
        with pytest.raises(ConfigurationError):
            make_phantom('three-inclusions', SIGMA0)

    @pytest.mark.parametrize('name', ['concave-center', 'two-inclusions'])
    def test_polygon_matches_winding_number(self, name, rng):
        polygon = next(inc for inc in PHANTOM_PRESETS[name].inclusions if isinstance(inc, Polygon))
        points = rng.uniform(-0.7, 0.7, (2000, 2))
        expected = [winding_number(p, list(polygon.vertices)) for p in points]
        np.testing.assert_array_equal(polygon.contains(points), expected)

    def test_boundary_touching_rejected(self):
        with pytest.raises(ValidationError):
            Phantom([Disk((0.9, 0.0), 0.2, CONDUCTIVE_VALUE)], SIGMA0).validate()

    def test_nonpositive_inclusion_rejected(self):
        with pytest.raises(ValidationError):
            Phantom([Disk((0.0, 0.0), 0.2, 0.0)], SIGMA0).validate()

    def test_dict_round_trip(self):
        phantom = make_phantom('two-inclusions', SIGMA0)
        again = Phantom.from_dict(phantom.to_dict())
        assert again.to_dict() == phantom.to_dict()

    def test_truth_labels(self):
        labels = rasterize_truth_labels(make_phantom('two-inclusions', SIGMA0), 64, 64)
        assert set(np.unique(labels.values)) == {0, RESISTIVE, CONDUCTIVE}
        assert not labels.values[~labels.mask].any()
        # resistive disk sits in the lower right quadrant
        rows, cols = np.nonzero(labels.values == RESISTIVE)
        assert rows.mean() > 32 and cols.mean() > 32


class TestRasterize:
    def test_empty_phantom(self, small_mesh):
        cond = rasterize_phantom(Phantom([], SIGMA0), small_mesh)
        assert not cond.xi.any()

    def test_zero_contrast(self, small_mesh):
        cond = rasterize_phantom(Phantom([Disk((0.0, 0.0), 0.5, SIGMA0)], SIGMA0), small_mesh)
        assert not cond.xi.any()

    def test_disk_contrast(self, medium_mesh):
        disk = Disk((0.2, -0.1), 0.4, RESISTIVE_VALUE)
        cond = rasterize_phantom(Phantom([disk], SIGMA0), medium_mesh)
        inside = disk.contains(medium_mesh.points[medium_mesh.interior_nodes])
        assert inside.any()
        np.testing.assert_allclose(cond.xi[inside], RESISTIVE_VALUE - SIGMA0)
        assert not cond.xi[~inside].any()


class TestSchedules:
    def test_counts(self):
        for level, count in LEVEL_INJECTIONS.items():
            pairs = injection_pairs(level)
            assert len(pairs) == count
            assert len(set(pairs)) == count
            assert all(a % 2 == 0 and b % 2 == 0 and a < level and b < level for a, b in pairs)

    def test_full_level(self):
        currents, meas = ktc_injection_schedule(32)
        assert currents.patterns.shape == (32, 76)
        np.testing.assert_allclose(currents.patterns.sum(axis=0), 0.0)
        assert meas.n_rows == 76 * 32

    def test_reduced_level(self):
        currents, meas = ktc_injection_schedule(20)
        assert currents.n_injections == 27
        assert not currents.patterns[20:].any()
        assert meas.n_rows == 27 * 20
        assert not meas.stacked_rows()[:, 20:].any()

    def test_unknown_level(self):
        with pytest.raises(ConfigurationError):
            injection_pairs(31)

    def test_level_parameters(self):
        assert level_parameters('two-inclusions', 32) == (3e-4, 0.03)
        eta, vartheta = level_parameters('two-inclusions', 30)
        assert eta == pytest.approx(1e-4) and vartheta == pytest.approx(0.03)
        eta, vartheta = level_parameters('two-inclusions', 20)
        assert eta == pytest.approx(1e-5) and vartheta == pytest.approx(0.5)
        with pytest.raises(ConfigurationError):
            level_parameters('two-inclusions', 18)


class TestSynthesize:
    @pytest.fixture
    def phantom(self):
        return Phantom([Disk((0.3, 0.2), 0.3, CONDUCTIVE_VALUE)], SIGMA0)

    def test_noise_free(self, phantom, medium_mesh, adjacent_patterns):
        currents, meas = adjacent_patterns
        dataset = synthesize(phantom, medium_mesh, currents, meas, omega=0.0, seed=1)
        np.testing.assert_array_equal(dataset.data, dataset.clean)

    def test_noise_draw(self, phantom, medium_mesh, adjacent_patterns):
        currents, meas = adjacent_patterns
        dataset = synthesize(phantom, medium_mesh, currents, meas, omega=0.01, seed=7)
        expected = 0.01 * np.random.default_rng(7).standard_normal(meas.n_rows)
        np.testing.assert_allclose(dataset.data - dataset.clean, expected, atol=1e-15)

    def test_seed_reproducible(self, phantom, medium_mesh, adjacent_patterns):
        currents, meas = adjacent_patterns
        first = synthesize(phantom, medium_mesh, currents, meas, omega=0.01, seed=3)
        second = synthesize(phantom, medium_mesh, currents, meas, omega=0.01, seed=3)
        other = synthesize(phantom, medium_mesh, currents, meas, omega=0.01, seed=4)
        np.testing.assert_array_equal(first.data, second.data)
        assert not np.array_equal(first.data, other.data)

    def test_inclusion_changes_data(self, phantom, medium_mesh, adjacent_patterns):
        currents, meas = adjacent_patterns
        with_inclusion = synthesize(phantom, medium_mesh, currents, meas, omega=0.0, seed=0)
        empty = synthesize(Phantom([], SIGMA0), medium_mesh, currents, meas, omega=0.0, seed=0)
        assert np.abs(with_inclusion.data - empty.data).max() > 1e-3

    def test_generation_mesh_must_be_finer(self, phantom, small_mesh, medium_mesh, adjacent_patterns):
        currents, meas = adjacent_patterns
        with pytest.raises(ValidationError):
            synthesize(phantom, small_mesh, currents, meas, omega=0.0, seed=0, recon_mesh=medium_mesh)

    def test_negative_noise(self, phantom, small_mesh, adjacent_patterns):
        currents, meas = adjacent_patterns
        with pytest.raises(ConfigurationError):
            synthesize(phantom, small_mesh, currents, meas, omega=-1.0, seed=0)

    def test_dataset_file(self, phantom, small_mesh, tmp_path, adjacent_patterns):
        currents, meas = adjacent_patterns
        dataset = synthesize(phantom, small_mesh, currents, meas, omega=0.01, seed=5, level=8)
        path = str(tmp_path / 'dataset.json')
        save_dataset(dataset, path)
        loaded = load_dataset(path)
        np.testing.assert_array_equal(loaded.data, dataset.data)
        np.testing.assert_array_equal(loaded.currents.patterns, currents.patterns)
        np.testing.assert_array_equal(loaded.meas.stacked_rows(), meas.stacked_rows())
        assert loaded.seed == 5 and loaded.level == 8
        assert loaded.phantom.to_dict() == phantom.to_dict()

    def test_subset_without_wraparound(self):
        currents, _ = ktc_injection_schedule(20, n_electrodes=32)
        assert currents.n_electrodes == 32
        meas = MeasurementPattern.adjacent(currents.n_injections, 32, electrodes=range(20), drop_last=True)
        assert meas.n_rows == 27 * 19

    def test_bad_dataset_file(self, tmp_path):
        path = tmp_path / 'dataset.json'
        path.write_text('{"version": 1,\n "data": [1, 2')
        with pytest.raises(ParseError):
            load_dataset(str(path))
