"""Tests for mpmflow.scene module."""

import json

import numpy as np
import pytest

from mpmflow.constitutive import MaterialModel, MaterialParams, MaterialType
from mpmflow.engine import GridSpec
from mpmflow.scene import (
    BoxShape,
    PointCloudShape,
    SceneError,
    SphereShape,
    build_scene,
    load_point_cloud,
    load_scene,
    parse_scene,
    sample_body,
)

GRID = GridSpec(resolution=(10, 10, 10), dx=0.25, origin=(-0.5, -0.5, -0.5))


def _scene_dict(**overrides) -> dict:
    data = {
        "materials": {
            "jelly": {"type": "Elastic", "density": 1000.0, "params": {"E": 1e4, "nu": 0.3}},
        },
        "bodies": [
            {"shape": {"kind": "box", "min": [0.4, 0.4, 0.4], "max": [0.6, 0.6, 0.6]},
             "material": "jelly"},
        ],
        "grid": {"resolution": [16, 16, 16], "bounds": [[0, 0, 0], [1, 1, 1]]},
        "sim": {"dt": 1e-3, "n_steps": 4, "output_stride": 2},
        "seed": 7,
    }
    data.update(overrides)
    return data


class TestSampleBody:
    """Tests for sample_body."""

    def test_unit_box_count(self):
        """Test a unit box at dx=0.25, ppc=8 gives 512 particles."""
        shape = BoxShape(min=(0.0, 0.0, 0.0), max=(1.0, 1.0, 1.0))
        positions, volumes = sample_body(shape, 8, GRID)
        assert len(positions) == 512
        assert np.allclose(volumes, 0.25 ** 3 / 8)

    def test_particles_inside_box(self):
        """Test jittered samples stay within the shape."""
        shape = BoxShape(min=(0.0, 0.0, 0.0), max=(1.0, 1.0, 1.0))
        positions, _ = sample_body(shape, 8, GRID)
        assert positions.min() >= 0.0
        assert positions.max() <= 1.0

    def test_sphere_count_near_expected(self):
        """Test sphere sampling lands within 20% of volume/dx^3*ppc."""
        shape = SphereShape(center=(0.5, 0.5, 0.5), radius=0.5)
        positions, _ = sample_body(shape, 8, GRID)
        expected = 4.0 / 3.0 * np.pi * 0.5 ** 3 / 0.25 ** 3 * 8
        assert abs(len(positions) - expected) / expected < 0.2

    def test_seeded_generator_is_deterministic(self):
        """Test the same seed reproduces the same particles."""
        shape = BoxShape(min=(0.0, 0.0, 0.0), max=(1.0, 1.0, 1.0))
        a, _ = sample_body(shape, 8, GRID, np.random.default_rng(3))
        b, _ = sample_body(shape, 8, GRID, np.random.default_rng(3))
        c, _ = sample_body(shape, 8, GRID, np.random.default_rng(4))
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_shape_outside_grid(self):
        """Test a shape beyond the grid is rejected."""
        shape = BoxShape(min=(5.0, 5.0, 5.0), max=(6.0, 6.0, 6.0))
        with pytest.raises(SceneError, match="outside the grid"):
            sample_body(shape, 8, GRID)

    def test_shape_crossing_interior(self):
        """Test a shape reaching the outer node layer is rejected."""
        shape = BoxShape(min=(-0.45, 0.0, 0.0), max=(0.5, 0.5, 0.5))
        with pytest.raises(SceneError, match="interior"):
            sample_body(shape, 8, GRID)

    def test_zero_ppc(self):
        """Test ppc must be positive."""
        shape = BoxShape(min=(0.0, 0.0, 0.0), max=(1.0, 1.0, 1.0))
        with pytest.raises(SceneError):
            sample_body(shape, 0, GRID)


class TestPointCloud:
    """Tests for point-cloud files."""

    def test_three_columns_share_bbox_volume(self, tmp_path):
        """Test volumes default to bounding box / count."""
        path = tmp_path / "cloud.xyz"
        path.write_text("# corners\n0 0 0\n1 0 0\n0 1 0\n1 1 1  # far\n")
        cloud = load_point_cloud(path)
        assert cloud.positions.shape == (4, 3)
        assert np.allclose(cloud.volumes, 0.25)

    def test_volume_column(self, tmp_path):
        """Test an explicit volume column is used as-is."""
        path = tmp_path / "cloud.xyz"
        path.write_text("0.1 0.2 0.3 0.001\n0.4,0.5,0.6,0.002\n")
        cloud = load_point_cloud(path)
        assert cloud.volumes.tolist() == [0.001, 0.002]

    def test_bad_line_reports_location(self, tmp_path):
        """Test malformed lines name file and line number."""
        path = tmp_path / "cloud.xyz"
        path.write_text("0 0 0\n1 2\n")
        with pytest.raises(SceneError, match=r"cloud.xyz:2"):
            load_point_cloud(path)

    def test_non_numeric(self, tmp_path):
        """Test non-numeric tokens are rejected."""
        path = tmp_path / "cloud.xyz"
        path.write_text("0 0 zero\n")
        with pytest.raises(SceneError, match="non-numeric"):
            load_point_cloud(path)

    def test_empty_cloud(self, tmp_path):
        """Test a file with only comments is rejected."""
        path = tmp_path / "cloud.xyz"
        path.write_text("# nothing\n")
        with pytest.raises(SceneError, match="empty"):
            load_point_cloud(path)

    def test_sample_resolves_relative_path(self, tmp_path):
        """Test point-cloud shapes resolve paths against the scene directory."""
        (tmp_path / "cloud.xyz").write_text("0.1 0.1 0.1 1e-6\n0.2 0.2 0.2 1e-6\n")
        positions, volumes = sample_body(PointCloudShape(path="cloud.xyz"), 8, GRID,
                                         base_dir=tmp_path)
        assert len(positions) == 2
        assert np.allclose(volumes, 1e-6)


class TestSceneFiles:
    """Tests for scene parsing and loading."""

    def test_parse_defaults(self):
        """Test omitted sections get defaults."""
        spec = parse_scene(_scene_dict())
        assert spec.camera.width == 128
        assert spec.to_config().n_steps == 4

    def test_unknown_field_rejected(self):
        """Test typos in scene keys surface as SceneError."""
        with pytest.raises(SceneError, match="bodies"):
            parse_scene(_scene_dict(bodies=[{"shape": {"kind": "box", "min": [0, 0, 0],
                                                        "max": [1, 1, 1]},
                                              "material": "jelly", "pcc": 8}]))

    def test_incomplete_material_rejected(self):
        """Test a material missing an active parameter fails with its path."""
        data = _scene_dict(materials={"m": {"type": "Plasticine", "density": 1.0,
                                            "params": {"E": 1e4, "nu": 0.3}}})
        with pytest.raises(SceneError, match="materials.m"):
            parse_scene(data)

    def test_load_jsonc(self, tmp_path):
        """Test scene files may carry // comments."""
        path = tmp_path / "scene.json"
        path.write_text("// test scene\n" + json.dumps(_scene_dict()))
        assert load_scene(path).seed == 7

    def test_missing_file(self, tmp_path):
        """Test a missing scene file raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            load_scene(tmp_path / "missing.json")


class TestBuildScene:
    """Tests for build_scene and SceneState."""

    def test_masses_follow_density(self):
        """Test particle mass = density * volume0."""
        state = build_scene(parse_scene(_scene_dict()))
        p = state.particles
        assert p.n_particles > 0
        assert np.allclose(p.mass, 1000.0 * p.volume0)

    def test_seed_reproducible(self):
        """Test the scene seed fixes the particle layout."""
        spec = parse_scene(_scene_dict())
        a = build_scene(spec).particles.x.val
        b = build_scene(spec).particles.x.val
        c = build_scene(spec, seed=8).particles.x.val
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_unknown_material(self):
        """Test a body naming an undefined material fails."""
        data = _scene_dict()
        data["bodies"][0]["material"] = "goo"
        with pytest.raises(SceneError, match="goo"):
            build_scene(parse_scene(data))

    def test_prior_wins_over_scene_table(self):
        """Test prior materials replace the scene's own entries."""
        prior = {"jelly": MaterialModel(MaterialType.ELASTIC,
                                        MaterialParams(E=5e4, nu=0.2), 500.0)}
        state = build_scene(parse_scene(_scene_dict()), prior=prior)
        assert state.material("jelly").params.value("E") == 5e4
        assert np.allclose(state.particles.mass, 500.0 * state.particles.volume0)

    def test_with_params_keeps_masses(self):
        """Test rebinding parameters leaves particles untouched."""
        state = build_scene(parse_scene(_scene_dict()))
        other = state.with_params("jelly", MaterialParams(E=2e4, nu=0.3))
        assert other.material("jelly").params.value("E") == 2e4
        assert state.material("jelly").params.value("E") == 1e4
        assert other.particles is state.particles

    def test_unknown_material_lookup(self):
        """Test asking for a missing material name fails."""
        state = build_scene(parse_scene(_scene_dict()))
        with pytest.raises(SceneError):
            state.material("nope")

    def test_simulate_snapshot_count(self):
        """Test simulate emits the configured snapshots."""
        state = build_scene(parse_scene(_scene_dict()))
        trajectory = state.simulate()
        assert len(trajectory) == state.config.n_snapshots == 3
