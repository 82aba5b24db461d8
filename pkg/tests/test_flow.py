"""Tests for mpmflow.flow module."""

import numpy as np
import pytest

from mpmflow.core import Dual
from mpmflow.engine import Snapshot
from mpmflow.flow import (
    FLO_MAGIC,
    Camera,
    FlowError,
    FlowField,
    FlowFormatError,
    endpoint_error,
    flow_loss,
    project,
    read_flo,
    read_flow_sequence,
    render_flow_sequence,
    synth_flow,
    write_flo,
    write_flow_sequence,
)

CAM = Camera()


def _snapshot(positions, frame=0, tangent=None) -> Snapshot:
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    x = Dual(positions, tangent) if tangent is not None else Dual(positions)
    return Snapshot(
        frame=frame, step=frame, time=0.0, ids=np.arange(n), x=x,
        v=Dual(np.zeros((n, 3))), mass=np.ones(n),
    )


def _sheet(z=0.5, n=12) -> np.ndarray:
    """Square of points facing the default camera."""
    s = np.linspace(0.4, 0.6, n)
    gx, gy = np.meshgrid(s, s, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)], axis=-1)


class TestCamera:
    """Tests for Camera and project."""

    def test_default_basis(self):
        """Test the default camera looks down -z with +x right."""
        assert np.allclose(CAM.right, [1.0, 0.0, 0.0])
        assert np.allclose(CAM.up, [0.0, 1.0, 0.0])

    def test_axis_point_hits_principal_point(self):
        """Test a point on the optical axis projects to the image centre."""
        px, depth, valid = project(np.array([[0.5, 0.5, 0.5]]), CAM)
        assert np.allclose(px.val, [[64.0, 64.0]])
        assert depth.val[0] == pytest.approx(1.5)
        assert valid[0]

    def test_image_y_points_down(self):
        """Test a point above the axis lands in the upper half."""
        px, _, _ = project(np.array([[0.6, 0.6, 0.5]]), CAM)
        assert px.val[0, 0] == pytest.approx(64.0 + 160.0 * 0.1 / 1.5)
        assert px.val[0, 1] == pytest.approx(64.0 - 160.0 * 0.1 / 1.5)

    def test_point_behind_camera_invalid(self):
        """Test non-positive depth is masked."""
        _, _, valid = project(np.array([[0.5, 0.5, 3.0]]), CAM)
        assert not valid[0]

    def test_projection_tangent(self):
        """Test du/dx = f / depth."""
        x = Dual(np.array([[0.5, 0.5, 0.5]]), np.array([[[1.0, 0.0, 0.0]]]))
        px, _, _ = project(x, CAM)
        assert px.tan[0, 0, 0] == pytest.approx(160.0 / 1.5)
        assert px.tan[0, 0, 1] == pytest.approx(0.0)

    def test_parallel_up_rejected(self):
        """Test an up vector along the view direction fails."""
        with pytest.raises(FlowError):
            Camera(forward=(0.0, 1.0, 0.0), up=(0.0, 1.0, 0.0))

    def test_validate_focal(self):
        """Test zero focal length fails validation."""
        with pytest.raises(FlowError):
            Camera(focal=0.0).validate()


class TestSynthFlow:
    """Tests for synth_flow."""

    def test_static_scene_has_zero_flow(self):
        """Test identical frames give zero flow on every valid pixel."""
        frame = _snapshot(_sheet())
        flow = synth_flow(frame, frame, CAM)
        assert flow.n_valid > 0
        assert np.all(flow.uv.val == 0.0)

    def test_fronto_parallel_translation(self):
        """Test a sheet sliding along x moves every pixel by f*dx/depth."""
        sheet = _sheet()
        flow = synth_flow(_snapshot(sheet), _snapshot(sheet + [0.01, 0.0, 0.0], 1), CAM)
        uv = flow.uv.val[flow.valid]
        assert np.allclose(uv[:, 0], 160.0 * 0.01 / 1.5, atol=1e-12)
        assert np.allclose(uv[:, 1], 0.0, atol=1e-12)

    def test_invalid_pixels_hold_zero(self):
        """Test uncovered pixels are invalid with zero flow."""
        sheet = _sheet()
        flow = synth_flow(_snapshot(sheet), _snapshot(sheet + 0.01, 1), CAM)
        assert not flow.valid[0, 0]
        assert np.all(flow.uv.val[~flow.valid] == 0.0)

    def test_support_counts_splats(self):
        """Test support is positive exactly where pixels are valid."""
        frame = _snapshot(_sheet())
        flow = synth_flow(frame, frame, CAM)
        assert np.array_equal(flow.support > 0, flow.valid)

    def test_id_mismatch_raises(self):
        """Test snapshots with different particle ids are rejected."""
        a = _snapshot(_sheet())
        b = _snapshot(_sheet())
        b.ids = b.ids[::-1].copy()
        with pytest.raises(FlowError):
            synth_flow(a, b, CAM)

    def test_bad_radius_raises(self):
        """Test a non-positive splat radius is rejected."""
        frame = _snapshot(_sheet())
        with pytest.raises(FlowError):
            synth_flow(frame, frame, CAM, splat_radius=0.0)

    def test_flow_tangent_follows_motion(self):
        """Test d(u)/d(shift) = f/depth when the second frame is seeded."""
        sheet = _sheet()
        tangent = np.zeros((1,) + sheet.shape)
        tangent[0, :, 0] = 1.0
        flow = synth_flow(_snapshot(sheet), _snapshot(sheet, 1, tangent), CAM)
        assert np.allclose(flow.uv.tan[0][flow.valid][:, 0], 160.0 / 1.5)

    @pytest.mark.parametrize("seed,n", [(0, 2), (1, 5), (2, 7), (3, 10)])
    def test_matches_per_pixel_loop(self, seed, n):
        """Test small clouds against a plain per-pixel loop with radius 1."""
        rng = np.random.default_rng(seed)
        cam = Camera(focal=40.0, width=16, height=16)
        a = rng.uniform([0.42, 0.42, 0.3], [0.58, 0.58, 0.7], size=(n, 3))
        b = a + rng.uniform(-0.02, 0.02, size=(n, 3))
        flow = synth_flow(_snapshot(a), _snapshot(b, 1), cam, splat_radius=1.0)

        def pixel_of(p):
            depth = 2.0 - p[2]
            return 8.0 + 40.0 * (p[0] - 0.5) / depth, 8.0 - 40.0 * (p[1] - 0.5) / depth, depth

        proj_a = [pixel_of(p) for p in a]
        proj_b = [pixel_of(p) for p in b]
        depths = [d for _, _, d in proj_a]
        band = 0.02 * (max(depths) - min(depths))
        sigma = 0.5
        for row in range(16):
            for col in range(16):
                hits = []
                for i, (u, v, d) in enumerate(proj_a):
                    dist2 = (col + 0.5 - u) ** 2 + (row + 0.5 - v) ** 2
                    if dist2 <= 1.0:
                        hits.append((i, dist2, d))
                if not hits:
                    assert not flow.valid[row, col]
                    assert flow.support[row, col] == 0
                    assert np.all(flow.uv.val[row, col] == 0.0)
                    continue
                front = min(d for _, _, d in hits)
                kept = [(i, dist2) for i, dist2, d in hits if d <= front + band]
                num_u = num_v = den = 0.0
                for i, dist2 in kept:
                    w = np.exp(-dist2 / (2.0 * sigma * sigma))
                    num_u += w * (proj_b[i][0] - proj_a[i][0])
                    num_v += w * (proj_b[i][1] - proj_a[i][1])
                    den += w
                assert flow.valid[row, col]
                assert flow.support[row, col] == len(kept)
                assert flow.uv.val[row, col, 0] == pytest.approx(num_u / den, rel=1e-12, abs=1e-12)
                assert flow.uv.val[row, col, 1] == pytest.approx(num_v / den, rel=1e-12, abs=1e-12)

    def test_sequence_length(self):
        """Test N snapshots give N-1 flow fields."""
        frames = [_snapshot(_sheet(), i) for i in range(4)]
        assert len(render_flow_sequence(frames, CAM)) == 3


class TestFlowLoss:
    """Tests for flow_loss."""

    def test_self_loss_is_zero(self):
        """Test a flow compared with itself costs nothing."""
        frame = _snapshot(_sheet())
        flows = render_flow_sequence([frame, _snapshot(_sheet() + 0.01, 1)], CAM)
        result = flow_loss(flows, flows)
        assert float(result.value.val) == 0.0
        assert result.valid_count == flows[0].n_valid

    def test_sums_squared_endpoint_error(self):
        """Test the loss is the squared difference over joint pixels."""
        a = FlowField.from_array(np.zeros((2, 2, 2)))
        b = FlowField.from_array(np.full((2, 2, 2), 0.5))
        result = flow_loss([a], [b])
        assert float(result.value.val) == pytest.approx(4 * 0.5)
        assert result.per_pixel == pytest.approx(0.5)
        assert endpoint_error(a, b) == pytest.approx(np.sqrt(0.5))

    def test_disjoint_masks_are_degenerate(self):
        """Test no shared pixels gives a zero, degenerate loss."""
        mask = np.array([[True, False], [False, False]])
        a = FlowField.from_array(np.ones((2, 2, 2)), mask)
        b = FlowField.from_array(np.ones((2, 2, 2)), ~mask)
        result = flow_loss([a], [b])
        assert result.degenerate
        assert result.valid_count == 0
        assert float(result.value.val) == 0.0

    def test_length_mismatch_raises(self):
        """Test sequences of different lengths are rejected."""
        a = FlowField.from_array(np.zeros((2, 2, 2)))
        with pytest.raises(FlowError):
            flow_loss([a, a], [a])

    def test_size_mismatch_raises(self):
        """Test fields of different sizes are rejected."""
        with pytest.raises(FlowError):
            flow_loss([FlowField.from_array(np.zeros((2, 2, 2)))],
                      [FlowField.from_array(np.zeros((3, 2, 2)))])

    def test_tangents_come_from_simulated(self):
        """Test d(loss)/d(uv) = 2 * residual."""
        obs = FlowField.from_array(np.zeros((1, 1, 2)))
        sim = FlowField(1, 1, Dual(np.array([[[1.0, 0.0]]]), np.array([[[[1.0, 0.0]]]])),
                        np.ones((1, 1), bool))
        assert flow_loss([obs], [sim]).value.tan[0] == pytest.approx(2.0)

    def test_same_rasterization(self):
        """Test rasterization comparison uses mask and support."""
        frame = _snapshot(_sheet())
        a = synth_flow(frame, frame, CAM)
        b = synth_flow(frame, frame, CAM)
        assert a.same_rasterization(b)
        b.support = b.support * 2
        assert not a.same_rasterization(b)


class TestFloFiles:
    """Tests for .flo reading and writing."""

    def test_round_trip_bit_exact(self, tmp_path):
        """Test float32 flow survives a write/read cycle unchanged."""
        rng = np.random.default_rng(0)
        uv = rng.standard_normal((5, 7, 2)).astype(np.float32).astype(np.float64)
        valid = rng.random((5, 7)) > 0.3
        flow = FlowField.from_array(uv, valid)
        write_flo(flow, tmp_path / "a.flo")
        back = read_flo(tmp_path / "a.flo")
        assert (back.width, back.height) == (7, 5)
        assert np.array_equal(back.valid, valid)
        assert np.array_equal(back.uv.val, flow.uv.val)

    def test_one_pixel_file_size(self, tmp_path):
        """Test a 1x1 file is header (12 bytes) plus one float pair."""
        path = tmp_path / "p.flo"
        write_flo(FlowField.from_array(np.zeros((1, 1, 2))), path)
        assert path.stat().st_size == 20

    def test_header_layout(self, tmp_path):
        """Test magic and dimensions are little-endian."""
        path = tmp_path / "h.flo"
        write_flo(FlowField.from_array(np.zeros((3, 4, 2))), path)
        raw = path.read_bytes()
        assert np.frombuffer(raw[:4], "<f4")[0] == np.float32(FLO_MAGIC)
        assert np.frombuffer(raw[4:12], "<i4").tolist() == [4, 3]

    def test_bad_magic(self, tmp_path):
        """Test a wrong magic number is rejected."""
        path = tmp_path / "bad.flo"
        path.write_bytes(np.array([1.0, 0.0, 0.0, 0.0, 0.0], "<f4").tobytes())
        with pytest.raises(FlowFormatError, match="magic"):
            read_flo(path)

    def test_truncated_data(self, tmp_path):
        """Test missing pixel data is rejected."""
        path = tmp_path / "short.flo"
        header = np.array([FLO_MAGIC], "<f4").tobytes() + np.array([4, 4], "<i4").tobytes()
        path.write_bytes(header + np.zeros(3, "<f4").tobytes())
        with pytest.raises(FlowFormatError, match="truncated"):
            read_flo(path)

    def test_sequence_round_trip(self, tmp_path):
        """Test sequences are written and read back in order."""
        fields = [FlowField.from_array(np.full((2, 2, 2), float(i))) for i in range(3)]
        paths = write_flow_sequence(fields, tmp_path / "flow")
        assert [p.name for p in paths] == ["flow_00000.flo", "flow_00001.flo", "flow_00002.flo"]
        back = read_flow_sequence(tmp_path / "flow")
        assert [float(f.uv.val[0, 0, 0]) for f in back] == [0.0, 1.0, 2.0]

    def test_missing_directory(self, tmp_path):
        """Test a missing flow directory raises FileNotFoundError."""
        with pytest.raises(FileNotFoundError):
            read_flow_sequence(tmp_path / "nope")
