"""
Optical Flow Synthesis

Turns particle motion into dense image-plane flow and compares flow fields:
- Camera: pinhole model, top-left origin, +x right, +y down
- synth_flow: Gaussian splatting of projected displacements with
  nearest-depth preference
- flow_loss: summed squared endpoint error on the jointly valid pixels
- read_flo / write_flo: Middlebury ``.flo`` files

Usage:
    from mpmflow.flow import Camera, synth_flow, flow_loss

    cam = Camera.look_at(position=(0.5, 0.5, 2.0), target=(0.5, 0.5, 0.5))
    field = synth_flow(frame_a, frame_b, cam)
    result = flow_loss(observed, simulated)
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .core import Dual, as_dual, exp, scatter_add, stack, where
from .engine import Snapshot

logger = logging.getLogger("mpmflow.flow")

FLO_MAGIC = 202021.25
# Middlebury marks unknown flow with magnitudes above this threshold.
UNKNOWN_FLOW_THRESHOLD = 1e9
UNKNOWN_FLOW_VALUE = 1e10
FLOW_PATTERN = "flow_%05d.flo"

DEFAULT_SPLAT_RADIUS = 1.5
DEPTH_BAND_FRACTION = 0.02
MIN_DEPTH = 1e-6


class FlowError(ValueError):
    """Raised for mismatched flow inputs."""
    pass


class FlowFormatError(FlowError):
    """Raised when a ``.flo`` file is malformed."""
    pass


# =============================================================================
# CAMERA
# =============================================================================


@dataclass
class Camera:
    """
    Pinhole camera.

    ``forward`` is re-orthogonalized against ``up`` on construction. Focal
    length is in pixels; the principal point is the image centre.
    """
    position: Tuple[float, float, float] = (0.5, 0.5, 2.0)
    forward: Tuple[float, float, float] = (0.0, 0.0, -1.0)
    up: Tuple[float, float, float] = (0.0, 1.0, 0.0)
    focal: float = 160.0
    width: int = 128
    height: int = 128

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        d = np.asarray(self.forward, dtype=np.float64)
        up = np.asarray(self.up, dtype=np.float64)
        if np.linalg.norm(d) == 0.0:
            raise FlowError("Camera forward vector must be non-zero")
        d = d / np.linalg.norm(d)
        right = np.cross(d, up)
        if np.linalg.norm(right) < 1e-12:
            raise FlowError("Camera up vector must not be parallel to forward")
        right = right / np.linalg.norm(right)
        self.forward = d
        self.right = right
        self.up = np.cross(right, d)
        self.width = int(self.width)
        self.height = int(self.height)
        self.focal = float(self.focal)

    @classmethod
    def look_at(cls, position, target, up=(0.0, 1.0, 0.0), focal: float = 160.0,
                width: int = 128, height: int = 128) -> "Camera":
        forward = np.asarray(target, dtype=np.float64) - np.asarray(position, dtype=np.float64)
        return cls(position, forward, up, focal, width, height)

    def validate(self) -> "Camera":
        if not self.focal > 0.0:
            raise FlowError(f"Camera focal length must be > 0, got {self.focal}")
        if self.width < 16 or self.height < 16:
            raise FlowError(f"Camera image must be at least 16x16, got {self.width}x{self.height}")
        return self

    @property
    def principal_point(self) -> Tuple[float, float]:
        return self.width / 2.0, self.height / 2.0

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(),
            "forward": self.forward.tolist(),
            "up": self.up.tolist(),
            "focal": self.focal,
            "width": self.width,
            "height": self.height,
        }


def project(x, cam: Camera) -> Tuple[Dual, Dual, np.ndarray]:
    """
    Project world points to pixel coordinates.

    Returns ``(px, depth, valid)``; points with depth <= 1e-6 are marked
    invalid and their pixel coordinates are meaningless.
    """
    x = as_dual(x)
    q = x - cam.position
    depth = (q * cam.forward).sum(axis=-1)
    valid = depth.val > MIN_DEPTH
    safe_depth = where(valid, depth, 1.0)
    cx, cy = cam.principal_point
    u = cx + cam.focal * (q * cam.right).sum(axis=-1) / safe_depth
    v = cy - cam.focal * (q * cam.up).sum(axis=-1) / safe_depth
    return stack([u, v], axis=-1), depth, valid


# =============================================================================
# FLOW FIELDS
# =============================================================================


@dataclass
class FlowField:
    """
    Dense per-pixel flow ``uv[row, col] = (u, v)`` in pixels.

    Invalid pixels hold (0, 0). ``support`` counts the splats that
    contributed to each pixel (1 for valid pixels read from files).
    """
    width: int
    height: int
    uv: Dual
    valid: np.ndarray
    support: Optional[np.ndarray] = None

    def __post_init__(self):
        self.uv = as_dual(self.uv)
        self.valid = np.asarray(self.valid, dtype=bool)
        shape = (self.height, self.width)
        if self.uv.shape != shape + (2,) or self.valid.shape != shape:
            raise FlowError(
                f"Flow field arrays do not match {self.width}x{self.height}: "
                f"uv {self.uv.shape}, valid {self.valid.shape}"
            )
        if self.support is None:
            self.support = self.valid.astype(np.int64)

    @classmethod
    def from_array(cls, uv: np.ndarray, valid: Optional[np.ndarray] = None) -> "FlowField":
        uv = np.asarray(uv, dtype=np.float64)
        if valid is None:
            valid = np.ones(uv.shape[:2], dtype=bool)
        uv = np.where(valid[..., None], uv, 0.0)
        return cls(width=uv.shape[1], height=uv.shape[0], uv=Dual(uv), valid=valid)

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))

    def detach(self) -> "FlowField":
        return FlowField(self.width, self.height, self.uv.detach(), self.valid, self.support)

    def same_rasterization(self, other: "FlowField") -> bool:
        """True when both fields cover the same pixels with the same splat counts."""
        return (
            np.array_equal(self.valid, other.valid)
            and np.array_equal(self.support, other.support)
        )


def _pixel_window(radius: float) -> np.ndarray:
    reach = int(math.ceil(radius)) + 1
    span = np.arange(-reach, reach + 1)
    return np.stack(np.meshgrid(span, span, indexing="ij"), -1).reshape(-1, 2)


def synth_flow(frame_a: Snapshot, frame_b: Snapshot, cam: Camera,
               splat_radius: float = DEFAULT_SPLAT_RADIUS) -> FlowField:
    """
    Rasterize the image-plane displacement of every particle between two
    snapshots.

    Each particle splats onto pixels whose centre lies within
    ``splat_radius`` of its projection in ``frame_a``, weighted by a
    Gaussian with sigma = radius/2. Per pixel only splats within 2% of the
    depth range behind the front-most one are averaged.
    """
    if not np.array_equal(frame_a.ids, frame_b.ids):
        raise FlowError("Snapshots must contain identical particle ids in identical order")
    if not splat_radius > 0.0:
        raise FlowError(f"splat_radius must be > 0, got {splat_radius}")
    W, H = cam.width, cam.height

    px_a, depth_a, valid_a = project(frame_a.x, cam)
    px_b, _, valid_b = project(frame_b.x, cam)
    keep = np.nonzero(valid_a & valid_b)[0]
    k = max(px_a.n_tangents, px_b.n_tangents)

    def empty() -> FlowField:
        return FlowField(W, H, Dual.constant(np.zeros((H, W, 2)), k), np.zeros((H, W), bool),
                         np.zeros((H, W), np.int64))

    if len(keep) == 0:
        return empty()

    disp = (px_b - px_a)[keep]
    px = px_a[keep]
    depth = depth_a.val[keep]

    # candidate (particle, pixel) pairs
    window = _pixel_window(splat_radius)
    centre = np.floor(px.val).astype(np.int64)
    cols = centre[:, None, 0] + window[None, :, 0]
    rows = centre[:, None, 1] + window[None, :, 1]
    d2_val = (cols + 0.5 - px.val[:, None, 0]) ** 2 + (rows + 0.5 - px.val[:, None, 1]) ** 2
    hit = (cols >= 0) & (cols < W) & (rows >= 0) & (rows < H) & (d2_val <= splat_radius ** 2)
    p_idx, w_idx = np.nonzero(hit)
    if len(p_idx) == 0:
        return empty()
    pixel = rows[p_idx, w_idx] * W + cols[p_idx, w_idx]

    # nearest-depth preference
    band = DEPTH_BAND_FRACTION * float(depth.max() - depth.min())
    front = np.full(W * H, np.inf)
    np.minimum.at(front, pixel, depth[p_idx])
    kept = depth[p_idx] <= front[pixel] + band
    p_idx, w_idx, pixel = p_idx[kept], w_idx[kept], pixel[kept]

    centres = np.stack([cols[p_idx, w_idx] + 0.5, rows[p_idx, w_idx] + 0.5], axis=-1)
    offset = centres - px[p_idx]
    sigma = splat_radius / 2.0
    weight = exp(-(offset * offset).sum(axis=-1) / (2.0 * sigma * sigma))

    numerator = scatter_add(pixel, weight[:, None] * disp[p_idx], W * H)
    denominator = scatter_add(pixel, weight, W * H)
    support = np.bincount(pixel, minlength=W * H)
    valid = support > 0
    uv = where(valid[:, None], numerator / where(valid, denominator, 1.0)[:, None], 0.0)

    return FlowField(
        width=W,
        height=H,
        uv=uv.reshape(H, W, 2).with_tangents(k),
        valid=valid.reshape(H, W),
        support=support.reshape(H, W),
    )


def render_flow_sequence(trajectory: Sequence[Snapshot], cam: Camera,
                         splat_radius: float = DEFAULT_SPLAT_RADIUS) -> List[FlowField]:
    """Flow between each consecutive pair of snapshots."""
    return [
        synth_flow(trajectory[i], trajectory[i + 1], cam, splat_radius)
        for i in range(len(trajectory) - 1)
    ]


# =============================================================================
# LOSS
# =============================================================================


@dataclass
class FlowLoss:
    """Summed squared endpoint error and the number of pixels it covers."""
    value: Dual
    valid_count: int
    degenerate: bool = False
    per_frame: List[float] = field(default_factory=list)

    @property
    def per_pixel(self) -> float:
        return float(self.value.val) / self.valid_count if self.valid_count else 0.0


def flow_loss(observed: Sequence[FlowField], simulated: Sequence[FlowField]) -> FlowLoss:
    """
    Sum of ``|U - U_hat|^2`` over time and over pixels valid in both fields.

    Tangents come from the simulated side.
    """
    if len(observed) != len(simulated):
        raise FlowError(
            f"Flow sequences differ in length: {len(observed)} observed "
            f"vs {len(simulated)} simulated"
        )
    k = max((f.uv.n_tangents for f in simulated), default=0)
    total = Dual.constant(0.0, k)
    count = 0
    per_frame = []
    for t, (obs, sim) in enumerate(zip(observed, simulated)):
        if (obs.width, obs.height) != (sim.width, sim.height):
            raise FlowError(
                f"Frame {t}: observed {obs.width}x{obs.height} "
                f"vs simulated {sim.width}x{sim.height}"
            )
        joint = obs.valid & sim.valid
        n = int(np.count_nonzero(joint))
        if n == 0:
            per_frame.append(0.0)
            continue
        diff = sim.uv[joint] - obs.uv.val[joint]
        term = (diff * diff).sum()
        per_frame.append(float(term.val))
        total = total + term
        count += n

    degenerate = count == 0
    if degenerate and len(observed):
        logger.warning("Observed and simulated flow share no valid pixels; loss is degenerate")
    return FlowLoss(value=total, valid_count=count, degenerate=degenerate, per_frame=per_frame)


def endpoint_error(a: FlowField, b: FlowField) -> float:
    """Mean endpoint error over the joint valid mask (0 when empty)."""
    joint = a.valid & b.valid
    if not np.any(joint):
        return 0.0
    return float(np.mean(np.linalg.norm(a.uv.val[joint] - b.uv.val[joint], axis=-1)))


# =============================================================================
# MIDDLEBURY .flo I/O
# =============================================================================


def write_flo(flow: FlowField, path: Union[str, Path]):
    """Write little-endian Middlebury flow; invalid pixels become 1e10."""
    data = np.where(flow.valid[..., None], flow.uv.val, UNKNOWN_FLOW_VALUE).astype("<f4")
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([flow.width, flow.height], dtype="<i4").tofile(f)
        data.tofile(f)


def read_flo(path: Union[str, Path]) -> FlowField:
    """Read a Middlebury ``.flo`` file; |u| or |v| above 1e9 marks a pixel invalid."""
    with open(path, "rb") as f:
        magic = np.fromfile(f, dtype="<f4", count=1)
        if magic.size != 1:
            raise FlowFormatError(f"{path}: truncated header")
        if magic[0] != np.float32(FLO_MAGIC):
            raise FlowFormatError(f"{path}: bad magic {float(magic[0])!r}, expected {FLO_MAGIC}")
        dims = np.fromfile(f, dtype="<i4", count=2)
        if dims.size != 2:
            raise FlowFormatError(f"{path}: truncated header")
        width, height = int(dims[0]), int(dims[1])
        if width <= 0 or height <= 0:
            raise FlowFormatError(f"{path}: non-positive dimensions {width}x{height}")
        data = np.fromfile(f, dtype="<f4", count=2 * width * height)
    if data.size != 2 * width * height:
        raise FlowFormatError(
            f"{path}: truncated data, expected {2 * width * height} floats, got {data.size}"
        )
    uv = data.reshape(height, width, 2).astype(np.float64)
    valid = np.all(np.isfinite(uv) & (np.abs(uv) <= UNKNOWN_FLOW_THRESHOLD), axis=-1)
    return FlowField.from_array(uv, valid)


def write_flow_sequence(fields: Sequence[FlowField], out_dir: Union[str, Path]) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, flow in enumerate(fields):
        path = out_dir / (FLOW_PATTERN % t)
        write_flo(flow, path)
        paths.append(path)
    logger.info(f"Wrote {len(paths)} flow files to {out_dir}")
    return paths


def read_flow_sequence(flow_dir: Union[str, Path]) -> List[FlowField]:
    flow_dir = Path(flow_dir)
    if not flow_dir.is_dir():
        raise FileNotFoundError(f"Flow directory not found: {flow_dir}")
    return [read_flo(path) for path in sorted(flow_dir.glob("flow_*.flo"))]


__all__: List[str] = [
    "FlowError",
    "FlowFormatError",
    "Camera",
    "FlowField",
    "FlowLoss",
    "FLO_MAGIC",
    "FLOW_PATTERN",
    "DEFAULT_SPLAT_RADIUS",
    "project",
    "synth_flow",
    "render_flow_sequence",
    "flow_loss",
    "endpoint_error",
    "write_flo",
    "read_flo",
    "write_flow_sequence",
    "read_flow_sequence",
]
