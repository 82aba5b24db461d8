"""
Scene Construction

Parses scene files, samples particles for each body and binds materials:
- SceneSpec: validated scene schema (pydantic)
- sample_body: jittered-lattice sampling of boxes, spheres and point clouds
- load_point_cloud: ``x y z [volume]`` text files
- build_scene: particles + materials + SimConfig + Camera

Scene files are JSON; full-line ``//`` comments are allowed so that units
can be documented inline.

Usage:
    from mpmflow.scene import load_scene, build_scene

    spec = load_scene("benchmarks/elastic_block_drop.json")
    scene = build_scene(spec, prior)
    trajectory = scene.simulate()
"""

import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .constitutive import ACTIVE_PARAMS, PARAM_NAMES, MaterialModel, MaterialParams, MaterialType
from .engine import (
    BoundaryCondition,
    ExternalForce,
    GridSpec,
    ParticleState,
    SimConfig,
    Simulator,
    Trajectory,
)
from .flow import Camera
from .manifest import ConfigFileError, read_jsonc

logger = logging.getLogger("mpmflow.scene")

Vec3 = Tuple[float, float, float]

JITTER = 0.25


class SceneError(ValueError):
    """Raised for invalid scenes, bodies or point clouds."""
    pass


def format_validation_error(error: ValidationError, prefix: str = "") -> str:
    """Render pydantic errors as ``dotted.path: message`` lines."""
    lines = []
    for item in error.errors():
        path = ".".join(str(part) for part in item["loc"] if part != "__root__")
        if prefix:
            path = f"{prefix}.{path}" if path else prefix
        lines.append(f"{path or '<root>'}: {item['msg']}")
    return "; ".join(lines)


# =============================================================================
# SCHEMA
# =============================================================================


class _Schema(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MaterialEntry(_Schema):
    """One material: type, density [kg/m^3] and the active parameters."""
    type: str
    density: float = Field(gt=0.0)
    params: Dict[str, float] = Field(default_factory=dict)

    @field_validator("type")
    @classmethod
    def _known_type(cls, value: str) -> str:
        return MaterialType.parse(value).value

    @field_validator("params")
    @classmethod
    def _known_params(cls, value: Dict[str, float]) -> Dict[str, float]:
        unknown = sorted(set(value) - set(PARAM_NAMES))
        if unknown:
            raise ValueError(f"unknown parameter names {unknown}")
        return value

    @model_validator(mode="after")
    def _active_complete(self) -> "MaterialEntry":
        kind = MaterialType.parse(self.type)
        missing = [name for name in ACTIVE_PARAMS[kind] if name not in self.params]
        if missing:
            raise ValueError(
                f"{kind.value} requires {list(ACTIVE_PARAMS[kind])}; missing {missing}"
            )
        MaterialParams.from_dict(self.params).validate(kind)
        return self

    def to_model(self) -> MaterialModel:
        return MaterialModel(
            kind=MaterialType.parse(self.type),
            params=MaterialParams.from_dict(self.params),
            density=self.density,
        )

    @classmethod
    def from_model(cls, model: MaterialModel) -> "MaterialEntry":
        return cls(
            type=model.kind.value,
            density=model.density,
            params=model.params.to_dict(model.kind),
        )


class BoxShape(_Schema):
    kind: Literal["box"] = "box"
    min: Vec3
    max: Vec3

    @model_validator(mode="after")
    def _ordered(self) -> "BoxShape":
        if any(hi <= lo for lo, hi in zip(self.min, self.max)):
            raise ValueError("box max must exceed min on every axis")
        return self


class SphereShape(_Schema):
    kind: Literal["sphere"] = "sphere"
    center: Vec3
    radius: float = Field(gt=0.0)


class PointCloudShape(_Schema):
    kind: Literal["point_cloud"] = "point_cloud"
    path: str


Shape = Annotated[Union[BoxShape, SphereShape, PointCloudShape], Field(discriminator="kind")]


class BodySpec(_Schema):
    shape: Shape
    material: str
    ppc: int = Field(default=8, ge=1)
    velocity: Vec3 = (0.0, 0.0, 0.0)


class GridModel(_Schema):
    """Grid as ``resolution`` plus either ``dx``/``origin`` or ``bounds``."""
    resolution: Tuple[int, int, int] = (32, 32, 32)
    dx: Optional[float] = Field(default=None, gt=0.0)
    origin: Vec3 = (0.0, 0.0, 0.0)
    bounds: Optional[Tuple[Vec3, Vec3]] = None

    @model_validator(mode="after")
    def _one_spacing(self) -> "GridModel":
        if min(self.resolution) < 8:
            raise ValueError("resolution must be at least 8 on every axis")
        if self.dx is not None and self.bounds is not None:
            raise ValueError("give either dx or bounds, not both")
        if self.bounds is not None and any(hi <= lo for lo, hi in zip(*self.bounds)):
            raise ValueError("bounds max must exceed min on every axis")
        return self

    def to_spec(self) -> GridSpec:
        if self.bounds is not None:
            lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
            dx = float(np.max((hi - lo) / (np.asarray(self.resolution) - 1)))
            return GridSpec(resolution=self.resolution, dx=dx, origin=tuple(lo))
        dx = self.dx if self.dx is not None else 1.0 / (max(self.resolution) - 1)
        return GridSpec(resolution=self.resolution, dx=dx, origin=self.origin)


class CameraModel(_Schema):
    """Pinhole camera; give ``target`` or ``forward``."""
    position: Vec3 = (0.5, 0.5, 2.0)
    target: Optional[Vec3] = None
    forward: Optional[Vec3] = None
    up: Vec3 = (0.0, 1.0, 0.0)
    focal: float = Field(default=160.0, gt=0.0)
    width: int = Field(default=128, ge=16)
    height: int = Field(default=128, ge=16)

    def to_camera(self) -> Camera:
        if self.target is not None:
            return Camera.look_at(self.position, self.target, self.up, self.focal,
                                  self.width, self.height)
        forward = self.forward if self.forward is not None else (0.0, 0.0, -1.0)
        return Camera(self.position, forward, self.up, self.focal, self.width, self.height)


class ForceModel(_Schema):
    kind: Literal["gravity", "impulse"]
    vector: Vec3
    region: Tuple[Vec3, Vec3]
    window: Tuple[float, Optional[float]] = (0.0, None)

    def to_force(self) -> ExternalForce:
        t_end = math.inf if self.window[1] is None else self.window[1]
        return ExternalForce(self.kind, self.vector, self.region, (self.window[0], t_end))


class BoundaryModel(_Schema):
    kind: Literal["slip_plane", "sticky_plane", "box_walls"]
    point: Vec3 = (0.0, 0.0, 0.0)
    normal: Vec3 = (0.0, 1.0, 0.0)
    friction: float = Field(default=0.0, ge=0.0)
    thickness: Optional[float] = Field(default=None, gt=0.0)

    def to_boundary(self) -> BoundaryCondition:
        return BoundaryCondition(self.kind, self.point, self.normal, self.friction, self.thickness)


class SimModel(_Schema):
    dt: float = Field(default=2e-4, gt=0.0)
    n_steps: int = Field(default=60, ge=0)
    gravity: Vec3 = (0.0, -9.8, 0.0)
    output_stride: int = Field(default=1, ge=1)
    threads: int = Field(default=0, ge=0)


class SceneSpec(_Schema):
    """Complete scene description."""
    materials: Dict[str, MaterialEntry] = Field(default_factory=dict)
    bodies: List[BodySpec] = Field(min_length=1)
    grid: GridModel = Field(default_factory=GridModel)
    camera: CameraModel = Field(default_factory=CameraModel)
    forces: List[ForceModel] = Field(default_factory=list)
    boundaries: List[BoundaryModel] = Field(default_factory=list)
    sim: SimModel = Field(default_factory=SimModel)
    seed: int = 0
    base_dir: Optional[str] = Field(default=None, exclude=True)

    def to_config(self, threads: Optional[int] = None) -> SimConfig:
        return SimConfig(
            dt=self.sim.dt,
            n_steps=self.sim.n_steps,
            gravity=self.sim.gravity,
            grid=self.grid.to_spec(),
            boundaries=[b.to_boundary() for b in self.boundaries],
            forces=[f.to_force() for f in self.forces],
            output_stride=self.sim.output_stride,
            threads=self.sim.threads if threads is None else threads,
        )


def parse_scene(data: Dict[str, Any], base_dir: Optional[Union[str, Path]] = None) -> SceneSpec:
    """Validate a scene dictionary."""
    try:
        spec = SceneSpec.model_validate(data)
    except ValidationError as e:
        raise SceneError(f"Invalid scene: {format_validation_error(e)}") from e
    spec.base_dir = str(base_dir) if base_dir is not None else None
    return spec


def load_scene(path: Union[str, Path]) -> SceneSpec:
    """Load and validate a scene file; point-cloud paths resolve relative to it."""
    path = Path(path)
    try:
        data = read_jsonc(path)
    except ConfigFileError as e:
        raise SceneError(str(e)) from e
    return parse_scene(data, base_dir=path.parent)


# =============================================================================
# SAMPLING
# =============================================================================


@dataclass
class PointCloud:
    positions: np.ndarray
    volumes: np.ndarray


def load_point_cloud(path: Union[str, Path]) -> PointCloud:
    """
    Read ``x y z`` (optionally ``x y z volume``) lines; ``#`` starts a comment.

    Without a volume column every point gets bounding-box volume / count.
    """
    path = Path(path)
    rows: List[List[float]] = []
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.replace(",", " ").split()
            if len(tokens) not in (3, 4):
                raise SceneError(f"{path}:{lineno}: expected 'x y z [volume]', got '{line}'")
            try:
                values = [float(token) for token in tokens]
            except ValueError:
                raise SceneError(f"{path}:{lineno}: non-numeric value in '{line}'")
            if not all(math.isfinite(v) for v in values):
                raise SceneError(f"{path}:{lineno}: non-finite value in '{line}'")
            if rows and len(values) != len(rows[0]):
                raise SceneError(f"{path}:{lineno}: column count differs from earlier lines")
            if len(values) == 4 and values[3] <= 0.0:
                raise SceneError(f"{path}:{lineno}: volume must be > 0")
            rows.append(values)
    if not rows:
        raise SceneError(f"{path}: point cloud is empty")

    table = np.asarray(rows, dtype=np.float64)
    positions = table[:, :3].copy()
    if table.shape[1] == 4:
        return PointCloud(positions, table[:, 3].copy())
    extent = positions.max(axis=0) - positions.min(axis=0)
    box_volume = float(np.prod(extent))
    if box_volume <= 0.0:
        raise SceneError(f"{path}: degenerate bounding box; add a volume column")
    return PointCloud(positions, np.full(len(positions), box_volume / len(positions)))


def _interior(grid: GridSpec) -> Tuple[np.ndarray, np.ndarray]:
    return grid.lower + grid.dx, grid.upper - grid.dx


def sample_body(
    shape: Union[BoxShape, SphereShape, PointCloudShape],
    ppc: int,
    grid: GridSpec,
    rng: Optional[np.random.Generator] = None,
    base_dir: Optional[Union[str, Path]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sample particle positions and initial volumes for one body.

    Primitive shapes use a lattice with ``ppc`` points per grid cell,
    jittered by a quarter of the lattice spacing; each particle gets
    volume dx^3 / ppc.
    """
    if ppc < 1:
        raise SceneError(f"ppc must be >= 1, got {ppc}")
    rng = rng if rng is not None else np.random.default_rng(0)
    lo_dom, hi_dom = _interior(grid)

    if isinstance(shape, PointCloudShape):
        path = Path(shape.path)
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        cloud = load_point_cloud(path)
        outside = np.any((cloud.positions < lo_dom) | (cloud.positions > hi_dom), axis=-1)
        if np.any(outside):
            raise SceneError(
                f"{path}: {int(np.count_nonzero(outside))} points lie outside the grid interior"
            )
        return cloud.positions, cloud.volumes

    if isinstance(shape, BoxShape):
        lo, hi = np.asarray(shape.min, float), np.asarray(shape.max, float)

        def contains(p):
            return np.all((p >= lo) & (p <= hi), axis=-1)
    else:
        center = np.asarray(shape.center, float)
        lo, hi = center - shape.radius, center + shape.radius

        def contains(p):
            return np.sum((p - center) ** 2, axis=-1) <= shape.radius ** 2

    if np.any(hi < lo_dom) or np.any(lo > hi_dom):
        raise SceneError(f"{shape.kind} at [{lo.tolist()}, {hi.tolist()}] lies outside the grid")
    if np.any(lo < lo_dom) or np.any(hi > hi_dom):
        raise SceneError(
            f"{shape.kind} at [{lo.tolist()}, {hi.tolist()}] extends past the grid interior "
            f"[{lo_dom.tolist()}, {hi_dom.tolist()}]"
        )

    spacing = grid.dx / ppc ** (1.0 / 3.0)
    counts = np.maximum(1, np.ceil((hi - lo) / spacing - 1e-9).astype(np.int64))
    axes = [lo[a] + (np.arange(counts[a]) + 0.5) * spacing for a in range(3)]
    lattice = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    lattice = lattice + rng.uniform(-JITTER, JITTER, size=lattice.shape) * spacing
    positions = lattice[contains(lattice)]
    if len(positions) == 0:
        raise SceneError(f"{shape.kind} produced no particles; increase ppc or refine the grid")
    return positions, np.full(len(positions), grid.dx ** 3 / ppc)


# =============================================================================
# SCENE STATE
# =============================================================================


@dataclass
class SceneState:
    """Simulation-ready scene: particles, bound materials, config and camera."""
    particles: ParticleState
    materials: List[MaterialModel]
    material_names: List[str]
    config: SimConfig
    camera: Camera
    seed: int = 0

    def material_index(self, name: str) -> int:
        try:
            return self.material_names.index(name)
        except ValueError:
            raise SceneError(f"Scene has no material '{name}' (have {self.material_names})")

    def material(self, name: str) -> MaterialModel:
        return self.materials[self.material_index(name)]

    def rebind(self, name: str, model: MaterialModel) -> "SceneState":
        """Copy with one material swapped; particle masses are unchanged."""
        index = self.material_index(name)
        materials = list(self.materials)
        materials[index] = model
        return replace(self, materials=materials)

    def with_params(self, name: str, params: MaterialParams) -> "SceneState":
        model = self.material(name)
        return self.rebind(name, MaterialModel(model.kind, params, model.density))

    def simulate(self, sink=None, n_tangents: int = 0) -> Trajectory:
        particles = self.particles
        if particles.n_tangents != n_tangents:
            particles = particles.with_tangents(n_tangents)
        return Simulator(self.config, self.materials).run(particles, sink)


def build_scene(
    spec: SceneSpec,
    prior: Optional[Mapping[str, MaterialModel]] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
) -> SceneState:
    """
    Sample every body and bind its material.

    Material names resolve in ``prior`` first, then in the scene's own
    ``materials`` table.
    """
    prior = prior if prior is not None else {}
    seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    config = spec.to_config(threads)
    try:
        config.validate()
    except ValueError as e:
        raise SceneError(f"Invalid simulation config: {e}") from e
    grid = config.grid

    names: List[str] = []
    materials: List[MaterialModel] = []
    chunks = []
    for i, body in enumerate(spec.bodies):
        if body.material not in names:
            if body.material in prior:
                model = prior[body.material]
            elif body.material in spec.materials:
                model = spec.materials[body.material].to_model()
            else:
                raise SceneError(
                    f"bodies.{i}.material: unknown material '{body.material}'"
                )
            names.append(body.material)
            materials.append(model.validate())
        mid = names.index(body.material)
        model = materials[mid]
        positions, volumes = sample_body(body.shape, body.ppc, grid, rng, spec.base_dir)
        chunks.append((positions, volumes, model.density * volumes, mid, body.velocity))
        logger.debug(f"Body {i} ({body.shape.kind}, {body.material}): {len(positions)} particles")

    positions = np.concatenate([c[0] for c in chunks])
    volumes = np.concatenate([c[1] for c in chunks])
    mass = np.concatenate([c[2] for c in chunks])
    material_id = np.concatenate([np.full(len(c[0]), c[3]) for c in chunks])
    velocity = np.concatenate([np.tile(np.asarray(c[4], float), (len(c[0]), 1)) for c in chunks])

    particles = ParticleState.create(positions, velocity, mass, volumes, material_id)
    logger.info(
        f"Built scene: {particles.n_particles} particles, materials {names}, seed {seed}"
    )
    return SceneState(
        particles=particles,
        materials=materials,
        material_names=names,
        config=config,
        camera=spec.camera.to_camera().validate(),
        seed=seed,
    )


__all__: List[str] = [
    "SceneError",
    "MaterialEntry",
    "BoxShape",
    "SphereShape",
    "PointCloudShape",
    "BodySpec",
    "GridModel",
    "CameraModel",
    "ForceModel",
    "BoundaryModel",
    "SimModel",
    "SceneSpec",
    "PointCloud",
    "SceneState",
    "format_validation_error",
    "parse_scene",
    "load_scene",
    "load_point_cloud",
    "sample_body",
    "build_scene",
]
