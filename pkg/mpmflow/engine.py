"""
MLS-MPM Time Stepper

Explicit moving-least-squares material point method on a uniform grid:
- P2G: quadratic B-spline scatter of mass and APIC momentum with the fused
  stress force
- Grid update: symplectic Euler with gravity, impulses and boundaries
- G2P: velocity gather, affine matrix, advection, deformation update and
  plastic return mapping

All state is held as ``Dual`` arrays, so one run also yields parameter
sensitivities when material parameters carry tangents.

Usage:
    from mpmflow.engine import SimConfig, GridSpec, Simulator

    config = SimConfig(dt=2e-4, n_steps=100, grid=GridSpec(resolution=(32, 32, 32), dx=1 / 31))
    trajectory = Simulator(config, materials).run(state)
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .constitutive import MaterialModel, kirchhoff_stress, return_map
from .core import (
    Dual,
    NonFiniteError,
    as_dual,
    assemble,
    concatenate,
    identity,
    matvec,
    outer,
    safe_norm,
    scatter_add,
    stack,
    where,
)

logger = logging.getLogger("mpmflow.engine")

# Relative threshold below which grid nodes count as empty.
MASS_FLOOR = 1e-12

_OFFSETS = np.array([(i, j, k) for i in range(3) for j in range(3) for k in range(3)])


class SimulationError(RuntimeError):
    """Base class for failures while stepping a simulation."""
    pass


class OutOfDomainError(SimulationError):
    """Raised when a particle leaves the grid interior."""
    pass


class SimulationBlowup(SimulationError):
    """Raised when a deformation gradient inverts or turns non-finite."""

    def __init__(self, message: str, particle_id: int = -1, step: int = -1):
        super().__init__(message)
        self.particle_id = particle_id
        self.step = step


# =============================================================================
# CONFIGURATION
# =============================================================================


@dataclass
class GridSpec:
    """Uniform background grid: node counts, spacing [m] and origin [m]."""
    resolution: Tuple[int, int, int] = (32, 32, 32)
    dx: float = 1.0 / 31.0
    origin: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        self.origin = tuple(float(o) for o in self.origin)
        self.dx = float(self.dx)

    def validate(self) -> "GridSpec":
        if len(self.resolution) != 3 or min(self.resolution) < 8:
            raise ValueError(f"Grid needs at least 8 nodes per axis, got {self.resolution}")
        if not self.dx > 0.0:
            raise ValueError(f"Grid dx must be > 0, got {self.dx}")
        return self

    @property
    def n_nodes(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + (np.asarray(self.resolution) - 1) * self.dx

    def node_positions(self) -> np.ndarray:
        """World positions of all nodes in linear (x-major) order."""
        nx, ny, nz = self.resolution
        idx = np.stack(np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"), -1)
        return self.lower + idx.reshape(-1, 3) * self.dx

    def linear_index(self, node: np.ndarray) -> np.ndarray:
        _, ny, nz = self.resolution
        return (node[..., 0] * ny + node[..., 1]) * nz + node[..., 2]


class ForceKind(Enum):
    GRAVITY = "gravity"
    IMPULSE = "impulse"


@dataclass
class ExternalForce:
    """
    External load on grid nodes inside ``region`` during ``window``.

    Gravity vectors are accelerations [m/s^2]; impulse vectors are total
    momentum [N*s] spread evenly over the steps of the window.
    """
    kind: ForceKind
    vector: Tuple[float, float, float]
    region: Tuple[Tuple[float, float, float], Tuple[float, float, float]]
    window: Tuple[float, float] = (0.0, math.inf)

    def __post_init__(self):
        self.kind = ForceKind(self.kind)
        self.vector = np.asarray(self.vector, dtype=np.float64)

    def validate(self) -> "ExternalForce":
        lo, hi = np.asarray(self.region[0]), np.asarray(self.region[1])
        if np.any(hi <= lo):
            raise ValueError(f"Force region must be non-empty, got {self.region}")
        if self.window[1] < self.window[0]:
            raise ValueError(f"Force window must satisfy t_start <= t_end, got {self.window}")
        return self

    def active_at(self, t: float, dt: float) -> bool:
        t0, t1 = self.window
        t1 = max(t1, t0 + dt)
        return t0 - 0.5 * dt <= t < t1 - 0.5 * dt

    def window_steps(self, dt: float, n_steps: int) -> int:
        return sum(1 for s in range(n_steps) if self.active_at(s * dt, dt))

    def inside(self, points: np.ndarray) -> np.ndarray:
        lo, hi = np.asarray(self.region[0]), np.asarray(self.region[1])
        return np.all((points >= lo) & (points <= hi), axis=-1)


class BoundaryKind(Enum):
    SLIP_PLANE = "slip_plane"
    STICKY_PLANE = "sticky_plane"
    BOX_WALLS = "box_walls"


@dataclass
class BoundaryCondition:
    """
    Grid boundary.

    Planes act on nodes behind them, ``(x - point) . normal <= 0``; the
    normal points into the fluid/solid side. ``BOX_WALLS`` places six slip
    planes ``thickness`` metres inside the grid.
    """
    kind: BoundaryKind
    point: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    normal: Tuple[float, float, float] = (0.0, 1.0, 0.0)
    friction: float = 0.0
    thickness: Optional[float] = None

    def __post_init__(self):
        self.kind = BoundaryKind(self.kind)
        normal = np.asarray(self.normal, dtype=np.float64)
        norm = np.linalg.norm(normal)
        if self.kind != BoundaryKind.BOX_WALLS and norm == 0.0:
            raise ValueError("Boundary plane normal must be non-zero")
        self.normal = normal / norm if norm > 0.0 else normal
        self.point = np.asarray(self.point, dtype=np.float64)

    def planes(self, grid: GridSpec) -> List["BoundaryCondition"]:
        """Expand into concrete planes."""
        if self.kind != BoundaryKind.BOX_WALLS:
            return [self]
        thickness = self.thickness if self.thickness is not None else 3.0 * grid.dx
        planes = []
        for axis in range(3):
            normal = np.zeros(3)
            normal[axis] = 1.0
            planes.append(BoundaryCondition(
                BoundaryKind.SLIP_PLANE, grid.lower + thickness, normal, self.friction
            ))
            planes.append(BoundaryCondition(
                BoundaryKind.SLIP_PLANE, grid.upper - thickness, -normal, self.friction
            ))
        return planes

    def validate(self, grid: GridSpec) -> "BoundaryCondition":
        if self.friction < 0.0:
            raise ValueError(f"Boundary friction must be >= 0, got {self.friction}")
        for plane in self.planes(grid):
            if np.any(plane.point < grid.lower) or np.any(plane.point > grid.upper):
                raise ValueError(f"Boundary plane at {plane.point.tolist()} lies outside the grid")
        return self


@dataclass
class SimConfig:
    """Time stepping, grid, loads, boundaries and output cadence."""
    dt: float = 2e-4
    n_steps: int = 60
    gravity: Tuple[float, float, float] = (0.0, -9.8, 0.0)
    grid: GridSpec = field(default_factory=GridSpec)
    boundaries: List[BoundaryCondition] = field(default_factory=list)
    forces: List[ExternalForce] = field(default_factory=list)
    output_stride: int = 1
    threads: int = 0

    def validate(self) -> "SimConfig":
        if not self.dt > 0.0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if self.n_steps < 0:
            raise ValueError(f"n_steps must be >= 0, got {self.n_steps}")
        if self.output_stride < 1:
            raise ValueError(f"output_stride must be >= 1, got {self.output_stride}")
        if self.threads < 0:
            raise ValueError(f"threads must be >= 0, got {self.threads}")
        self.grid.validate()
        for boundary in self.boundaries:
            boundary.validate(self.grid)
        for force in self.forces:
            force.validate()
        return self

    @property
    def n_snapshots(self) -> int:
        """Snapshots ``Simulator.run`` emits: the initial state plus strided and final steps."""
        emitted = {s for s in range(1, self.n_steps + 1) if s % self.output_stride == 0}
        if self.n_steps > 0:
            emitted.add(self.n_steps)
        return 1 + len(emitted)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dt": self.dt,
            "n_steps": self.n_steps,
            "gravity": list(self.gravity),
            "grid": {
                "resolution": list(self.grid.resolution),
                "dx": self.grid.dx,
                "origin": list(self.grid.origin),
            },
            "boundaries": [
                {
                    "kind": b.kind.value,
                    "point": b.point.tolist(),
                    "normal": b.normal.tolist(),
                    "friction": b.friction,
                    "thickness": b.thickness,
                }
                for b in self.boundaries
            ],
            "forces": [
                {
                    "kind": f.kind.value,
                    "vector": f.vector.tolist(),
                    "region": [list(f.region[0]), list(f.region[1])],
                    "window": [f.window[0], None if math.isinf(f.window[1]) else f.window[1]],
                }
                for f in self.forces
            ],
            "output_stride": self.output_stride,
            "threads": self.threads,
        }


# =============================================================================
# STATE
# =============================================================================


@dataclass
class ParticleState:
    """Struct-of-arrays particle set at one instant."""
    x: Dual
    v: Dual
    F: Dual
    C: Dual
    mass: np.ndarray
    volume0: np.ndarray
    material_id: np.ndarray
    ids: np.ndarray
    step: int = 0
    time: float = 0.0

    @classmethod
    def create(
        cls,
        positions: np.ndarray,
        velocities: np.ndarray,
        mass: np.ndarray,
        volume0: np.ndarray,
        material_id: np.ndarray,
        ids: Optional[np.ndarray] = None,
        n_tangents: int = 0,
    ) -> "ParticleState":
        """Rest-state particles: F = I, C = 0."""
        positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = len(positions)
        velocities = np.broadcast_to(np.asarray(velocities, dtype=np.float64), (n, 3))
        return cls(
            x=Dual.constant(positions.copy(), n_tangents),
            v=Dual.constant(velocities.copy(), n_tangents),
            F=identity((n,), n_tangents),
            C=Dual.constant(np.zeros((n, 3, 3)), n_tangents),
            mass=np.asarray(mass, dtype=np.float64).reshape(n).copy(),
            volume0=np.asarray(volume0, dtype=np.float64).reshape(n).copy(),
            material_id=np.asarray(material_id, dtype=np.int64).reshape(n).copy(),
            ids=np.arange(n) if ids is None else np.asarray(ids, dtype=np.int64).copy(),
        )

    @property
    def n_particles(self) -> int:
        return len(self.mass)

    @property
    def n_tangents(self) -> int:
        return self.x.n_tangents

    def with_tangents(self, n_tangents: int) -> "ParticleState":
        """Copy with all kinematic fields reset to ``n_tangents`` zero tangents."""
        return ParticleState(
            x=Dual.constant(self.x.val, n_tangents),
            v=Dual.constant(self.v.val, n_tangents),
            F=Dual.constant(self.F.val, n_tangents),
            C=Dual.constant(self.C.val, n_tangents),
            mass=self.mass,
            volume0=self.volume0,
            material_id=self.material_id,
            ids=self.ids,
            step=self.step,
            time=self.time,
        )

    def take(self, index: np.ndarray) -> "ParticleState":
        return ParticleState(
            x=self.x[index],
            v=self.v[index],
            F=self.F[index],
            C=self.C[index],
            mass=self.mass[index],
            volume0=self.volume0[index],
            material_id=self.material_id[index],
            ids=self.ids[index],
            step=self.step,
            time=self.time,
        )

    def total_mass(self) -> float:
        return float(np.sum(self.mass))

    def momentum(self) -> np.ndarray:
        return np.sum(self.mass[:, None] * self.v.val, axis=0)


@dataclass
class SimGrid:
    """Grid fields after P2G; ``velocity`` is filled by ``grid_update``."""
    spec: GridSpec
    mass: Dual
    momentum: Dual
    velocity: Optional[Dual] = None

    def total_mass(self) -> float:
        return float(np.sum(self.mass.val))


@dataclass
class Snapshot:
    """One emitted frame of a trajectory."""
    frame: int
    step: int
    time: float
    ids: np.ndarray
    x: Dual
    v: Dual
    mass: np.ndarray

    @property
    def positions(self) -> np.ndarray:
        return self.x.val

    @property
    def velocities(self) -> np.ndarray:
        return self.v.val

    @classmethod
    def of(cls, state: ParticleState, frame: int) -> "Snapshot":
        return cls(
            frame=frame,
            step=state.step,
            time=state.time,
            ids=state.ids,
            x=state.x,
            v=state.v,
            mass=state.mass,
        )


Trajectory = List[Snapshot]


# =============================================================================
# TRANSFERS
# =============================================================================


def _weights(x: Dual, grid: GridSpec, ids: Optional[np.ndarray] = None):
    Xp = (x - grid.lower) / grid.dx
    upper = np.asarray(grid.resolution) - 2
    bad = ~np.all(np.isfinite(Xp.val) & (Xp.val >= 1.0) & (Xp.val <= upper), axis=-1)
    if np.any(bad):
        p = int(np.argmax(bad))
        label = int(ids[p]) if ids is not None else p
        if not np.all(np.isfinite(Xp.val[p])):
            raise SimulationBlowup(f"Particle {label} has non-finite position", particle_id=label)
        raise OutOfDomainError(
            f"Particle {label} at {x.val[p].tolist()} left the grid interior "
            f"[{(grid.lower + grid.dx).tolist()}, {(grid.lower + upper * grid.dx).tolist()}]"
        )
    base = np.floor(Xp.val - 0.5).astype(np.int64)
    fx = Xp - base
    w = stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2], axis=-1)
    return base, fx, w


def bspline_weights(x, grid: GridSpec) -> Tuple[np.ndarray, Dual]:
    """
    Quadratic B-spline stencil for one or more positions.

    Returns ``(base_node, weights)`` where ``weights[..., axis, offset]``
    belongs to node ``base_node + offset`` along ``axis``.
    """
    x = as_dual(x)
    single = x.ndim == 1
    if single:
        x = x[None]
    base, _, w = _weights(x, grid)
    if single:
        return base[0], w[0]
    return base, w


@dataclass
class _Stencil:
    node: np.ndarray
    weight: Dual
    dpos: Dual


def _stencil(x: Dual, grid: GridSpec, ids: Optional[np.ndarray] = None) -> _Stencil:
    base, fx, w = _weights(x, grid, ids)
    weight = (
        w[:, 0, :][:, _OFFSETS[:, 0]]
        * w[:, 1, :][:, _OFFSETS[:, 1]]
        * w[:, 2, :][:, _OFFSETS[:, 2]]
    )
    dpos = (_OFFSETS - fx[:, None, :]) * grid.dx
    node = grid.linear_index(base[:, None, :] + _OFFSETS)
    return _Stencil(node=node, weight=weight, dpos=dpos)


def _by_material(state: ParticleState, materials: Sequence[MaterialModel]):
    for mid in np.unique(state.material_id):
        if mid < 0 or mid >= len(materials):
            raise SimulationError(f"Particles reference unknown material id {mid}")
        yield np.nonzero(state.material_id == mid)[0], materials[mid]


def _stress(state: ParticleState, materials: Sequence[MaterialModel]) -> Dual:
    parts = []
    for index, model in _by_material(state, materials):
        try:
            tau = kirchhoff_stress(model.kind, model.params, state.F[index], state.C[index])
        except (NonFiniteError, ValueError) as e:
            raise SimulationBlowup(f"Stress evaluation failed at step {state.step}: {e}",
                                   step=state.step) from e
        parts.append((index, tau))
    return assemble(parts, state.n_particles, (3, 3), state.n_tangents)


def _scatter(state: ParticleState, materials: Sequence[MaterialModel], config: SimConfig):
    grid = config.grid
    stencil = _stencil(state.x, grid, state.ids)
    tau = _stress(state, materials)
    m = state.mass
    inertia = config.dt * 4.0 / grid.dx ** 2 * state.volume0
    affine = state.C * m[:, None, None] - tau * inertia[:, None, None]
    momentum = stencil.weight[..., None] * (
        state.v[:, None, :] * m[:, None, None] + matvec(affine[:, None], stencil.dpos)
    )
    node = stencil.node.ravel()
    mass = scatter_add(node, (stencil.weight * m[:, None]).reshape(-1), grid.n_nodes)
    return mass, scatter_add(node, momentum.reshape(-1, 3), grid.n_nodes)


def _chunks(n: int, n_chunks: int) -> List[np.ndarray]:
    return [chunk for chunk in np.array_split(np.arange(n), max(1, n_chunks)) if len(chunk)]


def p2g(
    state: ParticleState,
    materials: Sequence[MaterialModel],
    config: SimConfig,
    executor: Optional[ThreadPoolExecutor] = None,
) -> SimGrid:
    """Scatter particle mass and momentum (with the fused stress force) to the grid."""
    if executor is None or config.threads <= 1:
        mass, momentum = _scatter(state, materials, config)
        return SimGrid(spec=config.grid, mass=mass, momentum=momentum)

    chunks = _chunks(state.n_particles, config.threads)
    results = list(executor.map(lambda idx: _scatter(state.take(idx), materials, config), chunks))
    mass, momentum = results[0]
    # fixed chunk order keeps the reduction deterministic
    for chunk_mass, chunk_momentum in results[1:]:
        mass = mass + chunk_mass
        momentum = momentum + chunk_momentum
    return SimGrid(spec=config.grid, mass=mass, momentum=momentum)


# =============================================================================
# GRID UPDATE
# =============================================================================


def _apply_plane(v: Dual, plane: BoundaryCondition, nodes: np.ndarray) -> Dual:
    behind = (nodes - plane.point) @ plane.normal <= 0.0
    if not np.any(behind):
        return v
    if plane.kind == BoundaryKind.STICKY_PLANE:
        return where(behind[:, None], 0.0, v)

    vn = (v * plane.normal).sum(axis=-1)
    incoming = behind & (vn.val < 0.0)
    if not np.any(incoming):
        return v
    vt = v - vn[:, None] * plane.normal
    if plane.friction > 0.0:
        vt_norm = safe_norm(vt)
        ratio = plane.friction * (-vn) / where(vt_norm.val > 0.0, vt_norm, 1.0)
        scale = where(ratio.val < 1.0, 1.0 - ratio, 0.0)
        vt = vt * scale[:, None]
    return where(incoming[:, None], vt, v)


def grid_update(grid: SimGrid, config: SimConfig, t: float) -> SimGrid:
    """Momentum to velocity, then gravity, external forces and boundaries."""
    spec = grid.spec
    mass = grid.mass
    active = mass.val > MASS_FLOOR * (mass.val.max() if mass.val.size else 0.0)
    safe_mass = where(active, mass, 1.0)
    v = where(active[:, None], grid.momentum / safe_mass[:, None], 0.0)

    gravity = np.asarray(config.gravity, dtype=np.float64)
    if np.any(gravity != 0.0):
        v = where(active[:, None], v + config.dt * gravity, v)

    nodes = spec.node_positions() if (config.forces or config.boundaries) else None
    for force in config.forces:
        if not force.active_at(t, config.dt):
            continue
        region = active & force.inside(nodes)
        if not np.any(region):
            continue
        if force.kind == ForceKind.GRAVITY:
            delta = config.dt * force.vector
        else:
            steps = max(1, force.window_steps(config.dt, config.n_steps))
            delta = force.vector / (float(steps) * mass[region].sum())
        v = where(region[:, None], v + delta, v)

    for boundary in config.boundaries:
        for plane in boundary.planes(spec):
            v = _apply_plane(v, plane, nodes)

    return SimGrid(spec=spec, mass=grid.mass, momentum=grid.momentum, velocity=v)


# =============================================================================
# G2P
# =============================================================================


def _gather(
    state: ParticleState,
    grid: SimGrid,
    materials: Sequence[MaterialModel],
    config: SimConfig,
) -> ParticleState:
    spec = grid.spec
    dt = config.dt
    stencil = _stencil(state.x, spec, state.ids)
    vi = grid.velocity[stencil.node]
    v_new = (stencil.weight[..., None] * vi).sum(axis=1)
    C_new = (stencil.weight[..., None, None] * outer(vi, stencil.dpos)).sum(axis=1)
    C_new = C_new * (4.0 / spec.dx ** 2)
    x_new = state.x + dt * v_new
    F_trial = (identity((state.n_particles,)) + dt * C_new) @ state.F

    dets = np.linalg.det(F_trial.val) if np.all(np.isfinite(F_trial.val)) else None
    if dets is None or np.any(dets <= 0.0):
        if dets is None:
            bad = ~np.all(np.isfinite(F_trial.val), axis=(-2, -1))
        else:
            bad = dets <= 0.0
        p = int(np.argmax(bad))
        pid = int(state.ids[p])
        detail = "non-finite" if dets is None else f"det={dets[p]:.3e}"
        raise SimulationBlowup(
            f"Deformation gradient of particle {pid} inverted ({detail}) at step {state.step}",
            particle_id=pid,
            step=state.step,
        )

    parts = []
    for index, model in _by_material(state, materials):
        try:
            parts.append((index, return_map(model.kind, model.params, F_trial[index], dt)))
        except (NonFiniteError, ValueError) as e:
            raise SimulationBlowup(f"Return mapping failed at step {state.step}: {e}",
                                   step=state.step) from e
    F_new = assemble(parts, state.n_particles, (3, 3), state.n_tangents)

    return ParticleState(
        x=x_new,
        v=v_new,
        F=F_new,
        C=C_new,
        mass=state.mass,
        volume0=state.volume0,
        material_id=state.material_id,
        ids=state.ids,
        step=state.step + 1,
        time=(state.step + 1) * dt,
    )


def g2p_advect(
    state: ParticleState,
    grid: SimGrid,
    materials: Sequence[MaterialModel],
    config: SimConfig,
    executor: Optional[ThreadPoolExecutor] = None,
) -> ParticleState:
    """Gather grid velocities back to particles and advance them one step."""
    if grid.velocity is None:
        raise SimulationError("g2p_advect requires grid velocities; run grid_update first")
    if executor is None or config.threads <= 1:
        return _gather(state, grid, materials, config)

    chunks = _chunks(state.n_particles, config.threads)
    results = list(executor.map(
        lambda idx: _gather(state.take(idx), grid, materials, config), chunks
    ))
    return ParticleState(
        x=concatenate([r.x for r in results]),
        v=concatenate([r.v for r in results]),
        F=concatenate([r.F for r in results]),
        C=concatenate([r.C for r in results]),
        mass=state.mass,
        volume0=state.volume0,
        material_id=state.material_id,
        ids=state.ids,
        step=state.step + 1,
        time=(state.step + 1) * config.dt,
    )


# =============================================================================
# STEPPER
# =============================================================================


class Simulator:
    """
    Drives a particle set through ``config.n_steps`` MLS-MPM steps.

    ``config.threads == 0`` is the single-threaded reference mode.

    Usage:
        sim = Simulator(config, materials)
        trajectory = sim.run(state, sink=CsvFrameSink(out_dir))
    """

    def __init__(self, config: SimConfig, materials: Sequence[MaterialModel]):
        self.config = config.validate()
        self.materials = [model.validate() for model in materials]
        self._cfl_warned = False
        self._executor: Optional[ThreadPoolExecutor] = None

    def _check_cfl(self, state: ParticleState):
        if self._cfl_warned or state.n_particles == 0:
            return
        v_max = float(np.max(np.linalg.norm(state.v.val, axis=-1)))
        if self.config.dt * v_max >= self.config.grid.dx:
            logger.warning(
                f"CFL violated at step {state.step}: dt*v_max={self.config.dt * v_max:.3e} "
                f">= dx={self.config.grid.dx:.3e}"
            )
            self._cfl_warned = True

    def step(self, state: ParticleState) -> ParticleState:
        """One full P2G -> grid update -> G2P cycle."""
        self._check_cfl(state)
        grid = p2g(state, self.materials, self.config, self._executor)
        if not np.all(np.isfinite(grid.momentum.val)):
            raise SimulationBlowup(f"Non-finite grid momentum at step {state.step}",
                                   step=state.step)
        grid = grid_update(grid, self.config, state.step * self.config.dt)
        return g2p_advect(state, grid, self.materials, self.config, self._executor)

    def run(self, state: ParticleState, sink=None) -> Trajectory:
        """
        Step ``n_steps`` times, emitting the initial state, every
        ``output_stride``-th step and the final step.
        """
        config = self.config
        self._cfl_warned = False
        trajectory: Trajectory = []

        def emit(current: ParticleState):
            snapshot = Snapshot.of(current, len(trajectory))
            trajectory.append(snapshot)
            if sink is not None:
                sink.emit(snapshot)

        logger.info(
            f"Running {config.n_steps} steps of {state.n_particles} particles "
            f"(dt={config.dt:g}, threads={config.threads})"
        )
        if config.threads > 1:
            self._executor = ThreadPoolExecutor(max_workers=config.threads)
        try:
            emit(state)
            for _ in range(config.n_steps):
                state = self.step(state)
                if state.step % config.output_stride == 0 or state.step == config.n_steps:
                    emit(state)
        finally:
            if self._executor is not None:
                self._executor.shutdown(wait=True)
                self._executor = None
            if sink is not None:
                sink.close()
        logger.info(f"Finished at t={state.time:g}s with {len(trajectory)} snapshots")
        return trajectory


def step(state: ParticleState, materials: Sequence[MaterialModel],
         config: SimConfig) -> ParticleState:
    """Advance ``state`` by one step in reference mode."""
    return Simulator(config, materials).step(state)


def run(state: ParticleState, materials: Sequence[MaterialModel], config: SimConfig,
        sink=None) -> Trajectory:
    """Run a full simulation; see ``Simulator.run``."""
    return Simulator(config, materials).run(state, sink)


__all__: List[str] = [
    "SimulationError",
    "OutOfDomainError",
    "SimulationBlowup",
    "GridSpec",
    "ForceKind",
    "ExternalForce",
    "BoundaryKind",
    "BoundaryCondition",
    "SimConfig",
    "ParticleState",
    "SimGrid",
    "Snapshot",
    "Trajectory",
    "MASS_FLOOR",
    "bspline_weights",
    "p2g",
    "grid_update",
    "g2p_advect",
    "Simulator",
    "step",
    "run",
]
