"""
mpm-flow: Differentiable MLS-MPM simulation and flow-guided material identification.

Modules:
- core: Forward-mode dual arrays, 3x3 SVD and polar decomposition
- constitutive: Material types, stress models and plastic return mappings
- engine: MLS-MPM particle/grid stepping with boundaries and external forces
- flow: Pinhole projection, dense flow synthesis, flow loss and .flo I/O
- scene: Scene files, particle sampling and material binding
- identify: Priors, parameter transforms, Adam identification and gradient checks
- sinks: Snapshot destinations (memory, CSV frames, logging)
- breaker: Step-size back-off for optimizers that can blow up
- manifest: Run manifests and JSON-with-comments config reading
"""

from mpmflow.core import (
    Dual,
    Svd3,
    svd3,
    polar_rotation,
    NonFiniteError,
    InvertedElementError,
)
from mpmflow.constitutive import (
    MaterialType,
    MaterialParams,
    MaterialModel,
    MaterialError,
    IncompressibleLimitError,
    kirchhoff_stress,
    cauchy_stress,
    return_map,
    yield_function,
)
from mpmflow.engine import (
    GridSpec,
    SimConfig,
    ParticleState,
    Snapshot,
    ExternalForce,
    BoundaryCondition,
    Simulator,
    SimulationError,
    OutOfDomainError,
    SimulationBlowup,
    p2g,
    grid_update,
    g2p_advect,
    step,
    run,
)
from mpmflow.flow import (
    Camera,
    FlowField,
    FlowLoss,
    project,
    synth_flow,
    render_flow_sequence,
    flow_loss,
    read_flo,
    write_flo,
)
from mpmflow.scene import (
    SceneSpec,
    SceneState,
    SceneError,
    load_scene,
    load_point_cloud,
    sample_body,
    build_scene,
)
from mpmflow.identify import (
    MaterialPrior,
    IdentificationProblem,
    IdentificationReport,
    OptimizerSettings,
    load_prior,
    to_unconstrained,
    from_unconstrained,
    evaluate,
    optimize,
    compare_losses,
    check_gradients,
)
from mpmflow.sinks import (
    SnapshotSink,
    MemorySink,
    CsvFrameSink,
    create_sink,
)
from mpmflow.breaker import StepBreaker, BreakerTripped
from mpmflow.manifest import RunManifest

__version__ = "0.1.0"
__all__ = [
    # Core
    "Dual",
    "Svd3",
    "svd3",
    "polar_rotation",
    "NonFiniteError",
    "InvertedElementError",
    # Constitutive
    "MaterialType",
    "MaterialParams",
    "MaterialModel",
    "MaterialError",
    "IncompressibleLimitError",
    "kirchhoff_stress",
    "cauchy_stress",
    "return_map",
    "yield_function",
    # Engine
    "GridSpec",
    "SimConfig",
    "ParticleState",
    "Snapshot",
    "ExternalForce",
    "BoundaryCondition",
    "Simulator",
    "SimulationError",
    "OutOfDomainError",
    "SimulationBlowup",
    "p2g",
    "grid_update",
    "g2p_advect",
    "step",
    "run",
    # Flow
    "Camera",
    "FlowField",
    "FlowLoss",
    "project",
    "synth_flow",
    "render_flow_sequence",
    "flow_loss",
    "read_flo",
    "write_flo",
    # Scene
    "SceneSpec",
    "SceneState",
    "SceneError",
    "load_scene",
    "load_point_cloud",
    "sample_body",
    "build_scene",
    # Identification
    "MaterialPrior",
    "IdentificationProblem",
    "IdentificationReport",
    "OptimizerSettings",
    "load_prior",
    "to_unconstrained",
    "from_unconstrained",
    "evaluate",
    "optimize",
    "compare_losses",
    "check_gradients",
    # Sinks
    "SnapshotSink",
    "MemorySink",
    "CsvFrameSink",
    "create_sink",
    # Breaker
    "StepBreaker",
    "BreakerTripped",
    # Manifest
    "RunManifest",
]
