"""
Material System Identification

Recovers material parameters by minimizing the flow loss between observed
and simulated motion:
- ParamTransform: log / scaled-sigmoid maps to an unconstrained space
- MaterialPrior + PriorSource chain: initial guesses from an external
  adapter file, falling back to a built-in per-type table
- evaluate: simulate -> synthesize flow -> loss, with parameter tangents
- optimize: Adam in unconstrained space with step back-off on blow-ups
- check_gradients: tangent vs central finite differences

Usage:
    from mpmflow.identify import IdentificationProblem, optimize, load_prior

    prior = load_prior("prior.json")
    problem = IdentificationProblem(scene, "jelly", observed)
    report = optimize(problem, prior)
    report.save("report.json")
"""

import json
import logging
import math
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import RootModel, ValidationError

from .breaker import BreakerTripped, StepBreaker
from .constitutive import (
    ACTIVE_PARAMS,
    PARAM_UNITS,
    MaterialError,
    MaterialModel,
    MaterialParams,
    MaterialType,
)
from .core import Dual, InvertedElementError, NonFiniteError, finite_difference
from .engine import SimulationBlowup, SimulationError, Trajectory
from .flow import (
    DEFAULT_SPLAT_RADIUS,
    FlowField,
    flow_loss,
    render_flow_sequence,
)
from .manifest import ConfigFileError, read_jsonc
from .scene import MaterialEntry, SceneState, format_validation_error

logger = logging.getLogger("mpmflow.identify")

# Sigmoid inputs are clamped here so bounded parameters stay strictly inside.
RAW_CLAMP = 30.0


class IdentificationError(ValueError):
    """Raised for ill-posed identification problems."""
    pass


class PriorValidationError(IdentificationError):
    """Raised when a prior or truth file fails validation."""
    pass


class InitialBlowupError(RuntimeError):
    """Raised when the simulation fails at the initial parameter guess."""
    pass


class LossNotImplementedError(NotImplementedError):
    """Raised for guidance losses that are out of scope."""
    pass


# =============================================================================
# PARAMETER TRANSFORMS
# =============================================================================


class TransformKind(Enum):
    LOG = "log"
    SIGMOID = "sigmoid"


@dataclass(frozen=True)
class ParamTransform:
    """Map between a physical parameter and an unconstrained real."""
    name: str
    kind: TransformKind
    lo: float = 0.0
    hi: float = 1.0

    def to_raw(self, value: float) -> float:
        if self.kind == TransformKind.LOG:
            if value <= 0.0:
                raise IdentificationError(f"{self.name} must be > 0 for a log transform")
            return math.log(value)
        s = (value - self.lo) / (self.hi - self.lo)
        if not 0.0 < s < 1.0:
            raise IdentificationError(
                f"{self.name}={value} lies outside ({self.lo}, {self.hi})"
            )
        return math.log(s) - math.log1p(-s)

    def from_raw(self, raw: float) -> float:
        if self.kind == TransformKind.LOG:
            return math.exp(raw)
        raw = min(max(raw, -RAW_CLAMP), RAW_CLAMP)
        return self.lo + (self.hi - self.lo) / (1.0 + math.exp(-raw))

    def derivative(self, value: float) -> float:
        """d(physical)/d(raw) evaluated at a physical value."""
        if self.kind == TransformKind.LOG:
            return value
        s = (value - self.lo) / (self.hi - self.lo)
        return (self.hi - self.lo) * s * (1.0 - s)


TRANSFORMS: Dict[str, ParamTransform] = {
    "E": ParamTransform("E", TransformKind.LOG),
    "tau_y": ParamTransform("tau_y", TransformKind.LOG),
    "eta": ParamTransform("eta", TransformKind.LOG),
    "mu": ParamTransform("mu", TransformKind.LOG),
    "kappa": ParamTransform("kappa", TransformKind.LOG),
    "nu": ParamTransform("nu", TransformKind.SIGMOID, 0.0, 0.5),
    "theta_fric": ParamTransform("theta_fric", TransformKind.SIGMOID, 0.0, 90.0),
}


def _names(mask) -> Tuple[str, ...]:
    """Accept a MaterialType, an active-mask dict or a name sequence."""
    if isinstance(mask, MaterialType):
        return ACTIVE_PARAMS[mask]
    if isinstance(mask, str):
        return (mask,)
    if isinstance(mask, Mapping):
        return tuple(name for name, active in mask.items() if active)
    return tuple(mask)


def _subset(params: MaterialParams, names: Sequence[str]) -> Dict[str, float]:
    return {name: params.value(name) for name in names}


def to_unconstrained(params: MaterialParams, mask) -> np.ndarray:
    """Raw optimizer vector for the active entries of ``params``."""
    return np.array([TRANSFORMS[name].to_raw(params.value(name)) for name in _names(mask)])


def from_unconstrained(vector: Sequence[float], mask,
                       base: Optional[MaterialParams] = None) -> MaterialParams:
    """Physical parameters from a raw vector; inactive entries come from ``base``."""
    names = _names(mask)
    if len(vector) != len(names):
        raise IdentificationError(
            f"Expected {len(names)} raw values for {names}, got {len(vector)}"
        )
    params = base.detached() if base is not None else MaterialParams()
    return params.with_values(**{
        name: TRANSFORMS[name].from_raw(float(raw)) for name, raw in zip(names, vector)
    })


def bind_tangents(params: MaterialParams, names: Sequence[str],
                  space: str = "raw") -> MaterialParams:
    """
    Replace each named entry by a Dual seeded in its own tangent slot.

    ``space="raw"`` gives derivatives with respect to the unconstrained
    variables, ``space="physical"`` with respect to the parameters themselves.
    """
    if space not in ("raw", "physical"):
        raise IdentificationError(f"Unknown tangent space '{space}'")
    k = len(names)
    updates = {}
    for slot, name in enumerate(names):
        value = params.value(name)
        tan = np.zeros(k)
        tan[slot] = TRANSFORMS[name].derivative(value) if space == "raw" else 1.0
        updates[name] = Dual(np.float64(value), tan)
    return params.detached().with_values(**updates)


@dataclass
class PerturbationRule:
    """How a bench prior is displaced from the truth."""
    log_factor: float = 3.0
    nu_shift: float = 0.1
    theta_shift: float = 15.0

    def apply(self, params: MaterialParams, names: Sequence[str]) -> MaterialParams:
        updates = {}
        for name in names:
            value = params.value(name)
            if name == "nu":
                updates[name] = min(value + self.nu_shift, 0.49)
            elif name == "theta_fric":
                updates[name] = min(value + self.theta_shift, 89.0)
            else:
                updates[name] = value * self.log_factor
        return params.detached().with_values(**updates)


# =============================================================================
# PRIORS
# =============================================================================


class _PriorFile(RootModel[Dict[str, MaterialEntry]]):
    pass


@dataclass
class MaterialPrior:
    """Material name -> initial MaterialModel."""
    entries: Dict[str, MaterialModel] = field(default_factory=dict)
    source: str = "memory"

    def __getitem__(self, name: str) -> MaterialModel:
        try:
            return self.entries[name]
        except KeyError:
            raise IdentificationError(
                f"Prior has no material '{name}' (have {sorted(self.entries)})"
            )

    def __contains__(self, name: object) -> bool:
        return name in self.entries

    def __iter__(self) -> Iterator[str]:
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def to_dict(self) -> Dict[str, Any]:
        return {
            name: MaterialEntry.from_model(model).model_dump()
            for name, model in self.entries.items()
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], source: str = "memory") -> "MaterialPrior":
        try:
            parsed = _PriorFile.model_validate(data)
        except ValidationError as e:
            raise PriorValidationError(f"{source}: {format_validation_error(e)}") from e
        return cls({name: entry.to_model() for name, entry in parsed.root.items()}, source)


def load_prior(path: Union[str, Path]) -> MaterialPrior:
    """Load a prior file: ``{name: {type, density, params}}``."""
    try:
        data = read_jsonc(path)
    except ConfigFileError as e:
        raise PriorValidationError(str(e)) from e
    if not isinstance(data, dict):
        raise PriorValidationError(f"{path}: top level must be an object of materials")
    prior = MaterialPrior.from_dict(data, source=str(path))
    logger.info(f"Loaded prior with {len(prior)} materials from {path}")
    return prior


def load_truth(path: Union[str, Path]) -> MaterialPrior:
    """Truth files share the prior schema."""
    return load_prior(path)


def save_prior(prior: MaterialPrior, path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w") as f:
        json.dump(prior.to_dict(), f, indent=2)
    return path


DEFAULT_PRIOR_TABLE: Dict[MaterialType, MaterialModel] = {
    MaterialType.ELASTIC: MaterialModel(
        MaterialType.ELASTIC, MaterialParams(E=1e5, nu=0.3), 1000.0),
    MaterialType.PLASTICINE: MaterialModel(
        MaterialType.PLASTICINE, MaterialParams(E=2e5, nu=0.3, tau_y=2e3), 1200.0),
    MaterialType.METAL: MaterialModel(
        MaterialType.METAL, MaterialParams(E=1e6, nu=0.3, tau_y=1e4), 2700.0),
    MaterialType.FOAM: MaterialModel(
        MaterialType.FOAM, MaterialParams(E=5e4, nu=0.2, eta=50.0), 300.0),
    MaterialType.SAND: MaterialModel(
        MaterialType.SAND, MaterialParams(theta_fric=35.0), 1600.0),
    MaterialType.NEWTONIAN_FLUID: MaterialModel(
        MaterialType.NEWTONIAN_FLUID, MaterialParams(mu=5.0, kappa=2e4), 1000.0),
    MaterialType.NON_NEWTONIAN_FLUID: MaterialModel(
        MaterialType.NON_NEWTONIAN_FLUID,
        MaterialParams(mu=1e3, kappa=5e4, tau_y=100.0, eta=20.0), 1000.0),
}


class PriorSource(ABC):
    """Anything that can propose an initial material for a named object."""

    @abstractmethod
    def lookup(self, name: str, kind: MaterialType) -> Optional[MaterialModel]:
        """Return a model, or None to defer to the next source."""
        pass


class FilePriorSource(PriorSource):
    """Prior file written by an external adapter (loaded on first use)."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._prior: Optional[MaterialPrior] = None

    def load(self) -> MaterialPrior:
        """Parsed file, or an empty prior when it does not exist."""
        if self._prior is None:
            if not self.path.exists():
                logger.debug(f"Skipping prior file {self.path}: not found")
                return MaterialPrior(source=str(self.path))
            self._prior = load_prior(self.path)
        return self._prior

    def lookup(self, name: str, kind: MaterialType) -> Optional[MaterialModel]:
        prior = self.load()
        if name not in prior:
            return None
        model = prior[name]
        if model.kind != MaterialType.parse(kind):
            logger.warning(
                f"Prior file gives {model.kind.value} for '{name}', expected "
                f"{MaterialType.parse(kind).value}; ignoring it"
            )
            return None
        return model


class TablePriorSource(PriorSource):
    """Per-type defaults."""

    def __init__(self, table: Optional[Dict[MaterialType, MaterialModel]] = None):
        self.table = table if table is not None else DEFAULT_PRIOR_TABLE

    def lookup(self, name: str, kind: MaterialType) -> Optional[MaterialModel]:
        return self.table.get(MaterialType.parse(kind))


def resolve_prior(name: str, kind: MaterialType,
                  chain: Optional[Sequence[PriorSource]] = None) -> MaterialModel:
    """First model any source in ``chain`` proposes; the table is the last resort."""
    chain = list(chain) if chain is not None else [TablePriorSource()]
    for source in chain:
        model = source.lookup(name, kind)
        if model is not None:
            logger.info(f"Prior for '{name}' from {type(source).__name__}")
            return model.validate()
        logger.debug(f"{type(source).__name__} has no prior for '{name}'")
    raise IdentificationError(f"No prior source could provide material '{name}'")


# =============================================================================
# PROBLEM AND EVALUATION
# =============================================================================


@dataclass
class OptimizerSettings:
    """Adam settings in unconstrained space."""
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_iters: int = 100
    tolerance: float = 1e-4
    patience: int = 5
    loss_floor: float = 1e-9
    max_halvings: int = 5
    # step * decay_rate ** (iteration / decay_steps)
    decay_rate: float = 1.0
    decay_steps: int = 100

    def step_scale(self, iteration: int) -> float:
        return self.decay_rate ** ((iteration - 1) / self.decay_steps)

    def validate(self) -> "OptimizerSettings":
        if not self.learning_rate > 0.0:
            raise IdentificationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.decay_rate <= 1.0:
            raise IdentificationError(f"decay_rate must lie in (0, 1], got {self.decay_rate}")
        if self.decay_steps < 1:
            raise IdentificationError(f"decay_steps must be >= 1, got {self.decay_steps}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


@dataclass
class IdentificationProblem:
    """A scene, the material to identify and the observed flow sequence."""
    scene: SceneState
    material: str
    observed: List[FlowField]
    names: Optional[Tuple[str, ...]] = None
    settings: OptimizerSettings = field(default_factory=OptimizerSettings)
    splat_radius: float = DEFAULT_SPLAT_RADIUS

    def __post_init__(self):
        if self.names is None:
            self.names = ACTIVE_PARAMS[self.kind]
        self.names = tuple(self.names)

    @property
    def kind(self) -> MaterialType:
        return self.scene.material(self.material).kind

    @property
    def expected_pairs(self) -> int:
        return self.scene.config.n_snapshots - 1

    def validate(self) -> "IdentificationProblem":
        self.settings.validate()
        if not self.names:
            raise IdentificationError("Identification needs at least one active parameter")
        unknown = [name for name in self.names if name not in ACTIVE_PARAMS[self.kind]]
        if unknown:
            raise IdentificationError(
                f"{unknown} are not parameters of {self.kind.value} "
                f"(active: {list(ACTIVE_PARAMS[self.kind])})"
            )
        if len(self.observed) != self.expected_pairs:
            raise IdentificationError(
                f"Observed {len(self.observed)} flow fields but the simulation emits "
                f"{self.expected_pairs} frame pairs"
            )
        return self


class EvalStatus(Enum):
    OK = "ok"
    BLOWUP = "blowup"


@dataclass
class Evaluation:
    """Loss, its tangents and whether the simulation survived."""
    status: EvalStatus
    loss: Optional[Dual] = None
    valid_count: int = 0
    message: str = ""
    flows: List[FlowField] = field(default_factory=list, repr=False)

    @property
    def ok(self) -> bool:
        return self.status == EvalStatus.OK

    @property
    def value(self) -> float:
        return float(self.loss.val) if self.loss is not None else math.inf

    @property
    def gradient(self) -> np.ndarray:
        return self.loss.tan.copy() if self.loss is not None else np.zeros(0)

    def raise_for_status(self) -> "Evaluation":
        if not self.ok:
            raise SimulationBlowup(self.message or "simulation failed")
        return self


def simulate_flows(
    scene: SceneState,
    material: str,
    params: MaterialParams,
    n_tangents: int = 0,
    splat_radius: float = DEFAULT_SPLAT_RADIUS,
) -> Tuple[Trajectory, List[FlowField]]:
    """Run the scene with ``params`` bound to ``material`` and render its flow."""
    bound = scene.with_params(material, params)
    trajectory = bound.simulate(n_tangents=n_tangents)
    return trajectory, render_flow_sequence(trajectory, scene.camera, splat_radius)


def generate_observations(scene: SceneState, material: str, params: MaterialParams,
                          splat_radius: float = DEFAULT_SPLAT_RADIUS) -> List[FlowField]:
    """Self-generated ground-truth flow at ``params``."""
    _, flows = simulate_flows(scene, material, params.detached(), 0, splat_radius)
    return [flow.detach() for flow in flows]


def evaluate(problem: IdentificationProblem, params: MaterialParams,
             space: str = "raw") -> Evaluation:
    """
    Full simulate -> flow -> loss pipeline with one tangent slot per active
    parameter. Simulation failures come back as ``BLOWUP``, not exceptions.
    """
    if not problem.names:
        raise IdentificationError("Identification needs at least one active parameter")
    bound = bind_tangents(params, problem.names, space)
    try:
        _, flows = simulate_flows(
            problem.scene, problem.material, bound, len(problem.names), problem.splat_radius
        )
        result = flow_loss(problem.observed, flows)
    except (SimulationError, NonFiniteError, InvertedElementError) as e:
        return Evaluation(status=EvalStatus.BLOWUP, message=str(e))
    if not (np.isfinite(result.value.val) and np.all(np.isfinite(result.value.tan))):
        return Evaluation(status=EvalStatus.BLOWUP, message="non-finite loss")
    return Evaluation(
        status=EvalStatus.OK,
        loss=result.value,
        valid_count=result.valid_count,
        flows=flows,
    )


# =============================================================================
# REPORT
# =============================================================================


@dataclass
class IdentificationReport:
    """Outcome of one identification run."""
    material: str
    kind: str
    names: List[str]
    loss_trace: List[float] = field(default_factory=list)
    best_trace: List[float] = field(default_factory=list)
    initial_loss: float = math.nan
    initial_params: Dict[str, float] = field(default_factory=dict)
    best_loss: float = math.inf
    final_params: Dict[str, float] = field(default_factory=dict)
    truth: Optional[Dict[str, float]] = None
    errors: Optional[Dict[str, float]] = None
    initial_errors: Optional[Dict[str, float]] = None
    iterations: int = 0
    evaluations: int = 0
    halvings: int = 0
    converged: bool = False
    stop_reason: str = ""
    valid_count: int = 0
    loss_kind: str = "flow"
    wall_time: float = 0.0

    def attach_truth(self, truth: MaterialParams):
        """Add per-parameter absolute errors in physical units."""
        self.truth = {name: truth.value(name) for name in self.names}
        self.errors = {
            name: abs(self.final_params[name] - self.truth[name]) for name in self.names
        }
        self.initial_errors = {
            name: abs(self.initial_params[name] - self.truth[name]) for name in self.names
        }

    def delta_lines(self) -> List[str]:
        if not self.errors:
            return []
        return [
            f"Delta_{name} = {self.errors[name]:.4g} {PARAM_UNITS[name]}"
            f" (prior {self.initial_errors[name]:.4g})"
            for name in self.names
        ]

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "IdentificationReport":
        return cls(**data)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "IdentificationReport":
        with open(path) as f:
            return cls.from_dict(json.load(f))


# =============================================================================
# OPTIMIZATION
# =============================================================================


def _initial_params(problem: IdentificationProblem, prior) -> MaterialParams:
    if prior is None:
        return problem.scene.material(problem.material).params.detached()
    if isinstance(prior, MaterialParams):
        return prior.detached()
    if isinstance(prior, MaterialModel):
        return prior.params.detached()
    return prior[problem.material].params.detached()


def optimize(problem: IdentificationProblem, prior=None,
             truth: Optional[MaterialParams] = None) -> IdentificationReport:
    """
    Adam descent on the flow loss in unconstrained space.

    ``prior`` may be a MaterialPrior, MaterialModel or MaterialParams; when
    omitted the scene's current parameters are the starting point. A
    blow-up halves the step and retries from the last good iterate.
    """
    problem.validate()
    settings = problem.settings
    kind = problem.kind
    names = problem.names
    started = time.perf_counter()

    params = _initial_params(problem, prior).validate(kind)
    current = evaluate(problem, params)
    if not current.ok:
        raise InitialBlowupError(
            f"Simulation fails at the initial guess ({current.message}); try a different prior"
        )

    report = IdentificationReport(
        material=problem.material,
        kind=kind.value,
        names=list(names),
        initial_loss=current.value,
        initial_params=_subset(params, names),
        best_loss=current.value,
        final_params=_subset(params, names),
        valid_count=current.valid_count,
    )
    report.loss_trace.append(current.value)
    report.best_trace.append(current.value)
    report.evaluations = 1
    logger.info(f"Initial loss {current.value:.6g} at {report.initial_params}")

    raw = to_unconstrained(params, names)
    m = np.zeros(len(names))
    v = np.zeros(len(names))
    breaker = StepBreaker(
        settings.learning_rate,
        max_halvings=settings.max_halvings,
        trip_on=(SimulationError, MaterialError, OverflowError),
    )
    streak = 0
    stop_reason = "max_iters"

    for iteration in range(1, settings.max_iters + 1):
        if current.value <= settings.loss_floor:
            stop_reason = "loss_floor"
            report.converged = True
            break

        grad = current.gradient
        m = settings.beta1 * m + (1.0 - settings.beta1) * grad
        v = settings.beta2 * v + (1.0 - settings.beta2) * grad * grad
        m_hat = m / (1.0 - settings.beta1 ** iteration)
        v_hat = v / (1.0 - settings.beta2 ** iteration)
        direction = m_hat / (np.sqrt(v_hat) + settings.eps)

        scale = settings.step_scale(iteration)
        accepted = None
        try:
            while accepted is None:
                with breaker:
                    candidate_raw = raw - scale * breaker.step_size * direction
                    candidate = from_unconstrained(candidate_raw, names, params).validate(kind)
                    report.evaluations += 1
                    trial = evaluate(problem, candidate).raise_for_status()
                    accepted = (candidate_raw, candidate, trial)
        except BreakerTripped:
            stop_reason = "blowup"
            logger.warning(
                f"Stopping at iteration {iteration}: {breaker.stats.halvings} step halvings "
                f"did not avoid blow-up ({breaker.stats.last_failure})"
            )
            break

        previous = current.value
        raw, params, current = accepted
        report.iterations = iteration
        report.loss_trace.append(current.value)
        if current.value < report.best_loss:
            report.best_loss = current.value
            report.final_params = _subset(params, names)
            report.valid_count = current.valid_count
        report.best_trace.append(report.best_loss)
        logger.info(
            f"iter {iteration:3d} loss {current.value:.6g} "
            + " ".join(f"{n}={params.value(n):.5g}" for n in names)
        )

        if abs(previous - current.value) < settings.tolerance * current.value:
            streak += 1
            if streak >= settings.patience:
                stop_reason = "converged"
                report.converged = True
                break
        else:
            streak = 0
    else:
        if current.value <= settings.loss_floor:
            stop_reason = "loss_floor"
            report.converged = True

    report.stop_reason = stop_reason
    report.halvings = breaker.stats.halvings
    report.wall_time = time.perf_counter() - started
    if truth is not None:
        report.attach_truth(truth)
    logger.info(
        f"Identification finished ({stop_reason}) after {report.iterations} iterations: "
        f"best loss {report.best_loss:.6g}, params {report.final_params}"
    )
    return report


SUPPORTED_LOSSES = ("flow",)
OUT_OF_SCOPE_LOSSES = {
    "sds": "score-distillation guidance needs a video diffusion model",
    "render": "render-loss guidance needs a differentiable Gaussian-splat renderer",
}


def compare_losses(problem: IdentificationProblem, loss_kind: str, prior=None,
                   truth: Optional[MaterialParams] = None) -> IdentificationReport:
    """Run identification under a named guidance loss; only ``flow`` is available."""
    key = loss_kind.lower()
    if key in OUT_OF_SCOPE_LOSSES:
        raise LossNotImplementedError(
            f"Loss '{loss_kind}' is not implemented: {OUT_OF_SCOPE_LOSSES[key]}"
        )
    if key not in SUPPORTED_LOSSES:
        raise IdentificationError(
            f"Unknown loss '{loss_kind}' (supported: {', '.join(SUPPORTED_LOSSES)})"
        )
    report = optimize(problem, prior, truth)
    report.loss_kind = key
    return report


# =============================================================================
# GRADIENT CHECK
# =============================================================================


@dataclass
class GradientRow:
    name: str
    value: float
    tangent: float
    finite_difference: float
    rel_error: float
    step: float
    mask_stable: bool


@dataclass
class GradientCheck:
    loss: float
    rows: List[GradientRow]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(row.mask_stable and row.rel_error <= self.tolerance for row in self.rows)

    def table(self) -> str:
        lines = [f"{'param':<12}{'value':>14}{'tangent':>16}{'fd':>16}{'rel_err':>12}  stable"]
        for row in self.rows:
            lines.append(
                f"{row.name:<12}{row.value:>14.6g}{row.tangent:>16.8g}"
                f"{row.finite_difference:>16.8g}{row.rel_error:>12.3e}  {row.mask_stable}"
            )
        return "\n".join(lines)


def relative_error(a: float, b: float) -> float:
    scale = max(abs(a), abs(b))
    return abs(a - b) / scale if scale > 0.0 else 0.0


def check_gradients(problem: IdentificationProblem, params: MaterialParams,
                    rel_step: float = 1e-5, tolerance: float = 1e-3,
                    max_refinements: int = 4) -> GradientCheck:
    """
    Compare physical-space loss tangents against central differences.

    The perturbation is shrunk until neither side changes which pixels the
    splats cover; rows where that never happens are reported unstable.
    """
    if not rel_step > 0.0:
        raise IdentificationError(f"Finite-difference step must be > 0, got {rel_step}")
    problem.validate()
    params = params.detached().validate(problem.kind)
    base = evaluate(problem, params, space="physical")
    if not base.ok:
        raise SimulationError(f"Gradient check baseline failed: {base.message}")

    def loss_at(name: str, value: float) -> Tuple[float, List[FlowField]]:
        _, flows = simulate_flows(problem.scene, problem.material,
                                  params.with_values(**{name: value}), 0, problem.splat_radius)
        return float(flow_loss(problem.observed, flows).value.val), flows

    rows = []
    gradient = base.gradient
    for slot, name in enumerate(problem.names):
        value = params.value(name)
        step = rel_step * max(1.0, abs(value))
        stable = False
        for _ in range(max_refinements + 1):
            _, plus = loss_at(name, value + step)
            _, minus = loss_at(name, value - step)
            stable = all(
                a.same_rasterization(b) and a.same_rasterization(c)
                for a, b, c in zip(base.flows, plus, minus)
            )
            if stable:
                break
            step *= 0.5
        fd = finite_difference(lambda theta: loss_at(name, theta)[0], value, step)
        tangent = float(gradient[slot])
        error = relative_error(tangent, fd)
        rows.append(GradientRow(name, value, tangent, fd, error, step, stable))
        logger.info(f"gradcheck {name}: tangent {tangent:.8g} fd {fd:.8g} stable={stable}")
    return GradientCheck(loss=base.value, rows=rows, tolerance=tolerance)


__all__: List[str] = [
    "IdentificationError",
    "PriorValidationError",
    "InitialBlowupError",
    "LossNotImplementedError",
    "TransformKind",
    "ParamTransform",
    "TRANSFORMS",
    "to_unconstrained",
    "from_unconstrained",
    "bind_tangents",
    "PerturbationRule",
    "MaterialPrior",
    "load_prior",
    "load_truth",
    "save_prior",
    "DEFAULT_PRIOR_TABLE",
    "PriorSource",
    "FilePriorSource",
    "TablePriorSource",
    "resolve_prior",
    "OptimizerSettings",
    "IdentificationProblem",
    "EvalStatus",
    "Evaluation",
    "simulate_flows",
    "generate_observations",
    "evaluate",
    "IdentificationReport",
    "optimize",
    "compare_losses",
    "SUPPORTED_LOSSES",
    "GradientRow",
    "GradientCheck",
    "relative_error",
    "check_gradients",
]
