"""
Command-Line Interface

Verbs:
- simulate:   run a scene, write ``frame_%05d.csv`` files
- synth-flow: turn a frame directory into ``flow_%05d.flo`` files
- identify:   recover material parameters from observed flow
- gradcheck:  compare loss tangents against finite differences
- bench:      self-recovery suite with per-parameter bounds

Exit codes: 0 ok, 1 usage or missing input, 2 validation, 3 simulation blow-up.
Every command writes ``manifest.json`` next to its outputs.

Usage:
    mpmflow simulate --scene benchmarks/elastic_block_drop.json --out out/sim
    mpmflow synth-flow --frames out/sim --scene benchmarks/elastic_block_drop.json
    mpmflow identify --scene scene.json --prior prior.json --observed out/flow
    mpmflow bench --suite benchmarks/suite.json --jobs 4
"""

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .constitutive import ACTIVE_PARAMS, PARAM_UNITS, MaterialModel, MaterialType
from .core import InvertedElementError, NonFiniteError
from .engine import SimulationError
from .flow import read_flow_sequence, render_flow_sequence, write_flow_sequence
from .identify import (
    FilePriorSource,
    IdentificationError,
    IdentificationProblem,
    InitialBlowupError,
    LossNotImplementedError,
    OptimizerSettings,
    PerturbationRule,
    TablePriorSource,
    check_gradients,
    compare_losses,
    generate_observations,
    load_truth,
    optimize,
    resolve_prior,
)
from .manifest import RunManifest, read_jsonc
from .scene import (
    CameraModel,
    SceneSpec,
    SceneState,
    build_scene,
    format_validation_error,
    load_scene,
)
from .sinks import create_sink, read_frames

logger = logging.getLogger("mpmflow.cli")

OUTPUT_ROOT_ENV = "MPMFLOW_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "mpmflow-out"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_BLOWUP = 3


class UsageError(Exception):
    """Bad command-line arguments."""
    pass


class _Parser(argparse.ArgumentParser):
    """argparse reports usage errors with exit code 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def output_dir(args: argparse.Namespace, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT))
    return root / command


def _require_file(path: Optional[str], flag: str) -> Path:
    if not path:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{flag}: {p} not found")
    return p


def _scene_prior(spec: SceneSpec, path: Path) -> Dict[str, MaterialModel]:
    """Prior file entries; scene materials the file lacks fall back to the type table."""
    source = FilePriorSource(path)
    models = dict(source.load().entries)
    chain = [source, TablePriorSource()]
    for name, entry in spec.materials.items():
        models[name] = resolve_prior(name, MaterialType.parse(entry.type), chain)
    return models


def _load_scene_state(args: argparse.Namespace, manifest: RunManifest) -> SceneState:
    scene_path = _require_file(args.scene, "--scene")
    manifest.add_input(scene_path)
    spec = load_scene(scene_path)
    prior = None
    if getattr(args, "prior", None):
        prior_path = _require_file(args.prior, "--prior")
        manifest.add_input(prior_path)
        prior = _scene_prior(spec, prior_path)
    scene = build_scene(spec, prior, seed=args.seed, threads=args.threads)
    manifest.seed = scene.seed
    manifest.config = {"sim": scene.config.to_dict(), "camera": scene.camera.to_dict()}
    return scene


def _material(args: argparse.Namespace, scene: SceneState) -> str:
    name = getattr(args, "material", None) or scene.material_names[0]
    scene.material_index(name)
    return name


# =============================================================================
# COMMANDS
# =============================================================================


def cmd_simulate(args: argparse.Namespace, manifest: RunManifest) -> int:
    scene = _load_scene_state(args, manifest)
    out = output_dir(args, "simulate")
    sink = create_sink({"type": "composite", "sinks": [
        {"type": "csv", "out_dir": str(out)},
        {"type": "logging"},
    ]})
    trajectory = scene.simulate(sink)
    manifest.add_output(out)
    manifest.extra["frames"] = len(trajectory)
    print(f"Wrote {len(trajectory)} frames to {out}")
    return EXIT_OK


def cmd_synth_flow(args: argparse.Namespace, manifest: RunManifest) -> int:
    frames_dir = Path(args.frames)
    frames = read_frames(frames_dir)
    if len(frames) < 2:
        raise IdentificationError(
            f"synth-flow needs at least 2 frames, found {len(frames)} in {frames_dir}"
        )
    if args.scene:
        scene_path = _require_file(args.scene, "--scene")
        manifest.add_input(scene_path)
        camera = load_scene(scene_path).camera.to_camera().validate()
    else:
        camera = CameraModel().to_camera().validate()
    manifest.config = {"camera": camera.to_dict(), "splat_radius": args.splat_radius}
    fields = render_flow_sequence(frames, camera, args.splat_radius)
    out = output_dir(args, "synth-flow")
    paths = write_flow_sequence(fields, out)
    manifest.add_output(out)
    manifest.extra["flows"] = len(paths)
    print(f"Wrote {len(paths)} flow files to {out}")
    return EXIT_OK


def cmd_identify(args: argparse.Namespace, manifest: RunManifest) -> int:
    scene = _load_scene_state(args, manifest)
    material = _material(args, scene)
    observed_dir = Path(args.observed)
    if not observed_dir.is_dir():
        raise FileNotFoundError(f"--observed: {observed_dir} not found")
    observed = read_flow_sequence(observed_dir)
    for path in sorted(observed_dir.glob("flow_*.flo")):
        manifest.add_input(path)

    truth = None
    if args.truth:
        truth_path = _require_file(args.truth, "--truth")
        manifest.add_input(truth_path)
        truth = load_truth(truth_path)[material].params

    settings = OptimizerSettings(
        max_iters=args.iters,
        learning_rate=args.learning_rate,
        decay_rate=args.decay_rate,
        decay_steps=max(args.iters, 1),
    )
    problem = IdentificationProblem(scene, material, observed, settings=settings)
    manifest.config["optimizer"] = settings.to_dict()
    manifest.config["material"] = material
    report = compare_losses(problem, args.loss, truth=truth)

    out = output_dir(args, "identify")
    path = report.save(out / "report.json")
    manifest.add_output(path)
    manifest.extra["best_loss"] = report.best_loss

    print(f"{material} ({report.kind}) after {report.iterations} iterations, "
          f"loss {report.best_loss:.6g} [{report.stop_reason}]")
    for name in report.names:
        print(f"  {name} = {report.final_params[name]:.6g} {PARAM_UNITS[name]}")
    for line in report.delta_lines():
        print(f"  {line}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace, manifest: RunManifest) -> int:
    if not args.fd_step > 0.0:
        raise UsageError(f"--fd-step must be > 0, got {args.fd_step}")
    scene = _load_scene_state(args, manifest)
    material = _material(args, scene)
    model = scene.material(material)
    names = ACTIVE_PARAMS[model.kind]

    # Observations come from displaced parameters so the loss is not at its minimum.
    observed_at = PerturbationRule(log_factor=1.5, nu_shift=0.05, theta_shift=5.0)
    observed = generate_observations(
        scene, material, observed_at.apply(model.params, names), args.splat_radius
    )
    problem = IdentificationProblem(scene, material, observed, splat_radius=args.splat_radius)
    result = check_gradients(problem, model.params, rel_step=args.fd_step,
                             tolerance=args.tolerance)
    print(result.table())

    out = output_dir(args, "gradcheck")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "gradcheck.json"
    with open(path, "w") as f:
        json.dump({"loss": result.loss, "tolerance": result.tolerance,
                   "rows": [row.__dict__ for row in result.rows]}, f, indent=2)
    manifest.add_output(path)
    manifest.extra["passed"] = result.passed
    return EXIT_OK if result.passed else EXIT_VALIDATION


# =============================================================================
# BENCH
# =============================================================================


class BoundModel(BaseModel):
    """Acceptance bound: ``relative`` (fraction of truth) or ``absolute`` (physical units)."""
    model_config = ConfigDict(extra="forbid")
    relative: Optional[float] = Field(default=None, gt=0.0)
    absolute: Optional[float] = Field(default=None, gt=0.0)

    @model_validator(mode="after")
    def _exactly_one(self) -> "BoundModel":
        if (self.relative is None) == (self.absolute is None):
            raise ValueError("give exactly one of relative or absolute")
        return self

    def limit(self, truth: float) -> float:
        return self.relative * abs(truth) if self.relative is not None else self.absolute

    def describe(self) -> str:
        if self.relative is not None:
            return f"{self.relative:.0%}"
        return f"{self.absolute:g}"


class PerturbationModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    log_factor: float = Field(default=3.0, gt=0.0)
    nu_shift: float = 0.1
    theta_shift: float = 15.0


class OptimizerModel(BaseModel):
    """Adam step settings for bench cases."""
    model_config = ConfigDict(extra="forbid")
    learning_rate: float = Field(default=0.05, gt=0.0)
    decay_rate: float = Field(default=1.0, gt=0.0, le=1.0)
    decay_steps: int = Field(default=100, ge=1)


class BenchCaseModel(BaseModel):
    """One self-recovery case."""
    model_config = ConfigDict(extra="forbid")
    name: str
    scene: str
    material: Optional[str] = None
    truth: Dict[str, float]
    bounds: Dict[str, BoundModel]
    perturbation: PerturbationModel = Field(default_factory=PerturbationModel)
    iters: Optional[int] = Field(default=None, ge=0)
    optimizer: Optional[OptimizerModel] = None


class BenchSuiteModel(BaseModel):
    model_config = ConfigDict(extra="forbid")
    cases: List[BenchCaseModel] = Field(min_length=1)
    iters: int = Field(default=60, ge=0)
    optimizer: OptimizerModel = Field(default_factory=OptimizerModel)


@dataclass
class BenchRow:
    case: str
    material: str
    kind: str = ""
    passed: bool = False
    error: Optional[str] = None
    truth: Dict[str, float] = field(default_factory=dict)
    prior: Dict[str, float] = field(default_factory=dict)
    estimate: Dict[str, float] = field(default_factory=dict)
    prior_deltas: Dict[str, float] = field(default_factory=dict)
    deltas: Dict[str, float] = field(default_factory=dict)
    bounds: Dict[str, str] = field(default_factory=dict)
    within: Dict[str, bool] = field(default_factory=dict)
    initial_loss: float = math.nan
    best_loss: float = math.nan
    iterations: int = 0
    wall_time: float = 0.0

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def load_suite(path: Path) -> BenchSuiteModel:
    try:
        return BenchSuiteModel.model_validate(read_jsonc(path))
    except ValidationError as e:
        raise IdentificationError(f"{path}: {format_validation_error(e)}") from e


def run_bench_case(
    case: BenchCaseModel,
    suite_dir: Path,
    default_iters: int,
    out_dir: Path,
    seed: Optional[int] = None,
    threads: int = 0,
    default_optimizer: Optional[OptimizerModel] = None,
) -> BenchRow:
    """Generate observations at the truth, start from a perturbed prior, identify."""
    row = BenchRow(case=case.name, material=case.material or "")
    try:
        scene = build_scene(load_scene(suite_dir / case.scene), seed=seed, threads=threads)
        material = case.material or scene.material_names[0]
        row.material = material
        kind = scene.material(material).kind
        row.kind = kind.value
        names = ACTIVE_PARAMS[kind]

        truth = scene.material(material).params.detached().with_values(**case.truth)
        truth.validate(kind)
        unknown = sorted(set(case.bounds) - set(names))
        if unknown:
            raise IdentificationError(f"bounds for {unknown} but {kind.value} has {list(names)}")
        unbounded = [name for name in names if name not in case.bounds]
        if unbounded:
            raise IdentificationError(f"no bounds for active parameters {unbounded}")

        observed = generate_observations(scene, material, truth)
        rule = PerturbationRule(**case.perturbation.model_dump())
        prior = rule.apply(truth, names)
        optimizer = case.optimizer or default_optimizer or OptimizerModel()
        settings = OptimizerSettings(
            max_iters=case.iters if case.iters is not None else default_iters,
            **optimizer.model_dump(),
        )
        problem = IdentificationProblem(scene, material, observed, settings=settings)
        report = optimize(problem, prior, truth)
        report.save(out_dir / case.name / "report.json")

        row.truth = report.truth
        row.prior = report.initial_params
        row.estimate = report.final_params
        row.prior_deltas = report.initial_errors
        row.deltas = report.errors
        row.bounds = {name: bound.describe() for name, bound in case.bounds.items()}
        row.within = {
            name: report.errors[name] <= bound.limit(report.truth[name])
            for name, bound in case.bounds.items()
        }
        row.passed = all(row.within.values())
        row.initial_loss = report.initial_loss
        row.best_loss = report.best_loss
        row.iterations = report.iterations
        row.wall_time = report.wall_time
    except Exception as e:  # noqa: BLE001 - a crashing case is a FAIL row
        logger.error(f"Bench case '{case.name}' failed: {type(e).__name__}: {e}")
        row.error = f"{type(e).__name__}: {e}"
        row.passed = False
    logger.info(f"Bench case '{case.name}': {'PASS' if row.passed else 'FAIL'}")
    return row


def format_bench_table(rows: Sequence[BenchRow]) -> str:
    """Aligned per-parameter table, Delta = |estimate - truth|."""
    header = (f"{'case':<28}{'material':<20}{'param':<12}{'truth':>12}{'Delta prior':>14}"
              f"{'Delta':>12}{'bound':>10}  status")
    lines = [header, "-" * len(header)]
    for row in rows:
        if row.error is not None:
            lines.append(f"{row.case:<28}{row.kind or row.material:<20}FAIL  {row.error}")
            continue
        for name in row.deltas:
            status = ""
            if name in row.within:
                status = "PASS" if row.within[name] else "FAIL"
            lines.append(
                f"{row.case:<28}{row.kind:<20}{'Delta_' + name:<12}{row.truth[name]:>12.4g}"
                f"{row.prior_deltas[name]:>14.4g}{row.deltas[name]:>12.4g}"
                f"{row.bounds.get(name, '-'):>10}  {status}"
            )
    passed = sum(row.passed for row in rows)
    lines.append("")
    lines.append(f"{passed}/{len(rows)} cases passed")
    return "\n".join(lines)


def cmd_bench(args: argparse.Namespace, manifest: RunManifest) -> int:
    suite_path = _require_file(args.suite, "--suite")
    manifest.add_input(suite_path)
    suite = load_suite(suite_path)
    iters = args.iters if args.iters is not None else suite.iters
    out = output_dir(args, "bench")
    out.mkdir(parents=True, exist_ok=True)
    manifest.config = {"suite": suite.model_dump(), "iters": iters, "jobs": args.jobs}

    def run_case(case: BenchCaseModel) -> BenchRow:
        return run_bench_case(case, suite_path.parent, iters, out, args.seed, args.threads,
                              suite.optimizer)

    if args.jobs > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            rows = list(pool.map(run_case, suite.cases))
    else:
        rows = [run_case(case) for case in suite.cases]

    summary = out / "summary.json"
    with open(summary, "w") as f:
        json.dump({"cases": [row.to_dict() for row in rows],
                   "passed": sum(row.passed for row in rows),
                   "total": len(rows)}, f, indent=2)
    table = format_bench_table(rows)
    with open(out / "summary.txt", "w") as f:
        f.write(table + "\n")
    manifest.add_output(summary)
    manifest.add_output(out / "summary.txt")
    print(table)
    return EXIT_OK if all(row.passed for row in rows) else EXIT_VALIDATION


# =============================================================================
# ENTRY POINT
# =============================================================================


COMMANDS = {
    "simulate": cmd_simulate,
    "synth-flow": cmd_synth_flow,
    "identify": cmd_identify,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="mpmflow",
        description="Differentiable MPM simulation and flow-guided material identification.",
    )
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def common(p: argparse.ArgumentParser, scene: bool = True):
        if scene:
            p.add_argument("--scene", help="Scene file (JSON, // comments allowed)")
            p.add_argument("--prior", help="Material prior file")
        p.add_argument("--out", help=f"Output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
        p.add_argument("--seed", type=int, default=None, help="Override the scene seed")
        p.add_argument("--threads", type=int, default=0,
                       help="Worker threads; 0 is the deterministic reference mode")
        p.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("simulate", help="Run a scene and write frame CSVs")
    common(p)

    p = sub.add_parser("synth-flow", help="Synthesize .flo files from frame CSVs")
    p.add_argument("--frames", required=True, help="Directory of frame_%%05d.csv files")
    p.add_argument("--scene", help="Scene file supplying the camera")
    p.add_argument("--splat-radius", type=float, default=1.5)
    common(p, scene=False)

    p = sub.add_parser("identify", help="Recover material parameters from observed flow")
    common(p)
    p.add_argument("--observed", required=True, help="Directory of flow_%%05d.flo files")
    p.add_argument("--truth", help="Ground-truth file (same schema as the prior)")
    p.add_argument("--material", help="Material to identify (default: first body's)")
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--learning-rate", type=float, default=0.05, help="Adam step in raw space")
    p.add_argument("--decay-rate", type=float, default=1.0,
                   help="Step multiplier reached after --iters iterations")
    p.add_argument("--loss", default="flow", help="Guidance loss (only 'flow' is available)")

    p = sub.add_parser("gradcheck", help="Tangent vs finite-difference check")
    common(p)
    p.add_argument("--material", help="Material to check (default: first body's)")
    p.add_argument("--fd-step", type=float, default=1e-5, help="Relative FD step")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--splat-radius", type=float, default=1.5)

    p = sub.add_parser("bench", help="Run the self-recovery benchmark suite")
    p.add_argument("--suite", required=True, help="Suite file")
    p.add_argument("--iters", type=int, default=None, help="Override the suite budget")
    p.add_argument("--jobs", type=int, default=1, help="Cases run concurrently")
    common(p, scene=False)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    manifest = RunManifest.new(args.command, seed=args.seed)
    try:
        code = COMMANDS[args.command](args, manifest)
    except UsageError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except FileNotFoundError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except (InitialBlowupError, SimulationError, NonFiniteError, InvertedElementError) as e:
        logger.error(f"Simulation blow-up: {e}")
        code = EXIT_BLOWUP
    except LossNotImplementedError as e:
        logger.error(str(e))
        code = EXIT_VALIDATION
    except ValueError as e:
        logger.error(str(e))
        code = EXIT_VALIDATION

    manifest.finish("ok" if code == EXIT_OK else f"exit_{code}")
    manifest.save(output_dir(args, args.command))
    return code


if __name__ == "__main__":
    sys.exit(main())
