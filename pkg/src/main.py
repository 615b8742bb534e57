import argparse
import asyncio
import json
import logging
import os
import sys
from pathlib import Path

from dotenv import load_dotenv
from pydantic import ValidationError

from config import (
    get_frame_config,
    get_phantom_config,
    get_sampling_config,
    get_solver_config,
    get_spirit_config,
    get_stepsize_config,
    get_system_config,
    parallel_disabled,
)

# Load environment variables from .env file in project root
load_dotenv(get_system_config().ENV_FILE)

from flow import (  # noqa: E402
    create_bound_flow,
    create_calibration_flow,
    create_compare_flow,
    create_mask_flow,
    create_phantom_flow,
    create_recon_flow,
    create_sweep_flow,
)
from utils.artifact_manifest import create_artifact_manifest  # noqa: E402
from utils.experiments import ExperimentSpec, read_csv  # noqa: E402
from utils.fourier import MaskSpec  # noqa: E402
from utils.phantom import PhantomSpec  # noqa: E402
from utils.progress import get_progress_tracker  # noqa: E402
from utils.solver import DivergenceError, PfistaConfig  # noqa: E402
from utils.stepsize import StepRule, StepSizeError  # noqa: E402
from utils.tightframe import FrameSpec  # noqa: E402

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DIVERGED = 2
EXIT_ORDERING = 3  # sweep finished but larger certified gamma was not faster

STEP_RULE_NAMES = {"recommended": "recommended", "power": "power-iteration", "backtracking": "backtracking"}


class CliParser(argparse.ArgumentParser):
    """ArgumentParser whose usage errors exit with status 1"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def setup_logging():
    config = get_system_config()
    level = os.getenv("PFISTA_LOG_LEVEL", config.LOG_LEVEL).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=config.LOG_FORMAT)


def _common_arguments() -> argparse.ArgumentParser:
    solver = get_solver_config()
    sampling = get_sampling_config()
    frame = get_frame_config()
    step = get_stepsize_config()
    phantom = get_phantom_config()
    spirit = get_spirit_config()

    common = CliParser(add_help=False)
    model = common.add_argument_group("model")
    model.add_argument("--model", choices=["sense", "spirit"], default="sense")
    model.add_argument("--lambda", dest="lam", type=float, default=None,
                       help=f"sparsity weight (default {solver.LAMBDA_SENSE} SENSE, {solver.LAMBDA_SPIRIT} SPIRiT)")
    model.add_argument("--lambda1", type=float, default=solver.LAMBDA1)
    model.add_argument("--kernel-size", type=int, default=spirit.KERNEL_SIZE)
    model.add_argument("--tikhonov", type=float, default=None)
    model.add_argument("--estimate-maps", action="store_true", help="estimate SENSE maps from the ACS band")

    stepping = common.add_argument_group("step size")
    stepping.add_argument("--gamma", type=float, default=None, help="manual step size, bypasses every rule")
    stepping.add_argument("--step-rule", choices=sorted(STEP_RULE_NAMES), default="recommended")
    stepping.add_argument("--bound", choices=["paper", "safe"], default=solver.BOUND.value)
    stepping.add_argument("--power-iters", type=int, default=step.POWER_ITERS)
    stepping.add_argument("--power-tol", type=float, default=step.POWER_TOL)
    stepping.add_argument("--bt-eta", type=float, default=step.BT_ETA)
    stepping.add_argument("--bt-gamma-init", type=float, default=step.BT_GAMMA_INIT)

    iterations = common.add_argument_group("iterations")
    iterations.add_argument("--iters", type=int, default=solver.MAX_ITERS)
    iterations.add_argument("--rel-change-tol", type=float, default=solver.REL_CHANGE_TOL)
    iterations.add_argument("--record-every", type=int, default=solver.RECORD_EVERY)
    iterations.add_argument("--frame", choices=["haar", "db4"], default=frame.FILTER_FAMILY)
    iterations.add_argument("--levels", type=int, default=frame.LEVELS)
    iterations.add_argument("--exempt-scaling-band", action=argparse.BooleanOptionalAction,
                            default=frame.EXEMPT_SCALING_BAND, help="leave the coarsest scaling band unthresholded")

    data = common.add_argument_group("data")
    data.add_argument("--input", default=None, help="array stem of multi-coil k-space to use instead of a phantom")
    data.add_argument("--phantom", choices=["shepp-logan", "smooth-blobs"], default=phantom.KIND)
    data.add_argument("--rows", type=int, default=phantom.ROWS)
    data.add_argument("--cols", type=int, default=phantom.COLS)
    data.add_argument("--coils", type=int, default=phantom.COILS)
    data.add_argument("--noise-std", type=float, default=phantom.NOISE_STD)
    data.add_argument("--rate", type=float, default=sampling.RATE)
    data.add_argument("--acs-lines", type=int, default=sampling.ACS_LINES)
    data.add_argument("--density", choices=["uniform-random", "variable-density-gaussian"], default=sampling.DENSITY)
    data.add_argument("--seed", type=int, default=sampling.SEED)

    run = common.add_argument_group("run")
    run.add_argument("--out", default=None, help="output directory")
    run.add_argument("--jobs", type=int, default=get_system_config().PARALLEL_WORKERS)
    run.add_argument("--verify-dense", action="store_true", help="check the SPIRiT bound densely (tiny grids)")
    return common


def build_parser() -> CliParser:
    common = _common_arguments()
    parser = CliParser(prog="pfista", description="pFISTA reconstructions for SENSE and SPIRiT parallel MRI")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("phantom", parents=[common], help="generate a synthetic multi-coil phantom")
    sub.add_parser("mask", parents=[common], help="build a sampling mask and undersampled k-space")
    sub.add_parser("calibrate", parents=[common], help="calibrate SPIRiT kernels from the ACS band")
    sub.add_parser("bound", parents=[common], help="report the closed-form SPIRiT step-size bound")
    sub.add_parser("recon", parents=[common], help="run one pFISTA reconstruction")
    sweep = sub.add_parser("sweep", parents=[common], help="run pFISTA for several step-size multipliers")
    sweep.add_argument("--gammas", type=float, nargs="+", default=[0.1, 0.5, 1.0],
                       help="multipliers of the certified step size")
    sub.add_parser("compare-steprules", parents=[common], help="compare recommended, power and backtracking rules")
    verify = sub.add_parser("verify", help="check a run directory against its manifest")
    verify.add_argument("directory")
    return parser


def build_shared(args) -> dict:
    """Translate CLI arguments into the shared store the flows read"""
    solver = get_solver_config()
    lam = args.lam if args.lam is not None else (
        solver.LAMBDA_SENSE if args.model == "sense" else solver.LAMBDA_SPIRIT)
    frame = FrameSpec(filter_family=args.frame, level_count=args.levels)
    rule = StepRule(
        kind=STEP_RULE_NAMES[args.step_rule],
        gamma_init=args.bt_gamma_init,
        eta=args.bt_eta,
        power_iters=args.power_iters,
        power_tol=args.power_tol,
        bound=args.bound,
    )
    solver_cfg = PfistaConfig(
        model=args.model,
        lam=lam,
        lambda1=args.lambda1,
        step_rule=rule,
        gamma=args.gamma,
        max_iters=args.iters,
        rel_change_tol=args.rel_change_tol,
        frame=frame,
        record_every=args.record_every,
        exempt_scaling_band=args.exempt_scaling_band,
    )
    phantom_spec = PhantomSpec(kind=args.phantom, rows=args.rows, cols=args.cols, coils=args.coils,
                               noise_std=args.noise_std, seed=args.seed)
    mask_spec = MaskSpec(rate=args.rate, acs_lines=args.acs_lines, seed=args.seed, density=args.density)
    out_dir = args.out or str(Path(get_system_config().OUTPUT_DIR) / args.command)
    jobs = 1 if parallel_disabled() else max(1, args.jobs)

    shared = {
        "command": args.command,
        "model": args.model,
        "input_stem": args.input,
        "phantom_spec": phantom_spec,
        "mask_spec": mask_spec,
        "solver_cfg": solver_cfg,
        "kernel_size": args.kernel_size,
        "tikhonov": args.tikhonov,
        "estimate_maps": args.estimate_maps,
        "verify_dense": args.verify_dense,
        "out_dir": out_dir,
        "jobs": jobs,
        "artifacts": [],
        "summary": {},
    }
    if args.command == "sweep":
        shared["experiment"] = ExperimentSpec(model=args.model, gammas=args.gammas, iters=args.iters,
                                              mask=mask_spec, frame=frame, out_dir=out_dir)
    shared["config_echo"] = {
        "phantom": phantom_spec.model_dump(),
        "mask": mask_spec.model_dump(),
        "solver": solver_cfg.model_dump(by_alias=True),
        "input": args.input,
        "kernel_size": args.kernel_size,
        "tikhonov": args.tikhonov,
        "jobs": jobs,
    }
    return shared


FLOWS = {
    "phantom": create_phantom_flow,
    "mask": create_mask_flow,
    "calibrate": create_calibration_flow,
    "bound": create_bound_flow,
    "recon": create_recon_flow,
    "compare-steprules": create_compare_flow,
}


def verify_directory(directory: str) -> int:
    """Re-hash a run directory and check that every summary CSV has a header row"""
    manifest = create_artifact_manifest(directory)
    recorded = manifest.load_manifest()
    if not recorded:
        print(f"No manifest found in {directory}", file=sys.stderr)
        return EXIT_USAGE
    current = manifest.generate_manifest()
    problems = []
    for name, info in recorded.items():
        now = current.get(name)
        if now is None:
            problems.append(f"missing {name}")
        elif name.endswith(".csv"):
            if now.get("sha256_without_timing") != info.get("sha256_without_timing"):
                problems.append(f"changed {name}")
            with open(Path(directory) / name, newline="", encoding="utf-8") as f:
                if not f.readline().strip():
                    problems.append(f"no header in {name}")
            read_csv(Path(directory) / name)
        elif now["sha256"] != info["sha256"]:
            problems.append(f"changed {name}")
    for problem in problems:
        print(f"✗ {problem}")
    if not problems:
        print(f"✓ {len(recorded)} artifacts match the manifest")
    return EXIT_OK if not problems else EXIT_USAGE


def _record_divergence(shared: dict, error: DivergenceError):
    out_dir = Path(shared["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    last = error.trace.last
    metadata = {
        "command": shared["command"],
        "config": shared.get("config_echo", {}),
        "stop_reason": "diverged",
        "converged": False,
        "diverged_at_iteration": error.iteration,
        "last_recorded_objective": last.objective if last else None,
        "message": str(error),
    }
    with open(out_dir / "metadata.json", "w", encoding="utf-8") as f:
        json.dump(metadata, f, indent=2, default=str)
    create_artifact_manifest(out_dir).save_manifest()


def run_command(args) -> int:
    """Build the shared store, run the command's flow and print a summary"""
    shared = build_shared(args)
    tracker = get_progress_tracker()

    def progress_callback(progress_data):
        stage = progress_data.get('stage', '').upper()
        if progress_data.get('max_iters'):
            logger.info(f"{stage}: {progress_data.get('current_activity', '')} "
                        f"(objective {progress_data.get('objective')})")
        elif progress_data.get('total_runs'):
            logger.info(f"{stage}: {progress_data['runs_completed']}/{progress_data['total_runs']} runs")

    tracker.register_callback(progress_callback)
    tracker.start_session(args.command)

    print("\n" + "=" * 60)
    print(f"PFISTA {args.command.upper()}")
    print("=" * 60)

    try:
        if args.command == "sweep":
            asyncio.run(create_sweep_flow().run_async(shared))
        else:
            FLOWS[args.command]().run(shared)
    except DivergenceError as e:
        tracker.complete_session(False, "Divergence detected")
        logger.error(f"Divergence: {e}")
        _record_divergence(shared, e)
        print(f"\n✗ Diverged: {e}")
        print(f"  Partial trace in {shared['out_dir']}")
        return EXIT_DIVERGED
    finally:
        tracker.unregister_callback(progress_callback)

    tracker.complete_session(True)
    summary = shared.get("summary", {})
    if args.command == "bound":
        print(json.dumps(shared["bound_report"].model_dump(), indent=2))
        if "dense_check" in shared:
            print(f"  Dense check slack: {shared['dense_check']['slack']:.3e}")
    elif args.command == "recon":
        recon = summary["recon"]
        print(f"\n✓ Reconstruction finished ({recon['stop_reason']})")
        print(f"  Iterations: {recon['iterations']}")
        print(f"  Final objective: {recon['final_objective']:.8g}")
        if recon["final_rlne"] is not None:
            print(f"  RLNE: {recon['final_rlne']:.6f} (zero-filled {recon['zero_filled_rlne']:.6f})")
    elif args.command == "sweep":
        result = shared["sweep_summary"]
        mark = "✓" if result["ordering_holds"] else "✗"
        print(f"\n{mark} Sweep finished, ordering holds: {result['ordering_holds']}")
        for row in result["rows"]:
            print(f"  gamma x{row['gamma_mult']:g}: iterations to target {row['iters_to_1.01x_final']}")
        if not result["ordering_holds"]:
            logger.error("Sweep ordering violated: a larger certified gamma needed more iterations to the target")
            print(f"\n✗ Ordering violated, outputs kept in {shared['out_dir']}")
            print("=" * 60)
            return EXIT_ORDERING
    elif args.command == "compare-steprules":
        for row in shared["comparison"]["rows"]:
            print(f"  {row['rule']}: {row['total_ops']} applications ({row['ops_ratio_vs_recommended']:.2f}x)")
    print(f"\nOutputs written to {shared['out_dir']}")
    print("=" * 60)
    return EXIT_OK


def main(argv=None) -> int:
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    if args.command == "verify":
        return verify_directory(args.directory)

    try:
        return run_command(args)
    except (ValidationError, ValueError, OSError, StepSizeError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
