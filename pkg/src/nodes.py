from pocketflow import Node, BatchNode, AsyncParallelBatchNode
from utils.tensor_io import (
    ArrayFormatError,
    MultiCoilKSpace,
    load_array,
    save_array,
    save_ndarray,
)
from utils.fourier import make_mask
from utils.phantom import PhantomBundle, gen_phantom
from utils.sense import estimate_sensitivities
from utils.spirit import calibrate_kernels, kernels_to_image_weights, spirit_bound
from utils.stepsize import resolve_gamma
from utils.experiments import (
    COMPARE_HEADER,
    SWEEP_HEADER,
    ModelSetup,
    certified_gamma,
    compare_step_rules,
    run_solver,
    run_sweep_member,
    summarize_sweep,
    undersampled_kspace,
    verify_bound_dense,
    write_csv,
)
from utils.artifact_manifest import create_artifact_manifest
from utils.progress import get_progress_tracker
from config import get_spirit_config, get_system_config
import asyncio
import json
import logging
import subprocess
from pathlib import Path

logger = logging.getLogger(__name__)


def build_description() -> str:
    """git describe of the working tree, or "unknown" outside a repository"""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def queue_artifact(shared, kind: str, name: str, payload, role: str = None):
    shared.setdefault("artifacts", []).append((kind, name, payload, role))


class PhantomNode(Node):
    """Generate a synthetic phantom, or load multi-coil k-space from --input"""
    def prep(self, shared):
        tracker = get_progress_tracker()
        tracker.update_stage("data", "Preparing multi-coil data")
        return shared.get("input_stem"), shared["phantom_spec"]

    def exec(self, prep_res):
        input_stem, spec = prep_res
        if input_stem:
            data = load_array(input_stem)
            if not isinstance(data, MultiCoilKSpace):
                raise ArrayFormatError(f"{input_stem} does not hold multi-coil k-space (role 'kspace')")
            return PhantomBundle(truth=None, coils=None, kspace=data, maps=None)
        return gen_phantom(spec)

    def post(self, shared, prep_res, exec_res):
        shared["bundle"] = exec_res
        if exec_res.truth is not None:
            queue_artifact(shared, "array", "truth", exec_res.truth)
            queue_artifact(shared, "array", "coil_images", exec_res.coils)
            queue_artifact(shared, "ndarray", "sensitivity_true", exec_res.maps.maps, "sensitivity")
        if shared.get("command") == "phantom":
            queue_artifact(shared, "array", "kspace_full", exec_res.kspace)
        rows, cols = exec_res.kspace.shape
        logger.info(f"✓ Data ready: {exec_res.kspace.coil_count} coils on {rows}x{cols}")
        return "default"


class MaskNode(Node):
    """Build the sampling mask and the undersampled k-space"""
    def prep(self, shared):
        bundle = shared["bundle"]
        return shared["mask_spec"], bundle.kspace

    def exec(self, prep_res):
        spec, kspace = prep_res
        rows, cols = kspace.shape
        mask = make_mask(spec, rows, cols)
        return mask, undersampled_kspace(kspace, mask)

    def post(self, shared, prep_res, exec_res):
        mask, y = exec_res
        shared["mask"] = mask
        shared["kspace"] = y
        queue_artifact(shared, "ndarray", "mask", mask.centered().astype(complex), "mask")
        queue_artifact(shared, "array", "kspace", y)
        shared.setdefault("summary", {})["mask"] = {
            "rate": mask.rate,
            "acs_band": list(mask.acs_band),
            "columns": int(mask.keep[0].sum()),
        }
        return "default"


class ModelRouteNode(Node):
    """Branch on the reconstruction model"""
    def prep(self, shared):
        return shared["model"]

    def exec(self, prep_res):
        return prep_res

    def post(self, shared, prep_res, exec_res):
        logger.info(f"Routing to {exec_res} model")
        return exec_res


class SensitivityNode(Node):
    """Use ground-truth maps, or estimate them from the ACS band"""
    def prep(self, shared):
        bundle = shared["bundle"]
        estimate = shared.get("estimate_maps", False) or bundle.maps is None
        return estimate, bundle.maps, shared["kspace"], shared["mask"]

    def exec(self, prep_res):
        estimate, true_maps, y, mask = prep_res
        if estimate:
            return estimate_sensitivities(y, mask.acs_band)
        return true_maps

    def post(self, shared, prep_res, exec_res):
        shared["maps"] = exec_res
        if prep_res[0]:
            queue_artifact(shared, "ndarray", "sensitivity", exec_res.maps, "sensitivity")
        return "default"


class CalibrationNode(Node):
    """Calibrate SPIRiT kernels from the ACS band and convert them to image weights"""
    def prep(self, shared):
        get_progress_tracker().update_stage("calibration", "Calibrating SPIRiT kernels")
        cfg = get_spirit_config()
        return (shared["kspace"], shared["mask"], shared.get("kernel_size", cfg.KERNEL_SIZE),
                shared.get("tikhonov"))

    def exec(self, prep_res):
        y, mask, kernel_size, tikhonov = prep_res
        kernels = calibrate_kernels(y, mask.acs_band, kernel_size, tikhonov,
                                    workers=get_system_config().PARALLEL_WORKERS)
        weights = kernels_to_image_weights(kernels, *y.shape)
        return kernels, weights

    def post(self, shared, prep_res, exec_res):
        kernels, weights = exec_res
        shared["kernels"] = kernels
        shared["weights"] = weights
        queue_artifact(shared, "ndarray", "spirit_kernels", kernels.kernels, "spirit-kernels")
        queue_artifact(shared, "ndarray", "spirit_weights", weights.w, "spirit-weights")
        shared.setdefault("summary", {})["calibration"] = {
            "kernel_size": kernels.kernel_size,
            "tikhonov": kernels.tikhonov,
            "residual": kernels.residual,
            "acs_band": list(prep_res[1].acs_band),
        }
        logger.info(f"✓ Calibration residual {kernels.residual:.3e}")
        return "default"


class BoundNode(Node):
    """Closed-form SPIRiT bound, optionally checked against a dense eigendecomposition"""
    def prep(self, shared):
        return shared["weights"], shared["mask"], shared["solver_cfg"].lambda1, shared.get("verify_dense", False)

    def exec(self, prep_res):
        weights, mask, lambda1, verify = prep_res
        report = spirit_bound(weights, lambda1)
        dense = verify_bound_dense(weights, mask, report) if verify else None
        return report, dense

    def post(self, shared, prep_res, exec_res):
        report, dense = exec_res
        shared["bound_report"] = report
        payload = report.model_dump()
        if dense is not None:
            payload["dense_check"] = dense
            shared["dense_check"] = dense
        queue_artifact(shared, "json", "bound", payload)
        return "default"


class ModelSetupNode(Node):
    """Collect the model inputs a solver run needs"""
    def prep(self, shared):
        return shared

    def exec(self, prep_res):
        shared = prep_res
        bundle = shared["bundle"]
        model = shared["model"]
        if model == "sense":
            reference = bundle.truth
        else:
            reference = bundle.coils
        return ModelSetup(
            model=model,
            mask=shared["mask"],
            kspace=shared["kspace"],
            reference=reference,
            maps=shared.get("maps"),
            kernels=shared.get("kernels"),
            weights=shared.get("weights"),
            bound_report=shared.get("bound_report"),
        )

    def post(self, shared, prep_res, exec_res):
        shared["setup"] = exec_res
        return "default"


class StepSizeNode(Node):
    """Resolve gamma with the configured rule (or the manual override)"""
    def prep(self, shared):
        get_progress_tracker().update_stage("stepsize", "Resolving step size")
        return shared["setup"], shared["solver_cfg"]

    def exec(self, prep_res):
        setup, cfg = prep_res
        operator = setup.build_operator(cfg.lambda1)
        return resolve_gamma(setup.model, cfg.step_rule, operator, setup.bound_report, gamma=cfg.gamma)

    def post(self, shared, prep_res, exec_res):
        shared["step_report"] = exec_res
        logger.info(f"✓ Step size {exec_res.gamma:.6g} ({exec_res.rule}, setup {exec_res.setup_op_applications} applications)")
        return "default"


class ReconstructionNode(Node):
    """Run pFISTA and stream the trace into the output directory"""
    def prep(self, shared):
        get_progress_tracker().update_stage("reconstruction", f"Running pFISTA-{shared['model']}")
        out_dir = Path(shared["out_dir"])
        return shared["setup"], shared["solver_cfg"], shared["step_report"], out_dir / "trace.csv"

    def exec(self, prep_res):
        setup, cfg, step, trace_path = prep_res
        return run_solver(setup, cfg, trace_path=trace_path, step_report=step, progress=get_progress_tracker())

    def post(self, shared, prep_res, exec_res):
        shared["result"] = exec_res
        queue_artifact(shared, "array", "recon", exec_res.image)
        last = exec_res.trace.last
        shared.setdefault("summary", {})["recon"] = {
            "stop_reason": exec_res.stop_reason,
            "converged": exec_res.converged,
            "iterations": last.iteration,
            "final_objective": last.objective,
            "final_rlne": last.rlne,
            "zero_filled_rlne": exec_res.zero_filled_rlne,
            "gamma": exec_res.gamma,
            "op_applications": exec_res.op_applications,
            "step_report": exec_res.step_report.model_dump(),
            **exec_res.metadata,
        }
        return "default"


class SweepNode(AsyncParallelBatchNode):
    """Run one solver instance per gamma multiplier, at most `jobs` at a time"""
    async def prep_async(self, shared):
        experiment = shared["experiment"]
        setup = shared["setup"]
        bound = shared["solver_cfg"].step_rule.bound
        base_gamma = certified_gamma(setup, bound)
        self._semaphore = asyncio.Semaphore(max(1, shared.get("jobs", 1)))
        tracker = get_progress_tracker()
        tracker.update_stage("sweep", f"Sweeping {len(experiment.gammas)} step sizes")
        tracker.start_runs(len(experiment.gammas))
        shared["base_gamma"] = base_gamma
        cfg = shared["solver_cfg"].model_copy(update={"max_iters": experiment.iters})
        out_dir = Path(shared["out_dir"])
        return [(setup, cfg, mult, base_gamma, out_dir) for mult in experiment.gammas]

    async def exec_async(self, item):
        setup, cfg, mult, base_gamma, out_dir = item
        async with self._semaphore:
            run = await asyncio.to_thread(run_sweep_member, setup, cfg, mult, base_gamma, out_dir)
        get_progress_tracker().increment_runs(f"gamma x{mult:g}")
        return run

    async def post_async(self, shared, prep_res, exec_res_list):
        shared["sweep_runs"] = exec_res_list
        return "default"


class SweepSummaryNode(Node):
    """Common target, iterations-to-target and the ordering flag"""
    def prep(self, shared):
        return shared["sweep_runs"]

    def exec(self, prep_res):
        return summarize_sweep(prep_res)

    def post(self, shared, prep_res, exec_res):
        shared["sweep_summary"] = exec_res
        queue_artifact(shared, "csv", "sweep_summary", (SWEEP_HEADER, exec_res["rows"]))
        queue_artifact(shared, "json", "sweep", {
            "base_gamma": shared.get("base_gamma"),
            **exec_res,
        })
        flag = "✓" if exec_res["ordering_holds"] else "✗"
        logger.info(f"{flag} Larger certified gamma reaches the target in no more iterations: {exec_res['ordering_holds']}")
        return "default"


class StepRuleComparisonNode(Node):
    """Recommended vs power iteration vs backtracking to a common objective target"""
    def prep(self, shared):
        get_progress_tracker().update_stage("compare", "Comparing step-size rules")
        return shared["setup"], shared["solver_cfg"], Path(shared["out_dir"])

    def exec(self, prep_res):
        setup, cfg, out_dir = prep_res
        return compare_step_rules(setup, cfg, out_dir)

    def post(self, shared, prep_res, exec_res):
        shared["comparison"] = exec_res
        queue_artifact(shared, "csv", "steprules", (COMPARE_HEADER, exec_res["rows"]))
        # wall_ms is CSV-only; the JSON hash must not change between runs
        untimed = [{k: v for k, v in row.items() if k != "wall_ms"} for row in exec_res["rows"]]
        queue_artifact(shared, "json", "steprules", {**exec_res, "rows": untimed})
        return "default"


class ArtifactWriterNode(BatchNode):
    """Write queued arrays, JSON and CSV files, then metadata.json and manifest.json"""
    def prep(self, shared):
        out_dir = Path(shared["out_dir"])
        out_dir.mkdir(parents=True, exist_ok=True)
        shared["_out_path"] = out_dir
        return [(out_dir, artifact) for artifact in shared.get("artifacts", [])]

    def exec(self, item):
        out_dir, (kind, name, payload, role) = item
        if kind == "array":
            save_array(out_dir / name, payload, role)
            return f"{name}.json/.bin"
        if kind == "ndarray":
            save_ndarray(out_dir / name, payload, role)
            return f"{name}.json/.bin"
        if kind == "csv":
            header, rows = payload
            write_csv(out_dir / f"{name}.csv", header, rows)
            return f"{name}.csv"
        with open(out_dir / f"{name}.json", "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, default=str)
        return f"{name}.json"

    def post(self, shared, prep_res, exec_res_list):
        out_dir = shared["_out_path"]
        metadata = {
            "command": shared.get("command"),
            "config": shared.get("config_echo", {}),
            "build": build_description(),
            **shared.get("summary", {}),
        }
        with open(out_dir / "metadata.json", "w", encoding="utf-8") as f:
            json.dump(metadata, f, indent=2, default=str)
        manifest = create_artifact_manifest(out_dir)
        manifest.save_manifest()
        shared["written"] = exec_res_list
        logger.info(f"✓ Wrote {len(exec_res_list)} artifacts to {out_dir}")
        return "default"
