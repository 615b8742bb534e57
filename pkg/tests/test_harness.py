import json
import math

import numpy as np
import pytest

import nodes
from config import FrameConfig
from main import EXIT_ORDERING, build_parser, build_shared, main
from utils.artifact_manifest import create_artifact_manifest
from utils.experiments import (
    COMPARE_HEADER,
    SWEEP_HEADER,
    ExperimentSpec,
    ModelSetup,
    SweepRun,
    compare_step_rules,
    iterations_to_target,
    read_csv,
    run_sweep_member,
    summarize_sweep,
    undersampled_kspace,
)
from utils.fourier import MaskSpec, ifft2_unitary, make_mask
from utils.phantom import PhantomSpec, gen_phantom
from utils.solver import TRACE_HEADER, PfistaConfig
from utils.spirit import calibrate_kernels, kernels_to_image_weights, spirit_bound
from utils.tensor_io import save_array, ssos
from utils.tightframe import FrameSpec

SMALL_GRID = ["--rows", "32", "--cols", "32", "--levels", "3", "--rate", "0.5", "--acs-lines", "8"]


def sense_setup(rows=32, cols=32, rate=0.5, acs_lines=8):
    bundle = gen_phantom(PhantomSpec(rows=rows, cols=cols))
    mask = make_mask(MaskSpec(rate=rate, acs_lines=acs_lines), rows, cols)
    return ModelSetup(model="sense", mask=mask, kspace=undersampled_kspace(bundle.kspace, mask),
                      reference=bundle.truth, maps=bundle.maps)


def spirit_setup(rows=64, cols=64, rate=0.34, acs_lines=12):
    bundle = gen_phantom(PhantomSpec(rows=rows, cols=cols))
    mask = make_mask(MaskSpec(rate=rate, acs_lines=acs_lines), rows, cols)
    y = undersampled_kspace(bundle.kspace, mask)
    kernels = calibrate_kernels(y, mask.acs_band, kernel_size=5)
    weights = kernels_to_image_weights(kernels, rows, cols)
    return ModelSetup(model="spirit", mask=mask, kspace=y, reference=bundle.coils, kernels=kernels,
                      weights=weights, bound_report=spirit_bound(weights, 1.0))


def test_phantom_adjoint_matches_truth():
    bundle = gen_phantom(PhantomSpec(rows=32, cols=32, coils=4))
    combined = ssos(ifft2_unitary(bundle.kspace.data))
    assert np.max(np.abs(combined - np.abs(bundle.truth.data))) <= 1e-10


def test_phantom_is_deterministic():
    first = gen_phantom(PhantomSpec(kind="smooth-blobs", rows=16, cols=16, noise_std=0.01, seed=3))
    second = gen_phantom(PhantomSpec(kind="smooth-blobs", rows=16, cols=16, noise_std=0.01, seed=3))
    assert first.kspace.data.tobytes() == second.kspace.data.tobytes()


def test_phantom_energy_is_preserved_by_the_transform():
    bundle = gen_phantom(PhantomSpec(rows=32, cols=32, coils=3))
    assert np.linalg.norm(bundle.kspace.data) == pytest.approx(np.linalg.norm(bundle.coils.data), rel=1e-12)


def test_iterations_to_target():
    assert iterations_to_target([0, 1, 2, 3], [9.0, 5.0, 2.0, 1.0], 2.0) == 2
    assert iterations_to_target([0, 5, 10], [9.0, 5.0, 4.0], 1.0) is None


def test_experiment_spec_validation():
    with pytest.raises(ValueError):
        ExperimentSpec(gammas=[])
    with pytest.raises(ValueError):
        ExperimentSpec(gammas=[0.5, -1.0])


def _run(mult, objectives, diverged=False):
    return SweepRun(gamma_mult=mult, gamma=mult, iterations=list(range(len(objectives))),
                    objectives=objectives, final_objective=objectives[-1], diverged=diverged,
                    stop_reason="diverged" if diverged else "max-iters")


def test_summarize_sweep_orders_certified_runs():
    runs = [
        _run(0.5, [10.0, 6.0, 3.0, 2.0, 1.0]),
        _run(1.0, [10.0, 3.0, 1.0, 1.0, 1.0]),
        # faster than certified runs but excluded from the ordering
        _run(1.5, [10.0, 1.0, 1.0, 1.0, 1.0]),
        _run(3.0, [10.0, 50.0], diverged=True),
    ]
    summary = summarize_sweep(runs)
    assert summary["target"] == pytest.approx(1.01)
    hits = {row["gamma_mult"]: row["iters_to_1.01x_final"] for row in summary["rows"]}
    assert hits == {0.5: 4, 1.0: 2, 1.5: 1, 3.0: None}
    assert summary["ordering_holds"]
    assert [row["certified"] for row in summary["rows"]] == [True, True, False, False]


def test_summarize_sweep_flags_violation():
    runs = [_run(0.1, [10.0, 1.0]), _run(1.0, [10.0, 5.0, 1.0])]
    assert not summarize_sweep(runs)["ordering_holds"]


def test_summarize_sweep_unreached_counts_as_infinite():
    runs = [_run(0.1, [10.0, 8.0, 7.0]), _run(1.0, [10.0, 2.0, 1.0])]
    summary = summarize_sweep(runs)
    assert summary["rows"][0]["iters_to_1.01x_final"] is None
    assert summary["ordering_holds"]


def test_sense_sweep_ordering(tmp_path):
    setup = sense_setup()
    cfg = PfistaConfig(model="sense", lam=1e-3, max_iters=150, frame=FrameSpec(level_count=3))
    runs = [run_sweep_member(setup, cfg, mult, 1.0, tmp_path) for mult in (0.1, 0.5, 1.0)]
    summary = summarize_sweep(runs)
    assert summary["ordering_holds"]
    assert not any(r.diverged for r in runs)
    assert (tmp_path / "run_gamma_x0.5" / "trace.csv").exists()


def test_sweep_records_divergence(tmp_path):
    setup = sense_setup()
    cfg = PfistaConfig(model="sense", lam=1e-3, max_iters=200, frame=FrameSpec(level_count=3))
    run = run_sweep_member(setup, cfg, 5.0, 1.0, tmp_path)
    if run.diverged:
        assert run.stop_reason == "diverged"
        assert run.iterations
    else:
        assert run.objectives[-1] > 10 * min(run.objectives)


@pytest.mark.slow
def test_spirit_sweep_ordering(tmp_path):
    setup = spirit_setup()
    base = 1.0 / setup.bound_report.c_safe
    cfg = PfistaConfig(model="spirit", lam=1e-4, max_iters=500)
    runs = [run_sweep_member(setup, cfg, mult, base, tmp_path) for mult in (0.1, 0.5, 1.0)]
    assert summarize_sweep(runs)["ordering_holds"]


def test_compare_step_rules_sense(tmp_path):
    setup = sense_setup()
    cfg = PfistaConfig(model="sense", lam=1e-3, max_iters=120, frame=FrameSpec(level_count=3))
    comparison = compare_step_rules(setup, cfg, tmp_path)
    rows = {row["rule"]: row for row in comparison["rows"]}
    assert set(rows) == {"recommended", "power-iteration", "backtracking"}
    assert rows["recommended"]["setup_ops"] == 0
    assert rows["recommended"]["ops_ratio_vs_recommended"] == 1.0
    assert rows["power-iteration"]["setup_ops"] > 0
    assert rows["backtracking"]["per_iter_ops"] >= 3
    assert rows["recommended"]["total_ops"] < rows["backtracking"]["total_ops"]
    assert all(row["reached_target"] for row in rows.values())
    assert (tmp_path / "backtracking" / "trace.csv").exists()


# ---- command line ----

def test_phantom_command(tmp_path):
    out = tmp_path / "phantom"
    assert main(["phantom", "--rows", "16", "--cols", "16", "--coils", "2", "--out", str(out)]) == 0
    for name in ("truth", "coil_images", "kspace_full", "sensitivity_true"):
        assert (out / f"{name}.json").exists()
        assert (out / f"{name}.bin").exists()
    assert json.loads((out / "metadata.json").read_text())["command"] == "phantom"
    assert (out / "manifest.json").exists()


def test_mask_command(tmp_path):
    out = tmp_path / "mask"
    assert main(["mask", *SMALL_GRID, "--out", str(out)]) == 0
    metadata = json.loads((out / "metadata.json").read_text())
    assert metadata["mask"]["columns"] == 16
    assert (out / "mask.bin").exists()


def test_calibrate_command(tmp_path):
    out = tmp_path / "calibrate"
    args = ["calibrate", "--rows", "32", "--cols", "32", "--acs-lines", "12", "--rate", "0.5", "--out", str(out)]
    assert main(args) == 0
    metadata = json.loads((out / "metadata.json").read_text())
    assert metadata["calibration"]["kernel_size"] == 5
    assert (out / "spirit_weights.json").exists()


def test_bound_command_with_dense_check(tmp_path):
    out = tmp_path / "bound"
    args = ["bound", "--rows", "8", "--cols", "8", "--coils", "2", "--rate", "1.0", "--acs-lines", "8",
            "--kernel-size", "3", "--verify-dense", "--out", str(out)]
    assert main(args) == 0
    report = json.loads((out / "bound.json").read_text())
    assert report["dense_check"]["slack"] >= -1e-10
    assert report["c_safe"] == pytest.approx(1.0 + report["lambda1"] * report["c_paper"])


def test_recon_command(tmp_path):
    out = tmp_path / "recon"
    assert main(["recon", *SMALL_GRID, "--iters", "20", "--out", str(out)]) == 0
    metadata = json.loads((out / "metadata.json").read_text())
    assert metadata["recon"]["stop_reason"] == "max-iters"
    assert metadata["recon"]["iterations"] == 20
    assert metadata["config"]["solver"]["lambda"] == 1e-3
    rows = read_csv(out / "trace.csv")
    assert list(rows[0]) == TRACE_HEADER
    assert len(rows) == 21
    assert (out / "recon.bin").exists()


def test_spirit_recon_command(tmp_path):
    out = tmp_path / "spirit"
    args = ["recon", "--model", "spirit", "--rows", "32", "--cols", "32", "--levels", "3", "--rate", "0.5",
            "--acs-lines", "12", "--iters", "10", "--out", str(out)]
    assert main(args) == 0
    metadata = json.loads((out / "metadata.json").read_text())
    assert metadata["recon"]["step_report"]["rule"] == "recommended"
    assert (out / "bound.json").exists()


def test_recon_divergence_exit_code(tmp_path):
    out = tmp_path / "diverged"
    code = main(["recon", *SMALL_GRID, "--gamma", "5", "--iters", "200", "--out", str(out)])
    if code == 2:
        metadata = json.loads((out / "metadata.json").read_text())
        assert metadata["stop_reason"] == "diverged"
        assert len(read_csv(out / "trace.csv")) >= 1
    else:
        assert code == 0
        objectives = [float(r["objective"]) for r in read_csv(out / "trace.csv")]
        assert objectives[-1] > 10 * min(objectives)


def test_missing_input_exit_code(tmp_path, capsys):
    stem = tmp_path / "absent_kspace"
    assert main(["recon", "--input", str(stem), "--out", str(tmp_path / "out")]) == 1
    assert "absent_kspace" in capsys.readouterr().err


def test_malformed_input_exit_code(tmp_path):
    stem = tmp_path / "broken"
    (tmp_path / "broken.json").write_text("{not json")
    (tmp_path / "broken.bin").write_bytes(b"")
    assert main(["mask", "--input", str(stem), "--out", str(tmp_path / "out")]) == 1


def test_input_must_be_kspace(tmp_path):
    bundle = gen_phantom(PhantomSpec(rows=16, cols=16))
    save_array(tmp_path / "truth", bundle.truth)
    assert main(["mask", "--input", str(tmp_path / "truth"), "--out", str(tmp_path / "out")]) == 1


def test_input_kspace_is_used(tmp_path):
    bundle = gen_phantom(PhantomSpec(rows=32, cols=32))
    save_array(tmp_path / "scan", bundle.kspace)
    out = tmp_path / "out"
    assert main(["recon", *SMALL_GRID, "--input", str(tmp_path / "scan"), "--iters", "5", "--out", str(out)]) == 0
    metadata = json.loads((out / "metadata.json").read_text())
    # no ground truth, so no RLNE
    assert metadata["recon"]["final_rlne"] is None
    assert (out / "sensitivity.json").exists()


def test_usage_errors_exit_with_one():
    assert main(["recon", "--no-such-flag"]) == 1
    assert main(["frobnicate"]) == 1
    assert main([]) == 1


def test_invalid_values_exit_with_one(tmp_path):
    assert main(["recon", "--lambda", "0", "--out", str(tmp_path)]) == 1
    assert main(["mask", "--rate", "0.05", "--acs-lines", "12", "--out", str(tmp_path)]) == 1


def test_sweep_command(tmp_path):
    out = tmp_path / "sweep"
    assert main(["sweep", *SMALL_GRID, "--iters", "30", "--gammas", "0.5", "1.0", "--out", str(out)]) == 0
    rows = read_csv(out / "sweep_summary.csv")
    assert list(rows[0]) == SWEEP_HEADER
    assert [float(r["gamma_mult"]) for r in rows] == [0.5, 1.0]
    assert (out / "run_gamma_x0.5" / "trace.csv").exists()
    assert "ordering_holds" in json.loads((out / "sweep.json").read_text())


def test_sweep_command_exits_nonzero_on_ordering_violation(tmp_path, monkeypatch):
    def violated(runs):
        return {**summarize_sweep(runs), "ordering_holds": False}

    monkeypatch.setattr(nodes, "summarize_sweep", violated)
    out = tmp_path / "sweep"
    assert main(["sweep", *SMALL_GRID, "--iters", "10", "--gammas", "0.5", "1.0", "--out", str(out)]) == EXIT_ORDERING
    assert json.loads((out / "sweep.json").read_text())["ordering_holds"] is False
    assert (out / "sweep_summary.csv").exists()


def test_single_multiplier_sweep_matches_recon(tmp_path):
    common = [*SMALL_GRID, "--iters", "15"]
    assert main(["recon", *common, "--out", str(tmp_path / "recon")]) == 0
    assert main(["sweep", *common, "--gammas", "1.0", "--out", str(tmp_path / "sweep")]) == 0
    recon_trace = tmp_path / "recon" / "trace.csv"
    sweep_trace = tmp_path / "sweep" / "run_gamma_x1" / "trace.csv"
    hasher = create_artifact_manifest(tmp_path)
    assert hasher.trace_hash_without_timing(recon_trace) == hasher.trace_hash_without_timing(sweep_trace)


def test_compare_command(tmp_path):
    out = tmp_path / "compare"
    assert main(["compare-steprules", *SMALL_GRID, "--iters", "40", "--out", str(out)]) == 0
    rows = read_csv(out / "steprules.csv")
    assert list(rows[0]) == COMPARE_HEADER
    assert [r["rule"] for r in rows] == ["recommended", "power-iteration", "backtracking"]
    assert rows[0]["setup_ops"] == "0"


def test_compare_json_is_reproducible(tmp_path):
    args = ["compare-steprules", *SMALL_GRID, "--iters", "20"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    first = create_artifact_manifest(tmp_path / "a").load_manifest()
    second = create_artifact_manifest(tmp_path / "b").load_manifest()
    assert first["steprules.json"]["sha256"] == second["steprules.json"]["sha256"]
    rows = json.loads((tmp_path / "a" / "steprules.json").read_text())["rows"]
    assert all("wall_ms" not in row for row in rows)


def test_runs_are_reproducible(tmp_path):
    args = ["recon", *SMALL_GRID, "--iters", "10"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    first = create_artifact_manifest(tmp_path / "a").load_manifest()
    second = create_artifact_manifest(tmp_path / "b").load_manifest()
    assert set(first) == set(second)
    for name, info in first.items():
        if name.endswith(".csv"):
            assert info["sha256_without_timing"] == second[name]["sha256_without_timing"]
        else:
            assert info["sha256"] == second[name]["sha256"], name


def test_verify_command(tmp_path):
    out = tmp_path / "run"
    assert main(["recon", *SMALL_GRID, "--iters", "5", "--out", str(out)]) == 0
    assert main(["verify", str(out)]) == 0
    (out / "recon.bin").write_bytes(b"\x00" * 16)
    assert main(["verify", str(out)]) == 1


def test_trace_hash_ignores_timing(tmp_path):
    for name, wall in (("a.csv", "1.000"), ("b.csv", "9.500")):
        (tmp_path / name).write_text(f"{','.join(TRACE_HEADER)}\n0,1.0,,1.0,1.0,0,{wall}\n")
    hasher = create_artifact_manifest(tmp_path)
    assert hasher.trace_hash_without_timing(tmp_path / "a.csv") == hasher.trace_hash_without_timing(tmp_path / "b.csv")


def test_no_parallel_forces_one_job(monkeypatch):
    monkeypatch.setenv("PFISTA_NO_PARALLEL", "1")
    args = build_parser().parse_args(["sweep", "--jobs", "8"])
    assert build_shared(args)["jobs"] == 1
    monkeypatch.delenv("PFISTA_NO_PARALLEL")
    assert build_shared(args)["jobs"] == 8


def test_shared_store_defaults():
    args = build_parser().parse_args(["recon", "--model", "spirit"])
    shared = build_shared(args)
    assert shared["solver_cfg"].lam == 1e-4
    assert shared["solver_cfg"].step_rule.kind == "recommended"
    assert math.isclose(shared["mask_spec"].rate, 0.34)
    assert "experiment" not in shared


def test_scaling_band_exemption_defaults_from_config(monkeypatch):
    assert build_shared(build_parser().parse_args(["recon"]))["solver_cfg"].exempt_scaling_band is False
    monkeypatch.setattr(FrameConfig, "EXEMPT_SCALING_BAND", True)
    assert build_shared(build_parser().parse_args(["recon"]))["solver_cfg"].exempt_scaling_band is True
    args = build_parser().parse_args(["recon", "--no-exempt-scaling-band"])
    assert build_shared(args)["solver_cfg"].exempt_scaling_band is False
