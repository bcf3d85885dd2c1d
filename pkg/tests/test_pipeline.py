"""Config parsing, keyframe scheduling, batch stages, and the CLI.

The heavier tests share one small on-disk sequence (12 frames, 0.03 m
steps, seed 0) built once per module; every run over it is
deterministic, so metric comparisons against it are stable.
"""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path

import numpy as np
import pytest

from smvfuse.cli import main
from smvfuse.config import RunConfig, build_config, parse_assignment, read_config_file
from smvfuse.fusion import FusionParams, fuse
from smvfuse.maps import DenseDepthMap, SparseDepthSet
from smvfuse.pipeline import (
    PipelineError,
    generate_synthetic_sequence,
    keyframe_indices,
    load_sequence,
    manual_selection_filter,
    overlap_indices,
    read_omega_csv,
    run_ablation,
    run_pipeline,
    thread_count,
    write_omega_csv,
)


class TestRunConfig:
    def test_defaults_are_the_tuned_values(self):
        c = RunConfig()
        assert (c.sigma1, c.sigma2, c.sigma3) == (15.0, 0.1, 1e-3)
        assert (c.fraction, c.ransac_iters, c.inlier_tol) == (0.25, 200, 0.10)
        assert c.gradient_threshold == 0.35
        assert (c.keyframe_every, c.n_overlap) == (10, 4)
        g = c.hypothesis_grid()
        assert (g.rho_min, g.rho_max, g.n_samples) == (0.1, 2.0, 64)
        assert c.fusion_params() == FusionParams(15.0, 0.1, 1e-3)

    def test_echo_lists_every_field_sorted(self):
        lines = RunConfig().echo_text().splitlines()
        keys = [l.split("=")[0] for l in lines]
        assert keys == sorted(keys)
        assert "sigma1=15.0" in lines
        assert "gradient_threshold=0.35" in lines

    def test_unknown_key_rejected_with_catalog(self):
        with pytest.raises(ValueError, match="valid keys"):
            parse_assignment("sigma9=1.0")

    def test_missing_equals_rejected(self):
        with pytest.raises(ValueError, match="key=value"):
            parse_assignment("sigma1")

    def test_config_file_error_names_line(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("# fine\nsigma1 = 10\nwat = 7\n")
        with pytest.raises(ValueError, match=r"run\.cfg:3"):
            read_config_file(p)

    def test_override_beats_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("sigma1 = 10\nseed = 3\n")
        c = build_config(p, ["sigma1=5"])
        assert c.sigma1 == 5.0
        assert c.seed == 3

    def test_file_paths_resolve_against_file_dir(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("manifest = manifest.txt\n")
        c = build_config(p, ["poses=elsewhere/traj.txt"])
        assert c.manifest == tmp_path / "manifest.txt"
        assert c.poses == Path("elsewhere/traj.txt")

    def test_bad_numeric_value_names_key(self, tmp_path):
        with pytest.raises(ValueError, match="seed"):
            build_config(None, ["seed=three"])

    def test_require_paths_names_missing_file(self, tmp_path):
        c = RunConfig(intrinsics=tmp_path / "nope.txt")
        with pytest.raises(FileNotFoundError, match="nope.txt"):
            c.require_paths("intrinsics")
        with pytest.raises(FileNotFoundError, match="manifest"):
            c.require_paths("manifest")


class TestScheduling:
    def test_keyframe_cadence(self):
        assert keyframe_indices(25, 10) == [0, 10, 20]
        assert keyframe_indices(3, 10) == [0]

    def test_bad_cadence_rejected(self):
        with pytest.raises(PipelineError):
            keyframe_indices(10, 0)

    def test_overlaps_interior(self):
        assert overlap_indices(10, 20, 4) == [8, 9, 11, 12]

    def test_overlaps_at_edges(self):
        assert overlap_indices(0, 20, 4) == [1, 2, 3, 4]
        assert overlap_indices(19, 20, 4) == [15, 16, 17, 18]

    def test_distance_tie_prefers_earlier_frame(self):
        # Around keyframe 2 the distance-1 frames are 1 and 3; the
        # third slot ties frames 0 and 4 at distance 2 and goes to 0.
        assert overlap_indices(2, 5, 3) == [0, 1, 3]

    def test_count_capped_by_available_frames(self):
        assert overlap_indices(0, 3, 10) == [1, 2]


class TestOmegaCsv:
    def test_round_trip_exact(self, tmp_path):
        omega = SparseDepthSet(
            np.array([[3, 4], [10, 2]]), np.array([2.125, 1.0 / 3.0])
        )
        p = tmp_path / "omega.csv"
        write_omega_csv(omega, p)
        back = read_omega_csv(p)
        np.testing.assert_array_equal(back.pixels, omega.pixels)
        np.testing.assert_array_equal(back.depths, omega.depths)

    def test_header_enforced(self, tmp_path):
        p = tmp_path / "omega.csv"
        p.write_text("x,y,z\n1,2,3.0\n")
        with pytest.raises(ValueError, match="u,v,m"):
            read_omega_csv(p)


class TestManualSelectionFilter:
    def _setup(self):
        gt = DenseDepthMap(np.full((8, 8), 2.0))
        pixels = np.array([[1, 1], [2, 2], [3, 3], [4, 4]])
        depths = np.array([2.05, 1.96, 2.5, 1.4])
        return gt, SparseDepthSet(pixels, depths)

    def test_infinite_tolerance_is_identity(self):
        gt, omega = self._setup()
        kept = manual_selection_filter(omega, gt, tol=np.inf)
        assert len(kept) == 4

    def test_exact_agreement_is_identity(self):
        gt, omega = self._setup()
        exact = SparseDepthSet(omega.pixels, np.full(4, 2.0))
        assert len(manual_selection_filter(exact, gt)) == 4

    def test_half_bad_keeps_exactly_the_good_half(self):
        # Errors are 0.05, 0.04, 0.5, 0.6 m against the default 0.10 m
        # tolerance, so pixels (1,1) and (2,2) survive.
        gt, omega = self._setup()
        kept = manual_selection_filter(omega, gt, tol=0.10)
        np.testing.assert_array_equal(kept.pixels, [[1, 1], [2, 2]])

    def test_nonpositive_tolerance_rejected(self):
        gt, omega = self._setup()
        with pytest.raises(ValueError, match="positive"):
            manual_selection_filter(omega, gt, tol=0.0)


class TestThreadCount:
    def test_default_is_one(self, monkeypatch):
        monkeypatch.delenv("SMVFUSE_THREADS", raising=False)
        assert thread_count() == 1

    def test_env_cap_respected(self, monkeypatch):
        monkeypatch.setenv("SMVFUSE_THREADS", "8")
        assert thread_count() == 8

    def test_non_integer_rejected(self, monkeypatch):
        monkeypatch.setenv("SMVFUSE_THREADS", "many")
        with pytest.raises(PipelineError):
            thread_count()

    def test_zero_rejected(self, monkeypatch):
        monkeypatch.setenv("SMVFUSE_THREADS", "0")
        with pytest.raises(PipelineError):
            thread_count()


# ---------------------------------------------------------------------------
# on-disk sequence


@pytest.fixture(scope="module")
def sequence_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("sequence")
    generate_synthetic_sequence(root, seed=0, n_frames=12, step=0.03)
    return root


def _run_config(sequence_dir: Path, out: Path, **extra) -> RunConfig:
    config = RunConfig(
        manifest=sequence_dir / "manifest.txt",
        intrinsics=sequence_dir / "intrinsics.txt",
        poses=sequence_dir / "trajectory.txt",
        single_view_dir=sequence_dir / "single",
        output_dir=out,
    )
    for key, value in extra.items():
        setattr(config, key, value)
    return config


def _metric(csv_path: Path, stem: str, method: str, column: str = "mae") -> float:
    with open(csv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["sequence"] == stem and row["method"] == method:
                return float(row[column])
    raise AssertionError(f"row {stem}/{method} not in {csv_path}")


def _tree_digest(out: Path) -> dict[str, str]:
    return {
        p.name: hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(out.iterdir())
        if p.is_file()
    }


class TestSyntheticSequenceOnDisk:
    def test_layout(self, sequence_dir):
        for name in ("manifest.txt", "trajectory.txt", "intrinsics.txt", "scene.txt", "run.cfg"):
            assert (sequence_dir / name).is_file()
        assert len(list((sequence_dir / "rgb").iterdir())) == 12

    def test_load_sequence_poses_and_truth(self, sequence_dir, tmp_path):
        ctx = load_sequence(_run_config(sequence_dir, tmp_path))
        assert len(ctx.frames) == 12
        # Lateral trajectory: frame 5 sits at x = 5 * 0.03.
        np.testing.assert_allclose(ctx.frames[5].pose.translation, [0.15, 0.0, 0.0], atol=1e-12)
        assert all(g is not None for g in ctx.gt)
        assert ctx.stem(0) == "frame_0000"


@pytest.fixture(scope="module")
def finished_run(sequence_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    code = run_pipeline(_run_config(sequence_dir, out))
    return out, code


@pytest.fixture(scope="module")
def finished_ablation(sequence_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    code = run_ablation(_run_config(sequence_dir, out))
    return out, code


class TestRunPipeline:
    def test_exit_zero(self, finished_run):
        assert finished_run[1] == 0

    def test_per_keyframe_artifacts(self, finished_run):
        out, _ = finished_run
        for stem in ("frame_0000", "frame_0010"):
            for suffix in (
                "_search.npy",
                "_multiview.pfm",
                "_omega.csv",
                "_model.txt",
                "_fused.pfm",
                "_err_fused.pfm",
                "_err_single.pfm",
            ):
                assert (out / f"{stem}{suffix}").is_file(), suffix
        assert (out / "metrics.csv").is_file()
        assert (out / "config_echo.txt").is_file()

    def test_fused_beats_single_view(self, finished_run):
        out, _ = finished_run
        for stem in ("frame_0000", "frame_0010"):
            fused = _metric(out / "metrics.csv", stem, "fused")
            single = _metric(out / "metrics.csv", stem, "single")
            assert fused < single

    def test_echo_captures_effective_parameters(self, finished_run):
        out, _ = finished_run
        echo = (out / "config_echo.txt").read_text()
        assert "sigma1=15.0" in echo
        assert "keyframe_every=10" in echo

    def test_rerun_is_byte_identical(self, sequence_dir, finished_run):
        out, _ = finished_run
        before = _tree_digest(out)
        assert run_pipeline(_run_config(sequence_dir, out)) == 0
        assert _tree_digest(out) == before

    def test_thread_cap_does_not_change_bytes(self, sequence_dir, finished_run, monkeypatch):
        out, _ = finished_run
        reference = _tree_digest(out)
        threaded = out.parent / "threaded"
        monkeypatch.setenv("SMVFUSE_THREADS", "8")
        assert run_pipeline(_run_config(sequence_dir, threaded)) == 0
        ours = _tree_digest(threaded)
        # The echo file embeds output_dir, the one intentional difference.
        assert set(ours) == set(reference)
        for name in reference:
            if name != "config_echo.txt":
                assert ours[name] == reference[name], name

    def test_sequence_without_truth_still_fuses(self, sequence_dir, tmp_path):
        # Drop the depth column from the manifest: fusion must still
        # run; there is just nothing to evaluate.
        lines = (sequence_dir / "manifest.txt").read_text().splitlines()
        trimmed = [" ".join(l.split()[:2]) for l in lines if not l.startswith("#")]
        bare = sequence_dir / "manifest_no_gt.txt"
        bare.write_text("\n".join(trimmed) + "\n")
        out = tmp_path / "no_gt"
        config = _run_config(sequence_dir, out)
        config.manifest = bare
        assert run_pipeline(config) == 0
        assert (out / "frame_0000_fused.pfm").is_file()
        assert not (out / "metrics.csv").exists()
        assert not (out / "frame_0000_err_fused.pfm").exists()


class TestRunAblation:
    def test_three_maps_and_rows_per_keyframe(self, finished_ablation):
        out, code = finished_ablation
        assert code == 0
        for stem in ("frame_0000", "frame_0010"):
            for variant in ("w1", "w1w2", "all"):
                assert (out / f"{stem}_fused_{variant}.pfm").is_file()
        with open(out / "metrics_ablation.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6

    def test_schema_stable_across_variants(self, finished_ablation):
        out, _ = finished_ablation
        header = (out / "metrics_ablation.csv").read_text().splitlines()[0]
        assert header == "sequence,method,rmse,mae,scale_inv,n"

    def test_more_weights_do_not_hurt(self, finished_ablation):
        out, _ = finished_ablation
        p = out / "metrics_ablation.csv"
        for stem in ("frame_0000", "frame_0010"):
            w1 = _metric(p, stem, "w1")
            w12 = _metric(p, stem, "w1w2")
            full = _metric(p, stem, "all")
            assert full <= w12 <= w1

    def test_w1_fixed_point_on_exact_agreement(self):
        # With anchors that agree with the map exactly, every weighted
        # term is m_q + s_p - s_q = s_p, so fusion returns s unchanged
        # (up to the weight normalization's 1e-9).
        rng = np.random.default_rng(7)
        s = DenseDepthMap(2.0 + rng.uniform(-0.5, 0.5, size=(12, 16)))
        pixels = np.array([[2, 3], [10, 8], [14, 1], [5, 11]])
        omega = SparseDepthSet(pixels, s.values[pixels[:, 1], pixels[:, 0]])
        fused = fuse(s, omega, FusionParams(), factors=(1,))
        np.testing.assert_allclose(fused.values, s.values, atol=1e-9)


class TestCli:
    def test_synth_then_pipeline(self, tmp_path, capsys):
        seq = tmp_path / "seq"
        assert main(["synth", "--out", str(seq), "--seed", "1", "--frames", "5"]) == 0
        assert main(["pipeline", "--config", str(seq / "run.cfg")]) == 0
        printed = capsys.readouterr().out
        assert "fused" in printed
        assert (seq / "out" / "frame_0000_fused.pfm").is_file()

    def test_missing_intrinsics_exits_2_naming_path(self, tmp_path, capsys):
        seq = tmp_path / "seq"
        main(["synth", "--out", str(seq), "--frames", "3"])
        code = main(
            ["pipeline", "--config", str(seq / "run.cfg"), "--set", "intrinsics=gone.txt"]
        )
        assert code == 2
        assert "gone.txt" in capsys.readouterr().err

    def test_stage_failure_exits_1_naming_stage(self, tmp_path, capsys):
        seq = tmp_path / "seq"
        main(["synth", "--out", str(seq), "--frames", "3"])
        code = main(
            ["pipeline", "--config", str(seq / "run.cfg"), "--set", "metric=l3"]
        )
        assert code == 1
        assert "[multiview]" in capsys.readouterr().err

    def test_unknown_key_exits_1(self, capsys):
        assert main(["pipeline", "--set", "nope=1"]) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_select_before_multiview_exits_2(self, tmp_path, capsys):
        seq = tmp_path / "seq"
        main(["synth", "--out", str(seq), "--frames", "3"])
        code = main(
            ["select", "--config", str(seq / "run.cfg"),
             "--set", f"output_dir={tmp_path / 'staged'}"]
        )
        assert code == 2
        assert "search stack" in capsys.readouterr().err
