"""Command-line surface: subcommands, exit codes, reproducibility."""

import json
from pathlib import Path

import numpy as np
import pytest

from tryonlab.cli import build_parser, run_command
from tryonlab.config import DEFAULT_CONFIG_YAML, RunConfig, config_from_dict, load_config

TINY_CFG = """
schedule_steps: 60
data: {frames: 2, image_size: 16, vae_factor: 4, n_train: 3, n_test: 2, seed: 5}
model: {channels: 12, heads: 2, head_dim: 6, blocks: 1, latent_channels: 4}
train: {iterations: 8, lr: 0.001, batch_size: 1, seed: 1}
sample: {teacher_steps: 3, seed: 9}
distill: {cache_size: 2, cache_seed: 3, teacher_steps: 6, student_indices: [0, 2, 4, 5],
          init_iterations: 3, init_batch: 1, dmd_iterations: 4, seed: 2}
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY_CFG)
    return path


def _dir_bytes(path):
    return {p.name: p.read_bytes() for p in sorted(Path(path).iterdir()) if p.is_file()}


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = config_from_dict(RunConfig().to_dict())
        assert cfg == RunConfig()

    def test_template_parses_to_defaults(self, tmp_path):
        path = tmp_path / "default.yaml"
        path.write_text(DEFAULT_CONFIG_YAML)
        assert load_config(path) == RunConfig()

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "bad.yaml"
        path.write_text("modle: {channels: 8}\n")
        with pytest.raises(ValueError, match="unknown config keys"):
            load_config(path)

    def test_dimension_invariant(self):
        with pytest.raises(ValueError, match="heads"):
            config_from_dict({"model": {"channels": 30, "heads": 2, "head_dim": 16}})

    def test_reference_defaults_pinned(self):
        cfg = RunConfig()
        assert cfg.sample.teacher_steps == 20
        assert cfg.distill.student_indices == (0, 36, 44, 49)
        assert cfg.distill.teacher_steps == 50
        assert cfg.schedule_steps == 1000
        assert (cfg.model.channels, cfg.model.heads, cfg.model.head_dim, cfg.model.blocks) == (32, 2, 16, 4)


class TestCliBasics:
    def test_unknown_subcommand_exits_two(self, capsys):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["frobnicate"])
        assert exc.value.code == 2

    def test_missing_required_argument_exits_two(self):
        with pytest.raises(SystemExit) as exc:
            build_parser().parse_args(["train", "--out", "x"])
        assert exc.value.code == 2

    def test_inspect_prints_header(self, tmp_path, capsys):
        from tryonlab.container import write_tensor_container

        path = tmp_path / "t.tc"
        write_tensor_container(path, {"m": np.zeros((2, 3), np.float32)})
        assert run_command(["inspect", str(path)]) == 0
        out = json.loads(capsys.readouterr().out)
        assert out["shapes"] == [[2, 3]]

    def test_inspect_malformed_exits_two(self, tmp_path):
        path = tmp_path / "bad.tc"
        path.write_bytes(b"garbage")
        assert run_command(["inspect", str(path)]) == 2

    def test_missing_file_exits_two(self, tmp_path):
        assert run_command(["inspect", str(tmp_path / "absent.tc")]) == 2


class TestGenData:
    def test_identical_runs_are_byte_identical(self, tmp_path, tiny_config):
        d1, d2 = tmp_path / "d1", tmp_path / "d2"
        args1 = ["gen-data", "--out", str(d1), "--config", str(tiny_config), "--seed", "7", "--n", "8"]
        args2 = ["gen-data", "--out", str(d2), "--config", str(tiny_config), "--seed", "7", "--n", "8"]
        assert run_command(args1) == 0
        assert run_command(args2) == 0
        b1, b2 = _dir_bytes(d1), _dir_bytes(d2)
        # run manifests differ only in the recorded --out path
        b1.pop("run_manifest.json")
        b2.pop("run_manifest.json")
        assert b1 == b2
        assert len([n for n in b1 if n.endswith(".tc")]) == 8


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY_CFG)
    data = root / "data"
    assert run_command(["gen-data", "--out", str(data), "--config", str(cfg)]) == 0
    run = root / "run"
    assert run_command([
        "train", "--data", str(data), "--out", str(run), "--config", str(cfg),
    ]) == 0
    return root, cfg, data, run


class TestPipeline:
    def test_train_outputs(self, workspace):
        root, cfg, data, run = workspace
        assert (run / "teacher.tc").exists()
        assert (run / "teacher.json").exists()
        log = (run / "loss_log.csv").read_text().splitlines()
        assert log[0] == "iteration,loss,masked_term,unmasked_term"
        assert len(log) >= 8
        manifest = json.loads((run / "run_manifest.json").read_text())
        assert manifest["config"]["train"]["iterations"] == 8

    def test_sample_writes_frames_and_container(self, workspace):
        root, cfg, data, run = workspace
        out = root / "samples"
        code = run_command([
            "sample", "--checkpoint", str(run / "teacher"), "--data", str(data),
            "--out", str(out), "--config", str(cfg), "--steps", "3",
        ])
        assert code == 0
        assert (out / "frame_000.png").exists()
        assert (out / "frame_001.png").exists()
        assert (out / "result.tc").exists()
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert manifest["nfe"] == 3

    def test_sample_determinism(self, workspace):
        root, cfg, data, run = workspace
        outs = []
        for name in ("s1", "s2"):
            out = root / name
            run_command([
                "sample", "--checkpoint", str(run / "teacher"), "--data", str(data),
                "--out", str(out), "--config", str(cfg), "--steps", "3",
            ])
            outs.append((out / "result.tc").read_bytes())
        assert outs[0] == outs[1]

    def test_eval_writes_report(self, workspace):
        root, cfg, data, run = workspace
        report_path = root / "report.json"
        code = run_command([
            "eval", "--checkpoint", str(run / "teacher"), "--data", str(data),
            "--out", str(report_path), "--config", str(cfg), "--steps", "3",
        ])
        assert code == 0
        report = json.loads(report_path.read_text())
        assert set(report) >= {"paired", "unpaired", "n_samples"}
        assert report["paired"]["ssim"] is not None
        assert report["unpaired"]["ssim"] is None
        assert report["unpaired"]["garment_fidelity"] is not None

    def test_distill_and_student_sampling(self, workspace):
        root, cfg, data, run = workspace
        out = root / "distilled"
        code = run_command([
            "distill", "--checkpoint", str(run / "teacher"), "--data", str(data),
            "--out", str(out), "--config", str(cfg),
        ])
        assert code == 0
        assert (out / "student.tc").exists()
        assert (out / "ode_cache" / "trajectories.tc").exists()
        history = json.loads((out / "distill_history.json").read_text())
        assert len(history["init_loss"]) == 3

        frames = root / "student_frames"
        code = run_command([
            "sample", "--checkpoint", str(out / "student"), "--data", str(data),
            "--out", str(frames), "--config", str(cfg), "--student",
        ])
        assert code == 0
        manifest = json.loads((frames / "run_manifest.json").read_text())
        assert manifest["nfe"] == 4

    def test_rerun_from_manifest_reproduces_checkpoint(self, workspace):
        root, cfg, data, run = workspace
        rerun = root / "rerun"
        code = run_command([
            "train", "--data", str(data), "--out", str(rerun),
            "--config", str(run / "run_manifest.json"),
        ])
        assert code == 0
        assert (rerun / "teacher.tc").read_bytes() == (run / "teacher.tc").read_bytes()
