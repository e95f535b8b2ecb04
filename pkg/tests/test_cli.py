import filecmp
import json
import re
from pathlib import Path

import pytest
import torch

from scenemotion.cli import main
from scenemotion.config import RunConfig, save_config
from scenemotion.io import load_motion, save_motion
from scenemotion.kinematics import default_skeleton

TINY_CFG = dict(
    window_frames=48,
    d_model=32,
    prior_layers=1,
    denoiser_layers=1,
    attention_heads=2,
    pae_kernel=13,
    batch_size=8,
    pae_train_steps=30,
    prior_train_steps=12,
    denoiser_train_steps=12,
    diffusion_steps=4,
)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generated corpus + trained tiny checkpoints, shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg_path = root / "tiny.cfg"
    save_config(RunConfig(**TINY_CFG), cfg_path)
    data = root / "data"
    code = main([
        "gen-data", "--out", str(data), "--scenes", "2", "--sequences-per-scene", "2",
        "--frames", "120", "--config", str(cfg_path), "--seed", "3",
    ])
    assert code == 0
    pae = root / "pae.pt"
    assert main(["train-pae", "--data", str(data), "--out", str(pae), "--config", str(cfg_path)]) == 0
    prior = root / "prior.pt"
    assert main(["train-prior", "--data", str(data), "--out", str(prior), "--config", str(cfg_path)]) == 0
    den = root / "denoiser.pt"
    assert main([
        "train-denoiser", "--data", str(data), "--pae", str(pae), "--out", str(den),
        "--config", str(cfg_path),
    ]) == 0
    manifest = json.loads((data / "manifest.json").read_text())
    return dict(root=root, cfg=cfg_path, data=data, pae=pae, prior=prior, denoiser=den,
                manifest=manifest)


def sample_args(ws, out, seed, motion=None, extra=()):
    motion = motion or ws["manifest"]["split"]["test"][0]
    scene = None
    for entry in ws["manifest"]["scenes"]:
        if motion in entry["sequences"]:
            scene = entry["scene_file"]
    return [
        "sample", "--motion", str(ws["data"] / motion), "--scene", str(ws["data"] / scene),
        "--pae", str(ws["pae"]), "--prior", str(ws["prior"]), "--denoiser", str(ws["denoiser"]),
        "--out", str(out), "--config", str(ws["cfg"]), "--seed", str(seed), *extra,
    ]


class TestTrainingCommands:
    def test_checkpoints_written(self, workspace):
        for key in ("pae", "prior", "denoiser"):
            assert workspace[key].exists()

    def test_run_records_written(self, workspace):
        record = json.loads((workspace["root"] / "run_record.json").read_text())
        assert "config" in record and "checkpoints" in record


class TestSample:
    def test_same_seed_byte_identical(self, workspace):
        out1 = workspace["root"] / "est1.mot"
        out2 = workspace["root"] / "est2.mot"
        assert main(sample_args(workspace, out1, seed=7)) == 0
        assert main(sample_args(workspace, out2, seed=7)) == 0
        assert filecmp.cmp(out1, out2, shallow=False)

    def test_different_seed_differs(self, workspace):
        out3 = workspace["root"] / "est3.mot"
        assert main(sample_args(workspace, out3, seed=8)) == 0
        assert not filecmp.cmp(workspace["root"] / "est1.mot", out3, shallow=False)

    def test_output_covers_input_length(self, workspace):
        motion, _ = load_motion(workspace["root"] / "est1.mot")
        gt, _ = load_motion(workspace["data"] / workspace["manifest"]["split"]["test"][0])
        assert motion.num_frames == gt.num_frames

    def test_guidance_toggles_run(self, workspace):
        out = workspace["root"] / "est_np.mot"
        assert main(sample_args(workspace, out, seed=7, extra=("--no-penetration", "--no-phase"))) == 0

    def test_missing_checkpoint_exit_3(self, workspace, tmp_path):
        args = sample_args(workspace, tmp_path / "x.mot", seed=1)
        i = args.index("--prior")
        args[i + 1] = str(tmp_path / "absent.pt")
        assert main(args) == 3

    def test_config_mismatch_exit_3(self, workspace, tmp_path):
        bad_cfg = tmp_path / "bad.cfg"
        save_config(RunConfig(**{**TINY_CFG, "d_model": 48}), bad_cfg)
        args = sample_args(workspace, tmp_path / "x.mot", seed=1)
        i = args.index("--config")
        args[i + 1] = str(bad_cfg)
        assert main(args) == 3


class TestEval(object):
    def test_identical_pair_all_zero(self, workspace, capsys, tmp_path):
        # a static clip: comparative metrics vanish on identical inputs, and a
        # motion without jerk or foot drift zeroes the absolute ones too
        from test_signals import t_pose

        still = tmp_path / "still.mot"
        static = t_pose(n=48)
        save_motion(
            still,
            type(static)(static.root_translation.float(), static.local_rotations.float()),
            default_skeleton(),
        )
        assert main([
            "eval", "--pred", str(still), "--gt", str(still), "--config", str(workspace["cfg"]),
        ]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        values = [float(v) for v in lines[-1].split()[1:]]
        assert all(v == 0.0 for v in values)

    def test_identical_walking_pair_zeroes_comparative_metrics(self, workspace, capsys):
        gt_file = workspace["data"] / workspace["manifest"]["split"]["test"][0]
        assert main([
            "eval", "--pred", str(gt_file), "--gt", str(gt_file), "--config", str(workspace["cfg"]),
        ]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        row = dict(zip(lines[-2].split()[1:], lines[-1].split()[1:]))
        for name in ("MPJRE", "MPJPE", "MPJVE", "HandPE", "UpperPE", "LowerPE"):
            assert float(row[name]) == 0.0

    def test_scene_penetration_summary(self, workspace, capsys):
        gt_file = workspace["data"] / workspace["manifest"]["split"]["test"][0]
        scene = workspace["manifest"]["scenes"][0]["scene_file"]
        for entry in workspace["manifest"]["scenes"]:
            if workspace["manifest"]["split"]["test"][0] in entry["sequences"]:
                scene = entry["scene_file"]
        assert main([
            "eval", "--pred", str(gt_file), "--gt", str(gt_file),
            "--scene", str(workspace["data"] / scene), "--config", str(workspace["cfg"]),
        ]) == 0
        out = capsys.readouterr().out
        assert "penetration: loss 0.0" in out

    def test_corrupt_data_exit_2(self, workspace, tmp_path):
        bad = tmp_path / "bad.mot"
        bad.write_bytes(b"garbage")
        assert main(["eval", "--pred", str(bad), "--gt", str(bad)]) == 2


class TestAblate:
    def test_row_per_combination(self, workspace, capsys):
        assert main([
            "ablate", "--data", str(workspace["data"]), "--workdir", str(workspace["root"] / "abl"),
            "--components", "pae", "--losses", "penetration", "--test-windows", "2",
            "--config", str(workspace["cfg"]),
        ]) == 0
        out = capsys.readouterr().out
        data_rows = [l for l in out.splitlines() if re.match(r"\s*[01]{3}\|[01]{2}\s", l)]
        assert len(data_rows) == 4  # 2 pae states x 2 penetration states


class TestUsage:
    def test_unknown_flag_exit_1(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--bogus-flag", "x"])
        assert exc.value.code == 1

    def test_unknown_command_exit_1(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1
