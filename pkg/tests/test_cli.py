"""Command-line surface: subcommands, config resolution, and exit codes."""

import json

import numpy as np
import pytest

from anchorsplat.cli import main, parse_config_file, UsageError
from anchorsplat.image import quantize, read_ppm, write_ppm
from anchorsplat.sceneio import load_scene
from anchorsplat.synth import oracle_render, random_blobs, ring_cameras
from anchorsplat.training import (
    TrainConfig,
    checkpoint_arrays,
    load_checkpoint,
    model_for_scene,
    render_checkpoint,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "scene"
    code = main(
        ["synth", "--out", str(path), "--blobs", "3", "--views", "9",
         "--width", "24", "--height", "24", "--seed", "3"]
    )
    assert code == 0
    return path


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, scene_dir):
    path = tmp_path_factory.mktemp("cli") / "run"
    code = main(
        ["train", "--scene", str(scene_dir), "--out", str(path),
         "--iterations", "4", "--k", "4", "--voxel-size", "0.5",
         "--lambda-dssim", "0", "--kan-hidden", "4"]
    )
    assert code == 0
    return path


# -- synth -------------------------------------------------------------------------


def test_synth_writes_declared_views(tmp_path):
    out = tmp_path / "scene"
    assert main(["synth", "--out", str(out), "--blobs", "1", "--views", "8",
                 "--width", "16", "--height", "16", "--seed", "7"]) == 0
    ppms = sorted(p.name for p in (out / "images").glob("*.ppm"))
    assert len(ppms) == 8
    records = json.loads((out / "cameras.json").read_text())
    assert len(records) == 8
    assert sorted(r["image_file"] for r in records) == ppms


def test_synth_same_seed_is_byte_identical(tmp_path):
    args = ["--blobs", "2", "--views", "3", "--width", "12", "--height", "12",
            "--seed", "5"]
    assert main(["synth", "--out", str(tmp_path / "a"), *args]) == 0
    assert main(["synth", "--out", str(tmp_path / "b"), *args]) == 0
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_synth_ground_truth_matches_oracle_replay(scene_dir):
    scene = load_scene(scene_dir)
    r = np.random.default_rng(3)
    blobs = random_blobs(3, r)
    cameras = ring_cameras(9, 24, 24)
    for i in (0, 4, 8):
        replay = oracle_render(blobs, cameras[i])
        assert np.array_equal(quantize(replay), quantize(scene.images[i]))


# -- train -------------------------------------------------------------------------


def test_train_writes_declared_artifacts(run_dir):
    for name in ("checkpoint.bin", "train_log.csv", "run_manifest.json", "loss_curve.png"):
        assert (run_dir / name).is_file(), name
        assert (run_dir / name).stat().st_size > 0, name
    manifest = json.loads((run_dir / "run_manifest.json").read_text())
    assert manifest["config"]["iterations"] == 4
    assert manifest["config"]["k"] == 4
    assert manifest["attention_heads"] == 7
    assert manifest["test_views"] == [0, 8]


def test_train_zero_iterations_equals_library_init(tmp_path, scene_dir):
    out = tmp_path / "run0"
    assert main(["train", "--scene", str(scene_dir), "--out", str(out),
                 "--iterations", "0", "--k", "4", "--voxel-size", "0.5",
                 "--kan-hidden", "4"]) == 0
    cfg = TrainConfig(iterations=0, k=4, voxel_size=0.5, kan_hidden=4)
    init = model_for_scene(load_scene(scene_dir).cloud, cfg)
    ref = tmp_path / "init.bin"
    save_checkpoint(ref, cfg, checkpoint_arrays(init))
    assert (out / "checkpoint.bin").read_bytes() == ref.read_bytes()


def test_train_disable_nlpd_removes_term(tmp_path, scene_dir):
    out = tmp_path / "run"
    assert main(["train", "--scene", str(scene_dir), "--out", str(out),
                 "--iterations", "3", "--k", "4", "--voxel-size", "0.5",
                 "--kan-hidden", "4", "--disable-nlpd"]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["disable_nlpd"] is True
    rows = (out / "train_log.csv").read_text().splitlines()[1:]
    nlpd_col = [float(line.split(",")[5]) for line in rows]
    assert nlpd_col == [0.0, 0.0, 0.0]


def test_train_flags_override_config_file(tmp_path, scene_dir):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text(
        "# base settings\niterations = 7\nk = 4\nvoxel_size = 0.5\nkan_hidden = 4\n"
    )
    out = tmp_path / "run"
    assert main(["train", "--scene", str(scene_dir), "--out", str(out),
                 "--config", str(cfg_file), "--iterations", "2"]) == 0
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["iterations"] == 2  # flag wins
    assert manifest["config"]["k"] == 4  # file applies where no flag given


def test_train_invalid_config_key_lists_valid(tmp_path, scene_dir, capsys):
    cfg_file = tmp_path / "bad.cfg"
    cfg_file.write_text("iterations = 2\nlearning_rate = 0.1\n")
    code = main(["train", "--scene", str(scene_dir), "--out", str(tmp_path / "x"),
                 "--config", str(cfg_file)])
    assert code == 1
    err = capsys.readouterr().err
    assert "learning_rate" in err and "valid keys" in err


def test_config_file_parsing(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\n\nk = 10  # trailing\nuse_l1 = true\n")
    assert parse_config_file(cfg) == {"k": "10", "use_l1": "true"}
    cfg.write_text("not a setting\n")
    with pytest.raises(UsageError, match="expected 'key = value'"):
        parse_config_file(cfg)


def test_unknown_flag_exits_one(scene_dir):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--scene", str(scene_dir), "--out", "x", "--frobnicate"])
    assert exc.value.code == 1


def test_help_exits_zero():
    for sub in ("synth", "train", "render", "eval", "inspect"):
        with pytest.raises(SystemExit) as exc:
            main([sub, "--help"])
        assert exc.value.code == 0


# -- render ------------------------------------------------------------------------


def test_render_is_reproducible_and_matches_library(tmp_path, scene_dir, run_dir):
    ckpt = run_dir / "checkpoint.bin"
    out1, out2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
    assert main(["render", "--checkpoint", str(ckpt), "--scene", str(scene_dir),
                 "--view", "2", "--out", str(out1)]) == 0
    assert main(["render", "--checkpoint", str(ckpt), "--scene", str(scene_dir),
                 "--view", "2", "--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
    scene = load_scene(scene_dir)
    ref = tmp_path / "ref.ppm"
    write_ppm(render_checkpoint(ckpt, scene.cameras[2]), ref)
    assert out1.read_bytes() == ref.read_bytes()


def test_render_bad_view_index_names_range(tmp_path, scene_dir, run_dir, capsys):
    code = main(["render", "--checkpoint", str(run_dir / "checkpoint.bin"),
                 "--scene", str(scene_dir), "--view", "99",
                 "--out", str(tmp_path / "x.ppm")])
    assert code == 1
    assert "out of range 0..8" in capsys.readouterr().err


def test_render_from_pose_file(tmp_path, scene_dir, run_dir):
    scene = load_scene(scene_dir)
    pose = tmp_path / "pose.json"
    pose.write_text(json.dumps(scene.cameras[1].to_dict()))
    out = tmp_path / "posed.ppm"
    assert main(["render", "--checkpoint", str(run_dir / "checkpoint.bin"),
                 "--pose", str(pose), "--out", str(out)]) == 0
    img = read_ppm(out)
    assert img.shape == (24, 24, 3)


def test_render_requires_exactly_one_camera_source(tmp_path, run_dir, capsys):
    code = main(["render", "--checkpoint", str(run_dir / "checkpoint.bin"),
                 "--out", str(tmp_path / "x.ppm")])
    assert code == 1
    assert "exactly one" in capsys.readouterr().err


# -- eval --------------------------------------------------------------------------


def test_eval_outputs_parse_and_means_check(tmp_path, scene_dir, run_dir, capsys):
    out = tmp_path / "eval"
    assert main(["eval", "--checkpoint", str(run_dir / "checkpoint.bin"),
                 "--scene", str(scene_dir), "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert [v["view"] for v in metrics["views"]] == [0, 8]  # held-out set
    for name in ("psnr", "ssim", "nlpd"):
        recomputed = float(np.mean([v[name] for v in metrics["views"]]))
        assert metrics["mean"][name] == recomputed
    text = (out / "metrics.txt").read_text()
    assert "mean" in text
    for figure in ("metric_bars.png", "views.png"):
        assert (out / figure).stat().st_size > 0
    assert "mean" in capsys.readouterr().out


def test_eval_single_view_scene_requires_all_views(tmp_path, run_dir, capsys):
    out = tmp_path / "single"
    assert main(["synth", "--out", str(out), "--blobs", "2", "--views", "1",
                 "--width", "24", "--height", "24", "--seed", "4"]) == 0
    code = main(["eval", "--checkpoint", str(run_dir / "checkpoint.bin"),
                 "--scene", str(out), "--out", str(tmp_path / "m")])
    assert code == 1
    assert "no held-out views" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(run_dir / "checkpoint.bin"),
                 "--scene", str(out), "--out", str(tmp_path / "m"),
                 "--all-views"]) == 0


# -- inspect -----------------------------------------------------------------------


def test_inspect_dumps_metadata(run_dir, capsys):
    assert main(["inspect", "--checkpoint", str(run_dir / "checkpoint.bin")]) == 0
    out = capsys.readouterr().out
    assert '"iterations": 4' in out
    assert "anchors.positions" in out
    assert "total values:" in out


def test_inspect_corrupt_checkpoint_exits_two(tmp_path, run_dir, capsys):
    blob = bytearray((run_dir / "checkpoint.bin").read_bytes())
    blob[60] ^= 0xFF
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(blob))
    assert main(["inspect", "--checkpoint", str(bad)]) == 2
    assert "checksum mismatch" in capsys.readouterr().err


def test_checkpoint_config_echo_survives_cli_round_trip(run_dir):
    ck = load_checkpoint(run_dir / "checkpoint.bin")
    assert ck.config.iterations == 4
    assert ck.config.lambda_dssim == 0.0
    assert ck.config.k == 4
