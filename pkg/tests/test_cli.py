import csv
import json
import os
from types import SimpleNamespace

import imageio.v3 as iio
import numpy as np
import pytest

from src.sparsederf.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, MGS_STEPS, command_route, main, mgs_table
from src.sparsederf.errors import InvariantError, ManifestError
from src.sparsederf.scene.scene_repository import SceneRepository


def _run_record(out_dir):
    with open(os.path.join(out_dir, "run.json"), encoding="utf-8") as fh:
        return json.load(fh)


# ---- plot-mgs ----

def test_mgs_table_grid():
    rows = mgs_table(10.0, [1.75, 2.0])
    assert len(rows) == 3 * MGS_STEPS == 3003
    eta2 = [r for r in rows if r["curve"] == "modulated_eta2"]
    assert eta2[0]["delta"] == 0.0 and eta2[-1]["delta"] == 1.0
    assert eta2[-1]["value"] == pytest.approx(0.0, abs=1e-9)
    naive = [r for r in rows if r["curve"] == "naive"]
    assert naive[500]["value"] == pytest.approx(0.25)
    assert len(mgs_table(1.0, [0.5], naive=False)) == MGS_STEPS


def test_plot_mgs_writes_csv_and_run_record(tmp_path):
    out = str(tmp_path / "mgs")
    assert main(["--out", out, "plot-mgs", "--rho", "10", "--eta", "1.5", "2.0"]) == EXIT_OK
    with open(os.path.join(out, "mgs.csv"), encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * MGS_STEPS
    assert set(rows[0]) == {"curve", "rho", "eta", "delta", "value"}
    values = np.array([float(r["value"]) for r in rows])
    assert np.all((values >= 0.0) & (values <= 1.0))
    record = _run_record(out)
    assert record["command"] == "plot-mgs"
    assert len(record["config_hash"]) == 64


# ---- synth ----

def test_synth_command(tmp_path):
    out = str(tmp_path / "scene")
    argv = ["--seed", "3", "--out", out, "synth", "--views", "2", "--size", "8", "--samples", "8", "--n", "2"]
    assert main(argv) == EXIT_OK
    scene = SceneRepository(out).load()
    assert len(scene.manifest.train_views) == 2
    assert scene.images[scene.manifest.train_views[0].id].shape == (8, 8, 3)
    record = _run_record(out)
    assert record["seed"] == 3
    assert record["config"]["image_size"] == 8


def test_seed_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SPARSEDERF_SEED", "9")
    out = str(tmp_path / "scene")
    assert main(["--out", out, "synth", "--views", "2", "--size", "8", "--samples", "8", "--n", "2"]) == EXIT_OK
    assert _run_record(out)["seed"] == 9


def test_config_file_supplies_defaults(tmp_path):
    config = tmp_path / "run.toml"
    config.write_text("[synth]\nviews = 2\nsize = 8\nsamples = 8\nn = 2\n", encoding="utf-8")
    out = str(tmp_path / "scene")
    assert main(["--config", str(config), "--out", out, "synth", "--views", "3"]) == EXIT_OK
    manifest = SceneRepository(out).load_manifest()
    assert len(manifest.train_views) == 3
    assert manifest.views[0].width == 8


def test_config_file_with_unknown_table(tmp_path):
    config = tmp_path / "bad.toml"
    config.write_text("[model]\nwidth = 3\n", encoding="utf-8")
    assert main(["--config", str(config), "plot-mgs"]) == EXIT_USAGE
    config.write_text("[synth]\ncolour = 3\n", encoding="utf-8")
    assert main(["--config", str(config), "plot-mgs"]) == EXIT_USAGE


# ---- exit codes ----

def test_usage_errors_exit_with_usage_code(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["fly"])
    assert info.value.code == EXIT_USAGE
    with pytest.raises(SystemExit) as info:
        main(["--threads", "0", "plot-mgs"])
    assert info.value.code == EXIT_USAGE


def test_missing_scene_is_a_data_error(tmp_path):
    code = main(["--out", str(tmp_path / "run"), "train", "--scene", str(tmp_path / "nowhere")])
    assert code == EXIT_DATA


def test_command_route_maps_exceptions():
    args = SimpleNamespace(command="probe")

    def raising(exc):
        @command_route
        def handler(_):
            raise exc
        return handler

    assert raising(KeyError("scene"))(args) == EXIT_USAGE
    assert raising(ManifestError("bad"))(args) == EXIT_DATA
    assert raising(FileNotFoundError("gone"))(args) == EXIT_DATA
    assert raising(InvariantError("weights"))(args) == EXIT_NUMERIC


# ---- train / eval / render ----

TINY_TRAIN = [
    "--preset", "synthetic", "--iterations", "1", "--batch-rays", "16", "--n-coarse", "4", "--n-fine", "4",
    "--field-depth", "2", "--field-width", "8", "--pos-freqs", "3", "--dir-freqs", "2", "--color-width", "8",
    "--kernel-n", "2", "--kernel-embed-dim", "4", "--kernel-depth", "2", "--kernel-width", "8",
    "--ss-patch", "4", "--unseen-poses", "1", "--metrics-every", "1", "--no-pd",
]


def test_train_eval_and_render(tiny_scene_dir, tmp_path):
    run = str(tmp_path / "run")
    assert main(["--out", run, "train", "--scene", tiny_scene_dir, *TINY_TRAIN]) == EXIT_OK
    ckpt = os.path.join(run, "checkpoints", "step_000001.ckpt")
    assert os.path.exists(ckpt)
    record = _run_record(run)
    assert record["config"]["iterations"] == 1 and record["config"]["pd"] is False

    evaluation = str(tmp_path / "eval")
    assert main(["--out", evaluation, "eval", "--checkpoint", ckpt, "--scene", tiny_scene_dir, "--report"]) == EXIT_OK
    with open(os.path.join(evaluation, "metrics.json"), encoding="utf-8") as fh:
        metrics = json.load(fh)
    assert metrics["step"] == 1 and len(metrics["views"]) == 1
    assert os.path.exists(os.path.join(evaluation, "kernel_report.json"))
    (view_id,) = metrics["views"]
    assert os.path.exists(os.path.join(evaluation, "renders", f"{view_id}_pair.png"))

    frames = str(tmp_path / "frames")
    assert main(["--out", frames, "render", "--checkpoint", ckpt, "--scene", tiny_scene_dir]) == EXIT_OK
    assert os.path.exists(os.path.join(frames, "frames", "000.png"))
    assert os.path.exists(os.path.join(frames, "frames", "000_depth.png"))


def test_eval_with_missing_checkpoint(tiny_scene_dir, tmp_path):
    code = main(["--out", str(tmp_path), "eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--scene", tiny_scene_dir])
    assert code == EXIT_DATA


def test_synth_rerun_gives_identical_bytes(tmp_path):
    outs = [str(tmp_path / name) for name in ("a", "b")]
    for out in outs:
        assert main(["--out", out, "synth", "--views", "2", "--size", "8", "--samples", "8", "--n", "2"]) == EXIT_OK
    for relative in ("scene.json", "blur_truth.json", os.path.join("images", "000_blur.png")):
        with open(os.path.join(outs[0], relative), "rb") as fa, open(os.path.join(outs[1], relative), "rb") as fb:
            assert fa.read() == fb.read()


def test_train_resume_continues_step_count(tiny_scene_dir, tmp_path):
    run = str(tmp_path / "run")
    assert main(["--out", run, "train", "--scene", tiny_scene_dir, *TINY_TRAIN]) == EXIT_OK
    resumed = list(TINY_TRAIN)
    resumed[resumed.index("--iterations") + 1] = "2"
    assert main(["--out", run, "train", "--scene", tiny_scene_dir, *resumed, "--resume", "auto"]) == EXIT_OK
    assert os.path.exists(os.path.join(run, "checkpoints", "step_000002.ckpt"))
    with open(os.path.join(run, "metrics.jsonl"), encoding="utf-8") as fh:
        steps = [json.loads(line)["step"] for line in fh]
    assert steps == [1, 2]


def test_export_features_command(tiny_scene_dir, tmp_path):
    out = str(tmp_path / "features")
    assert main(["--out", out, "export-features", "--scene", tiny_scene_dir, "--patch", "16"]) == EXIT_OK
    bins = sorted(name for name in os.listdir(out) if name.endswith(".bin"))
    assert bins == ["000_0_0.bin", "001_0_0.bin", "002_0_0.bin"]


def test_import_llff_command(tmp_path):
    source = tmp_path / "llff"
    (source / "images").mkdir(parents=True)
    rows = []
    for i in range(2):
        iio.imwrite(source / "images" / f"IMG_{i}.png", np.zeros((4, 6, 3), dtype=np.uint8))
        llff = np.array([[0.0, 1.0, 0.0, 0.1 * i, 4.0], [-1.0, 0.0, 0.0, 0.0, 6.0], [0.0, 0.0, 1.0, 0.0, 5.0]])
        rows.append(np.concatenate([llff.ravel(), [1.0, 10.0]]))
    np.save(source / "poses_bounds.npy", np.stack(rows))
    out = str(tmp_path / "scene")
    assert main(["--out", out, "import-llff", "--source", str(source), "--name", "room"]) == EXIT_OK
    assert SceneRepository(out).load_manifest().name == "room"
    assert main(["--out", str(tmp_path / "x"), "import-llff", "--source", str(tmp_path / "empty")]) == EXIT_DATA
