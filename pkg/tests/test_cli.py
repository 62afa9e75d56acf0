"""End-to-end checks of the batch commands and their exit codes."""

import contextlib
import io

import numpy as np
import pytest

from crackflow import cli, dataio, weights_io

CFG_TEXT = """\
seed = 7
synth.sequences = 2
synth.frames = 3
synth.size = 128
synth.tip-rate = 4
train.channel-scale = 0.0625
train.epochs = 2
train.batch = 3
train.augment = 0
infer.channel-scale = 0.0625
noise.channel-scale = 0.0625
noise.sigmas = 0,5
"""


def run(argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        rc = cli.main(argv)
    return rc, out.getvalue(), err.getvalue()


def run_pipeline(root, cfg_path):
    base = ["--config", str(cfg_path)]
    steps = [
        ["synth", "--out", str(root / "data")],
        ["label", "--out", str(root / "labels"),
         "--manifest", str(root / "data" / "manifest.txt")],
        ["train", "--out", str(root / "run"),
         "--manifest", str(root / "labels" / "labeled_manifest.txt")],
        ["infer", "--out", str(root / "preds"),
         "--weights", str(root / "run" / "best.cpnw"),
         "--manifest", str(root / "labels" / "labeled_manifest.txt")],
        ["eval", "--out", str(root / "eval"),
         "--predictions", str(root / "preds" / "predictions.txt")],
        ["noise", "--out", str(root / "noise"),
         "--weights", str(root / "run" / "best.cpnw"),
         "--manifest", str(root / "labels" / "labeled_manifest.txt")],
        ["speed", "--out", str(root / "speed"),
         "--manifest", str(root / "data" / "manifest.txt")],
    ]
    for argv in steps:
        rc, out, err = run(argv + base)
        assert rc == 0, (argv[0], rc, err)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    cfg_path = root / "pipe.cfg"
    cfg_path.write_text(CFG_TEXT)
    run_pipeline(root, cfg_path)
    return root


def test_parse_config_round_trips_through_format():
    cfg = {"seed": "7", "synth.size": "128", "train.lr": "5e-05",
           "noise.sigmas": "0,5,15"}
    assert cli.parse_config(cli.format_config(cfg)) == cfg


def test_parse_config_skips_comments_and_blanks():
    text = "# a comment\n\nseed = 3\n  \nsynth.size = 64\n"
    assert cli.parse_config(text) == {"seed": "3", "synth.size": "64"}


def test_parse_config_rejects_bad_lines():
    with pytest.raises(cli.FormatError, match=r"demo\.cfg:2: expected key"):
        cli.parse_config("seed = 1\nno equals here\n", origin="demo.cfg")
    with pytest.raises(cli.FormatError, match=r"bad key 'Synth\.Size'"):
        cli.parse_config("Synth.Size = 4\n")


def test_format_config_of_empty_mapping_is_empty():
    assert cli.format_config({}) == ""


def test_stage_rngs_are_deterministic_and_distinct():
    cfg = {"seed": "11"}
    a = cli.stage_rng(cfg, "synth").integers(0, 2**31, size=4)
    b = cli.stage_rng(cfg, "synth").integers(0, 2**31, size=4)
    c = cli.stage_rng(cfg, "train").integers(0, 2**31, size=4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_help_and_usage_exit_codes():
    assert run(["--help"])[0] == 0
    assert run(["bogus"])[0] == 1
    assert run(["synth", "--nope"])[0] == 1


def test_inapplicable_flag_is_a_usage_error(tmp_path):
    rc, _, err = run(["synth", "--epochs", "3", "--out", str(tmp_path)])
    assert rc == 1
    assert "--epochs does not apply to synth" in err


def test_missing_inputs_exit_with_data_errors(tmp_path):
    rc, _, err = run(["label", "--out", str(tmp_path),
                      "--manifest", str(tmp_path / "missing.txt")])
    assert rc == 2
    assert "not found" in err

    rc, _, err = run(["eval", "--out", str(tmp_path)])
    assert rc == 2
    assert "eval.predictions" in err

    rc, _, err = run(["infer", "--config", str(tmp_path / "nocfg.cfg")])
    assert rc == 2

    bad = tmp_path / "bad.cfg"
    bad.write_text("this line has no equals\n")
    rc, _, err = run(["synth", "--config", str(bad)])
    assert rc == 2
    assert "bad.cfg:1" in err


def test_bad_config_value_exits_as_data_error(tmp_path):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("synth.size = fish\n")
    rc, _, err = run(["synth", "--config", str(cfg), "--out", str(tmp_path)])
    assert rc == 2
    assert "synth.size" in err and "fish" in err


def test_synth_writes_a_loadable_dataset(pipeline):
    manifest = dataio.load_manifest(pipeline / "data" / "manifest.txt")
    assert len(manifest.entries) == 6
    assert sorted(manifest.fps) == ["seq0", "seq1"]
    first = manifest.entries[0]
    pair = dataio.load_pair(pipeline / "data" / "manifest.txt", first)
    assert pair.reference.shape == (128, 128)
    assert np.asarray(pair.gt).shape == (16, 16)


def test_label_outputs_track_the_manifest(pipeline):
    labeled = dataio.load_manifest(pipeline / "labels" / "labeled_manifest.txt")
    assert len(labeled.entries) == 6
    for e in labeled.entries:
        assert (pipeline / "labels" / e.gt_path).exists()
    report = (pipeline / "labels" / "label_report.txt").read_text().splitlines()
    assert report[0] == "sequence, frame, marks"
    assert len(report) == 7


def test_train_writes_weights_and_log(pipeline):
    best = weights_io.load_weights(pipeline / "run" / "best.cpnw")
    last = weights_io.load_weights(pipeline / "run" / "last.cpnw")
    assert best.keys() == last.keys()
    assert best["netc.conv1.w"].shape[0] == 4  # 64 * 0.0625
    log = (pipeline / "run" / "training_log.txt").read_text().splitlines()
    assert log[0] == "epoch, lr, train_loss, val_f1, is_best"
    assert len(log) == 3  # header + one row per epoch


def test_infer_writes_one_prediction_per_pair(pipeline):
    lines = (pipeline / "preds" / "predictions.txt").read_text().splitlines()
    assert lines[0] == "sequence, frame, pred_path, gt_path"
    assert len(lines) == 7
    for line in lines[1:]:
        _, _, pred_path, gt_path = [p.strip() for p in line.split(",")]
        prob = np.load(pipeline / "preds" / pred_path)
        assert prob.shape == (16, 16)
        assert prob.dtype == np.float32
        assert np.all((prob > 0) & (prob < 1))
        assert (pipeline / "preds" / gt_path).exists()


def test_eval_report_covers_the_threshold_grid(pipeline):
    report = (pipeline / "eval" / "eval_report.txt").read_text().splitlines()
    assert report[0].startswith("ods_f1 = ")
    assert "np.float" not in "".join(report)
    curve = (pipeline / "eval" / "pr_curve.csv").read_text().splitlines()
    assert curve[0] == "t, precision, recall, f1"
    assert len(curve) == 100


def test_noise_report_has_one_row_per_sigma(pipeline):
    lines = (pipeline / "noise" / "noise_report.txt").read_text().splitlines()
    assert lines[0] == "sigma, ods_f1, ods_threshold, ois_f1"
    assert len(lines) == 3
    assert lines[1].startswith("0.0, ")
    assert lines[2].startswith("5.0, ")


def test_speed_writes_one_report_per_sequence(pipeline):
    for sid in ("seq0", "seq1"):
        text = (pipeline / "speed" / f"speed_{sid}.txt").read_text()
        assert text.splitlines()[0] == "frame, t_s, front_px, interval_mm_s"
        assert "mean_speed_mm_s = " in text


def test_speed_accepts_thresholded_predictions(pipeline, tmp_path):
    rc, out, err = run([
        "speed", "--out", str(tmp_path),
        "--predictions", str(pipeline / "preds" / "predictions.txt"),
        "--manifest", str(pipeline / "labels" / "labeled_manifest.txt"),
        "--threshold", "0.5"])
    assert rc == 0, err
    assert (tmp_path / "speed_seq0.txt").exists()
    assert (tmp_path / "speed_seq1.txt").exists()


def test_flag_overrides_config_value(pipeline, tmp_path):
    cfg = pipeline / "pipe.cfg"
    rc, _, err = run(["train", "--config", str(cfg), "--epochs", "1",
                      "--out", str(tmp_path),
                      "--manifest",
                      str(pipeline / "labels" / "labeled_manifest.txt")])
    assert rc == 0, err
    log = (tmp_path / "training_log.txt").read_text().splitlines()
    assert len(log) == 2  # header + the single overridden epoch


def test_eval_count_mismatch_names_both_sides(pipeline, tmp_path):
    lines = (pipeline / "preds" / "predictions.txt").read_text().splitlines()
    sid, frame, pred_path, _ = [p.strip() for p in lines[-1].split(",")]
    # mirror the preds/labels layout so the ../labels paths still resolve
    (tmp_path / "preds").mkdir()
    (tmp_path / "labels").mkdir()
    doctored = tmp_path / "preds" / "predictions.txt"
    rewritten = lines[:-1] + [f"{sid}, {frame}, {pred_path}, -"]
    doctored.write_text("\n".join(rewritten) + "\n")
    for line in lines[1:]:
        name = [p.strip() for p in line.split(",")][2]
        (tmp_path / "preds" / name).write_bytes(
            (pipeline / "preds" / name).read_bytes())
    for p in (pipeline / "labels").glob("*_label.pgm"):
        (tmp_path / "labels" / p.name).write_bytes(p.read_bytes())
    rc, _, err = run(["eval", "--out", str(tmp_path),
                      "--predictions", str(doctored)])
    assert rc == 2
    assert "6 predictions vs 5 ground-truth maps" in err


def test_runaway_learning_rate_exits_as_numeric_failure(pipeline, tmp_path):
    cfg = tmp_path / "hot.cfg"
    cfg.write_text("seed = 7\ntrain.channel-scale = 0.0625\n"
                   "train.epochs = 3\ntrain.batch = 3\n"
                   "train.augment = 0\ntrain.lr = 1e12\n")
    rc, _, err = run(["train", "--config", str(cfg), "--out", str(tmp_path),
                      "--manifest",
                      str(pipeline / "labels" / "labeled_manifest.txt")])
    assert rc == 3
    assert "numeric failure" in err


def test_identical_seeded_runs_are_byte_identical(pipeline, tmp_path):
    run_pipeline(tmp_path, pipeline / "pipe.cfg")
    first = sorted(p.relative_to(pipeline) for p in pipeline.rglob("*")
                   if p.is_file() and p.name != "pipe.cfg")
    second = sorted(p.relative_to(tmp_path) for p in tmp_path.rglob("*")
                    if p.is_file())
    assert first == second
    for rel in first:
        assert (pipeline / rel).read_bytes() == (tmp_path / rel).read_bytes(), rel


def test_different_seed_changes_the_speckle(pipeline, tmp_path):
    rc, _, err = run(["synth", "--config", str(pipeline / "pipe.cfg"),
                      "--seed", "8", "--out", str(tmp_path)])
    assert rc == 0, err
    a = (pipeline / "data" / "seq0_ref.pgm").read_bytes()
    b = (tmp_path / "seq0_ref.pgm").read_bytes()
    assert a != b
