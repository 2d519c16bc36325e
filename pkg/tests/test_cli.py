import json

import numpy as np
import pytest

from diffsketch import cli
from diffsketch.backends import ToyBackend, edge_sketch
from diffsketch.distiller import load_dataset
from diffsketch.feature_store import FeatureMap, FeatureTrajectory, TripletDatum, save_archive
from diffsketch.metrics import ssim
from diffsketch.trainer import read_loss_log


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("generate", "--n", 5, "--out", root / "archives") == 0
    assert run("analyze", "--archives", root / "archives", "--pca-dim", 5, "--out", root / "report.json") == 0
    trip = root / "archives" / "archive_0000"
    assert run(
        "train", "--triplet", trip, "--selection", root / "report.json", "--iterations", 4,
        "--checkpoint-every", 2, "--out", root / "gen",
    ) == 0
    assert run("sample-pairs", "--ckpt", root / "gen", "--n", 12, "--out", root / "pairs") == 0
    assert run("distill", "--pairs", root / "pairs", "--gt", trip, "--epochs", 6, "--batch-size", 4, "--out", root / "student") == 0
    return root


def test_usage_errors_exit_1(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        run("analyze", "--archives", tmp_path, "--pca-dim", 0, "--out", tmp_path / "r.json")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("frobnicate")
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run("sample-pairs", "--ckpt", tmp_path, "--n", -1, "--out", tmp_path / "p")
    assert exc.value.code == 1


def test_missing_inputs_exit_2(tmp_path, pipeline, capsys):
    assert run("train", "--triplet", tmp_path / "nope", "--selection", pipeline / "report.json", "--out", tmp_path / "g") == 2
    assert "no such triplet" in capsys.readouterr().err
    assert run("analyze", "--archives", tmp_path / "nope", "--out", tmp_path / "r.json") == 2
    assert run("eval", "--pred", tmp_path, "--gt", tmp_path, "--out", tmp_path / "m.csv") == 2


def test_numeric_failure_exit_3(tmp_path, capsys):
    # every timestep identical: k-means cannot separate anything
    maps = {(l, t): FeatureMap(np.ones((2, 4, 4), np.float32), l, t) for l in range(1, 13) for t in range(10)}
    be = ToyBackend(image_size=32)
    img, _, pyr = be.generate(be.sample_conditions(1, 0)[0], 0)
    for i in range(2):
        save_archive(TripletDatum(FeatureTrajectory(maps, 12, 10), pyr, img, edge_sketch(img)), tmp_path / f"a{i}")
    code = run("analyze", "--archives", tmp_path / "a0", tmp_path / "a1", "--pca-dim", 3, "--out", tmp_path / "r.json")
    assert code == 3
    assert "numeric failure" in capsys.readouterr().err


def test_train_defaults(tmp_path):
    args = cli.build_parser().parse_args(["train", "--triplet", "t", "--selection", "s", "--out", "o"])
    c = cli._train_config(args)
    assert (c.iterations, c.learning_rate, c.cdst_S) == (1200, 1e-4, 1000)


def test_pipeline_outputs(pipeline):
    report = json.loads((pipeline / "report.json").read_text())
    s = report["scores"]
    assert s["selected"] <= s["equal"] + 1e-12
    assert (pipeline / "report.png").stat().st_size > 0
    assert (pipeline / "report.json.manifest.json").is_file()
    log = read_loss_log(pipeline / "gen" / "loss_log.jsonl")
    assert [r["iter"] for r in log] == [0, 1, 2, 3]
    assert (pipeline / "gen" / "loss_curve.png").is_file()
    assert (pipeline / "gen" / "checkpoints" / "iter_000002").is_dir()
    m = json.loads((pipeline / "gen" / "run_manifest.json").read_text())
    assert m["command"] == "train" and m["seed"] == 0
    assert set(m) >= {"config", "config_digest", "inputs", "outputs", "timestamps", "version", "backend"}
    assert len(load_dataset(pipeline / "pairs")) == 12


def test_resume_matches_uninterrupted(pipeline, tmp_path):
    trip = pipeline / "archives" / "archive_0000"
    code = run(
        "train", "--triplet", trip, "--selection", pipeline / "report.json", "--iterations", 4,
        "--resume", pipeline / "gen" / "checkpoints" / "iter_000002", "--out", tmp_path / "g",
    )
    assert code == 0
    assert read_loss_log(tmp_path / "g" / "loss_log.jsonl") == read_loss_log(pipeline / "gen" / "loss_log.jsonl")


def test_sample_zero_pairs(pipeline, tmp_path):
    assert run("sample-pairs", "--ckpt", pipeline / "gen", "--n", 0, "--out", tmp_path / "p") == 0
    ds = load_dataset(tmp_path / "p")
    assert len(ds) == 0 and ds.provenance["S"] == 30000
    assert run("distill", "--pairs", tmp_path / "p", "--gt", pipeline / "archives" / "archive_0000", "--out", tmp_path / "s") == 2


def test_extract_beats_blank(pipeline, tmp_path):
    ds = load_dataset(pipeline / "pairs")
    wins = 0
    for i in range(4):
        img, teacher = ds[i]
        cli.write_png(tmp_path / f"{i}.png", img.pixels)
        assert run("extract", "--ckpt", pipeline / "student", "--image", tmp_path / f"{i}.png", "--out", tmp_path / f"s{i}.png") == 0
        got = cli.read_png(tmp_path / f"s{i}.png", "L")
        assert got.shape[:2] == img.pixels.shape[:2]
        blank = np.zeros_like(teacher.pixels)
        wins += ssim(got.reshape(teacher.pixels.shape), teacher.pixels) > ssim(blank, teacher.pixels)
    assert wins >= 3


def test_eval_identical_dirs(pipeline, tmp_path, capsys):
    ds = load_dataset(pipeline / "pairs")
    d = tmp_path / "sk"
    d.mkdir()
    for i in range(3):
        cli.write_png(d / f"{i}.png", ds[i][1].pixels)
    assert run("eval", "--pred", d, "--gt", d, "--style", "toy", "--out", tmp_path / "m.csv") == 0
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "style,variant,lpips,ssim,n"
    assert lines[1] == "toy,sk,0.000000,1.000000,3"
    assert (tmp_path / "m.png").is_file()
