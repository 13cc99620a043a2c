import json

import pytest

from poiloc import dataset as dsio
from poiloc.cli import main

TINY = ["scene.point_count=300", "scene.n_train_frames=4", "scene.n_test_frames=2",
        "scene.pixels_per_frame=50", "render.candidate_count=6", "render.select_count=2",
        "pipeline.n_iter=30", "pipeline.coarse_iters=15", "pipeline.fine_iters=15",
        "regressor.batch_size=64", "regressor.hidden=[16,16]"]


def _set(items):
    return [a for item in items for a in ("--set", item)]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["scene-gen", "--out", str(root / "ds"), *_set(TINY)]) == 0
    assert main(["render", str(root / "ds")]) == 0
    return root


def test_dataset_written(data):
    ds = dsio.load_dataset(data / "ds")
    assert len(ds.train_frames) == 4 and len(ds.test_frames) == 2 and len(ds.rendered_frames) == 2


def test_train_eval_report(data, capsys):
    run = data / "poi"
    assert main(["train", str(data / "ds"), "--mode", "poi", "--out", str(run)]) == 0
    for name in ("head_0.ckpt", "train.log", "active.csv", "ledger.txt", "config.json",
                 "run.json", "summary.kv", "errors.csv", "report.txt"):
        assert (run / name).exists(), name
    meta = json.loads((run / "run.json").read_text())
    assert meta["mode"] == "poi" and "filter_recall" in meta
    assert len((run / "train.log").read_text().splitlines()) == 30

    assert main(["eval", str(run), str(data / "ds"), "--out", str(data / "re")]) == 0
    assert dsio.read_summary(data / "re" / "summary.kv") == dsio.read_summary(run / "summary.kv")

    assert main(["train-c2f", str(data / "ds"), "--out", str(data / "c2f")]) == 0
    capsys.readouterr()
    assert main(["report", str(run), str(data / "c2f")]) == 0
    out = capsys.readouterr().out
    assert out.splitlines()[0].startswith("run") and "c2f" in out


def test_oracle_eval(data, capsys):
    assert main(["eval", "--oracle", str(data / "ds"), "--out", str(data / "oracle")]) == 0
    assert dsio.read_summary(data / "oracle" / "summary.kv")["acc_5cm_5deg"] == 1.0


def test_exit_codes(data, tmp_path):
    assert main(["train", str(tmp_path / "nothing")]) == 3
    assert main(["scene-gen", "--out", str(tmp_path / "x"), "--set", "filter.bogus=1"]) == 2
    assert main(["eval", str(data / "ds")]) == 2
    with pytest.raises(SystemExit):
        main(["train", str(data / "ds"), "--mode", "nope"])
