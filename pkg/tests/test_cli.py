import csv
import json

import numpy as np
import pytest

from oodkit.cli import main
from oodkit.config import load_config, parse_items, parse_text
from oodkit.datagen import read_csv
from oodkit.experiment import file_digest

SMALL = """\
seed = 1
data.n_per_class = 60
data.n_test_per_class = 40
data.n_ood = 80
ddpm.T = 50
ddpm.beta_end = 0.2
ddpm.hidden = 32,32
ddpm.steps = 200
ddpm.batch = 64
train.epochs = 4
model.hidden = 16
model.feature_dim = 8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "exp.cfg"
    cfg.write_text(SMALL)
    data = root / "data"
    assert main(["make-data", "--config", str(cfg), "--out", str(data)]) == 0
    ddpm = root / "runs" / "ddpm.ckpt"
    assert main(["train-ddpm", "--config", str(cfg), "--data", str(data), "--out", str(ddpm)]) == 0
    mix = data / "mixup.csv"
    assert main(["gen-ood", "--config", str(cfg), "--ddpm", str(ddpm), "--data", str(data),
                 "--out", str(mix)]) == 0
    return root, cfg, data, ddpm, mix


def test_make_data_outputs(workspace):
    root, cfg, data, _, _ = workspace
    names = sorted(p.name for p in data.glob("*.csv"))
    assert {"id_train.csv", "id_val.csv", "id_test.csv", "ood_gaussian_noise.csv",
            "ood_uniform_noise.csv", "ood_held_out_cluster.csv"} <= set(names)
    manifest = json.loads((data / "manifest-make-data.json").read_text())
    assert manifest["outputs"]["id_train.csv"] == file_digest(data / "id_train.csv")
    assert "seed = 1" in manifest["config"]
    assert load_config(cfg).to_text() == manifest["config"]
    assert parse_items(parse_text(manifest["config"])) == load_config(cfg)
    again = root / "again"
    assert main(["make-data", "--config", str(cfg), "--out", str(again)]) == 0
    assert file_digest(again / "id_train.csv") == file_digest(data / "id_train.csv")


def test_gen_ood_covers_all_pairs(workspace):
    _, cfg, data, ddpm, mix = workspace
    ds = read_csv(mix)
    assert np.all(ds.labels == -1)
    assert len(ds) == (60 * 4 - 24) // 4
    other = mix.parent / "mixup_again.csv"
    assert main(["gen-ood", "--config", str(cfg), "--ddpm", str(ddpm), "--n", str(len(ds)),
                 "--out", str(other)]) == 0
    assert file_digest(other) == file_digest(mix)


def test_gen_ood_selected_pairs(workspace):
    _, cfg, _, ddpm, mix = workspace
    out = mix.parent / "pairs.csv"
    assert main(["gen-ood", "--config", str(cfg), "--ddpm", str(ddpm), "--classes", "0,1",
                 "--classes", "2,3", "--n", "10", "--out", str(out)]) == 0
    assert len(read_csv(out)) == 10


def _train_and_eval(root, cfg, data, mix, loss, oe, extra=()):
    tag = f"{loss}_{'oe' if oe else 'base'}"
    ckpt = root / "results" / tag / "classifier.ckpt"
    args = ["train", "--config", str(cfg), "--data", str(data), "--loss", loss, "--out", str(ckpt), *extra]
    if oe:
        args += ["--ood", str(mix)]
    assert main(args) == 0
    assert main(["eval", "--config", str(cfg), "--checkpoint", str(ckpt), "--data", str(data)]) == 0
    return ckpt.parent


def test_train_eval_report(workspace, capsys):
    root, cfg, data, _, mix = workspace
    base = _train_and_eval(root, cfg, data, mix, "cosface", False)
    rows = list(csv.DictReader(open(base / "report.csv")))
    assert len(rows) == 3 * 4
    assert (base / "roc_uniform_noise_msp.csv").exists()
    assert (base / "curve.csv").read_text().startswith("epoch,loss")

    # only the baseline exists yet: report flags the missing counterpart
    assert main(["report", str(root / "results")]) == 4
    _train_and_eval(root, cfg, data, mix, "cosface", True)
    assert main(["report", str(root / "results")]) == 0
    agg = list(csv.DictReader(open(root / "results" / "aggregate.csv")))
    assert all(r["status"] == "complete" for r in agg)
    r = next(r for r in agg if r["ood_set"] == "gaussian_noise" and r["score_kind"] == "maxcos")
    assert float(r["delta_auroc"]) == pytest.approx(float(r["auroc_oe"]) - float(r["auroc_base"]), abs=2e-6)
    table = (root / "results" / "aggregate_table.csv").read_text().splitlines()
    assert table[0] == "block,ood_set,cosface"
    assert any(line.startswith("difference,") for line in table)


def test_identical_runs_give_zero_deltas(workspace, tmp_path):
    root, cfg, data, _, mix = workspace
    ckpt_dir = _train_and_eval(root, cfg, data, mix, "softmax", False)
    res = tmp_path / "res"
    for tag in ("base", "oe"):
        d = res / tag
        d.mkdir(parents=True)
        text = (ckpt_dir / "report.csv").read_text()
        if tag == "oe":
            lines = text.splitlines()
            head, body = lines[0], lines[1:]
            col = head.split(",").index("oe")
            body = [",".join(c if i != col else "1" for i, c in enumerate(b.split(","))) for b in body]
            text = "\n".join([head, *body]) + "\n"
        (d / "report.csv").write_text(text)
    assert main(["report", str(res)]) == 0
    for r in csv.DictReader(open(res / "aggregate.csv")):
        assert float(r["delta_auroc"]) == 0 and float(r["delta_closed_set_accuracy"]) == 0


def test_eval_with_explicit_sets_and_scores(workspace):
    root, cfg, data, _, mix = workspace
    ckpt = root / "results" / "cosface_base" / "classifier.ckpt"
    if not ckpt.exists():
        _train_and_eval(root, cfg, data, mix, "cosface", False)
    out = root / "explicit"
    assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--ood", str(mix),
                 "--score", "energy", "--temperature", "2", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "report.csv")))
    assert [(r["ood_set"], r["score_kind"]) for r in rows] == [("mixup", "energy")]


def test_exit_codes(workspace, tmp_path, capsys):
    root, cfg, data, ddpm, mix = workspace
    assert main(["make-data", "--set", "loss.kind=triplet", "--out", str(tmp_path)]) == 2
    assert main(["make-data", "--set", "nosuch.key=1", "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "nothing")]) == 4
    assert main(["train", "--config", str(cfg), "--data", str(data), "--ood", str(tmp_path / "x.csv")]) == 4
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(data)]) == 4
    assert main(["report", str(tmp_path / "empty")]) == 4
    assert main(["gen-ood", "--ddpm", str(data / "id_train.csv"), "--n", "3"]) == 2
    assert main(["gen-ood", "--ddpm", str(ddpm), "--classes", "0-1", "--n", "3", "--out", str(tmp_path / "m.csv")]) == 2
    assert main(["gen-ood", "--ddpm", str(ddpm), "--classes", "0,9", "--n", "3", "--out", str(tmp_path / "m.csv")]) == 2
    assert main(["gen-ood", "--ddpm", str(ddpm), "--classes", "1,1", "--n", "3", "--out", str(tmp_path / "m.csv")]) == 2
    assert main(["eval", "--checkpoint", str(ddpm), "--data", str(data)]) == 2
    err = capsys.readouterr().err
    assert "config error" in err and "missing artifact" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_a_numeric_failure(workspace, tmp_path, capsys):
    _, cfg, data, _, _ = workspace
    code = main(["train", "--config", str(cfg), "--data", str(data), "--set", "train.lr=1e30",
                 "--out", str(tmp_path / "c.ckpt")])
    assert code == 3
    assert "numeric failure" in capsys.readouterr().err
