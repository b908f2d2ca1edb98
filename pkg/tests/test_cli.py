from pathlib import Path

import pytest

from diffid.cli import main

CFG = """
[pipeline]
sources = data/toy_manifest.tsv
out_dir = out
seed = 3
workers = 2
[generation]
reference_set_size = 10
samples_per_identity = 10
timesteps = 20
finetune_steps = 60
[filter]
tau = 0.7
[assembly]
crop_height = 32
crop_width = 16
[pretrain]
pretrain_epochs = 4
pretrain_warmup_epochs = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["toydata", str(root / "data"), "--identities", "3", "--images", "8",
                 "--seed", "4"]) == 0
    (root / "pipeline.ini").write_text(CFG)
    assert main(["run", str(root / "pipeline.ini")]) == 0
    return root


def test_validate_ok(workspace, capsys):
    assert main(["validate", str(workspace / "pipeline.ini")]) == 0
    out = capsys.readouterr().out
    assert "samples_per_identity = 10" in out


def test_validate_reports_all_violations(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[generation]\nreference_set_size = 0\n[filter]\ntau = 1.5\n")
    assert main(["validate", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "reference_set_size" in err and "tau" in err


def test_run_artifacts(workspace):
    assert (workspace / "out" / "dataset" / "manifest.tsv").exists()
    assert (workspace / "out" / "ledger.jsonl").exists()


def test_stats_command(workspace, capsys):
    assert main(["stats", str(workspace / "out" / "dataset" / "manifest.tsv")]) == 0
    out = capsys.readouterr().out
    assert "images=30" in out
    assert "person_ids=3" in out


def test_cdf_command(workspace, capsys):
    manifest = str(workspace / "out" / "dataset" / "manifest.tsv")
    assert main(["cdf", manifest, "--thresholds", "1,11"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split("\t")[1] == "0.0"
    assert lines[1].split("\t")[1] == "100.0"


def test_filter_command(workspace, capsys):
    manifest = str(workspace / "out" / "dataset" / "manifest.tsv")
    source = str(workspace / "data" / "toy_manifest.tsv")
    out = str(workspace / "refiltered.tsv")
    assert main(["filter", manifest, "--source", source, "--kind", "reid_ctf",
                 "--tau", "0.5", "--out", out]) == 0
    text = capsys.readouterr().out
    assert "tau=0.5" in text
    assert Path(out).exists()


def test_pretrain_and_eval_commands(workspace, capsys):
    manifest = str(workspace / "out" / "dataset" / "manifest.tsv")
    ckpt = str(workspace / "backbone.ckpt")
    assert main(["pretrain", manifest, "--config", str(workspace / "pipeline.ini"),
                 "--out", ckpt]) == 0
    capsys.readouterr()

    target = str(workspace / "data" / "toy_manifest.tsv")
    ledger = str(workspace / "runs.tsv")
    assert main(["eval", ckpt, target, "--epochs", "1", "--ledger", ledger]) == 0
    out = capsys.readouterr().out
    assert out.startswith("map=")
    assert "map_trace=" in out
    row = Path(ledger).read_text().strip().split("\t")
    assert len(row) == 4


def test_eval_random_init(workspace, capsys):
    target = str(workspace / "data" / "toy_manifest.tsv")
    assert main(["eval", "random", target, "--epochs", "0"]) == 0
    assert capsys.readouterr().out.startswith("map=")


def test_error_paths(tmp_path, capsys):
    missing = tmp_path / "nope.ini"
    assert main(["validate", str(missing)]) == 2
