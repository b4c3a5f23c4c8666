import json

import pytest

from fvlm.cli import main
from fvlm.encoders import load_checkpoint

TINY = {"epochs": 1, "batch_size": 8, "burn_in_epochs": 0, "warmup_epochs": 0}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(TINY))
    return p


def _train(corpus_dir, config, out, *extra):
    return main(["train", "--config", str(config), "--corpus", str(corpus_dir), "--out", str(out), "--no-figures", *extra])


def test_synth_writes_manifest(tmp_path, capsys):
    spec = tmp_path / "w.json"
    from fvlm.synth import default_world

    spec.write_text(json.dumps(default_world().to_dict()))
    assert main(["synth", "--spec", str(spec), "--n", "2", "--seed", "1", "--out", str(tmp_path / "c")]) == 0
    assert json.loads((tmp_path / "c" / "manifest.json").read_text())["n"] == 2


def test_synth_missing_spec(tmp_path, capsys):
    assert main(["synth", "--spec", str(tmp_path / "nope.json"), "--n", "2", "--out", str(tmp_path / "c")]) != 0
    assert "nope.json" in capsys.readouterr().err


def test_decompose_round(corpus_dir, tmp_path, capsys):
    out = tmp_path / "d.jsonl"
    args = ["decompose", "--in", str(corpus_dir / "reports.jsonl"), "--table", str(corpus_dir / "anatomy_table.json"), "--out", str(out)]
    assert main(args) == 0
    rows = [json.loads(line) for line in out.read_text().splitlines()]
    assert len(rows) == 16 * 4
    assert (tmp_path / "d.jsonl.warnings.txt").exists()


def test_decompose_empty_and_malformed(corpus_dir, tmp_path, capsys):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    table = str(corpus_dir / "anatomy_table.json")
    assert main(["decompose", "--in", str(empty), "--table", table, "--out", str(tmp_path / "e.jsonl")]) == 0
    assert (tmp_path / "e.jsonl").read_text() == ""

    bad = tmp_path / "bad.jsonl"
    good = (corpus_dir / "reports.jsonl").read_text().splitlines()[0]
    bad.write_text(good + "\n" + good + "\n{not json\n")
    assert main(["decompose", "--in", str(bad), "--table", table, "--out", str(tmp_path / "b.jsonl")]) != 0
    assert "line 3" in capsys.readouterr().err


def test_train_eval_heatmap(corpus_dir, config, tmp_path, capsys):
    run = tmp_path / "run"
    assert _train(corpus_dir, config, run) == 0
    summary = json.loads((run / "run.json").read_text())
    assert sorted(summary["checkpoints"]) == ["model_A.fvlm", "model_B.fvlm"]
    _, extra = load_checkpoint(run / "model_A.fvlm")
    assert extra["config_hash"] == summary["config_hash"]
    assert all(json.loads(line)["config_hash"] == summary["config_hash"] for line in open(run / "train_log.jsonl"))

    pid = json.loads((corpus_dir / "gold.jsonl").read_text().splitlines()[0])["patient_id"]
    metrics = tmp_path / "ev" / "metrics.json"
    code = main([
        "eval", "--ckpt", str(run / "model_A.fvlm"), "--corpus", str(corpus_dir),
        "--labels", str(corpus_dir / "gold.jsonl"), "--out", str(metrics),
        "--heatmap", pid, "Liver/hypodense cyst",
    ])
    assert code == 0
    assert json.loads(metrics.read_text())["config_hash"] == summary["config_hash"]
    figs = tmp_path / "ev" / "figures"
    assert (figs / "roc.png").exists() and (figs / "auc.png").exists()
    stem = f"heatmap_{pid}_Liver_hypodense_cyst"
    assert (figs / f"{stem}.csv").exists() and list(figs.glob(f"{stem}_z*.pgm"))

    stem = tmp_path / "hm"
    args = ["heatmap", "--ckpt", str(run / "model_B.fvlm"), "--corpus", str(corpus_dir), "--patient", pid]
    assert main([*args, "--abnormality", "Spleen/infarct", "--out", str(stem)]) == 0
    assert stem.with_suffix(".csv").exists() and len(list(tmp_path.glob("hm_z*.pgm"))) == 4
    assert main([*args, "--abnormality", "Brain/bleed", "--out", str(stem)]) != 0


def test_train_switches(corpus_dir, config, tmp_path):
    assert _train(corpus_dir, config, tmp_path / "solo", "--no-coteach") == 0
    assert json.loads((tmp_path / "solo" / "run.json").read_text())["checkpoints"] == ["model_A.fvlm"]

    assert _train(corpus_dir, config, tmp_path / "g", "--no-fga") == 0
    model, extra = load_checkpoint(tmp_path / "g" / "model_A.fvlm")
    assert model.cfg.kind == "global_clip"
    assert extra["config"]["fga"] is False
    assert not (tmp_path / "g" / "model_B.fvlm").exists()


def test_train_is_byte_deterministic(corpus_dir, config, tmp_path):
    for d in ("a", "b"):
        assert _train(corpus_dir, config, tmp_path / d) == 0
    for name in ("model_A.fvlm", "model_B.fvlm", "train_log.jsonl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_eval_missing_checkpoint(corpus_dir, tmp_path, capsys):
    code = main([
        "eval", "--ckpt", str(tmp_path / "none.fvlm"), "--corpus", str(corpus_dir),
        "--labels", str(corpus_dir / "gold.jsonl"), "--out", str(tmp_path / "m.json"),
    ])
    assert code != 0 and "checkpoint not found" in capsys.readouterr().err


def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck", "--seeds", "2"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["gradcheck", "--seeds", "1", "--debug-sign-flip", "matmul"]) == 1
    assert "FAIL" in capsys.readouterr().out
