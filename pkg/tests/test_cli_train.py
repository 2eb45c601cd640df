import json

from trajflow.cli import main
from trajflow.episodes import load_predictions


def test_train_sample_evaluate_round_trip(tmp_path):
    """End-to-end CLI smoke: synth -> train -> sample (x2) -> evaluate."""
    data = tmp_path / "data"
    assert main(["synth", "--n", "4", "--seed", "2", "--out", str(data)]) == 0
    val = tmp_path / "val"
    assert main(["synth", "--n", "2", "--seed", "3", "--out", str(val)]) == 0

    cfg = tmp_path / "run.cfg"
    cfg.write_text(
        f"train_episodes={data / 'episodes.jsonl'}\n"
        f"val_episodes={val / 'episodes.jsonl'}\n"
        "epochs=1\nlr=0.001\nbeta=0.1\nk=2\nn_samples=1\nseed=4\n")
    run_dir = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--out", str(run_dir)]) == 0
    assert (run_dir / "checkpoint.dfn").exists()
    log_text = (run_dir / "log.csv").read_text().splitlines()
    assert log_text[0].startswith("epoch,train_loss")
    assert len(log_text) == 2
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["seed"] == 4

    preds_a = tmp_path / "a.jsonl"
    preds_b = tmp_path / "b.jsonl"
    for out in (preds_a, preds_b):
        code = main(["sample", "--episodes", str(val / "episodes.jsonl"),
                     "--checkpoint", str(run_dir / "checkpoint.dfn"),
                     "--stats", str(run_dir / "stats.json"),
                     "--k", "3", "--seed", "7", "--out", str(out)])
        assert code == 0
    assert preds_a.read_bytes() == preds_b.read_bytes()
    loaded = load_predictions(preds_a)
    assert loaded[0].k == 3

    report_dir = tmp_path / "report"
    code = main(["evaluate", "--episodes", str(val / "episodes.jsonl"),
                 "--predictions", str(preds_a), "--out", str(report_dir)])
    assert code == 0
    table = (report_dir / "report.txt").read_text()
    assert "minADE" in table and "DAC" in table


def test_sample_requires_seed(tmp_path, capsys):
    code = main(["sample", "--episodes", "x.jsonl", "--checkpoint", "c.dfn",
                 "--out", str(tmp_path / "p.jsonl")])
    assert code == 1
