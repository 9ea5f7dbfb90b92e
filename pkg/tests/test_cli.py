import json

import numpy as np
import pytest

from rachpred import pipeline
from rachpred.cli import EXIT_CONFIG, EXIT_NUMERIC, main
from rachpred.sim import ConfigError

TINY = {
    "total_slots": 3000,
    "train_traces": 2,
    "test_traces": 2,
    "model": {"hidden_sizes": [4], "head_sizes": [4, 2], "wiring": [[0], [0, 1]]},
    "train": {"epochs": 1, "window": 50, "batch_size": 4},
    "streaming": {"l_hist": 500, "l_f": 50, "l_p": 100, "l_buff": 100},
    "burst": {"epochs": 2, "hidden_size": 8},
    "label": {"t_pred": 0.5},
}


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def test_default_simulate_writes_32000_rows(tmp_path):
    assert main(["simulate", "--seed", "1", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "trace.csv").read_bytes().split(b"\n")
    assert lines[0] == b"slot,arrivals,attempts,detected,collided,dropped,congested,label"
    assert len(lines) == 32000 + 2 and lines[-1] == b""
    assert b"\r" not in (tmp_path / "trace.csv").read_bytes()


def test_zero_duration_gives_header_only(tmp_path):
    assert main(["simulate", "--slots", "0", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "trace.csv").read_text() == ",".join(pipeline.TRACE_HEADER) + "\n"
    tr, congested, label = pipeline.read_trace_csv(tmp_path / "trace.csv")
    assert len(tr) == 0 and len(label) == 0


def test_same_seed_same_file(tmp_path):
    for d in ("a", "b"):
        main(["simulate", "--seed", "99", "--slots", "2000", "--out", str(tmp_path / d)])
    a = pipeline.file_sha256(tmp_path / "a" / "trace.csv")
    assert a == pipeline.file_sha256(tmp_path / "b" / "trace.csv")
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["artifacts"]["trace"]["sha256"] == a
    assert man["seed"] == 99


def test_trace_csv_roundtrip(tmp_path):
    cfg = pipeline.ExperimentConfig(total_slots=1500)
    tr = pipeline.simulate(cfg, seed=4)
    pipeline.write_trace_csv(tmp_path / "t.csv", tr, cfg)
    back, congested, label = pipeline.read_trace_csv(tmp_path / "t.csv")
    assert np.array_equal(back.attempts, tr.attempts) and np.array_equal(back.detected, tr.detected)
    assert np.array_equal(label, pipeline.trace_labels(tr, cfg)[1])


def test_config_hash_ignores_key_order():
    cfg = pipeline.ExperimentConfig.from_dict(TINY)
    d = cfg.to_dict()
    shuffled = {k: d[k] for k in reversed(list(d))}
    shuffled["streaming"] = {k: d["streaming"][k] for k in reversed(list(d["streaming"]))}
    assert pipeline.config_hash(d) == pipeline.config_hash(shuffled)
    other = cfg.replace(seed=5)
    assert pipeline.config_hash(other) != pipeline.config_hash(cfg)


def test_config_roundtrip_and_manifest_input():
    cfg = pipeline.ExperimentConfig.from_dict(TINY)
    again = pipeline.ExperimentConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    manifest = {"config": cfg.to_dict(), "config_hash": "x"}
    assert pipeline.ExperimentConfig.from_dict(manifest).to_dict() == cfg.to_dict()


def test_config_validation_errors():
    with pytest.raises(ConfigError):
        pipeline.ExperimentConfig.from_dict({"nonsense": 1})
    with pytest.raises(ConfigError):
        pipeline.ExperimentConfig.from_dict({"streaming": {"l_f": 300, "l_p": 200}})
    with pytest.raises(ConfigError):
        pipeline.ExperimentConfig.from_dict({"streaming": {"l_q": 1}})
    with pytest.raises(ConfigError):
        pipeline.ExperimentConfig.from_dict({"model": {"head_sizes": [4, 3]}})
    cfg = pipeline.ExperimentConfig()
    with pytest.raises(ConfigError):
        cfg.validate(burst_chunk_size=1000)
    cfg.validate(burst_chunk_size=600)


def test_bad_inputs_exit_with_config_code(tmp_path, tiny_config):
    assert main(["simulate", "--lf", "300", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["simulate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    (tmp_path / "bad.json").write_text("{not json")
    assert main(["flops", "--config", str(tmp_path / "bad.json")]) == EXIT_CONFIG
    with pytest.raises(SystemExit):
        main(["simulate", "--seed", str(2**64)])


def test_numeric_failure_exit_code(tmp_path, tiny_config, monkeypatch):
    from rachpred.nn.train import TrainingError

    def boom(*a, **k):
        raise TrainingError("loss diverged")

    monkeypatch.setattr(pipeline, "train_forecaster", boom)
    assert main(["train", "--config", str(tiny_config), "--out", str(tmp_path)]) == EXIT_NUMERIC


def test_flops_command(capsys):
    assert main(["flops", "--format", "json"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["param_count"] == 81_322_502 and doc["ratio_exact"] == "3/4"
    assert main(["flops", "--reference", "gru"]) == 0
    assert "62,557,502" in capsys.readouterr().out


def test_dumps_fixed_precision():
    text = pipeline.dumps({"b": 1 / 3, "a": [np.float64(2.0), np.int64(3)], "c": float("nan")})
    assert json.loads(text) == {"a": [2.0, 3], "b": 0.333333, "c": None}
    assert text.index('"a"') < text.index('"b"')


def _pipeline(root, config):
    root.mkdir()
    run = lambda *a: main([*a, "--config", str(config)])  # noqa: E731
    assert run("simulate", "--out", str(root / "sim")) == 0
    assert run("train", "--out", str(root / "train")) == 0
    assert run("train-burst", "--checkpoint", str(root / "train" / "model.json"), "--out", str(root / "burst")) == 0
    assert run("predict", "--checkpoint", str(root / "train" / "model.json"), "--trace", str(root / "sim" / "trace.csv"),
               "--out", str(root / "pred")) == 0
    assert run("evaluate", "--chunks", str(root / "pred" / "chunks.csv"), "--trace", str(root / "sim" / "trace.csv"),
               "--burst", str(root / "burst" / "burst.json"), "--predictions", str(root / "pred" / "predictions.csv"),
               "--out", str(root / "eval")) == 0


def test_end_to_end_pipeline_is_reproducible(tmp_path, tiny_config):
    _pipeline(tmp_path / "one", tiny_config)
    # second run is driven by the first run's manifest
    _pipeline(tmp_path / "two", tmp_path / "one" / "sim" / "manifest.json")
    for rel in ("sim/trace.csv", "eval/metrics.json", "pred/predictions.csv", "eval/decisions.csv"):
        assert (tmp_path / "one" / rel).read_bytes() == (tmp_path / "two" / rel).read_bytes(), rel

    pred = (tmp_path / "one" / "pred" / "predictions.csv").read_text().splitlines()
    assert pred[0] == "slot,pred_detected,pred_collided,lead_slots"
    assert len(pred) - 1 == ((3000 - 500) // 50) * 50
    cost = json.loads((tmp_path / "one" / "pred" / "cost.json").read_text())
    assert cost["measured"]["steps"] == (3000 - 500) // 50
    metrics = json.loads((tmp_path / "one" / "eval" / "metrics.json").read_text())
    assert set(metrics["metrics"]) >= {"precision", "recall", "f1", "mse", "true_positives"}
    dec = (tmp_path / "one" / "eval" / "decisions.csv").read_text().splitlines()
    assert dec[0] == "step,probability,decision,label" and len(dec) - 1 == metrics["steps"]
    bursts = (tmp_path / "one" / "eval" / "plot_bursts.csv").read_text().splitlines()
    assert len(bursts) - 1 == metrics["steps"] * 50
    assert {line.split(",")[2] for line in bursts[1:]} <= {"0", "20"}
    man = json.loads((tmp_path / "one" / "eval" / "manifest.json").read_text())
    assert set(man["artifacts"]) == {"metrics", "decisions", "plot_bursts", "plot_traffic"}


def test_evaluate_rejects_chunk_mismatch(tmp_path, tiny_config):
    _pipeline(tmp_path / "one", tiny_config)
    code = main(["evaluate", "--config", str(tiny_config), "--lp", "120",
                 "--chunks", str(tmp_path / "one" / "pred" / "chunks.csv"),
                 "--trace", str(tmp_path / "one" / "sim" / "trace.csv"),
                 "--burst", str(tmp_path / "one" / "burst" / "burst.json"), "--out", str(tmp_path / "x")])
    assert code == EXIT_CONFIG


def test_compare_drivers_command(tmp_path, tiny_config, capsys):
    _pipeline(tmp_path / "one", tiny_config)
    code = main(["compare-drivers", "--config", str(tiny_config), "--lp", "400", "--buffers", "100,200",
                 "--checkpoint", str(tmp_path / "one" / "train" / "model.json"), "--out", str(tmp_path / "cmp")])
    assert code == 0
    res = json.loads((tmp_path / "cmp" / "compare.json").read_text())
    assert set(res) == {"flsp", "rolling_100", "rolling_200"}
    assert set(res["flsp"]) == {"0.5", "1.0", "1.5", "2.0"}
