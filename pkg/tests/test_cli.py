import csv
import json
from pathlib import Path

import pytest
import yaml

from auxmoblcast.cli import main
from auxmoblcast.prompting import read_corpus

FIXTURES = Path(__file__).parent / "fixtures"

SPEC = {
    "num_pois": 3,
    "categories": [
        {"label": "Hotel", "base_rate": 12, "weekly_profile": [0.8, 0.8, 0.8, 0.9, 1.1, 1.6, 1.5]},
        {"label": "Museum", "base_rate": 4, "weekly_profile": [0.3, 1.0, 1.0, 1.0, 1.1, 1.6, 1.3]},
    ],
    "start_date": "2021-02-01",
    "num_days": 40,
    "noise": 0.05,
    "seed": 9,
    "city": "testville",
}

TINY_RUN = {
    "model": {"d_model": 16, "num_heads": 2, "encoder_layers": 1, "decoder_layers": 1, "dropout": 0.0},
    "training": {"learning_rate": 1e-3, "epochs": 2, "batch_size": 8},
}


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


def test_synth_row_count_and_determinism(tmp_path):
    cfg = write_yaml(tmp_path / "spec.yaml", SPEC)
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "a.csv")]) == 0
    assert main(["--config", cfg, "synth", "--out", str(tmp_path / "b.csv")]) == 0
    rows = (tmp_path / "a.csv").read_text().splitlines()
    assert len(rows) == 1 + 3 * 40
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert main(["synth", "--config", cfg, "--seed", "10", "--out", str(tmp_path / "c.csv")]) == 0
    assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "c.csv").read_bytes()


@pytest.mark.parametrize("mutation, key", [
    ({"num_pois": "three"}, "num_pois"),
    ({"colour": "red"}, "colour"),
    ({"num_days": 5}, "num_days"),
    ({"categories": [{"label": "Hotel", "base_rate": 1}]}, "weekly_profile"),
])
def test_synth_bad_spec_names_key(tmp_path, capsys, mutation, key):
    cfg = write_yaml(tmp_path / "spec.yaml", {**SPEC, **mutation})
    out = tmp_path / "x.csv"
    assert main(["synth", "--config", cfg, "--out", str(out)]) == 2
    assert key in capsys.readouterr().err
    assert not out.exists()


def test_synth_unparseable_yaml(tmp_path):
    bad = tmp_path / "spec.yaml"
    bad.write_text("num_pois: [1, 2\n")
    assert main(["synth", "--config", str(bad), "--out", str(tmp_path / "x.csv")]) == 2


def test_ingest_summary(tmp_path, capsys):
    assert main(["ingest", str(FIXTURES / "three_pois.csv")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["num_pois"] == 3 and summary["num_rows"] == 90
    assert summary["cities"] == ["miami"]


def test_ingest_errors_map_to_data_exit(tmp_path):
    assert main(["ingest", str(tmp_path / "missing.csv")]) == 3
    gap = tmp_path / "gap.csv"
    gap.write_text("poi_id,category,city,date,visits\n1,Hotel,x,2020-01-01,3\n1,Hotel,x,2020-01-03,4\n")
    assert main(["ingest", str(gap)]) == 3


def _table1_csv(path, instance):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["poi_id", "category", "city", "date", "visits"])
        for d, c in zip(instance.history_dates, instance.history_counts):
            w.writerow([instance.poi_id, instance.category, instance.city, d.isoformat(), c])
        w.writerow([instance.poi_id, instance.category, instance.city,
                    instance.target_date.isoformat(), instance.target_count])


def test_prompt_table1_strings(tmp_path, table1_instance):
    from conftest import TABLE1_STRINGS

    data = tmp_path / "t1.csv"
    _table1_csv(data, table1_instance)
    for kind in "abc":
        out = tmp_path / f"{kind}.jsonl"
        assert main(["prompt", str(data), "--variant", kind, "--out", str(out)]) == 0
        (pair,) = read_corpus(out)
        assert (pair.input_text, pair.target_text) == TABLE1_STRINGS[kind.upper()]
    out = tmp_path / "nd.jsonl"
    assert main(["prompt", str(data), "--variant", "c", "--no-dates", "--out", str(out)]) == 0
    (pair,) = read_corpus(out)
    assert pair.input_text.startswith("there were 11, 11, 10,")
    assert pair.input_text.endswith("people visiting POI on each day.")


def test_prompt_empty_dataset(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("poi_id,category,city,date,visits\n")
    out = tmp_path / "p.jsonl"
    assert main(["prompt", str(empty), "--out", str(out)]) == 3
    assert not out.exists()


def test_train_then_eval(tmp_path):
    cfg = write_yaml(tmp_path / "run.yaml", {**TINY_RUN, "data": str(FIXTURES / "three_pois.csv")})
    run = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(run), "--seed", "1"]) == 0
    assert {"best.ckpt", "vocab.txt", "metrics.csv", "config.json", "test_metrics.json"} <= {
        p.name for p in run.iterdir()}
    ev = tmp_path / "eval"
    assert main(["eval", str(run / "best.ckpt"), "--data", str(FIXTURES / "three_pois.csv"),
                 "--out", str(ev)]) == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    assert all(metrics[k] == metrics[k] and abs(metrics[k]) < 1e6 for k in ("rmse", "mae"))
    assert json.loads((run / "test_metrics.json").read_text()) == metrics


def test_train_is_idempotent(tmp_path):
    cfg = write_yaml(tmp_path / "run.yaml", {**TINY_RUN, "data": str(FIXTURES / "three_pois.csv")})
    for name in ("a", "b"):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    for f in ("metrics.csv", "best.ckpt", "vocab.txt", "test_metrics.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_train_config_errors(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "run.yaml", {**TINY_RUN, "data": str(FIXTURES / "three_pois.csv"),
                                             "training": {"lambda_ce": 0.5, "lambda_poi": 0.2}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 2
    assert "lambda_poi" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()
    cfg = write_yaml(tmp_path / "run2.yaml", {"model": {"depth": 3}, "data": "x.csv"})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "run")]) == 2
    assert "model.depth" in capsys.readouterr().err


def test_eval_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"MOBL\x01\x00")
    assert main(["eval", str(bad), "--data", str(FIXTURES / "three_pois.csv"), "--out", str(tmp_path / "e")]) == 3
    assert not (tmp_path / "e").exists()


def _linear_csv(path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["poi_id", "category", "city", "date", "visits"])
        import datetime as dt

        for poi, (a, b) in enumerate([(5, 1), (40, 2), (12, 0), (100, 3)]):
            for t in range(40):
                day = dt.date(2021, 1, 1) + dt.timedelta(days=t)
                w.writerow([poi, "Hotel", "lin", day.isoformat(), a + b * t])


def test_baseline_lr_linear_fixture(tmp_path):
    data = tmp_path / "lin.csv"
    _linear_csv(data)
    out = tmp_path / "lr"
    assert main(["baseline", "lr", "--data", str(data), "--out", str(out)]) == 0
    assert json.loads((out / "metrics.json").read_text())["rmse"] < 1e-6


def test_baseline_unknown_name(tmp_path):
    data = tmp_path / "lin.csv"
    _linear_csv(data)
    assert main(["baseline", "arima", "--data", str(data), "--out", str(tmp_path / "o")]) == 2


def _tiny_benchmark(tmp_path):
    return write_yaml(tmp_path / "bench.yaml", {
        "cities": [
            {"name": "aa", "num_pois": 2, "num_categories": 2, "data_seed": 1},
            {"name": "bb", "num_pois": 2, "num_categories": 2, "data_seed": 2, "first_poi_id": 100},
            {"name": "cc", "num_pois": 2, "num_categories": 2, "data_seed": 3, "first_poi_id": 200},
        ],
        "num_days": 30,
        "model": {"d_model": 16, "num_heads": 2, "encoder_layers": 1, "decoder_layers": 1},
        "training": {"learning_rate": 1e-3, "epochs": 1, "batch_size": 16},
        "baseline": {"hidden": 8, "epochs": 1},
        "seeds": [0],
    })


def test_protocol_date_ablation_shape(tmp_path):
    cfg = _tiny_benchmark(tmp_path)
    out = tmp_path / "p"
    assert main(["protocol", "date_ablation", "--config", cfg, "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "date_ablation.csv")))
    assert len(rows) == 3 * 2
    for city in ("aa", "bb", "cc"):
        assert sorted(r["variant"] for r in rows if r["train_city"] == city) == ["C", "C-nodates"]


def test_protocol_zero_shot_pairs(tmp_path):
    cfg = _tiny_benchmark(tmp_path)
    out = tmp_path / "z"
    assert main(["protocol", "zero_shot", "--config", cfg, "--models", "prompt,lr", "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "zero_shot.csv")))
    for model in ("prompt", "lr"):
        pairs = {(r["train_city"], r["test_city"]) for r in rows if r["model"] == model}
        assert len(pairs) == 6 and all(a != b for a, b in pairs)


def test_protocol_bad_config(tmp_path, capsys):
    cfg = write_yaml(tmp_path / "bench.yaml", {"training": {"epochs": 0}})
    assert main(["protocol", "standard", "--config", cfg, "--out", str(tmp_path / "p")]) == 2
    assert "epochs" in capsys.readouterr().err
    cfg = write_yaml(tmp_path / "bench2.yaml", {"citys": []})
    assert main(["protocol", "standard", "--config", cfg, "--out", str(tmp_path / "p")]) == 2
    assert "citys" in capsys.readouterr().err
    assert not (tmp_path / "p").exists()
