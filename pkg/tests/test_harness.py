import csv
import io
import json
from importlib import resources

import numpy as np
import pytest

from twlab import cli
from twlab.harness import (ATTACK_COLUMNS, SWEEP_COLUMNS, VALIDATE_COLUMNS, ConfigError,
                           ExperimentConfig, RunResult, run_experiment)

SMALL = {"model": {"dist": "zipf", "N": 200, "s": 1.1}, "m": 4, "T": 16, "n_texts": 200,
         "n_unwatermarked": 400, "n_train": 100, "epsilon": 0.05, "master_seed": 11}


def _cfg(kind, **over):
    return {"experiment": kind, **SMALL, **over}


def _write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def _cell(text, ref):
    """Parse one CSV cell back to the type of the JSON value ``ref``."""
    if ref is None:
        return None if text == "" else text
    if isinstance(ref, bool):
        return {"true": True, "false": False}[text]
    if isinstance(ref, int):
        return int(text)
    if isinstance(ref, float):
        return float(text)
    return text


# ---------------------------------------------------------------- config


def test_defaults_fill_in():
    cfg = ExperimentConfig.from_dict({"experiment": "sweep"})
    assert cfg.m == 30 and cfg.gspec == "bernoulli(0.5)" and cfg.P == cfg.H
    assert cfg.ms == [30]
    assert cfg.model["kind"] == "iid"


@pytest.mark.parametrize("doc, path", [
    ({"experiment": "sweep", "bogus": 1}, "<root>"),
    ({"experiment": "sweep", "model": {"dist": "zipf", "colour": 3}}, "model"),
    ({"experiment": "sweep", "m": 0}, "m"),
    ({"experiment": "sweep", "m_values": [1, 0]}, "m_values/1"),
    ({"experiment": "sweep", "epsilon": 0.7}, "epsilon"),
    ({"experiment": "sweep", "gspec": "gaussian"}, "gspec"),
    ({"experiment": "nope"}, "experiment"),
    ({"m": 3}, "<root>"),
    ({"experiment": "sweep", "n_train": 50}, "n_train"),
    ({"experiment": "sweep", "master_seed": -1}, "master_seed"),
])
def test_schema_errors_name_the_field(doc, path):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict(doc)
    assert str(exc.value).startswith(path + ":")


@pytest.mark.parametrize("doc, field", [
    ({"experiment": "sweep", "epsilon": 0.01, "n_unwatermarked": 50}, "n_unwatermarked"),
    ({"experiment": "sweep", "model": {"dist": "two_point"}}, "model"),
    ({"experiment": "sweep", "model": {"dist": "explicit", "probs": [0.5, 0.6]}}, "model"),
    ({"experiment": "sweep", "model": {"kind": "markov"}}, "model"),
    ({"experiment": "sweep", "gspec": "bernoulli(1.5)"}, "model"),
    ({"experiment": "clt", "n_texts": 150}, "n_texts"),
])
def test_semantic_errors(doc, field):
    with pytest.raises(ConfigError, match=f"^{field}:"):
        ExperimentConfig.from_dict(doc)


def test_invalid_json():
    with pytest.raises(ConfigError, match="invalid JSON"):
        ExperimentConfig.from_json("{experiment: sweep")


def test_schema_is_published():
    text = resources.files("twlab").joinpath("data/config_schema.json").read_text()
    schema = json.loads(text)
    assert schema["additionalProperties"] is False
    assert set(schema["properties"]) >= {"experiment", "model", "gspec", "m", "T", "epsilon"}


def test_config_hash_tracks_content():
    a = ExperimentConfig.from_dict(_cfg("sweep"))
    b = ExperimentConfig.from_dict(_cfg("sweep"))
    assert a.hash() == b.hash()
    assert a.with_seed(12).hash() != a.hash()
    assert ExperimentConfig.from_dict(_cfg("sweep", output="x.csv")).hash() == a.hash()


def test_markov_config_builds():
    cfg = ExperimentConfig.from_dict(
        {"experiment": "sweep", "model": {"kind": "markov", "matrix": [[0.9, 0.1], [0.2, 0.8]]}})
    assert cfg.build_model().N == 2


# ---------------------------------------------------------------- runners


@pytest.fixture(scope="module")
def sweep_result():
    cfg = ExperimentConfig.from_dict(_cfg("sweep", m_values=[1, 2, 4], T=12))
    return run_experiment(cfg, threads=2)


def test_sweep_rows(sweep_result):
    res = sweep_result
    assert res.columns == SWEEP_COLUMNS
    assert [(r["m"], r["score_kind"]) for r in res.rows] == [
        (m, k) for m in (1, 2, 4) for k in ("mean", "bayesian")]
    for r in res.rows:
        assert 0 <= r["tpr_emp"] <= 1
        assert r["n_texts"] == 200 and r["T"] == 12 and r["seed"] == 11
        if r["score_kind"] == "mean":
            # below the m T >= 30 floor no prediction is offered
            assert (r["tpr_theory"] is None) == (r["m"] * 12 < 30)
    assert len(res.extra["ms_curve"]) == 4
    assert len(res.extra["collision_profile"]) == 4


def test_sweep_detects_watermark(sweep_result):
    row = [r for r in sweep_result.rows if r["m"] == 4 and r["score_kind"] == "mean"][0]
    assert row["tpr_emp"] > 0.5
    assert abs(row["tpr_emp"] - row["tpr_theory"]) < 0.1


def test_wall_time_not_serialized(sweep_result):
    assert sweep_result.wall_time > 0
    assert "wall_time" not in sweep_result.to_json()


@pytest.mark.parametrize("kind", ["sweep", "attack", "validate", "clt", "optimal_p"])
def test_csv_rows_round_trip_through_json(kind):
    over = {"n_attack_layers": 2} if kind == "attack" else {}
    if kind == "optimal_p":
        over = {"p_values": [0.4, 0.5]}
    cfg = ExperimentConfig.from_dict(_cfg(kind, **over))
    res = run_experiment(cfg, threads=2)
    doc = json.loads(res.to_json())
    assert doc["experiment"] == kind and doc["config_hash"] == cfg.hash()
    assert doc["columns"] == res.columns
    reader = list(csv.reader(io.StringIO(res.to_csv())))
    assert reader[0] == res.columns
    assert len(reader) - 1 == len(doc["rows"])
    for line, row in zip(reader[1:], doc["rows"]):
        assert list(row) == res.columns
        assert {c: _cell(t, row[c]) for c, t in zip(res.columns, line)} == row


def test_attack_rows():
    cfg = ExperimentConfig.from_dict(_cfg("attack", n_texts=30, n_attack_layers=3))
    res = run_experiment(cfg, threads=2)
    assert res.columns == ATTACK_COLUMNS
    base, hit = res.rows
    assert (base["phase"], base["n_attack_layers"]) == ("baseline", 0)
    assert (hit["phase"], hit["n_attack_layers"]) == ("attacked", 3)
    assert base["tau"] == hit["tau"]
    frac = res.extra["fraction_below_tau"]
    assert frac["attacked"] == pytest.approx(1 - hit["tpr"])


def test_validate_rows():
    res = run_experiment(ExperimentConfig.from_dict(_cfg("validate", gspec="uniform")), 2)
    assert res.columns == VALIDATE_COLUMNS
    names = [r["assertion"] for r in res.rows]
    assert "fpr_ms_closed" in names and "tpr_bs_closed" in names
    assert "g_freq_layer1_w" not in names
    for r in res.rows:
        assert r["pass"] == (abs(r["observed"] - r["expected"]) <= r["tolerance"])


def test_clt_flags_floor():
    cfg = ExperimentConfig.from_dict(_cfg("clt", m=1, T=2, n_texts=200))
    row = run_experiment(cfg, 1).rows[0]
    assert row["clt_floor_ok"] is False
    cfg = ExperimentConfig.from_dict(_cfg("clt", n_texts=200))
    assert run_experiment(cfg, 1).rows[0]["clt_floor_ok"] is True


def test_optimal_p_rows():
    cfg = ExperimentConfig.from_dict(_cfg("optimal_p", p_values=[0.3, 0.5, 0.7]))
    res = run_experiment(cfg, 2)
    assert [r["p"] for r in res.rows] == [0.3, 0.5, 0.7]
    assert res.extra["scan_grid"][0] == 0.1 and len(res.extra["scan_z_exact"]) == 9
    assert 0 < res.extra["p_star"] < 1


def test_same_seed_same_rows():
    cfg = ExperimentConfig.from_dict(_cfg("sweep", m_values=[2, 4]))
    a, b = run_experiment(cfg, 1), run_experiment(cfg, 3)
    assert a.to_json() == b.to_json()
    c = run_experiment(cfg.with_seed(12), 1)
    assert c.to_csv() != a.to_csv()


def test_unknown_serializable_rejected():
    cfg = ExperimentConfig.from_dict(_cfg("sweep"))
    res = RunResult("sweep", cfg, ["x"], [{"x": object()}])
    with pytest.raises(TypeError):
        res.to_json()


# ---------------------------------------------------------------- command line


def test_cli_exit_ok_and_csv_header(tmp_path):
    out = tmp_path / "out.csv"
    cfg = _write(tmp_path, _cfg("sweep", m_values=[2]))
    assert cli.main(["sweep", "--config", cfg, "--out", str(out)]) == cli.EXIT_OK
    assert out.read_text().splitlines()[0] == ",".join(SWEEP_COLUMNS)


def test_cli_json_by_extension(tmp_path):
    out = tmp_path / "out.json"
    cfg = _write(tmp_path, _cfg("attack", n_texts=10, n_attack_layers=2))
    assert cli.main(["attack", "--config", cfg, "--out", str(out)]) == 0
    assert json.loads(out.read_text())["experiment"] == "attack"
    out2 = tmp_path / "forced.txt"
    assert cli.main(["attack", "--config", cfg, "--out", str(out2), "--format", "csv"]) == 0
    assert out2.read_text().splitlines()[0] == ",".join(ATTACK_COLUMNS)


def test_cli_output_from_config(tmp_path):
    out = tmp_path / "via_config.csv"
    cfg = _write(tmp_path, _cfg("attack", n_texts=10, n_attack_layers=1, output=str(out)))
    assert cli.main(["attack", "--config", cfg]) == 0
    assert out.read_text().startswith("phase,")


@pytest.mark.parametrize("kind", ["sweep", "attack", "validate"])
def test_cli_threads_byte_identical(tmp_path, kind):
    cfg = _write(tmp_path, _cfg(kind, n_attack_layers=2))
    sub = kind
    outs = []
    for threads in ("1", "8"):
        out = tmp_path / f"{kind}_{threads}.json"
        code = cli.main([sub, "--config", cfg, "--out", str(out), "--threads", threads])
        assert code in (cli.EXIT_OK, cli.EXIT_ASSERT)
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_cli_seed_override(tmp_path):
    cfg = _write(tmp_path, _cfg("attack", n_texts=20, n_attack_layers=1))
    texts = []
    for seed in ("11", "0xB", "12"):
        out = tmp_path / f"s{seed}.json"
        assert cli.main(["attack", "--config", cfg, "--out", str(out), "--seed", seed]) == 0
        texts.append(out.read_text())
    assert texts[0] == texts[1]
    assert texts[0] != texts[2]
    assert json.loads(texts[2])["config"]["master_seed"] == 12


def test_cli_threads_from_env(tmp_path, monkeypatch):
    seen = {}

    def fake(cfg, threads):
        seen["threads"] = threads
        return RunResult(cfg.experiment, cfg, ["x"], [{"x": 1}])

    monkeypatch.setattr(cli, "run_experiment", fake)
    monkeypatch.setenv("TWL_THREADS", "5")
    assert cli.main(["sweep", "--out", str(tmp_path / "o.csv")]) == 0
    assert seen["threads"] == 5
    assert cli.main(["sweep", "--threads", "2", "--out", str(tmp_path / "o.csv")]) == 0
    assert seen["threads"] == 2


def test_cli_config_errors_exit_1(tmp_path, capsys):
    bad = _write(tmp_path, {"experiment": "sweep", "mystery": True}, "bad.json")
    assert cli.main(["sweep", "--config", bad]) == cli.EXIT_CONFIG
    assert "mystery" in capsys.readouterr().err
    other = _write(tmp_path, _cfg("attack"), "attack.json")
    assert cli.main(["sweep", "--config", other]) == cli.EXIT_CONFIG
    assert cli.main(["sweep", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CONFIG
    (tmp_path / "garbled.json").write_text("{")
    assert cli.main(["sweep", "--config", str(tmp_path / "garbled.json")]) == cli.EXIT_CONFIG


@pytest.mark.parametrize("argv", [
    ["sweep", "--frobnicate"],
    ["sweep", "--threads", "0"],
    ["sweep", "--seed", str(1 << 64)],
    ["sweep", "--format", "xml"],
    ["teleport"],
    [],
])
def test_cli_usage_errors_exit_1(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    assert exc.value.code == cli.EXIT_CONFIG
    assert "usage:" in capsys.readouterr().err


def test_cli_validate_failure_exit_2(tmp_path, monkeypatch, capsys):
    def fake(cfg, threads):
        rows = [{"assertion": "x", "expected": 0.0, "observed": 1.0, "tolerance": 0.1,
                 "pass": False}]
        return RunResult("validate", cfg, VALIDATE_COLUMNS, rows)

    monkeypatch.setattr(cli, "run_experiment", fake)
    out = tmp_path / "v.csv"
    assert cli.main(["validate", "--out", str(out)]) == cli.EXIT_ASSERT
    assert out.read_text().splitlines()[1] == "x,0.0,1.0,0.1,false"
    assert "failed" in capsys.readouterr().err


def test_cli_vectors(tmp_path, capsys):
    text = resources.files("twlab").joinpath("data/gsource_vectors.txt").read_text()
    ref = "".join(line + "\n" for line in text.splitlines() if not line.startswith("#"))
    assert cli.main(["vectors"]) == 0
    assert capsys.readouterr().out == ref
    out = tmp_path / "v.txt"
    assert cli.main(["vectors", "--out", str(out)]) == 0
    assert out.read_text() == ref


def test_cli_stdout_csv(capsys, tmp_path):
    cfg = _write(tmp_path, _cfg("attack", n_texts=10, n_attack_layers=1))
    assert cli.main(["attack", "--config", cfg]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert [r["phase"] for r in rows] == ["baseline", "attacked"]
    assert np.isfinite(float(rows[0]["tau"]))
