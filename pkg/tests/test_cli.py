import csv
import json
from pathlib import Path

import numpy as np
import pytest

from contourgp.benchmarks import ExperimentConfig, summarize
from contourgp.cli import ConfigError, _as_runs, config_hash, main, parse_config, read_records

MINIMAL = """\
experiment: synthetic
name: mini
function: quadratic1d
noise: t_small
surrogate: gp
acquisition: tmse
budget: 13
runs: 2
restarts: 1
ga_generations: 20
seed: 7
"""


def _write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def _numeric(path):
    """Record rows with the wall-clock columns dropped."""
    rows = [json.loads(line) for line in Path(path).read_text().splitlines()]
    for r in rows:
        r.pop("wall", None)
    return rows


@pytest.fixture(scope="module")
def minimal_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("mini")
    cfg = _write(tmp, MINIMAL)
    assert main(["run-synthetic", "--config", str(cfg), "--out-dir", str(tmp / "a")]) == 0
    assert main(["run-synthetic", "--config", str(cfg), "--out-dir", str(tmp / "b")]) == 0
    return tmp


def test_minimal_outputs(minimal_run):
    recs = sorted((minimal_run / "a" / "records").glob("*.jsonl"))
    assert len(recs) == 2
    summaries = list((minimal_run / "a").glob("*-summary.csv"))
    assert len(summaries) == 1
    rows = list(csv.DictReader(open(summaries[0])))
    assert len(rows) == 1 and rows[0]["runs"] == "2"
    ns = [r["n"] for r in _numeric(recs[0]) if r["type"] == "step"]
    assert ns == sorted(ns) and ns[0] == 10 and ns[-1] == 13


def test_rerun_identical(minimal_run):
    a = sorted((minimal_run / "a" / "records").glob("*.jsonl"))
    b = sorted((minimal_run / "b" / "records").glob("*.jsonl"))
    assert [p.name for p in a] == [p.name for p in b]
    for pa, pb in zip(a, b):
        assert _numeric(pa) == _numeric(pb)
    sa = (minimal_run / "a" / "mini-summary.csv").read_bytes()
    sb = (minimal_run / "b" / "mini-summary.csv").read_bytes()
    assert sa == sb


def test_summary_matches_records(minimal_run):
    recs = read_records(sorted((minimal_run / "a" / "records").glob("*.jsonl")))
    (h, group), = recs.items()
    s = summarize(_as_runs(group))
    row = next(csv.DictReader(open(minimal_run / "a" / "mini-summary.csv")))
    assert row["config_hash"] == h
    for k in ("er_mean", "er_sd", "ee_mean", "ee_sd", "bias_mean", "ci_mean"):
        assert abs(float(row[k]) - s[k]) < 1e-12


def test_report_single_record(minimal_run, tmp_path):
    rec = sorted((minimal_run / "a" / "records").glob("*.jsonl"))[0]
    assert main(["report", str(rec), "--out-dir", str(tmp_path)]) == 0
    series, = tmp_path.glob("series-*.csv")
    rows = list(csv.DictReader(open(series)))
    steps = [r for r in _numeric(rec) if r["type"] == "step"]
    assert [int(r["n"]) for r in rows] == [s["n"] for s in steps]
    assert np.allclose([float(r["er_median"]) for r in rows], [s["er"] for s in steps], atol=0, rtol=0)


def test_report_medians_and_grouping(minimal_run, tmp_path):
    # second scheme with a different acquisition
    other = _write(tmp_path, MINIMAL.replace("acquisition: tmse", "acquisition: mee"), "other.yaml")
    assert main(["run-synthetic", "--config", str(other), "--out-dir", str(tmp_path / "c")]) == 0
    pattern_a = str(minimal_run / "a" / "records" / "*.jsonl")
    pattern_c = str(tmp_path / "c" / "records" / "*.jsonl")
    assert main(["report", pattern_a, pattern_c, "--out-dir", str(tmp_path / "rep")]) == 0
    series = sorted((tmp_path / "rep").glob("series-*.csv"))
    assert len(series) == 2
    tm = next(p for p in series if "-tmse-" in p.name)
    recs = sorted((minimal_run / "a" / "records").glob("*.jsonl"))
    ers = np.array([[r["er"] for r in _numeric(p) if r["type"] == "step"] for p in recs])
    got = [float(r["er_median"]) for r in csv.DictReader(open(tm))]
    assert np.allclose(got, np.median(ers, axis=0), rtol=0, atol=1e-15)


def test_report_no_match(tmp_path, capsys):
    assert main(["report", str(tmp_path / "nothing*.jsonl")]) == 2


def test_sweep_expansion():
    raw = {"experiment": "synthetic", "surrogate": ["gp", "tgp", "tp", "clgp"],
           "acquisition": ["mcu", "tmse", "csur", "icu"]}
    kind, _, cfgs = parse_config(raw)
    assert kind == "synthetic" and len(cfgs) == 16
    assert len({(c.surrogate, c.acquisition) for c in cfgs}) == 16


def test_sweep_summary_rows(tmp_path):
    text = MINIMAL.replace("surrogate: gp", "surrogate: [gp, tgp, tp, clgp]") \
        .replace("acquisition: tmse", "acquisition: [mcu, tmse, csur, mee]") \
        .replace("budget: 13", "budget: 10").replace("runs: 2", "runs: 1")
    cfg = _write(tmp_path, text)
    assert main(["run-synthetic", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "o" / "mini-summary.csv")))
    assert len(rows) == 16


def test_unknown_key_reports_line(tmp_path, capsys):
    cfg = _write(tmp_path, MINIMAL + "bugdet: 40\n")
    assert main(["run-synthetic", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert f"{cfg}:12" in err and "bugdet" in err


def test_bad_type_reports_field(tmp_path, capsys):
    cfg = _write(tmp_path, MINIMAL.replace("budget: 13", "budget: lots"))
    assert main(["run-synthetic", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert f"{cfg}:7" in err and "budget" in err


def test_bermudan_missing_product(tmp_path, capsys):
    cfg = _write(tmp_path, "experiment: bermudan\nsurrogate: gp\nreps: 3\n")
    assert main(["run-bermudan", "--config", str(cfg)]) == 2
    assert "product" in capsys.readouterr().err


def test_wrong_experiment_kind(tmp_path):
    cfg = _write(tmp_path, MINIMAL)
    assert main(["run-bermudan", "--config", str(cfg)]) == 2


def test_config_hash_stable_under_reordering():
    a = {"experiment": "synthetic", "function": "braninhoo2d", "noise": "t_large", "budget": 50}
    b = dict(reversed(list(a.items())))
    ha = config_hash(parse_config(a)[2][0])
    hb = config_hash(parse_config(b)[2][0])
    assert ha == hb
    assert ha != config_hash(ExperimentConfig(function="braninhoo2d", noise="t_large", budget=51))


def test_quick_profile():
    from contourgp.bermudan import BermudanConfig
    from contourgp.cli import apply_overrides

    c = apply_overrides(ExperimentConfig(runs=20, budget=100), quick=True)
    assert (c.runs, c.budget) == (5, 50)
    b = apply_overrides(BermudanConfig(runs=10, n_unique=80, eval_paths=160_000), quick=True)
    assert (b.runs, b.n_unique, b.eval_paths) == (5, 40, 16_000)
    assert apply_overrides(b, eval_paths=1000).eval_paths == 1000


def test_bermudan_tiny_run(tmp_path):
    text = ("experiment: bermudan\nname: tiny\nproduct: put2d\nsurrogate: gp\ndesign: lhs\n"
            "reps: 2\nn_unique: 12\nruns: 1\neval_paths: 500\nrestarts: 1\n")
    cfg = _write(tmp_path, text)
    assert main(["run-bermudan", "--config", str(cfg), "--out-dir", str(tmp_path / "o")]) == 0
    row, = csv.DictReader(open(tmp_path / "o" / "tiny-valuation.csv"))
    assert float(row["value_mean"]) > 0 and float(row["stderr_mean"]) > 0
    assert len(list((tmp_path / "o" / "boundaries").glob("*.csv"))) == 1
    arch = np.load(next((tmp_path / "o" / "policies").glob("*.npz")))
    assert "X_24" in arch.files
