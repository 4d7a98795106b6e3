"""Command-line entry point: run-synthetic, run-bermudan, report.

Configs are YAML mappings validated against the experiment dataclasses; list
values for the scheme fields expand into a cartesian sweep.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import glob
import hashlib
import itertools
import json
import logging
import sys
import typing
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import yaml

from .benchmarks import ExperimentConfig, macroreplicate, median_series, summarize
from .bermudan import BermudanConfig, boundary_grid, macroreplicate_bermudan

logger = logging.getLogger("contourgp")

SWEEP_FIELDS = {
    "synthetic": ("function", "noise", "surrogate", "acquisition"),
    "bermudan": ("product", "surrogate", "design"),
}
META_KEYS = ("experiment", "out_dir", "name")
SUMMARY_KEYS = ("er", "ee", "bias", "ci")


class ConfigError(ValueError):
    """Schema violation, reported as ``file:line: field: message``."""


# ---------------------------------------------------------------- config loading

def _key_lines(text: str) -> Dict[str, int]:
    node = yaml.compose(text)
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for k, _ in node.value:
            lines[str(k.value)] = k.start_mark.line + 1
    return lines


def _check_type(value, tp) -> bool:
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        return any(_check_type(value, a) for a in typing.get_args(tp))
    if tp is type(None):
        return value is None
    if tp is bool:
        return isinstance(value, bool)
    if tp is int:
        return isinstance(value, int) and not isinstance(value, bool)
    if tp is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if tp is str:
        return isinstance(value, str)
    return True


def _field_types(cls) -> Dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def load_config(path) -> Tuple[str, dict, List[Any]]:
    """Parse and validate a config file.

    Returns ``(kind, meta, configs)`` with one dataclass instance per sweep cell.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})")
    try:
        raw = yaml.safe_load(text)
        lines = _key_lines(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}")
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(raw, str(path), lines)


def parse_config(raw: dict, source: str = "<config>", lines: Optional[Dict[str, int]] = None):
    lines = lines or {}

    def where(key):
        return f"{source}:{lines[key]}" if key in lines else source

    kind = raw.get("experiment")
    if kind not in SWEEP_FIELDS:
        raise ConfigError(f"{where('experiment')}: experiment: must be one of {sorted(SWEEP_FIELDS)}")
    cls = ExperimentConfig if kind == "synthetic" else BermudanConfig
    types = _field_types(cls)
    meta = {k: raw[k] for k in META_KEYS if k in raw}
    fields = {}
    for key, value in raw.items():
        if key in META_KEYS:
            continue
        if key not in types:
            raise ConfigError(f"{where(key)}: {key}: unknown key (allowed: {sorted(types)})")
        values = value if isinstance(value, list) and key in SWEEP_FIELDS[kind] else [value]
        for v in values:
            if not _check_type(v, types[key]):
                raise ConfigError(f"{where(key)}: {key}: expected {types[key]}, got {v!r}")
        fields[key] = values
    required = ("product",) if kind == "bermudan" else ()
    for key in required:
        if key not in fields:
            raise ConfigError(f"{source}: {key}: required field missing")
    sweep = [k for k in SWEEP_FIELDS[kind] if k in fields]
    fixed = {k: v[0] for k, v in fields.items() if k not in sweep}
    configs = []
    for combo in itertools.product(*(fields[k] for k in sweep)):
        kw = dict(fixed, **dict(zip(sweep, combo)))
        try:
            configs.append(cls(**kw))
        except (ValueError, TypeError) as exc:
            bad = next((k for k in kw if k in str(exc)), None)
            loc = where(bad) if bad else source
            raise ConfigError(f"{loc}: {bad or 'config'}: {exc}")
    return kind, meta, configs


def config_hash(cfg) -> str:
    """sha256 of the canonical (key-sorted) JSON of a config."""
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else dict(cfg)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def apply_overrides(cfg, seed=None, runs=None, quick=False, eval_paths=None):
    kw = {}
    if seed is not None:
        kw["seed"] = seed
    if runs is not None:
        kw["runs"] = runs
    if quick:
        kw["runs"] = min(cfg.runs, 5) if runs is None else runs
        if isinstance(cfg, ExperimentConfig):
            kw["budget"] = max(cfg.n0, cfg.budget // 2)
        else:
            kw["n_unique"] = max(cfg.n0, cfg.n_unique // 2)
            kw["eval_paths"] = 16000
    if eval_paths is not None and isinstance(cfg, BermudanConfig):
        kw["eval_paths"] = eval_paths
    return dataclasses.replace(cfg, **kw) if kw else cfg


# ---------------------------------------------------------------- writers

def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _write_csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _jsonl(path: Path, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def synthetic_records(cfg: ExperimentConfig, out: dict) -> List[List[dict]]:
    h = config_hash(cfg)
    seqs = np.random.SeedSequence(cfg.seed).spawn(cfg.runs)
    files = []
    for res in out["results"]:
        rows = [{"type": "header", "config_hash": h, "config": cfg.to_dict(), "run": res.run,
                 "seed_entropy": str(seqs[res.run].entropy), "spawn_key": list(seqs[res.run].spawn_key)}]
        for s in res.steps:
            rows.append({"type": "step", "n": s.n, "er": s.er, "ee": s.ee, "bias": s.bias, "ci": s.ci,
                         "x": s.x, "y": s.y, "refit": s.refit, "wall": s.wall})
        final = res.steps[-1] if res.steps else None
        rows.append({"type": "final", "aborted": res.aborted, "message": res.message,
                     "params": res.final_params,
                     **({k: getattr(final, k) for k in SUMMARY_KEYS} if final else {})})
        files.append(rows)
    return files


def cmd_run_synthetic(args) -> int:
    kind, meta, configs = load_config(args.config)
    if kind != "synthetic":
        raise ConfigError(f"{args.config}: experiment: expected 'synthetic', got {kind!r}")
    out_dir = Path(args.out_dir or meta.get("out_dir", "results"))
    name = meta.get("name", Path(args.config).stem)
    summary_rows = []
    for cfg in configs:
        cfg = apply_overrides(cfg, args.seed, args.runs, args.quick)
        h = config_hash(cfg)
        logger.info("%s/%s/%s/%s: %d runs (hash %s)", cfg.function, cfg.noise, cfg.surrogate,
                    cfg.acquisition, cfg.runs, h[:10])
        out = macroreplicate(cfg)
        for rows in synthetic_records(cfg, out):
            run = rows[0]["run"]
            _jsonl(out_dir / "records" / f"{name}-{h[:10]}-run{run:03d}.jsonl", rows)
        s = out["summary"]
        summary_rows.append([cfg.function, cfg.noise, cfg.surrogate, cfg.acquisition, cfg.budget, s["runs"],
                             s["aborted"]] + [s[f"{k}_{m}"] for k in SUMMARY_KEYS for m in ("mean", "sd")] + [h])
    header = ["function", "noise", "surrogate", "acquisition", "budget", "runs", "aborted"] + \
        [f"{k}_{m}" for k in SUMMARY_KEYS for m in ("mean", "sd")] + ["config_hash"]
    _write_csv(out_dir / f"{name}-summary.csv", header, summary_rows)
    print(f"wrote {len(summary_rows)} summary rows to {out_dir / (name + '-summary.csv')}")
    return 0


def cmd_run_bermudan(args) -> int:
    kind, meta, configs = load_config(args.config)
    if kind != "bermudan":
        raise ConfigError(f"{args.config}: experiment: expected 'bermudan', got {kind!r}")
    out_dir = Path(args.out_dir or meta.get("out_dir", "results"))
    name = meta.get("name", Path(args.config).stem)
    rows_out = []
    for cfg in configs:
        cfg = apply_overrides(cfg, args.seed, args.runs, args.quick, args.eval_paths)
        h = config_hash(cfg)
        logger.info("%s/%s/%s r=%d n=%d: %d runs (hash %s)", cfg.product, cfg.surrogate, cfg.design,
                    cfg.reps, cfg.n_unique, cfg.runs, h[:10])
        out = macroreplicate_bermudan(cfg)
        for res in out["results"]:
            stem = f"{name}-{h[:10]}-run{res.run:03d}"
            rec = [{"type": "header", "config_hash": h, "config": cfg.to_dict(), "run": res.run}]
            for st in res.stages:
                rec.append({"type": "stage", "step": st.step, "t": st.t, "fallback": st.fallback,
                            "params": st.params, "design": st.design.tolist(), "y": st.y.tolist()})
            rec.append({"type": "final", "value": res.value, "stderr": res.stderr, "wall": res.wall})
            _jsonl(out_dir / "records" / f"{stem}.jsonl", rec)
            grid_rows = []
            for k in sorted(res.policy.stages):
                g1, g2, sign = boundary_grid(res.policy.stages[k])
                for i, a in enumerate(g1):
                    for j, b in enumerate(g2):
                        grid_rows.append([k, float(a), float(b), float(sign[i, j])])
            _write_csv(out_dir / "boundaries" / f"{stem}.csv", ["step", "x1", "x2", "sign"], grid_rows)
            (out_dir / "policies").mkdir(parents=True, exist_ok=True)
            np.savez_compressed(
                out_dir / "policies" / f"{stem}.npz",
                **{f"X_{st.step}": st.design for st in res.stages},
                **{f"y_{st.step}": st.y for st in res.stages},
                params=json.dumps({st.step: st.params for st in res.stages}),
            )
        s = out["summary"]
        rows_out.append([cfg.product, cfg.surrogate, cfg.design, cfg.reps, cfg.n_unique, cfg.eval_paths,
                         s["runs"], s["value_mean"], s["value_sd"], s["stderr_mean"], h])
    header = ["product", "surrogate", "design", "reps", "n_unique", "eval_paths", "runs",
              "value_mean", "value_sd", "stderr_mean", "config_hash"]
    _write_csv(out_dir / f"{name}-valuation.csv", header, rows_out)
    print(f"wrote {len(rows_out)} valuation rows to {out_dir / (name + '-valuation.csv')}")
    return 0


# ---------------------------------------------------------------- report

def read_records(paths) -> Dict[str, List[List[dict]]]:
    """Synthetic record files grouped by config hash."""
    groups: Dict[str, List[List[dict]]] = {}
    for p in paths:
        with open(p) as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        if not rows or rows[0].get("type") != "header":
            raise ConfigError(f"{p}: not a record file")
        groups.setdefault(rows[0]["config_hash"], []).append(rows)
    return groups


def _as_runs(records):
    from .benchmarks import RunResult, StepRecord

    runs = []
    for rows in records:
        steps = [StepRecord(r["n"], r["er"], r["ee"], r["bias"], r["ci"], r["x"], r["y"], r["refit"], r["wall"])
                 for r in rows if r["type"] == "step"]
        final = rows[-1]
        runs.append(RunResult(rows[0]["run"], steps, final.get("aborted", False), final.get("message", "")))
    return runs


def cmd_report(args) -> int:
    paths = sorted(set(itertools.chain.from_iterable(glob.glob(g) for g in args.records)))
    paths = [p for p in paths if p.endswith(".jsonl")]
    if not paths:
        print(f"error: no record files match {args.records}", file=sys.stderr)
        return 2
    groups = read_records(paths)
    groups = {h: g for h, g in groups.items() if all(r[0]["config"].get("function") for r in g)}
    if not groups:
        print("error: no synthetic records among the matches", file=sys.stderr)
        return 2
    out_dir = Path(args.out_dir or "report")
    table = []
    for h, recs in sorted(groups.items()):
        cfg = recs[0][0]["config"]
        runs = _as_runs(recs)
        ns, er = median_series(runs, "er")
        _, ee = median_series(runs, "ee")
        label = f"{cfg['function']}-{cfg['noise']}-{cfg['surrogate']}-{cfg['acquisition']}-{h[:10]}"
        _write_csv(out_dir / f"series-{label}.csv", ["n", "er_median", "ee_median"],
                   [[int(n), float(a), float(b)] for n, a, b in zip(ns, er, ee)])
        s = summarize(runs)
        table.append([cfg["function"], cfg["noise"], cfg["surrogate"], cfg["acquisition"], len(runs)]
                     + [s[f"{k}_{m}"] for k in SUMMARY_KEYS for m in ("mean", "sd")] + [h])
    header = ["function", "noise", "surrogate", "acquisition", "runs"] + \
        [f"{k}_{m}" for k in SUMMARY_KEYS for m in ("mean", "sd")] + ["config_hash"]
    _write_csv(out_dir / "report-summary.csv", header, table)
    print(f"{len(groups)} scheme(s), {len(paths)} record file(s); wrote {out_dir}")
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="contourgp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="YAML experiment description")
        sp.add_argument("--seed", type=int, default=None, help="override the master seed")
        sp.add_argument("--runs", type=int, default=None, help="override the number of macro-runs")
        sp.add_argument("--quick", action="store_true", help="CI profile: <=5 runs, half budget")
        sp.add_argument("--out-dir", default=None)

    s = sub.add_parser("run-synthetic", help="synthetic level-set benchmarks")
    common(s)
    s.set_defaults(func=cmd_run_synthetic)
    b = sub.add_parser("run-bermudan", help="Bermudan exercise-boundary learning and valuation")
    common(b)
    b.add_argument("--eval-paths", type=int, default=None, help="out-of-sample valuation paths")
    b.set_defaults(func=cmd_run_bermudan)
    r = sub.add_parser("report", help="median ER(n)/E(n) series from record files")
    r.add_argument("records", nargs="+", help="record file glob(s)")
    r.add_argument("--out-dir", default=None)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
