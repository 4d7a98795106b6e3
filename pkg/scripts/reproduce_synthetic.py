"""Run the synthetic desk checks through the CLI and build the report.

    python scripts/reproduce_synthetic.py --out-dir results/synthetic [--quick]
"""
import argparse
import glob
from pathlib import Path

from contourgp.cli import main

CONFIGS = ["quadratic_tmse", "branin_t_large", "gsn_mix_ordering", "hartman6_substitute"]


def run(out_dir: Path, quick: bool, only=None):
    root = Path(__file__).resolve().parents[1] / "configs"
    for name in only or CONFIGS:
        argv = ["run-synthetic", "--config", str(root / f"{name}.yaml"), "--out-dir", str(out_dir)]
        if quick:
            argv.append("--quick")
        status = main(argv)
        if status:
            raise SystemExit(status)
    return main(["report", str(out_dir / "records" / "*.jsonl"), "--out-dir", str(out_dir / "report")])


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="results/synthetic")
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--only", nargs="*", choices=CONFIGS)
    a = ap.parse_args()
    raise SystemExit(run(Path(a.out_dir), a.quick, a.only))
