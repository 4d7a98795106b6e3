"""Learn and value the Bermudan policies of the desk checks through the CLI.

    python scripts/reproduce_bermudan.py --out-dir results/bermudan [--quick] [--eval-paths M]
"""
import argparse
from pathlib import Path

from contourgp.cli import main

CONFIGS = ["put_gp_tmse", "put_adaptivity_r3", "maxcall_gp_icu"]


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="results/bermudan")
    ap.add_argument("--quick", action="store_true")
    ap.add_argument("--eval-paths", type=int, default=None)
    ap.add_argument("--only", nargs="*", choices=CONFIGS)
    a = ap.parse_args()
    root = Path(__file__).resolve().parents[1] / "configs"
    for name in a.only or CONFIGS:
        argv = ["run-bermudan", "--config", str(root / f"{name}.yaml"), "--out-dir", a.out_dir]
        if a.quick:
            argv.append("--quick")
        if a.eval_paths:
            argv += ["--eval-paths", str(a.eval_paths)]
        status = main(argv)
        if status:
            raise SystemExit(status)
