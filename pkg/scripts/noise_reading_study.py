"""Compare the two readings of the printed t-noise parameter (sd vs scale)
and the two noise-range choices (R_f = 1 vs empirical range) on Branin-Hoo.

    python scripts/noise_reading_study.py --runs 6
"""
import argparse

from contourgp.benchmarks import ExperimentConfig, macroreplicate

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--runs", type=int, default=6)
    ap.add_argument("--noise", default="t_small")
    a = ap.parse_args()
    cases = {
        "sd reading, R_f=1": dict(t_param="sd", range_f=1.0),
        "scale reading, R_f=1": dict(t_param="scale", range_f=1.0),
        "sd reading, empirical R_f": dict(t_param="sd", range_f=None),
    }
    for label, kw in cases.items():
        cfg = ExperimentConfig(function="braninhoo2d", noise=a.noise, **kw)
        s = macroreplicate(cfg, runs=a.runs)["summary"]
        print(f"{label:28s} ER {s['er_mean']:.4f} (sd {s['er_sd']:.4f})  E {s['ee_mean']:.4f}")
