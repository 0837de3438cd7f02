"""Complete a degraded mug and compare grasp quality before and after.

    python demos/mug_completion.py --seeds 0 1 2
"""

import argparse

from glassgrasp.completion import load_default_decoder
from glassgrasp.pipeline import mug_benchmark_case


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    args = ap.parse_args()
    decoder = load_default_decoder("mug")
    print(f"{'seed':>4} {'chamfer mm':>17} {'max score':>15} {'top-20 valid':>15} {'time s':>7}")
    for seed in args.seeds:
        c = mug_benchmark_case(seed, decoder)
        print(f"{seed:>4} {c.chamfer_partial * 1e3:>7.2f} -> {c.chamfer_completed * 1e3:<6.2f}"
              f" {c.stats_incomplete['max']:>6.3f} -> {c.stats_completed['max']:<5.3f}"
              f" {c.validity_incomplete:>6.0%} -> {c.validity_completed:<5.0%}"
              f" {c.seconds_completion:>7.1f}")


if __name__ == "__main__":
    main()
