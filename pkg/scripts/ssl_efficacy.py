"""Frozen-embedding probe accuracy of the pretrained desk encoder vs the same encoder untrained."""
import time

import numpy as np
from _common import parser, write_csv

from fcpretrain import experiments as ex


def main():
    args = parser(__doc__, "reports/efficacy.csv").parse_args()
    rows, t0 = [], time.perf_counter()
    for seed in args.seeds:
        scans = ex.desk_cohort(seed)
        tr = ex.pretrained_probe(seed, scans=scans)
        rd = ex.random_probe(seed, scans=scans)
        rows.append([seed, f"{tr.accuracy:.4f}", f"{rd.accuracy:.4f}", f"{tr.best_loss:.4f}"])
        print(f"seed {seed}: pretrained {tr.accuracy:.3f}  random init {rd.accuracy:.3f}", flush=True)
    trained = np.mean([float(r[1]) for r in rows])
    random = np.mean([float(r[2]) for r in rows])
    print(f"mean: pretrained {trained:.3f}  random init {random:.3f}  gap {100 * (trained - random):+.1f} pts  "
          f"({time.perf_counter() - t0:.0f}s)")
    write_csv(args.out, ["seed", "pretrained_acc", "random_init_acc", "best_loss"], rows)


if __name__ == "__main__":
    main()
