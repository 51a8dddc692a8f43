"""Probe accuracy as a function of the timepoint drop rate used for augmentation."""
import numpy as np
from _common import parser, write_csv

from fcpretrain import experiments as ex


def main():
    p = parser(__doc__, "reports/drop_rate.csv")
    p.add_argument("--rates", type=float, nargs="+", default=[0.1, 0.2, 0.4], help="drop rates to sweep")
    args = p.parse_args()
    cohorts = {s: ex.desk_cohort(s) for s in args.seeds}
    rows = []
    for rate in args.rates:
        accs = [ex.pretrained_probe(s, drop_rate=rate, scans=cohorts[s]).accuracy for s in args.seeds]
        print(f"drop {rate:.2f}: {np.mean(accs):.3f} +- {np.std(accs):.3f}", flush=True)
        rows.append([rate] + [f"{a:.4f}" for a in accs] + [f"{np.mean(accs):.4f}"])
    write_csv(args.out, ["drop_rate", *[f"seed{s}" for s in args.seeds], "mean"], rows)


if __name__ == "__main__":
    main()
