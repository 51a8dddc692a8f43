"""Probe accuracy for each combination of pretraining objectives."""
import numpy as np
from _common import parser, write_csv

from fcpretrain import experiments as ex


def main():
    args = parser(__doc__, "reports/ablation.csv").parse_args()
    cohorts = {s: ex.desk_cohort(s) for s in args.seeds}
    rows = []
    for row in ex.ABLATION_ROWS:
        accs = [ex.pretrained_probe(s, row, scans=cohorts[s]).accuracy for s in args.seeds]
        print(f"{ex.objectives_label(row):24s} {np.mean(accs):.3f} +- {np.std(accs):.3f}", flush=True)
        rows.append([int(b) for b in row] + [f"{a:.4f}" for a in accs] + [f"{np.mean(accs):.4f}"])
    write_csv(args.out, ["latent", "mrm_cls", "mrm_rec", *[f"seed{s}" for s in args.seeds], "mean"], rows)


if __name__ == "__main__":
    main()
