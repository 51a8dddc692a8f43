"""Zero- and few-shot ensembles of per-disease SVMs evaluated on a held-out synthetic disease."""
import numpy as np
from _common import parser, write_csv

from fcpretrain import experiments as ex


def main():
    p = parser(__doc__, "reports/transfer.csv")
    p.add_argument("--support-frac", type=float, default=0.2, help="few-shot support fraction")
    args = p.parse_args()
    rows = []
    for seed in args.seeds:
        r = ex.transfer_experiment(seed, support_frac=args.support_frac)
        print(f"seed {seed}: zero-shot {r.zero_shot:.3f}  few-shot {r.few_shot:.3f} "
              f"(zero-shot on same query {r.zero_shot_on_query:.3f})", flush=True)
        rows.append([seed, f"{r.zero_shot:.4f}", f"{r.zero_shot_on_query:.4f}", f"{r.few_shot:.4f}",
                     " ".join(f"{w:.3f}" for w in r.weights)])
    print(f"mean zero-shot {np.mean([float(r[1]) for r in rows]):.3f}")
    write_csv(args.out, ["seed", "zero_shot_acc", "zero_shot_query_acc", "few_shot_acc", "weights"], rows)


if __name__ == "__main__":
    main()
