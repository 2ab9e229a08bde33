"""Ablation table on the synthetic overfit set, one row per module combination."""

import argparse
import csv

from omnifuse.decoder import FLAG_NAMES, AblationFlags
from omnifuse.experiments import overfit

# cumulative rows, each adding one module, then the pseudo-color input
ROWS = [
    ("none", "hsi"),
    ("cnn", "hsi"),
    ("cnn+mamba", "hsi"),
    ("cnn+mamba+cfe", "hsi"),
    ("cnn+mamba+cfe+sqs", "hsi"),
    ("cnn+mamba+cfe+sqs+ssd", "hsi"),
    ("all", "hsi"),
    ("all", "pseudo_color"),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--out", default="ablation.csv")
    args = ap.parse_args()
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["input", *FLAG_NAMES, "dsc", "iou", "hd"])
        for combo, mode in ROWS:
            flags = AblationFlags.parse(combo)
            r = overfit(args.seed, flags, args.steps, input_mode=mode).report
            writer.writerow([mode, *(int(getattr(flags, n)) for n in FLAG_NAMES), r.dsc, r.iou, r.hd])
            fh.flush()
            print(f"{mode:<13} {flags.label():<28} dsc {r.dsc:.4f} iou {r.iou:.4f} hd {r.hd:.2f}", flush=True)


if __name__ == "__main__":
    main()
