"""Overfit protocol: 16 synthetic scenes, 200 steps, full model vs all modules off."""

import argparse
import time

from omnifuse.decoder import AblationFlags
from omnifuse.experiments import OVERFIT_STEPS, overfit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=OVERFIT_STEPS)
    args = ap.parse_args()
    for flags in (AblationFlags(), AblationFlags.all_off()):
        t0 = time.perf_counter()
        res = overfit(args.seed, flags, args.steps)
        r = res.report
        print(f"{flags.label():<28} dsc {r.dsc:.4f} iou {r.iou:.4f} hd {r.hd:.2f}  ({time.perf_counter() - t0:.0f}s)")


if __name__ == "__main__":
    main()
