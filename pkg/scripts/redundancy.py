"""Spectral redundancy of encoder vs enhanced spectral tokens after overfitting, per seed."""

import argparse

from omnifuse.experiments import overfit, redundancy_pre_post


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=list(range(10)))
    ap.add_argument("--steps", type=int, default=200)
    args = ap.parse_args()
    wins = 0
    for seed in args.seeds:
        res = overfit(seed, steps=args.steps)
        pre, post = redundancy_pre_post(res.result.model, res.scenes)
        wins += post < pre
        print(f"seed {seed}: dsc {res.report.dsc:.4f} pre {pre:.6f} post {post:.6f} {'lower' if post < pre else 'not lower'}", flush=True)
    print(f"post < pre in {wins}/{len(args.seeds)} seeds")


if __name__ == "__main__":
    main()
