"""Regression-forest organ box localization on held-out phantoms."""

import argparse

import numpy as np

from voxelbench.experiments import localization_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n-train", type=int, default=32)
    p.add_argument("--n-test", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    s = localization_experiment(args.n_train, args.n_test, seed=args.seed)
    for organ, errs in s.wall_errors.items():
        print(f"{organ:12s} median wall error {np.median(errs):5.1f} mm, mean IoU {s.ious[organ].mean():.2f}")
    print(f"pooled median wall error {s.pooled_median_error:.1f} mm, mean IoU {s.pooled_mean_iou:.2f}")
    print(f"ordering violations {s.ordering_violations}")


if __name__ == "__main__":
    main()
