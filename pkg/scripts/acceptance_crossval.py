"""Five-fold crossval of the 2D and 3D U-Nets on easy phantoms, timed end to end."""

import argparse
import logging

from voxelbench.experiments import crossval_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--data", default="runs/phantoms", help="phantom directory (generated if missing)")
    p.add_argument("--out", default="runs/crossval")
    p.add_argument("--n", type=int, default=40, help="number of phantoms")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    s = crossval_experiment(
        args.data, args.out, n_cases=args.n, epochs=args.epochs, workers=args.workers, seed=args.seed
    )
    print(f"elapsed {s.elapsed_seconds / 60:.1f} min")
    for arch, v in s.mean_dsc.items():
        print(f"{arch} mean DSC {v:.4f}")
    for (organ, arch), v in s.organ_mean_dsc.items():
        print(f"  {organ:12s} {arch} {v:.4f} ({s.records_per_organ_arch[(organ, arch)]} cases)")
    print(f"results in {s.out_dir}")


if __name__ == "__main__":
    main()
