"""Training memory, activation footprint and application time of both ranks on identical VOIs."""

import argparse

from voxelbench.experiments import resource_experiment
from voxelbench.neuralseg import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-apply", type=int, default=4)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    s = resource_experiment(args.n_train, args.n_apply, train=TrainConfig(epochs=args.epochs), seed=args.seed)
    for rank in (2, 3):
        print(
            f"rank {rank}: training peak {s.training_peak_mib[rank]:.1f} MiB, "
            f"footprint {s.footprint_elements[rank]} elements, "
            f"application {s.application_seconds[rank]:.3f} s per VOI"
        )
    print(f"memory ratio 3D/2D {s.training_peak_mib[3] / s.training_peak_mib[2]:.1f}")
    print()
    print(s.performance_text)


if __name__ == "__main__":
    main()
