"""Center-source / g1 ablation at desk scale: FPS without g1, FPS with g1, CPL.

Prints mean test accuracy per mode over the given seeds.

    python scripts/ablation_modes.py --seeds 0 1 2 3 4
"""
import argparse

import numpy as np

from localnet.train import RunConfig, train

MODES = {"fps_no_g1": (False, False), "fps_g1": (False, True), "cpl": (True, True)}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--epochs", type=int, default=60)
    args = ap.parse_args()

    for name, (use_cpl, use_g1) in MODES.items():
        accs = []
        for seed in args.seeds:
            cfg = RunConfig(n_points=256, m=32, k=16, epochs=args.epochs, seed=seed,
                            use_cpl=use_cpl, use_g1=use_g1)
            accs.append(train(cfg).rows[-1]["test_metric"])
        print(f"{name:10s} mean {np.mean(accs):.4f}  per seed {np.round(accs, 3).tolist()}")


if __name__ == "__main__":
    main()
