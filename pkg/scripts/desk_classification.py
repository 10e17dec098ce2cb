"""Desk-scale classification on the 4-class synthetic set, one run per seed.

    python scripts/desk_classification.py --seeds 0 1 2 --out runs/desk
"""
import argparse
import time

from localnet.train import RunConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--votes", type=int, default=10)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()

    print("seed  acc    acc_vote  m'_mean  minutes")
    for seed in args.seeds:
        cfg = RunConfig(n_points=256, m=32, k=16, epochs=args.epochs, seed=seed,
                        votes=args.votes, out=f"{args.out}/seed{seed}")
        start = time.perf_counter()
        res = train(cfg, cfg.out)
        minutes = (time.perf_counter() - start) / 60
        voted = evaluate(res.params, res.model_config, res.splits.test, votes=args.votes,
                         scale_range=cfg.scale_range)
        last = res.rows[-1] if res.rows else {"test_metric": float("nan"), "mprime_mean": float("nan")}
        print(f"{seed:<5} {last['test_metric']:.3f}  {voted.get('accuracy_vote', float('nan')):.3f}"
              f"     {last['mprime_mean']:<8.2f} {minutes:.1f}")


if __name__ == "__main__":
    main()
