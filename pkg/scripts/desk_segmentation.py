"""Part segmentation on synthetic shapes with two parts each (desk scale)."""
import argparse

from localnet.train import RunConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--out", default="runs/seg")
    args = ap.parse_args()

    cfg = RunConfig(task="segment", n_points=256, m=64, k=16, epochs=args.epochs, seed=args.seed,
                    synthetic_classes=("sphere", "cube", "cylinder", "plane", "torus"),
                    train_per_class=30, test_per_class=10, out=args.out)
    res = train(cfg, cfg.out, on_epoch=lambda r: print(
        f"epoch {r['epoch']:3d} loss {r['train_loss']:.4f} mIoU {r['test_metric']:.4f}"))
    voted = evaluate(res.params, res.model_config, res.splits.test, res.splits.parts_of_class,
                     votes=10, scale_range=cfg.scale_range)
    print(f"final mIoU {voted['miou']:.4f}, with 10 votes {voted['miou_vote']:.4f}")


if __name__ == "__main__":
    main()
