"""Pick the synthetic noise level for the dense-depth ablation.

Trains the n=3 micro-dense baseline at a fixed parameter budget for each
sigma and prints test accuracy next to the nearest-template oracle. The
target band for the baseline is 60-90% test accuracy.

    python scripts/tune_sigma.py --sigmas 1,2,3,4 --iterations 400
"""

import argparse
import time

from microdense.ablation import AblationSpec, build_ablation_network, match_budget
from microdense.data import SyntheticSpec, class_templates, make_synthetic, nearest_template_accuracy
from microdense.trainer import TrainConfig, evaluate, train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--sigmas", default="1,2,3,4")
    ap.add_argument("--budget", type=int, default=50_000)
    ap.add_argument("--iterations", type=int, default=400)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--lr", type=float, default=0.1)
    ap.add_argument("--per-class", type=int, default=50)
    ap.add_argument("--n", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    for sigma in (float(s) for s in args.sigmas.split(",")):
        syn = SyntheticSpec(sigma=sigma, train_per_class=args.per_class, test_per_class=args.per_class)
        train_data, test_data = make_synthetic(syn)
        spec = match_budget(AblationSpec(kind="micro-dense", n=args.n, resolution=syn.image_size), args.budget)
        net = build_ablation_network(spec, seed=args.seed, dtype="float32")
        cfg = TrainConfig(lr_max=args.lr, iterations=args.iterations, batch_size=args.batch_size,
                          seed=args.seed, record_wall_time=False)
        t = time.time()
        train(net, train_data, cfg)
        acc, loss = evaluate(net, test_data)
        train_acc, _ = evaluate(net, train_data)
        oracle = nearest_template_accuracy(test_data, class_templates(syn))
        print(f"sigma={sigma:<5g} test_acc={acc:.3f} test_loss={loss:.3f} train_acc={train_acc:.3f} "
              f"oracle={oracle:.3f} ({time.time() - t:.0f}s)", flush=True)


if __name__ == "__main__":
    main()
