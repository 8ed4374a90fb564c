"""Train the three detectors on a heterogeneous scenario and report AP plus probe accuracy.

Example: python3 scripts/run_hetero_experiment.py --scenes 128 --epochs 20 --out runs/hetero1.mpck
"""

import argparse
import logging
import time

from mpda.evaluation import domain_probe, evaluate
from mpda.training import TrainingConfig, train


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--scenario", default="hetero1")
    p.add_argument("--scenes", type=int, default=128, help="training scenes")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-seed", type=int, default=123)
    p.add_argument("--eval-scenes", type=int, default=64)
    p.add_argument("--probe-scenes", type=int, default=200)
    p.add_argument("--out", help="optional checkpoint path")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    t0 = time.perf_counter()
    cfg = TrainingConfig(
        scenario=args.scenario, train_scenes=args.scenes, epochs=args.epochs, baseline_epochs=args.epochs, seed=args.seed
    )
    system, report = train(cfg, progress=True)
    if args.out:
        system.save(args.out)
    print("adversarial classifier accuracy per epoch:", [round(a, 3) for a in report.epoch_domain_acc])
    print(evaluate(system, args.scenario, args.eval_seed, n_scenes=args.eval_scenes).to_text())
    probe = domain_probe(system, args.scenario, 5, n_scenes=args.probe_scenes)
    print(f"probe accuracy: adapted {probe.adapted_acc:.3f}, unadapted {probe.unadapted_acc:.3f}")
    print(f"total {time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
