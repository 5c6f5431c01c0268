"""Run the desk-scale phantom experiment and write its results as JSON.

    python scripts/toy_experiment.py --out results/toy.json
    python scripts/toy_experiment.py --diffusion-steps 200 --baseline-steps 100 --pairs 100   # quick look
"""

import argparse
import json
import logging
from pathlib import Path

from xsynth.experiment import ToyExperimentConfig, run_toy_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    d = ToyExperimentConfig()
    p.add_argument("--pairs", type=int, default=d.n_pairs)
    p.add_argument("--size", type=int, default=d.size)
    p.add_argument("--arch", default=d.diffusion_arch, choices=["adm", "uvit", "dit"])
    p.add_argument("--diffusion-steps", type=int, default=d.diffusion_steps)
    p.add_argument("--baseline-steps", type=int, default=d.baseline_steps)
    p.add_argument("--sampler", default=d.sampler, choices=["ddpm", "ddim"])
    p.add_argument("--sampler-steps", type=int, default=d.sampler_steps)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--out", type=Path, default=Path("results/toy.json"))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    cfg = ToyExperimentConfig(n_pairs=args.pairs, size=args.size, diffusion_arch=args.arch,
                              diffusion_steps=args.diffusion_steps, baseline_steps=args.baseline_steps,
                              sampler=args.sampler, sampler_steps=args.sampler_steps, seed=args.seed)
    res = run_toy_experiment(cfg)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(res, indent=2))
    diff, base = res["diffusion"]["report"], res["baseline"]["report"]
    print(f"constant-mean MSE      {res['constant_mean']['mse']:10.1f}")
    print(f"diffusion MSE          {diff['mse']:10.1f}  ({100 * res['mse_improvement_over_constant']:.1f}% better)")
    print(f"direct baseline MSE    {base['mse']:10.1f}")
    print(f"FD source vs target    {res['source_vs_target_fd']:10.3f}")
    print(f"FD generated vs target {diff['fd']:10.3f}")
    print(f"total {res['seconds'] / 60:.1f} min -> {args.out}")


if __name__ == "__main__":
    main()
