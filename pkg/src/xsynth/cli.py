"""Command-line entry points.

Every command is deterministic given its flags.  Commands that write files
also write ``<output>.manifest.json`` holding the resolved parameters and the
exact argument vector that reproduces the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from xsynth import __version__

log = logging.getLogger("xsynth")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def write_manifest(path, command: str, argv, resolved: dict) -> Path:
    path = Path(str(path) + ".manifest.json")
    path.write_text(_dump({"command": command, "version": __version__, "argv": list(argv), "resolved": resolved}))
    return path


def _steps_list(text):
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("step counts must be positive")
    return vals


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 bits, got {text}")
    return v


# ------------------------------------------------------------------ commands

def cmd_train(args, argv):
    from xsynth.io.checkpoint import Checkpoint, save_checkpoint
    from xsynth.io.dataset import load_training_data
    from xsynth.nets.archs import ArchConfig
    from xsynth.train import TrainConfig, train

    arch = ArchConfig.paper(args.arch) if args.preset == "paper" else ArchConfig.lite(args.arch)
    cfg = TrainConfig(steps=args.steps, lr=args.lr, batch=args.batch, crop=args.crop, schedule=args.schedule,
                      gamma=args.gamma, seed=args.seed, log_every=args.log_every)
    source, target = load_training_data(args.data)
    log.info("training %s (%s) on %d slice pairs", arch.arch.value, arch.preset.value, len(source))
    res = train(arch, source, target, cfg)
    meta = {"train": cfg.to_dict(), "data": args.data, "n_slices": int(len(source)),
            "final_loss": float(np.mean(res.losses[-min(len(res.losses), 100):])) if res.losses else None}
    save_checkpoint(Checkpoint(arch, res.model.params, cfg.schedule, meta), args.out)
    write_manifest(args.out, "train", argv, {"arch": arch.to_dict(), **meta})
    print(f"wrote {args.out} ({len(res.losses)} steps, final loss {meta['final_loss']})")


def cmd_translate(args, argv):
    from xsynth.io.checkpoint import load_checkpoint
    from xsynth.io.dataset import normalize_source
    from xsynth.io.nifti import read_nifti, write_nifti
    from xsynth.sampler import SamplerConfig
    from xsynth.schedule import parse_schedule
    from xsynth.volume import translate_volume

    ck = load_checkpoint(args.model)
    src = normalize_source(read_nifti(args.input), args.input_scaling)
    scfg = SamplerConfig(args.sampler, args.steps, (-1.0, 1.0), args.seed)
    out = translate_volume(ck.model(), src, scfg, parse_schedule(ck.schedule), work_size=args.work_size,
                           batch_size=args.batch)
    write_nifti(out, args.output)
    write_manifest(args.output, "translate", argv, {
        "model": str(args.model), "arch": ck.config.to_dict(), "schedule": ck.schedule,
        "input": str(args.input), "input_scaling": args.input_scaling, **out.provenance})
    print(f"wrote {args.output} ({src.n_slices} slices)")


def cmd_eval(args, argv):
    from xsynth.io.nifti import read_nifti
    from xsynth.metrics import FeatureExtractor
    from xsynth.volume import evaluate_volumes

    pred, target = read_nifti(args.pred), read_nifti(args.target)
    extractor = FeatureExtractor.parse(args.features)
    report = evaluate_volumes(pred, target, extractor).to_dict()
    report["features"] = extractor.describe()
    text = _dump(report)
    if args.report:
        Path(args.report).write_text(text)
        write_manifest(args.report, "eval", argv, {"pred": str(args.pred), "target": str(args.target),
                                                   "features": extractor.describe()})
    sys.stdout.write(text)


def schedule_table(desc: str, points: int):
    from xsynth.schedule import alpha_sigma, log_snr, parse_schedule

    if points < 2:
        raise ValueError("need at least 2 points")
    sch = parse_schedule(desc)
    t = np.linspace(0.0, 1.0, points)
    lam = log_snr(sch, t)
    a, s = alpha_sigma(lam)
    return t, lam, a, s


def cmd_inspect_schedule(args, argv):
    t, lam, a, s = schedule_table(args.schedule, args.points)
    lines = ["t\tlambda\talpha\tsigma"]
    lines += [f"{ti:.6f}\t{li:.7f}\t{ai:.7f}\t{si:.7f}" for ti, li, ai, si in zip(t, lam, a, s)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
        write_manifest(args.out, "inspect-schedule", argv, {"schedule": args.schedule, "points": args.points})
    else:
        sys.stdout.write(text)


def oracle_bench(dim: int, sampler: str, steps, samples: int, seed: int, schedule: str, oracle: str):
    """Gaussian-oracle convergence table for N(0, I_dim) data.

    DDIM rows report the fitted end-to-end scale of the (linear) map from the
    starting noise to the output and its closed form cos(pi / 2N)^N.  DDPM
    rows report the largest deviation of the sample mean and covariance from
    (0, I) in standard-error units.
    """
    from xsynth.sampler import SamplerConfig, _noise, gaussian_oracle_denoiser, sample
    from xsynth.schedule import parse_schedule

    sch = parse_schedule(schedule)
    model = gaussian_oracle_denoiser(np.zeros(dim), np.ones(dim), posterior_sample=(oracle == "sample"),
                                     schedule=sch, seed=seed)
    cond = np.zeros((samples, dim))
    rows = []
    for n in steps:
        out = sample(model, cond, SamplerConfig(sampler, n, None, seed), sch)
        row = {"steps": n}
        if sampler == "ddim":
            z1 = _noise(seed, range(samples), 0, (dim,), np.float64)
            scale = float(np.sum(out * z1) / np.sum(z1 * z1))
            row["scale"] = scale
            row["closed_form"] = float(np.cos(np.pi / (2 * n)) ** n)
            row["abs_error"] = abs(scale - row["closed_form"])
            row["linear_residual"] = float(np.max(np.abs(out - scale * z1)))
        else:
            mean = out.mean(axis=0)
            cov = np.cov(out, rowvar=False)
            se_mean = 1.0 / np.sqrt(samples)
            # standard error of a sample covariance entry of N(0, I): sqrt((1 + delta_ij) / n)
            se_cov = np.sqrt((1.0 + np.eye(dim)) / samples)
            row["max_mean_se"] = float(np.max(np.abs(mean)) / se_mean)
            row["max_cov_se"] = float(np.max(np.abs(cov - np.eye(dim)) / se_cov))
            row["mean_variance"] = float(np.mean(np.diag(cov)))
        rows.append(row)
    if sampler == "ddim":
        for prev, cur in zip(rows, rows[1:]):
            ratio = (1.0 - prev["scale"]) / (1.0 - cur["scale"])
            cur["gap_ratio"] = ratio
            cur["gap_ratio_expected"] = cur["steps"] / prev["steps"]
    return rows


def cmd_oracle_bench(args, argv):
    if args.oracle is None:
        args.oracle = "mean" if args.sampler == "ddim" else "sample"
    rows = oracle_bench(args.dim, args.sampler, args.steps, args.samples, args.seed, args.schedule, args.oracle)
    report = {"dim": args.dim, "sampler": args.sampler, "samples": args.samples, "seed": args.seed,
              "schedule": args.schedule, "oracle": args.oracle, "rows": rows}
    text = _dump(report)
    if args.report:
        Path(args.report).write_text(text)
        write_manifest(args.report, "oracle-bench", argv, {k: v for k, v in report.items() if k != "rows"})
    sys.stdout.write(text)


def cmd_gen_phantom(args, argv):
    from dataclasses import asdict

    from xsynth.io.dataset import write_phantom_dir
    from xsynth.io.phantom import PhantomSpec

    spec = PhantomSpec(count=args.count, size=args.size, seed=args.seed, noise_sigma=args.noise)
    src, tgt = write_phantom_dir(spec, args.out)
    write_manifest(Path(args.out) / "phantom", "gen-phantom", argv, asdict(spec))
    print(f"wrote {src} and {tgt}")


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xsynth", description="Diffusion-based MRA to CTA translation toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a denoiser or the direct baseline")
    t.add_argument("--arch", choices=["unet", "adm", "uvit", "dit"], required=True)
    t.add_argument("--preset", choices=["paper", "lite"], default="lite")
    t.add_argument("--data", required=True, help="data directory or phantom:<spec>")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--batch", type=int, default=16)
    t.add_argument("--crop", type=int, default=32)
    t.add_argument("--schedule", default="cosine")
    t.add_argument("--gamma", type=float, default=5.0)
    t.add_argument("--seed", type=_u64, default=0)
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="translate a source volume slice by slice")
    tr.add_argument("--model", required=True)
    tr.add_argument("--input", required=True)
    tr.add_argument("--output", required=True)
    tr.add_argument("--sampler", choices=["ddpm", "ddim"], default="ddpm")
    tr.add_argument("--steps", type=int, default=32)
    tr.add_argument("--work-size", type=int, default=256)
    tr.add_argument("--batch", type=int, default=16)
    tr.add_argument("--input-scaling", choices=["auto", "minmax", "none"], default="auto")
    tr.add_argument("--seed", type=_u64, default=0)
    tr.set_defaults(func=cmd_translate)

    e = sub.add_parser("eval", help="score a predicted volume against a target")
    e.add_argument("--pred", required=True)
    e.add_argument("--target", required=True)
    e.add_argument("--features", default="down8")
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("inspect-schedule", help="tabulate t, lambda, alpha, sigma")
    s.add_argument("--schedule", default="cosine")
    s.add_argument("--points", type=int, default=1001)
    s.add_argument("--out")
    s.set_defaults(func=cmd_inspect_schedule)

    o = sub.add_parser("oracle-bench", help="sampler convergence on Gaussian data with an exact denoiser")
    o.add_argument("--dim", type=int, default=16)
    o.add_argument("--sampler", choices=["ddpm", "ddim"], default="ddim")
    o.add_argument("--steps", type=_steps_list, default=[4, 16, 64, 256])
    o.add_argument("--samples", type=int, default=4096)
    o.add_argument("--seed", type=_u64, default=0)
    o.add_argument("--schedule", default="cosine:lmin=-60,lmax=60",
                   help="wide clamp so endpoint truncation stays far below the reported precision")
    o.add_argument("--oracle", choices=["sample", "mean"], default=None,
                   help="x_hat drawn from p(x|z_t) or its mean (default: mean for ddim, sample for ddpm)")
    o.add_argument("--report")
    o.set_defaults(func=cmd_oracle_bench)

    g = sub.add_parser("gen-phantom", help="write paired phantom volumes")
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=_u64, default=0)
    g.add_argument("--noise", type=float, default=0.02)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_phantom)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        args.func(args, argv)
    except Exception as e:  # single-line diagnostic, nonzero exit
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"xsynth {args.command}: error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
