"""Command line entry point: ``rddpm <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid usage or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import io as rio
from .degrade import DegradationSpec, degrade, make_textures
from .denoiser import ConstantZero, OracleGaussian, TinyCNN, TrainConfig, train
from .metrics import evaluate
from .regional import regional_despeckle
from .sampler import SamplerConfig, sample
from .schedule import build_linear_schedule
from .tinycnn import Architecture

log = logging.getLogger("rddpm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v]


def _roi(text: str) -> tuple[int, int, int, int]:
    parts = [int(v) for v in text.split(",")]
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("roi must be row,col,height,width")
    return tuple(parts)


def _add_schedule_flags(p):
    p.add_argument("--T", type=int, default=None, help="number of diffusion steps (default 1000)")
    p.add_argument("--beta-start", type=float, default=None, help="first beta (default 0.0001)")
    p.add_argument("--beta-end", type=float, default=None, help="last beta (default 0.02)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rddpm", description="Regional diffusion despeckling toolkit.")
    parser.add_argument("--config", help="YAML run config; flags override its values")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-dataset", help="synthesize clean/degraded image pairs")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=100, help="clean textures to synthesize")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--clean", nargs="*", default=None, help="use these clean images instead of textures")
    p.add_argument("--kind", choices=["gaussian_additive", "gamma_speckle"], default="gaussian_additive")
    p.add_argument("--sigmas", type=_floats, default=[0.2], help="comma-separated noise levels")
    p.add_argument("--looks", type=int, default=1)
    p.add_argument("--format", choices=["f32", "png"], default="f32")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("train", help="train the tiny CNN noise estimator")
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", required=True, help="weight file to write")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--log-every", type=int, default=500)
    p.add_argument("--overwrite", action="store_true")
    _add_schedule_flags(p)

    p = sub.add_parser("despeckle", help="restore an image of any size")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", default=None, help="weight file; omit to use --model")
    p.add_argument("--model", choices=["tiny_cnn", "oracle_gaussian", "constant_zero"], default="tiny_cnn")
    p.add_argument("--window", type=int, default=None, help="window side m (default 64)")
    p.add_argument("--stride", type=int, default=None, help="window stride n (default 16)")
    p.add_argument("--workers", type=int, default=None, help="parallel window evaluators")
    p.add_argument("--steps", type=int, default=None, help="inference steps (default T)")
    p.add_argument("--sampler", choices=["ddpm", "ddim"], default=None)
    p.add_argument("--eta", type=float, default=None)
    p.add_argument("--variance", choices=["beta", "posterior"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--reference", default=None, help="clean image; prints a metric report")
    p.add_argument("--overwrite", action="store_true")
    _add_schedule_flags(p)

    p = sub.add_parser("eval", help="score a restored image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--reference", default=None, help="ground truth for PSNR/SSIM/EPI")
    p.add_argument("--roi", type=_roi, default=None, help="row,col,height,width for ENL")
    p.add_argument("--window", type=int, default=None, help="grid side for the seam ratio")
    p.add_argument("--csv", default=None, help="append one CSV row to this file")

    p = sub.add_parser("schedule-dump", help="print the noise schedule as CSV")
    _add_schedule_flags(p)
    p.add_argument("--out", default=None, help="write here instead of stdout")
    p.add_argument("--overwrite", action="store_true")

    p = sub.add_parser("oracle-check", help="Monte-Carlo check of the sampler against a Gaussian prior")
    p.add_argument("--chains", type=int, default=1000)
    p.add_argument("--t", type=int, default=None, help="number of diffusion steps T")
    p.add_argument("--mu0", type=float, default=0.3)
    p.add_argument("--s0-sq", type=float, default=0.04)
    p.add_argument("--sampler", choices=["ddpm", "ddim"], default="ddpm")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    return parser


def _config(args) -> rio.RunConfig:
    g = vars(args)
    overrides = {
        "seed": g.get("seed"),
        "schedule.T": g.get("T") if args.command != "oracle-check" else g.get("t"),
        "schedule.beta_start": g.get("beta_start"),
        "schedule.beta_end": g.get("beta_end"),
        "sampler.kind": g.get("sampler"),
        "sampler.steps": g.get("steps"),
        "sampler.eta": g.get("eta"),
        "sampler.variance": g.get("variance"),
        "regional.window": g.get("window"),
        "regional.stride": g.get("stride"),
        "regional.workers": g.get("workers"),
        "training.learning_rate": g.get("lr"),
        "training.batch_size": g.get("batch_size"),
        "training.iterations": g.get("iterations"),
        "manifest": g.get("manifest"),
    }
    return rio.load_config(args.config, overrides)


def _schedule(cfg: rio.RunConfig):
    sc = cfg.schedule
    return build_linear_schedule(sc.T, sc.beta_start, sc.beta_end)


def _sampler_config(cfg: rio.RunConfig) -> SamplerConfig:
    sc = cfg.sampler
    return SamplerConfig(kind=sc.kind, num_inference_steps=sc.steps, eta=sc.eta,
                         variance_choice=sc.variance, seed=cfg.seed)


def cmd_make_dataset(args, cfg) -> int:
    out_dir = Path(args.out_dir)
    rng = np.random.default_rng(cfg.seed)
    if args.clean:
        cleans = [(Path(c).stem, rio.load_image(c)) for c in args.clean]
    else:
        tex = make_textures(args.count, args.size, seed=cfg.seed)
        cleans = [(f"tex{i:05d}", t) for i, t in enumerate(tex)]
    ext = "." + args.format
    entries = []
    for name, clean in cleans:
        clean_rel = f"{name}_clean{ext}"
        rio.save_image(clean, out_dir / clean_rel, args.overwrite)
        for sigma in args.sigmas:
            spec = DegradationSpec(args.kind, sigma=sigma, looks=args.looks, seed=cfg.seed)
            noisy = degrade(clean, spec, rng)
            tag = f"s{sigma:g}" if args.kind == "gaussian_additive" else f"L{args.looks}"
            noisy_rel = f"{name}_{tag}{ext}"
            rio.save_image(noisy, out_dir / noisy_rel, args.overwrite)
            entries.append({"clean": clean_rel, "degraded": noisy_rel,
                            "spec": {"kind": spec.kind, "sigma": spec.sigma, "looks": spec.looks}})
    rio.write_manifest(entries, out_dir / "manifest.json", args.overwrite)
    print(f"wrote {len(entries)} pairs to {out_dir / 'manifest.json'}")
    return 0


def cmd_train(args, cfg) -> int:
    if cfg.manifest is None:
        raise UsageError("train needs --manifest (or manifest in the config)")
    clean, noisy = rio.load_pairs(cfg.manifest)
    s = _schedule(cfg)
    tc = cfg.training
    tcfg = TrainConfig(learning_rate=tc.learning_rate, batch_size=tc.batch_size,
                       num_iterations=tc.iterations, seed=cfg.seed)
    model = TinyCNN(Architecture(channels=clean.shape[-1]), seed=cfg.seed)
    t0 = time.time()
    losses = train(model, clean.astype(np.float32), noisy.astype(np.float32), s, tcfg,
                   log_every=args.log_every, logger=log)
    rio.save_weights(model, args.out, args.overwrite)
    tail = losses[-min(len(losses), 100):]
    print(f"trained {len(losses)} iterations in {time.time() - t0:.1f}s, final loss {np.mean(tail):.5f}")
    return 0


def _model_for(args):
    if args.weights:
        return rio.load_weights(args.weights)
    if args.model == "oracle_gaussian":
        return OracleGaussian()
    if args.model == "constant_zero":
        return ConstantZero()
    raise UsageError("despeckle with tiny_cnn needs --weights")


def cmd_despeckle(args, cfg) -> int:
    noisy = rio.load_image(args.input)
    out_path = Path(args.out)
    if out_path.exists() and not args.overwrite:
        raise UsageError(f"{out_path} exists; pass --overwrite")
    model = _model_for(args)
    s = _schedule(cfg)
    scfg = _sampler_config(cfg)
    total = scfg.steps(s)
    every = max(total // 20, 1)

    def progress(i, t):
        if (i + 1) % every == 0 or i + 1 == total:
            print(f"step {i + 1}/{total} t={t}", flush=True)

    rg = cfg.regional
    out = regional_despeckle(noisy, model, s, scfg, m=rg.window, n=rg.stride, workers=rg.workers,
                             batch_size=rg.batch_size, callback=progress)
    rio.save_image(out, out_path, args.overwrite)
    if args.reference:
        report = evaluate(out, rio.load_image(args.reference), m=rg.window)
        sys.stdout.write(report.to_text())
    return 0


def cmd_eval(args, cfg) -> int:
    img = rio.load_image(args.input)
    ref = rio.load_image(args.reference) if args.reference else None
    report = evaluate(img, ref, roi=args.roi, m=args.window)
    sys.stdout.write(report.to_text())
    if args.csv:
        path = Path(args.csv)
        new = not path.exists()
        with open(path, "a", newline="") as f:
            w = csv.writer(f)
            if new:
                w.writerow(["image"] + list(report.FIELDS) + ["flags"])
            w.writerow(report.csv_row(args.input))
    return 0


def cmd_schedule_dump(args, cfg) -> int:
    text = _schedule(cfg).to_csv()
    if args.out:
        path = Path(args.out)
        if path.exists() and not args.overwrite:
            raise UsageError(f"{path} exists; pass --overwrite")
        path.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def oracle_check(chains: int, s, scfg: SamplerConfig, mu0: float = 0.3, s0_sq: float = 0.04) -> dict:
    """Sample ``chains`` independent scalars with the Gaussian oracle and compare to its prior."""
    out = sample(np.zeros((1, chains, 1)), OracleGaussian(mu0, s0_sq), s, scfg).ravel()
    mean, var = float(out.mean()), float(out.var(ddof=1))
    se = math.sqrt(s0_sq / chains)
    return {"mean": mean, "variance": var, "mean_error_se": abs(mean - mu0) / se,
            "variance_rel_error": abs(var - s0_sq) / s0_sq,
            "passed": abs(mean - mu0) < 3 * se}


def cmd_oracle_check(args, cfg) -> int:
    s = _schedule(cfg)
    scfg = SamplerConfig(kind=args.sampler, num_inference_steps=args.steps, seed=cfg.seed)
    r = oracle_check(args.chains, s, scfg, args.mu0, args.s0_sq)
    print(f"chains: {args.chains}  T: {s.T}  sampler: {args.sampler}")
    print(f"prior mean {args.mu0:g}, variance {args.s0_sq:g}")
    print(f"sample mean {r['mean']:.6f} ({r['mean_error_se']:.2f} standard errors)")
    print(f"sample variance {r['variance']:.6f} ({100 * r['variance_rel_error']:.1f}% off)")
    print("PASS" if r["passed"] else "FAIL")
    return 0 if r["passed"] else 2


COMMANDS = {
    "make-dataset": cmd_make_dataset,
    "train": cmd_train,
    "despeckle": cmd_despeckle,
    "eval": cmd_eval,
    "schedule-dump": cmd_schedule_dump,
    "oracle-check": cmd_oracle_check,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ValueError, FileNotFoundError, FileExistsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
