"""Command-line interface.

Exit codes: 0 success, 1 validation error (bad flags, specs or input files),
2 runtime failure (including grids with failed cells).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import cnn, fixtures
from .attack import EPSILONS, INITS, MODES, STEP_SIZE, AttackConfig, pgd_attack, save_result, transfer_eval
from .blur import DEFAULT_NOISE_SIGMA, BlurModel, make_blurry
from .experiment import (
    SWEEP_SIZES,
    SpecError,
    compose_localized_target,
    derive_seed,
    format_epsilon,
    kernel_size_sweep,
    load_spec,
    parse_epsilon,
    read_report,
    run_grid,
)
from .imaging import evaluate, load_kernel, load_raw, save_raw, save_viewable
from .reconstructors import (
    DEFAULT_CRAFT_STEPS,
    DEFAULT_EVAL_STEPS,
    DEFAULT_WIENER_LAMBDA,
    Reconstructor,
    UnrolledConfig,
    WienerConfig,
    reconstruct,
)

log = logging.getLogger("advdeblur")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _epsilon(text):
    try:
        return parse_epsilon(text)
    except SpecError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _rect(text):
    try:
        rect = tuple(int(v) for v in text.split(","))
    except ValueError:
        rect = ()
    if len(rect) != 4:
        raise argparse.ArgumentTypeError("expected x,y,w,h")
    return rect


def _sizes(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError("expected comma-separated integers") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed (master seed for grids)")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output file or directory")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker processes for grids")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="advdeblur", description="Adversarial attacks on image deblurring.", parents=[common])
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("blur", parents=[common], help="blur an image with a kernel and add noise")
    s.add_argument("image", type=Path)
    s.add_argument("kernel", type=Path)
    s.add_argument("--sigma", type=float, default=DEFAULT_NOISE_SIGMA)

    s = sub.add_parser("train-cnn", parents=[common], help="train the CNN on a blurry/ + sharp/ directory")
    s.add_argument("dataset", type=Path)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--lr", type=float, default=3e-3)
    s.add_argument("--batch-size", type=int, default=4)
    s.add_argument("--hidden", type=int, default=cnn.DEFAULT_HIDDEN)
    s.add_argument("--layers", type=int, default=cnn.DEFAULT_LAYERS)
    s.add_argument("--train-noise", type=float, default=0.0, help="noise sigma added to blurry inputs")

    s = sub.add_parser("attack", parents=[common], help="attack a single image/kernel/reconstructor cell")
    s.add_argument("--image", type=Path, required=True, help="sharp source image")
    s.add_argument("--kernel", type=Path, required=True, help="blur kernel (also used by non-blind reconstructors)")
    s.add_argument("--blurry", type=Path, help="observed image; default blurs --image")
    s.add_argument("--recon", choices=("wiener", "unrolled", "cnn"), default="wiener")
    s.add_argument("--weights", type=Path, help="CNN weights file")
    s.add_argument("--mode", choices=MODES, default="untargeted")
    s.add_argument("--epsilon", type=_epsilon, default=EPSILONS[0], help="e.g. 4/255 or 0.0157")
    s.add_argument("--target", type=Path, help="target image for --mode targeted")
    s.add_argument("--target-patch", type=Path, help="localized target patch")
    s.add_argument("--target-rect", type=_rect, help="x,y,w,h of the localized patch")
    s.add_argument("--steps", type=int, help="PGD steps (default 250 untargeted, 500 targeted)")
    s.add_argument("--step-size", type=float, default=STEP_SIZE)
    s.add_argument("--init", choices=INITS)
    s.add_argument("--clamp-input", action="store_true", help="clamp y + delta to [0, 1] after projection")
    s.add_argument("--sigma", type=float, default=DEFAULT_NOISE_SIGMA)
    s.add_argument("--lam", type=float, default=DEFAULT_WIENER_LAMBDA, help="Wiener regularization")
    s.add_argument("--unrolled-steps", type=int, default=DEFAULT_CRAFT_STEPS)
    s.add_argument("--eval-steps", type=int, default=DEFAULT_EVAL_STEPS)

    s = sub.add_parser("grid", parents=[common], help="run a spec file's full grid")
    s.add_argument("spec", type=Path)

    s = sub.add_parser("sweep-kernel", parents=[common], help="localized attacks across kernel sizes")
    s.add_argument("spec", type=Path)
    s.add_argument("--sizes", type=_sizes, default=list(SWEEP_SIZES))

    s = sub.add_parser("metrics", parents=[common], help="PSNR and NCC of an image against a reference")
    s.add_argument("image", type=Path)
    s.add_argument("reference", type=Path)

    s = sub.add_parser("make-fixtures", parents=[common], help="write the shipped fixture set")
    s.add_argument("directory", type=Path)
    s.add_argument("--no-train", action="store_true", help="skip CNN training")
    s.add_argument("--epochs", type=int, default=30)
    return p


def _opt(args, name, default=None):
    return getattr(args, name, default)


def cmd_blur(args) -> int:
    x = load_raw(args.image)
    y = make_blurry(x, BlurModel(load_kernel(args.kernel), args.sigma, _opt(args, "seed", 0)))
    out = _opt(args, "out") or args.image.with_name(args.image.stem + "_blurry.dbim")
    save_raw(y, out)
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    pairs = fixtures.load_training_dir(args.dataset)
    seed = _opt(args, "seed", 0)
    cfg = cnn.init_config(pairs[0][0].shape[2], args.hidden, args.layers, seed=seed)
    cfg, trace = cnn.train(cfg, pairs, epochs=args.epochs, lr=args.lr, seed=seed,
                           batch_size=args.batch_size, noise_sigma=args.train_noise)
    out = _opt(args, "out") or Path("cnn.dbnn")
    cnn.save_weights(cfg, out)
    print(f"loss {trace[0]:.6g} -> {trace[-1]:.6g}; weights written to {out}")
    return EXIT_OK


def cmd_attack(args) -> int:
    if args.mode == "targeted" and args.target is None and args.target_patch is None:
        raise UsageError("--mode targeted requires --target (or --target-patch with --target-rect)")
    if args.target_patch is not None and args.target_rect is None:
        raise UsageError("--target-patch requires --target-rect")
    if args.recon == "cnn" and args.weights is None:
        raise UsageError("--recon cnn requires --weights")
    seed = _opt(args, "seed", 0)
    x = load_raw(args.image)
    kernel = load_kernel(args.kernel)
    y = load_raw(args.blurry) if args.blurry else make_blurry(x, BlurModel(kernel, args.sigma, derive_seed(seed, "blur")))
    if args.recon == "wiener":
        r = Reconstructor(WienerConfig(args.lam), kernel)
    elif args.recon == "unrolled":
        r = Reconstructor(replace(UnrolledConfig(), steps=args.unrolled_steps), kernel)
    else:
        r = Reconstructor(cnn.load_weights(args.weights))
    clean = reconstruct(r, y)
    target = None
    if args.mode == "targeted":
        target = load_raw(args.target) if args.target else compose_localized_target(clean, load_raw(args.target_patch), args.target_rect)
    cfg = AttackConfig(mode=args.mode, epsilon=args.epsilon, num_steps=args.steps, step_size=args.step_size,
                       seed=seed, init=args.init, clamp_input=args.clamp_input)
    result = pgd_attack(r, y, cfg, target=target)
    out = Path(_opt(args, "out") or "attack_out")
    save_result(result, out)
    save_raw(clean, out / "clean.dbim")
    save_viewable(result.delta * 8 + 0.5, out / "delta_x8.pgm" if y.shape[2] == 1 else out / "delta_x8.ppm")
    if target is not None:
        save_raw(target, out / "target.dbim")
    before, after = evaluate(clean, x, target), evaluate(result.adversarial_output, x, target)
    print(f"eps={format_epsilon(args.epsilon)} best_step={result.best_step} loss={result.best_objective:.6g}")
    print(f"clean    psnr_src={before.psnr_source:.3f} ncc_src={before.ncc_source:.6f}")
    print(f"attacked psnr_src={after.psnr_source:.3f} ncc_src={after.ncc_source:.6f}")
    if target is not None:
        print(f"target   psnr_clean={before.psnr_target:.3f} psnr_attacked={after.psnr_target:.3f}")
    if r.kind == "unrolled" and args.eval_steps != args.unrolled_steps:
        moved = transfer_eval(r, r.with_steps(args.eval_steps), result, y, x)
        print(f"transfer K={args.eval_steps} psnr_src={moved.psnr_source:.3f} ncc_src={moved.ncc_source:.6f}")
    return EXIT_OK


def _spec_with_overrides(args):
    spec = load_spec(args.spec)
    if _opt(args, "seed") is not None:
        spec.master_seed = args.seed
    if _opt(args, "out") is not None:
        spec.output_dir = args.out
    return spec


def _failed(report) -> int:
    bad = [r for r in read_report(report) if r["status"] != "ok"]
    for r in bad:
        log.error("%s: %s", r.get("artifacts") or r.get("kernel"), r["status"])
    return len(bad)


def cmd_grid(args) -> int:
    report = run_grid(_spec_with_overrides(args), threads=_opt(args, "threads", 1))
    n = len(read_report(report))
    failed = _failed(report)
    print(f"{report}: {n} rows, {failed} failed")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_sweep(args) -> int:
    report = kernel_size_sweep(_spec_with_overrides(args), args.sizes, threads=_opt(args, "threads", 1))
    failed = _failed(report)
    print(f"{report}: {len(read_report(report))} rows, {failed} failed")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_metrics(args) -> int:
    m = evaluate(load_raw(args.image), load_raw(args.reference))
    print(f"psnr={m.psnr_source:.3f} ncc={m.ncc_source:.6f}")
    return EXIT_OK


def cmd_fixtures(args) -> int:
    weights = None
    if not args.no_train:
        seed = _opt(args, "seed", 0)
        weights, trace = cnn.train(cnn.init_config(1, seed=seed), fixtures.training_pairs(),
                                   epochs=args.epochs, seed=seed)
        log.info("cnn loss %.6g -> %.6g", trace[0], trace[-1])
    paths = fixtures.write_fixtures(args.directory, weights)
    print(paths["root"])
    return EXIT_OK


COMMANDS = {
    "blur": cmd_blur, "train-cnn": cmd_train, "attack": cmd_attack, "grid": cmd_grid,
    "sweep-kernel": cmd_sweep, "metrics": cmd_metrics, "make-fixtures": cmd_fixtures,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if _opt(args, "verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if _opt(args, "threads", 1) < 1:
        print("advdeblur: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"advdeblur: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, FileNotFoundError) as exc:
        print(f"advdeblur: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        log.debug("runtime failure", exc_info=True)
        print(f"advdeblur: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
