"""Command line entry point.

Exit codes: 0 success, 1 runtime or IO error, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import __version__, pipeline
from .errors import UhrError
from .evaluate import format_iou_table, plan_windows
from .fusion import read_bank, selfcheck
from .msar import MsarConfig
from .regions import SampleMode, SamplerConfig


def int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def size(text: str) -> tuple[int, int]:
    """'512' or '512x256' (height x width)."""
    try:
        parts = [int(v) for v in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}")
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) <= 0:
        raise argparse.ArgumentTypeError(f"expected positive N or HxW, got {text!r}")
    return parts[0], parts[1]


def seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be a 64-bit unsigned integer")
    return value


def mode(text: str) -> SampleMode:
    try:
        return SampleMode.parse(text)
    except ValueError:
        raise argparse.ArgumentTypeError("mode must be gsd, resize or wgrescro")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uhrsample",
        description="Long-tail sampling and evaluation tools for ultra-high-resolution labelled rasters.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    def add(name, help_text, seeded=False, manifest=True):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--out", type=Path, default=Path("uhrsample-out"),
                       help="output directory (default: uhrsample-out)")
        p.add_argument("--workers", type=int, default=1, help="parallel workers (default: 1)")
        if manifest:
            p.add_argument("--manifest", type=Path, required=True, help="scene manifest (.tsv)")
        if seeded:
            p.add_argument("--seed", type=seed, required=True, help="64-bit random seed")
        return p

    p = add("synth", "write synthetic long-tail scenes and a manifest", seeded=True, manifest=False)
    p.add_argument("--size", type=size, default=(2048, 2048), help="scene size N or HxW")
    p.add_argument("--freqs", type=float_list, default=[0.7, 0.2, 0.07, 0.03],
                   help="per-class pixel shares, summing to 1")
    p.add_argument("--count", type=int, default=1, help="number of scenes")
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--gsd", type=float, default=1.0, help="metres per pixel")

    p = add("stats", "per-class pixel counts, shares and tail report")
    p.add_argument("--classes", type=int, required=True, help="number of classes")
    p.add_argument("--threshold", type=float, default=0.05,
                   help="joint share covered by the flagged tail classes (default: 0.05)")

    p = add("msar-sample", "multi-scale anchored region samples", seeded=True)
    p.add_argument("--anchor", type=size, default=(512, 512), help="anchor size N or HxW")
    p.add_argument("--scales", type=int_list, default=[2, 3, 4])
    p.add_argument("--count", type=int, default=1, help="samples per scene")

    p = add("regions-build", "extract, annotate and rank object regions")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--masks-dir", type=Path,
                   help="directory of <scene_id>.msk archives; scenes without one use "
                        "connected components of the label plane")
    p.add_argument("--min-pixels", type=int, default=16)
    p.add_argument("--grow", type=int, default=2)
    p.add_argument("--save-masks", action="store_true",
                   help="write mask archives for synthetic regions")

    def sampler_args(p):
        p.add_argument("--index", type=Path, required=True, help="region index from regions-build")
        p.add_argument("--histogram", type=Path, help="class histogram (default: next to index)")
        p.add_argument("--mode", type=mode, default=SampleMode.GSD_PRESERVING,
                       help="gsd | resize | wgrescro")
        p.add_argument("--topk", type=int, default=4)
        p.add_argument("--draws", type=int, help="wgrescro draws per scene (default: topk)")
        p.add_argument("--factor", type=float, default=0.07, help="wgrescro array length factor")
        p.add_argument("--placement", choices=["random", "top_left"], default="random",
                       help="gsd crop placement inside regions larger than the tile")

    p = add("regions-sample", "sample tiles from ranked regions", seeded=True)
    sampler_args(p)
    p.add_argument("--train", type=size, default=(512, 512), help="training tile size")

    p = add("batch", "compose mixed MSAR + region batches", seeded=True)
    sampler_args(p)
    p.add_argument("--anchor", type=size, default=(512, 512))
    p.add_argument("--train", type=size, help="region tile size (default: anchor size)")
    p.add_argument("--scales", type=int_list, default=[2, 3, 4])
    p.add_argument("--count", type=int, default=1, help="batches per scene")
    p.add_argument("--dataset-level", action="store_true",
                   help="take regions from the dataset-wide ranking instead of per scene")

    p = add("report", "class balance report over batch archives", manifest=False)
    p.add_argument("--batches", type=Path, required=True, help="directory holding batch_*.lta")
    p.add_argument("--classes", type=int, required=True)

    p = add("eval", "IoU / mIoU of a prediction against a scene", manifest=False)
    p.add_argument("--pred", type=Path, required=True,
                   help=".lrs prediction plane, or .lta archive of per-window label tiles")
    p.add_argument("--gt", type=Path, required=True, help="ground-truth scene (.lrs)")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--window", type=size, default=(512, 512))
    p.add_argument("--stride", type=size, default=(341, 341))
    p.add_argument("--policy", choices=["avg_logits", "last_write"], default="avg_logits")
    p.add_argument("--exclude-background", action="store_true",
                   help="leave class 0 out of the mIoU average")

    p = add("plan", "list sliding-window positions", manifest=False)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument("--window", type=size, default=(512, 512))
    p.add_argument("--stride", type=size, default=(341, 341))

    p = add("fuse-selfcheck", "gradient, shape and bound checks of the fusion kernels",
            manifest=False)
    p.add_argument("--seed", type=seed, default=0)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--bank", type=Path, help="text bank file to validate")
    return parser


def _sampler(args, train) -> SamplerConfig:
    return SamplerConfig(
        mode=args.mode,
        train_h=train[0],
        train_w=train[1],
        top_k=args.topk,
        arr_len_factor=args.factor,
        wg_draws=args.draws,
        seed=args.seed,
        gsd_placement=args.placement,
    )


def dispatch(args) -> int:
    out = args.out
    cmd = args.command
    if cmd == "synth":
        manifest = pipeline.run_synth(out, args.seed, args.size[0], args.size[1], args.freqs,
                                      args.count, args.channels, args.gsd, args.workers)
        print(manifest)
    elif cmd == "stats":
        res = pipeline.run_stats(out, args.manifest, args.classes, args.threshold, args.workers)
        sys.stdout.write((out / "stats.tsv").read_text())
        print(f"# tail classes: {','.join(str(c) for c in res.tail) or 'none'}")
    elif cmd == "msar-sample":
        n = pipeline.run_msar_sample(out, args.manifest, args.anchor, args.scales, args.count,
                                     args.seed, args.workers)
        print(f"wrote {n} tiles to {out / 'msar.lta'}")
    elif cmd == "regions-build":
        recs = pipeline.run_regions_build(out, args.manifest, args.classes, args.masks_dir,
                                          args.min_pixels, args.grow, args.save_masks,
                                          args.workers)
        print(f"wrote {len(recs)} regions to {out / 'regions.tsv'}")
    elif cmd == "regions-sample":
        n = pipeline.run_regions_sample(out, args.manifest, args.index, _sampler(args, args.train),
                                        args.seed, args.histogram, args.workers)
        print(f"wrote {n} tiles to {out / 'regions.lta'}")
    elif cmd == "batch":
        msar_cfg = MsarConfig(args.anchor[0], args.anchor[1], tuple(args.scales), args.seed)
        sampler = _sampler(args, args.train or args.anchor)
        paths = pipeline.run_batch(out, args.manifest, args.index, msar_cfg, sampler, args.count,
                                   args.seed, args.dataset_level, args.histogram, args.workers)
        print(f"wrote {len(paths)} batch archives to {out}")
    elif cmd == "report":
        rows = pipeline.report(pipeline.batch_archives(args.batches), args.classes)
        pipeline.write_report(out / "report.tsv", rows, args.classes)
        sys.stdout.write((out / "report.tsv").read_text())
    elif cmd == "eval":
        _, res = pipeline.run_eval(args.pred, args.gt, args.classes, args.window, args.stride,
                                   args.policy, args.exclude_background)
        table = format_iou_table(res)
        (out / "iou.tsv").write_text(table)
        sys.stdout.write(table)
    elif cmd == "plan":
        plan = plan_windows(args.height, args.width, args.window, args.stride)
        lines = ["row\tcol\th\tw"] + [f"{w.row}\t{w.col}\t{w.h}\t{w.w}" for w in plan.windows]
        text = "\n".join(lines) + "\n"
        (out / "plan.tsv").write_text(text)
        sys.stdout.write(text)
    elif cmd == "fuse-selfcheck":
        results = selfcheck(args.seed, args.trials)
        if args.bank is not None:
            bank = read_bank(args.bank)
            results.append(("bank_file", True, f"{bank.K} terms, d={bank.d}"))
        for name, ok, detail in results:
            print(f"{'PASS' if ok else 'FAIL'}\t{name}\t{detail}")
        if not all(ok for _, ok, _ in results):
            return 1
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    # Resolve defaults that depend on other flags so the echo is complete.
    if args.command == "batch" and args.train is None:
        args.train = args.anchor
    if args.command in ("regions-sample", "batch"):
        if args.draws is None:
            args.draws = args.topk
        if args.histogram is None:
            args.histogram = args.index.parent / "histogram.tsv"
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        params = {k: v for k, v in vars(args).items() if v is not None}
        params["version"] = __version__
        pipeline.write_config_echo(args.out, params)
        return dispatch(args)
    except (UhrError, OSError, ValueError) as exc:
        print(f"uhrsample {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
