"""Command-line front end: ``crkit {crselector,sca,gradcheck,eval,gen-fixtures}``.

Exit codes: 0 success, 1 validation/input failure, 2 gradient check failure.
"""
from __future__ import annotations

import argparse
from dataclasses import dataclass, replace
import hashlib
import json
import logging
from pathlib import Path
import sys

import numpy as np

from . import gradcheck, io
from .crselector import CRSelectorParams, crselector_forward
from .fixtures import bright_fraction, box_fixture, crack_image, random_tensor
from .metrics import Detection, GroundTruthBox, RecordError, evaluate, format_records, format_result, parse_records
from .rng import ALGORITHM, RngState
from .sca import ScAParams, sca_forward, scale_weights
from .tensor import Conv1x1Params, DimensionError, as_tensor

log = logging.getLogger("crkit")

EXIT_OK, EXIT_INVALID, EXIT_CHECK_FAILED = 0, 1, 2
DEFAULT_SEED = 42


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    subcommand: str
    out_dir: Path
    seed: int


def _write_text(path: Path, text: str) -> None:
    io.atomic_write(path, text.encode("utf-8"))


def _meta(cfg: RunConfig, **extra) -> str:
    data = {"subcommand": cfg.subcommand, "seed": cfg.seed, "rng": ALGORITHM, **extra}
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def _check_seed(seed: int) -> int:
    if not 0 <= seed < 2**64:
        raise UsageError(f"--seed must be an unsigned 64-bit integer, got {seed}")
    return seed


# --- subcommands -------------------------------------------------------------

def cmd_crselector(args) -> int:
    params, file_seed = io.load_crselector_params(args.params)
    changes = {}
    if args.window is not None:
        changes["m"] = args.window
    if args.r is not None:
        changes["r"] = args.r
    if args.tau is not None:
        changes["tau"] = args.tau
    if args.soft_mask:
        changes["hard_mask"] = False
    try:
        params = replace(params, **changes)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    seed = _check_seed(args.seed if args.seed is not None else file_seed)
    cfg = RunConfig("crselector", Path(args.out_dir), seed)

    x = as_tensor(io.load_tensor(args.features))
    image = as_tensor(io.load_tensor(args.image))
    try:
        out, g = crselector_forward(x, image, params, RngState(seed, "gumbel"), return_guidance=True)
    except DimensionError as exc:
        raise UsageError(f"{args.features} / {args.image}: {exc}") from None

    n, _, h, w = x.shape
    grid = np.asarray(g.keymask).reshape(n, h // params.m, w // params.m)
    lines = []
    for b in range(n):
        lines.append(f"# batch {b}")
        lines.extend(" ".join(f"{v:.6f}" for v in row) for row in grid[b])

    io.save_tensor(cfg.out_dir / "output.crt", out)
    _write_text(cfg.out_dir / "keymask.txt", "\n".join(lines) + "\n")
    io.atomic_write(cfg.out_dir / "heatmap_input.pgm", io.encode_pgm(io.heatmap(x)))
    io.atomic_write(cfg.out_dir / "heatmap_output.pgm", io.encode_pgm(io.heatmap(out)))
    _write_text(cfg.out_dir / "meta.json", _meta(
        cfg, m=params.m, r=params.r, tau=params.tau, hard_mask=params.hard_mask,
        features=str(args.features), image=str(args.image), params=str(args.params)))
    log.info("wrote crselector outputs to %s (seed %d)", cfg.out_dir, seed)
    return EXIT_OK


def cmd_sca(args) -> int:
    cfg = RunConfig("sca", Path(args.out_dir), _check_seed(args.seed))
    p = io.load_sca_params(args.params)
    levels = [as_tensor(io.load_tensor(path)) for path in args.levels]
    try:
        gamma = scale_weights(levels, p)
        out = sca_forward(levels, p)
    except DimensionError as exc:
        raise UsageError(f"level files {', '.join(args.levels)}: {exc}") from None
    for i, lvl in enumerate(out):
        io.save_tensor(cfg.out_dir / f"level{i}.crt", lvl)
    rows = [" ".join(f"{float(v):.9g}" for v in gamma[b]) for b in range(gamma.shape[0])]
    _write_text(cfg.out_dir / "gamma.txt", "\n".join(rows) + "\n")
    _write_text(cfg.out_dir / "meta.json", _meta(cfg, levels=[str(p) for p in args.levels]))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    seed = _check_seed(args.seed)
    modules = gradcheck.MODULES if args.module == "all" else (args.module,)
    reports = []
    for module in modules:
        reports.extend(gradcheck.check_module(module, seed, args.threshold))
    text = "".join(r.line() + "\n" for r in reports)
    failed = sum(not r.passed for r in reports)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        _write_text(out_dir / "gradcheck.txt", text)
        _write_text(out_dir / "meta.json", _meta(RunConfig("gradcheck", out_dir, seed),
                                                 checks=len(reports), failed=failed))
    sys.stdout.write(text)
    log.info("%d checks, %d failed", len(reports), failed)
    return EXIT_CHECK_FAILED if failed else EXIT_OK


def cmd_eval(args) -> int:
    gt_path, det_path = Path(args.gt), Path(args.dets)
    gts = parse_records(gt_path.read_text(encoding="utf-8"), str(gt_path))
    dets = parse_records(det_path.read_text(encoding="utf-8"), str(det_path))
    if gts and not isinstance(gts[0], GroundTruthBox):
        raise UsageError(f"{gt_path}: ground-truth file has score columns")
    if dets and not isinstance(dets[0], Detection):
        raise UsageError(f"{det_path}: detection file lacks score columns")
    res = evaluate(dets, gts, points=11 if args.voc11 else 101)
    text = format_result(res)
    sys.stdout.write(text)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        _write_text(out_dir / "metrics.txt", text)
    return EXIT_OK


def _sha(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def cmd_gen_fixtures(args) -> int:
    cfg = RunConfig("gen-fixtures", Path(args.out_dir), _check_seed(args.seed))
    root = RngState(cfg.seed, "fixtures")
    c, size, m = args.channels, args.size, args.window
    manifest = {"seed": cfg.seed, "rng": ALGORITHM, "files": []}

    def emit(name, data: bytes, **info):
        io.atomic_write(cfg.out_dir / name, data)
        manifest["files"].append({"name": name, "sha256": _sha(data), **info})

    features = random_tensor(root.substream("fixtures/features"), (1, c, size, size))
    emit("features.crt", io.encode_tensor(features), shape=list(features.shape),
         stream="fixtures/features")

    img_size = 2 * size
    image = crack_image(root.substream("fixtures/crack"), img_size, img_size, args.crack_fraction)
    emit("image.crt", io.encode_tensor(image), shape=list(image.shape), stream="fixtures/crack",
         foreground_fraction=args.crack_fraction, measured_fraction=bright_fraction(image))
    emit("image.pgm", io.encode_pgm(np.round(image[0, 0] * 255).astype(np.uint8)),
         shape=[img_size, img_size])

    params = CRSelectorParams.random(c, m, root.substream("fixtures/crselector"))
    # parameter bundles list the 4-D shape of each stored block
    crp_shapes = {name: list(t.shape) for name, t in io.crselector_blocks(params)}
    emit("crselector.crp", io.encode_crselector_params(params, cfg.seed), shape=crp_shapes,
         stream="fixtures/crselector", m=m, r=params.r)
    zero = replace(params, out_conv=Conv1x1Params.zeros(c, c))
    emit("crselector_zero_out.crp", io.encode_crselector_params(zero, cfg.seed), shape=crp_shapes,
         m=m, r=params.r)

    gate = random_tensor(root.substream("fixtures/sca"), (1, c + 1, 1, 1))[0, :, 0, 0]
    sca = ScAParams(Conv1x1Params(gate[None, :c], gate[c:]))
    sca_shapes = {"weight": [1, c, 1, 1], "bias": [1, 1, 1, 1]}
    emit("sca.sca", io.encode_sca_params(sca), shape=sca_shapes, stream="fixtures/sca", channels=c)
    emit("sca_zero.sca", io.encode_sca_params(ScAParams(Conv1x1Params.zeros(1, c))),
         shape=sca_shapes, channels=c)
    for i, s in enumerate((size * 2, size, max(size // 2, 1))):
        lvl = random_tensor(root.substream(f"fixtures/level{i}"), (1, c, s, s))
        emit(f"level{i}.crt", io.encode_tensor(lvl), shape=list(lvl.shape), stream=f"fixtures/level{i}")

    dets, gts = box_fixture(root.substream("fixtures/boxes"))
    # record files: shape is (records, fields per record)
    emit("gt.txt", format_records(gts).encode("utf-8"), shape=[len(gts), 6], records=len(gts),
         stream="fixtures/boxes")
    emit("dets.txt", format_records(dets).encode("utf-8"), shape=[len(dets), 7], records=len(dets),
         stream="fixtures/boxes")
    perfect = [Detection(g.image_id, g.class_id, g.box, 1.0) for g in gts]
    emit("dets_perfect.txt", format_records(perfect).encode("utf-8"), shape=[len(perfect), 7],
         records=len(perfect))

    _write_text(cfg.out_dir / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# --- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("crselector", help="run critical-region-selector attention on a feature map")
    p.add_argument("--features", required=True, help="CRT1 feature map (n, c, h, w)")
    p.add_argument("--image", required=True, help="CRT1 source image (n, c_img, H, W)")
    p.add_argument("--params", required=True, help="CRP1 parameter bundle")
    p.add_argument("--window", type=int, help="override window size M")
    p.add_argument("--r", type=float, help="override offset scale r")
    p.add_argument("--tau", type=float, help="override Gumbel temperature")
    p.add_argument("--soft-mask", action="store_true", help="use soft keep probabilities")
    p.add_argument("--seed", type=int, default=None, help="Gumbel seed (default: bundle seed)")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_crselector)

    p = sub.add_parser("sca", help="apply scale-aware gating to pyramid levels")
    p.add_argument("--params", required=True, help="SCA1 parameter file")
    p.add_argument("levels", nargs="+", help="CRT1 level files, in level order")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sca)

    p = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    p.add_argument("--module", choices=("all",) + gradcheck.MODULES, default="all")
    p.add_argument("--threshold", type=float, default=None,
                   help="override relative-error threshold for every check")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--dets", required=True)
    p.add_argument("--voc11", action="store_true", help="11-point interpolation instead of 101")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gen-fixtures", help="write deterministic synthetic inputs")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--window", type=int, default=2)
    p.add_argument("--crack-fraction", type=float, default=0.05)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_fixtures)
    return parser


def _validate(args) -> None:
    if getattr(args, "window", None) is not None and args.window < 1:
        raise UsageError("--window must be >= 1")
    if getattr(args, "tau", None) is not None and not args.tau > 0:
        raise UsageError("--tau must be > 0")
    if getattr(args, "r", None) is not None and not args.r >= 0:
        raise UsageError("--r must be >= 0")
    if args.command == "gen-fixtures":
        if args.channels < 1 or args.size < 1:
            raise UsageError("--channels and --size must be >= 1")
        if args.size % args.window:
            raise UsageError(f"--size {args.size} must be divisible by --window {args.window}")
        if not 0 <= args.crack_fraction <= 1:
            raise UsageError("--crack-fraction must be in [0, 1]")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors; keep 2 reserved for failed checks
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _validate(args)
        return args.func(args)
    except (UsageError, io.FormatError, RecordError, DimensionError, ValueError, OSError) as exc:
        print(f"crkit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
