"""Command-line entry point ``pico``."""

from __future__ import annotations

import argparse
import csv
import itertools
import logging
import sys
import time
from pathlib import Path

from . import nas
from .codec import TILE_CORE, Codec, CodecError, TileGrid, decode_image, encode_image
from .context import PHASE_COUNTS
from .imageio import FORMATS, read_image, to_unit, write_image
from .metrics import (bayesian_elo, bd_rate, boundary_lowfreq_error, ms_ssim, mse, psnr, read_rd_csv,
                      read_votes_csv, tiling_artifact_loss)

logger = logging.getLogger("picocodec")


# ---------------------------------------------------------------------------
# nas
# ---------------------------------------------------------------------------


def _cmd_nas_enumerate(args) -> int:
    space = nas.load_space(args.space)
    stream, n = nas.enumerate_space(space)
    print(f"cardinality {n}")
    if args.out:
        limit = n if args.limit is None else args.limit
        recs = (nas.CandidateRecord(cfg, nas.analytic_kmacs(cfg), i)
                for i, cfg in enumerate(itertools.islice(stream, limit)))
        nas.write_records_csv(recs, args.out, space)
    return 0


def _cmd_nas_filter(args) -> int:
    space = nas.load_space(args.space)
    stream, n = nas.enumerate_space(space)
    t0 = time.perf_counter()
    recs = list(nas.filter_by_macs(stream, args.kmacs_lo, args.kmacs_hi, workers=args.workers))
    print(f"retained {len(recs)} of {n} ({len(recs) / n:.4f}) in {time.perf_counter() - t0:.1f}s")
    if args.out:
        nas.write_records_csv(recs, args.out, space)
    return 0


def _cost_model(args) -> nas.CostModel:
    if args.cost_table:
        return nas.table_cost(args.cost_table)
    return nas.kmacs_linear_cost(args.ms_per_kmac, args.ms_offset)


def _cmd_nas_sample(args) -> int:
    space = nas.load_space(args.space)
    recs = nas.read_records_csv(args.input, space)
    stats: dict = {}
    kept = nas.sample_and_cost(recs, args.n, args.seed, _cost_model(args), args.target_ms, args.tol, stats)
    print(f"sampled {stats['sampled']}, failed {stats['failed']}, retained {stats['retained']}")
    nas.write_records_csv(kept, args.out, space)
    return 0


def _cmd_nas_rank(args) -> int:
    from dataclasses import replace

    space = nas.load_space(args.space)
    recs = nas.read_records_csv(args.input, space)
    if args.metrics:
        with open(args.metrics, newline="") as fh:
            table = {int(r["config_id"]): float(r["metric"]) for r in csv.DictReader(fh)}
        recs = [replace(r, metric=table.get(r.index, r.metric)) for r in recs]
    top = nas.rank_candidates(recs, args.k, key=args.key, descending=args.descending)
    nas.write_records_csv(top, args.out, space)
    for r in top:
        print(r.index, nas.config_key(r.config), getattr(r, args.key))
    return 0


# ---------------------------------------------------------------------------
# codec
# ---------------------------------------------------------------------------


def _load_codec(args) -> Codec:
    if args.weights:
        codec = Codec.load(args.weights)
        if args.schedule and args.schedule != codec.schedule:
            raise CodecError(f"weights were built for schedule {codec.schedule!r}, not {args.schedule!r}")
        return codec
    return Codec.synthetic(args.seed, args.preset, args.schedule or "grid2x2")


def _cmd_weights(args) -> int:
    Codec.synthetic(args.seed, args.preset, args.schedule or "grid2x2").save(args.out)
    return 0


def _cmd_encode(args) -> int:
    codec = _load_codec(args)
    image = read_image(args.input)
    data = encode_image(image, args.level, codec)
    Path(args.out).write_bytes(data)
    h, w = image.shape[:2]
    print(f"{w}x{h} level {args.level}: {len(data)} bytes, {8 * len(data) / (w * h):.4f} bpp")
    return 0


def _cmd_decode(args) -> int:
    codec = _load_codec(args)
    image = decode_image(Path(args.input).read_bytes(), codec, pipelined=not args.sequential)
    write_image(args.out, image)
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _parse_grid(text: str) -> int:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 504x504, got {text!r}")
    if w != h or w < 1:
        raise argparse.ArgumentTypeError("tile cores must be square and positive")
    return w


def _cmd_eval_metrics(args) -> int:
    ref_dir, test_dir = Path(args.ref), Path(args.test)
    names = sorted(p.name for p in ref_dir.iterdir() if p.suffix.lower() in FORMATS)
    w = csv.writer(sys.stdout)
    w.writerow(["image", "mse", "psnr", "ms_ssim", "tiling_l1", "boundary_lf"])
    missing = 0
    for name in names:
        if not (test_dir / name).exists():
            logger.error("no test image for %s", name)
            missing += 1
            continue
        x, y = to_unit(read_image(ref_dir / name)), to_unit(read_image(test_dir / name))
        grid = TileGrid(x.shape[1], x.shape[0], core=args.grid)
        w.writerow([name, f"{mse(x, y):.8g}", f"{psnr(x, y):.4f}", f"{ms_ssim(x, y):.6f}",
                    f"{tiling_artifact_loss(x, y):.6g}", f"{boundary_lowfreq_error(x, y, grid).value:.6g}"])
    return 1 if missing else 0


def _cmd_eval_bdrate(args) -> int:
    anchor = {c.metric: c for c in read_rd_csv(args.anchor)}
    test = {c.metric: c for c in read_rd_csv(args.test)}
    common = [m for m in anchor if m in test]
    if not common:
        raise ValueError("anchor and test share no metric")
    for m in common:
        print(f"{m}: {bd_rate(anchor[m], test[m]):+.3f}%")
    return 0


def _cmd_eval_elo(args) -> int:
    ratings = bayesian_elo(read_votes_csv(args.votes))
    for name, r in sorted(ratings.items(), key=lambda kv: -kv[1]):
        print(f"{name}\t{r:+.2f}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _weights_args(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--weights", help="codec weight container")
    src.add_argument("--seed", type=int, help="build synthetic weights from this seed")
    p.add_argument("--preset", choices=["tiny", "final"], default="tiny", help="architecture for --seed")
    p.add_argument("--schedule", choices=sorted(PHASE_COUNTS), help="context schedule (default grid2x2)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pico", description="Tiled learned image codec toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_nas = sub.add_parser("nas", help="architecture search pipeline")
    nsub = p_nas.add_subparsers(dest="nas_command", required=True)
    space_help = "table5a, table5b or a JSON search-space file"

    p = nsub.add_parser("enumerate", help="count (and optionally list) a search space")
    p.add_argument("--space", required=True, help=space_help)
    p.add_argument("--out", help="CSV of enumerated candidates")
    p.add_argument("--limit", type=int, help="write at most this many rows")
    p.set_defaults(func=_cmd_nas_enumerate)

    p = nsub.add_parser("filter", help="keep candidates inside a kMACs/pixel band")
    p.add_argument("--space", required=True, help=space_help)
    p.add_argument("--kmacs-lo", type=float, required=True)
    p.add_argument("--kmacs-hi", type=float, required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="CSV of retained candidates")
    p.set_defaults(func=_cmd_nas_filter)

    p = nsub.add_parser("sample", help="sample candidates and keep those near a runtime target")
    p.add_argument("--space", required=True, help=space_help)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target-ms", type=float, required=True)
    p.add_argument("--tol", type=float, default=0.05)
    p.add_argument("--cost-table", help="CSV with config_key,runtime_ms")
    p.add_argument("--ms-per-kmac", type=float, default=1.0, help="linear cost model slope")
    p.add_argument("--ms-offset", type=float, default=0.0, help="linear cost model intercept")
    p.set_defaults(func=_cmd_nas_sample)

    p = nsub.add_parser("rank", help="top-k candidates by metric")
    p.add_argument("--space", required=True, help=space_help)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--metrics", help="CSV with config_id,metric merged before ranking")
    p.add_argument("--key", choices=["metric", "runtime_ms", "kmacs_per_pixel"], default="metric")
    p.add_argument("--descending", action="store_true")
    p.set_defaults(func=_cmd_nas_rank)

    p = sub.add_parser("weights", help="write synthetic codec weights")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--preset", choices=["tiny", "final"], default="tiny")
    p.add_argument("--schedule", choices=sorted(PHASE_COUNTS))
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_weights)

    p = sub.add_parser("encode", help="compress a PPM/PNG image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--level", type=int, required=True, help="quality level 0-70")
    _weights_args(p)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("decode", help="decompress to a PPM/PNG image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sequential", action="store_true", help="disable the two-stage pipeline")
    _weights_args(p)
    p.set_defaults(func=_cmd_decode)

    p_eval = sub.add_parser("eval", help="evaluation tools")
    esub = p_eval.add_subparsers(dest="eval_command", required=True)
    p = esub.add_parser("metrics", help="per-image metrics for matching files in two directories")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--grid", type=_parse_grid, default=TILE_CORE, help="tile core size, e.g. 504x504")
    p.set_defaults(func=_cmd_eval_metrics)
    p = esub.add_parser("bdrate", help="BD-rate of test vs anchor RD CSVs")
    p.add_argument("--anchor", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=_cmd_eval_bdrate)
    p = esub.add_parser("elo", help="Bayesian Elo from pairwise votes (a,b,wins_a,wins_b)")
    p.add_argument("--votes", required=True)
    p.set_defaults(func=_cmd_eval_elo)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"pico: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
