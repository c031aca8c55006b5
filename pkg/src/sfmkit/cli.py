"""Command-line interface.

Subcommands mirror the pipeline stages so they can run independently:

    sfmkit detect      images -> features.bin
    sfmkit match       features.bin -> matches.bin + matches.csv
    sfmkit reconstruct images (+ optional precomputed stages) -> all artifacts
    sfmkit export      reconstruction.json -> cloud.ply + poses.json
    sfmkit report      reconstruction.json -> CSVs + figures

Exit codes: 0 success, 1 fatal pipeline error, 2 usage error. The SFMKIT_LOG
environment variable sets the log level (DEBUG/INFO/WARNING/...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import io_files, report
from .errors import SfmError
from .image import load_image
from .matching import RansacConfig
from .pipeline import (
    PipelineConfig,
    detect_all,
    match_image_pairs,
    reconstruct,
)
from .sift import SiftParams, keypoints_to_csv

log = logging.getLogger("sfmkit")

IMAGE_EXTENSIONS = (".pgm", ".png")


def _load_config_file(path: str) -> dict:
    if path.endswith(".toml"):
        try:
            import tomllib  # py >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def _add_common_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE",
                   help="TOML or JSON file; keys match the long option names "
                        "(hyphens as underscores); explicit flags win")
    p.add_argument("--seed", type=int, default=None, help="RANSAC seed")
    p.add_argument("--threads", type=int, default=1, help="worker count")
    p.add_argument("--ratio", type=float, default=None,
                   help="Lowe ratio-test threshold (default 0.75)")
    p.add_argument("--ransac-thresh-px", type=float, default=None,
                   help="Sampson inlier threshold in px (default 1.5)")
    p.add_argument("--min-tri-angle-deg", type=float, default=None,
                   help="triangulation angle floor (default 2.0)")
    p.add_argument("--max-reproj-px", type=float, default=None,
                   help="track reprojection gate in px (default 4.0)")
    p.add_argument("--local-ba-interval", type=int, default=None,
                   help="bundle-adjust every N registered views (default 3)")
    p.add_argument("--contrast-threshold", type=float, default=None,
                   help="SIFT contrast gate (default 0.04)")
    p.add_argument("--edge-threshold", type=float, default=None,
                   help="SIFT edge-response gate (default 10)")
    p.add_argument("--layers-per-octave", type=int, default=None,
                   help="SIFT scale-space intervals per octave (default 3)")
    p.add_argument("--base-sigma", type=float, default=None,
                   help="SIFT base smoothing (default 1.6)")


def _build_pipeline_config(args) -> PipelineConfig:
    args.threads = max(1, args.threads)
    cfg_file = _load_config_file(args.config) if args.config else {}

    def pick(name, default):
        cli_val = getattr(args, name, None)
        if cli_val is not None:
            return cli_val
        return cfg_file.get(name, default)

    sift = SiftParams(
        layers_per_octave=int(pick("layers_per_octave", 3)),
        contrast_threshold=float(pick("contrast_threshold", 0.04)),
        edge_threshold=float(pick("edge_threshold", 10.0)),
        base_sigma=float(pick("base_sigma", 1.6)),
    )
    ransac = RansacConfig(
        max_iterations=int(pick("ransac_max_iterations", 2000)),
        inlier_threshold_px=float(pick("ransac_thresh_px", 1.5)),
        confidence=float(pick("ransac_confidence", 0.999)),
        rng_seed=int(pick("seed", 0)),
    )
    return PipelineConfig(
        sift=sift,
        ransac=ransac,
        ratio=float(pick("ratio", 0.75)),
        min_init_inliers=int(pick("min_init_inliers", 100)),
        min_triangulation_angle_deg=float(pick("min_tri_angle_deg", 2.0)),
        max_reproj_px=float(pick("max_reproj_px", 4.0)),
        local_ba_interval=int(pick("local_ba_interval", 3)),
        min_pnp_correspondences=int(pick("min_pnp_correspondences", 12)),
    )


def _list_images(image_dir: str) -> list[str]:
    names = sorted(n for n in os.listdir(image_dir)
                   if n.lower().endswith(IMAGE_EXTENSIONS))
    return [os.path.join(image_dir, n) for n in names]


def _load_images(paths):
    return [load_image(p) for p in paths]


def cmd_detect(args) -> int:
    cfg = _build_pipeline_config(args)
    paths = _list_images(args.images)
    if not paths:
        print(f"error: no PGM/PNG images in {args.images}", file=sys.stderr)
        return 2
    images = _load_images(paths)
    names = [os.path.basename(p) for p in paths]
    features = detect_all(images, cfg.sift, threads=args.threads)
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "features.bin")
    io_files.save_features(features, names, out)
    if args.dump_keypoints:
        for name, (kps, _) in zip(names, features):
            stem = os.path.splitext(name)[0]
            keypoints_to_csv(kps, os.path.join(args.out,
                                               f"keypoints_{stem}.csv"))
    for name, (kps, _) in zip(names, features):
        log.info("detect %s: %d keypoints", name, len(kps))
    print(f"wrote {out} ({len(features)} images)")
    return 0


def cmd_match(args) -> int:
    cfg = _build_pipeline_config(args)
    features, names = io_files.load_features(args.features)
    pairwise = match_image_pairs(features, cfg.ratio, cfg.ransac,
                                 threads=args.threads)
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "matches.bin")
    io_files.save_matches(pairwise, out)
    with open(os.path.join(args.out, "matches.csv"), "w",
              encoding="ascii") as fh:
        fh.write("i,j,putative,inliers\n")
        for (i, j) in sorted(pairwise):
            pr = pairwise[(i, j)]
            fh.write(f"{i},{j},{pr.n_putative},{pr.n_inliers}\n")
    print(f"wrote {out} ({len(pairwise)} pairs)")
    return 0


def cmd_reconstruct(args) -> int:
    cfg = _build_pipeline_config(args)
    if not os.path.isfile(args.intrinsics):
        print(f"error: intrinsics file not found: {args.intrinsics}",
              file=sys.stderr)
        return 2
    intrinsics = io_files.load_intrinsics(args.intrinsics)
    paths = _list_images(args.images)
    if not paths:
        print(f"error: no PGM/PNG images in {args.images}", file=sys.stderr)
        return 2
    names = [os.path.basename(p) for p in paths]
    images = _load_images(paths)
    os.makedirs(args.out, exist_ok=True)

    features_path = os.path.join(args.out, "features.bin")
    matches_path = os.path.join(args.out, "matches.bin")
    if args.resume:
        if not (os.path.isfile(features_path) and os.path.isfile(matches_path)):
            print("error: --resume needs features.bin and matches.bin in "
                  f"{args.out} (run `sfmkit detect` and `sfmkit match`)",
                  file=sys.stderr)
            return 2
        features, saved_names = io_files.load_features(features_path)
        if saved_names != names:
            print("error: saved features do not match the image directory",
                  file=sys.stderr)
            return 2
        pairwise = io_files.load_matches(matches_path)
    else:
        features = detect_all(images, cfg.sift, threads=args.threads)
        pairwise = match_image_pairs(features, cfg.ratio, cfg.ransac,
                                     threads=args.threads)
        io_files.save_features(features, names, features_path)
        io_files.save_matches(pairwise, matches_path)

    state, _ = reconstruct([f[0] for f in features], pairwise, intrinsics,
                           cfg, images=images, image_names=names)
    summary = io_files.state_summary(state)
    io_files.save_state(summary, os.path.join(args.out, "reconstruction.json"))
    io_files.export_ply(summary["points"], os.path.join(args.out, "cloud.ply"))
    io_files.export_poses(summary["poses"],
                              os.path.join(args.out, "poses.json"))
    io_files.export_report(summary, args.out)
    report.render_figures(summary, os.path.join(args.out, "figures"))
    print(f"registered {len(summary['registered'])}/{len(names)} views, "
          f"{len(summary['points'])} points -> {args.out}")
    return 0


def cmd_export(args) -> int:
    summary = io_files.load_state(args.state)
    os.makedirs(args.out, exist_ok=True)
    io_files.export_ply(summary["points"], os.path.join(args.out, "cloud.ply"))
    io_files.export_poses(summary["poses"],
                              os.path.join(args.out, "poses.json"))
    print(f"wrote cloud.ply and poses.json to {args.out}")
    return 0


def cmd_report(args) -> int:
    summary = io_files.load_state(args.state)
    os.makedirs(args.out, exist_ok=True)
    io_files.export_report(summary, args.out)
    report.render_figures(summary, os.path.join(args.out, "figures"))
    print(f"wrote CSVs and figures to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sfmkit",
        description="Incremental structure-from-motion: sparse reconstruction "
                    "from an unordered grayscale image collection.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("detect", help="SIFT features for every image")
    p.add_argument("--images", required=True, help="directory of PGM/PNG")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dump-keypoints", action="store_true",
                   help="also write per-image keypoint CSVs")
    _add_common_options(p)
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("match", help="match + verify every image pair")
    p.add_argument("--features", required=True, help="features.bin from detect")
    p.add_argument("--out", required=True)
    _add_common_options(p)
    p.set_defaults(fn=cmd_match)

    p = sub.add_parser("reconstruct", help="run the full pipeline")
    p.add_argument("--images", required=True)
    p.add_argument("--intrinsics", required=True,
                   help="JSON file with fx, fy, cx, cy[, skew]")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", action="store_true",
                   help="reuse features.bin/matches.bin from --out")
    _add_common_options(p)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("export", help="PLY + pose JSON from a saved state")
    p.add_argument("--state", required=True, help="reconstruction.json")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("report", help="CSVs + figures from a saved state")
    p.add_argument("--state", required=True, help="reconstruction.json")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def run_cli(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("SFMKIT_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SfmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return run_cli(argv)


if __name__ == "__main__":
    sys.exit(main())
