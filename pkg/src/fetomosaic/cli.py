"""Command-line entry point: ``fetomosaic {synth,detect,register,mosaic,eval,run}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .config import PipelineConfig, dump_config, load_config
from .errors import ConfigError, FormatError, MosaicError
from .features import save_keypoints
from .imaging import load_mask, load_png
from .metrics import (gt_corner_error, eval_all, write_aggregates_json, write_metrics_csv,
                      write_quantiles_csv)
from .mosaic import chain, compute_canvas, render_mosaic, save_mosaic
from .registration import (CornerDetector, KeypointFileSource, RegistrationTrace, load_trace,
                           register_sequence, save_trace)
from .synth import OccluderSpec, generate_sequence, generate_texture, write_sequence

log = logging.getLogger("fetomosaic")

EXIT_OK, EXIT_USAGE, EXIT_TERMINATED = 0, 2, 3


class UsageError(Exception):
    """Missing or invalid inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# input discovery
# ---------------------------------------------------------------------------


def frame_paths(frames_dir) -> List[Path]:
    d = Path(frames_dir)
    if not d.is_dir():
        raise UsageError(f"frames directory not found: {frames_dir}")
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() == ".png")
    if not paths:
        raise UsageError(f"no PNG frames in {frames_dir}")
    return paths


def load_frames(frames_dir):
    paths = frame_paths(frames_dir)
    frames = [load_png(p) for p in paths]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise UsageError(f"frames have differing shapes: {sorted(shapes)}")
    return frames, [p.stem for p in paths]


def load_masks(masks_dir, ids, shape):
    if masks_dir is None:
        return None
    d = Path(masks_dir)
    if not d.is_dir():
        raise UsageError(f"masks directory not found: {masks_dir}")
    out = []
    for stem in ids:
        p = d / f"{stem}.png"
        if p.is_file():
            m = load_mask(p)
            if m.shape != shape[:2]:
                raise UsageError(f"mask {p} has shape {m.shape}, frames are {shape[:2]}")
            out.append(m)
        else:
            out.append(None)
    return out


def find_fov(args, frames_dir) -> Optional[np.ndarray]:
    path = getattr(args, "fov", None)
    if path is None:
        candidate = Path(frames_dir).parent / "fov.png"
        path = candidate if candidate.is_file() else None
    elif not Path(path).is_file():
        raise UsageError(f"fov mask not found: {path}")
    return None if path is None else load_mask(path)


def find_gt(args, frames_dir) -> Optional[RegistrationTrace]:
    path = getattr(args, "gt", None)
    if path is None:
        candidate = Path(frames_dir).parent / "gt_trace.json"
        path = candidate if candidate.is_file() else None
    return None if path is None else load_trace(path)


def resolve_config(args) -> PipelineConfig:
    overrides = {}
    for kv in args.set or []:
        key, sep, value = kv.partition("=")
        if not sep or not key.strip():
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {kv!r}")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides.setdefault("ransac.seed", str(args.seed))
        overrides.setdefault("synth.seed", str(args.seed))
    if args.workers is not None:
        overrides.setdefault("run.workers", str(args.workers))
    if getattr(args, "identity_substitution", None) is not None:
        overrides.setdefault("eval.identity_substitution", str(args.identity_substitution))
        overrides.setdefault("run.mosaic_identity_substitution", str(args.identity_substitution))
    return load_config(args.config, overrides)


def write_effective_config(out: Path, cfg: PipelineConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.ini").write_text(dump_config(cfg))


def _detector(args, cfg: PipelineConfig, fov):
    if getattr(args, "keypoints", None):
        if not Path(args.keypoints).is_dir():
            raise UsageError(f"keypoints directory not found: {args.keypoints}")
        return KeypointFileSource(args.keypoints)
    return CornerDetector(cfg.detector, fov=fov, fov_margin=cfg.run.fov_margin)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: PipelineConfig) -> int:
    s = cfg.synth
    size = s.texture_size or int(round(s.frame_size * 3.4))
    tex = generate_texture(s.seed, size)
    path = dataclasses.replace(s.path, steps=s.frames - 1, random_walk_seed=s.path.random_walk_seed + s.seed)
    photo = dataclasses.replace(s.photometric, seed=s.photometric.seed + s.seed)
    occ = OccluderSpec(count=s.occluders, coverage=s.occluder_coverage, seed=3 + s.seed)
    seq = generate_sequence(tex, path, photo, occ, frame_size=s.frame_size, texture_seed=s.seed)
    out = Path(args.out)
    manifest = write_sequence(seq, out)
    write_effective_config(out, cfg)
    print(json.dumps(manifest, indent=1))
    return EXIT_OK


def cmd_detect(args, cfg: PipelineConfig) -> int:
    frames, ids = load_frames(args.frames)
    fov = find_fov(args, args.frames)
    det = CornerDetector(cfg.detector, fov=fov, fov_margin=cfg.run.fov_margin)
    out = Path(args.out)
    for frame, stem in zip(frames, ids):
        save_keypoints(out / f"{stem}.json", det(frame, stem))
    print(f"wrote {len(frames)} keypoint files to {out}")
    return EXIT_OK


def _register(args, cfg: PipelineConfig, out: Path):
    frames, ids = load_frames(args.frames)
    masks = load_masks(args.masks, ids, frames[0].shape)
    fov = find_fov(args, args.frames)
    trace = register_sequence(frames, masks, _detector(args, cfg, fov), cfg.registration(),
                              frame_ids=ids, workers=cfg.run.workers)
    save_trace(out / "trace.json", trace)
    for e in trace.entries:
        print(f"{e.source:6d} -> {e.target:6d}  {e.result.status:28s} inliers={e.result.inlier_count}"
              f" matches={e.result.match_count}")
    print(f"accepted {len(trace.accepted())} of {len(trace.entries)} attempts over {trace.frame_count} frames")
    if trace.terminated_at is not None:
        print(f"terminated_at {trace.terminated_at}")
    return frames, ids, fov, trace


def cmd_register(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    write_effective_config(out, cfg)
    *_, trace = _register(args, cfg, out)
    return EXIT_TERMINATED if trace.terminated_at is not None else EXIT_OK


def _mosaic(frames, fov, trace: RegistrationTrace, cfg: PipelineConfig, out: Path) -> dict:
    if trace.frame_count != len(frames):
        raise UsageError(f"trace covers {trace.frame_count} frames but {len(frames)} were found")
    absolute = chain(trace, 0, cfg.run.mosaic_identity_substitution)
    h, w = frames[0].shape[:2]
    layout = compute_canvas(absolute, (w, h))
    fused = render_mosaic(frames, layout, fov, cfg.fusion, cfg.run.mosaic_stride, cfg.run.workers)
    paths = save_mosaic(out, fused, layout)
    ws = fused.weight_sum[fused.coverage]
    stats = {"covered_pixels": int(fused.coverage.sum()),
             "weight_sum_min": float(ws.min()) if ws.size else None,
             "weight_sum_max": float(ws.max()) if ws.size else None}
    (out / "fusion_stats.json").write_text(json.dumps(stats, indent=1) + "\n")
    print(f"mosaic {layout.canvas_width}x{layout.canvas_height} -> {paths['mosaic']}")
    return paths


def _load_trace_arg(path) -> RegistrationTrace:
    if path is None or not Path(path).is_file():
        raise UsageError(f"trace file not found: {path}")
    return load_trace(path)


def cmd_mosaic(args, cfg: PipelineConfig) -> int:
    trace = _load_trace_arg(args.trace)
    frames, _ = load_frames(args.frames)
    out = Path(args.out)
    write_effective_config(out, cfg)
    _mosaic(frames, find_fov(args, args.frames), trace, cfg, out)
    return EXIT_OK


def _eval(frames, fov, trace: RegistrationTrace, cfg: PipelineConfig, out: Path, ns, gt) -> None:
    if trace.frame_count != len(frames):
        raise UsageError(f"trace covers {trace.frame_count} frames but {len(frames)} were found")
    report = eval_all(frames, trace, ns, cfg.eval, fov, cfg.run.workers)
    out.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(out / "metrics.csv", report)
    write_aggregates_json(out / "aggregates.json", report)
    write_quantiles_csv(out / "quantiles.csv", report)
    for a in report.aggregates.values():
        print(f"s(n={a.n}) = {a.mean:.4f} +- {a.std:.4f}  ({a.count} frames)")
    if gt is not None:
        h, w = frames[0].shape[:2]
        err = gt_corner_error(trace, gt, (w, h), cfg.eval.identity_substitution)
        with (out / "gt_corner_error.csv").open("w") as fh:
            fh.write("frame_index,corner_error_px\n")
            for k, e in enumerate(err):
                fh.write(f"{k},{float(e)!r}\n")
        last = err[~np.isnan(err)]
        if len(last):
            print(f"gt_corner_error final = {last[-1]:.3f} px, max = {last.max():.3f} px")


def cmd_eval(args, cfg: PipelineConfig) -> int:
    trace = _load_trace_arg(args.trace)
    frames, _ = load_frames(args.frames)
    out = Path(args.out)
    write_effective_config(out, cfg)
    ns = [args.n] if args.n else [1, 2, 3, 4, 5]
    _eval(frames, find_fov(args, args.frames), trace, cfg, out, ns, find_gt(args, args.frames))
    return EXIT_OK


def cmd_run(args, cfg: PipelineConfig) -> int:
    out = Path(args.out)
    write_effective_config(out, cfg)
    frames, ids, fov, trace = _register(args, cfg, out)
    _mosaic(frames, fov, trace, cfg, out)
    ns = [args.n] if args.n else [1, 2, 3, 4, 5]
    _eval(frames, fov, trace, cfg, out, ns, find_gt(args, args.frames))
    return EXIT_TERMINATED if trace.terminated_at is not None else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="seed for RANSAC and the synthetic generator")
    common.add_argument("--workers", type=int, help="worker threads (results do not depend on it)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")

    inputs = argparse.ArgumentParser(add_help=False)
    inputs.add_argument("--frames", required=True, help="directory of PNG frames, ordered by filename")
    inputs.add_argument("--fov", help="field-of-view mask PNG (default: <frames>/../fov.png if present)")

    reg = argparse.ArgumentParser(add_help=False)
    reg.add_argument("--masks", help="directory of irrelevant-region mask PNGs named like the frames")
    reg.add_argument("--keypoints", help="directory of keypoint JSON files named like the frames")

    ev = argparse.ArgumentParser(add_help=False)
    ev.add_argument("--n", type=int, choices=range(1, 6), help="evaluate a single n (default 1..5)")
    ev.add_argument("--gt", help="ground-truth trace (default: <frames>/../gt_trace.json if present)")

    subst = argparse.ArgumentParser(add_help=False)
    subst.add_argument("--identity-substitution", action=argparse.BooleanOptionalAction, default=None,
                       help="replace discarded steps by the identity when chaining")

    p = argparse.ArgumentParser(prog="fetomosaic", description="Sequential keypoint-based video mosaicking.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic sequence")
    sub.add_parser("detect", parents=[common, inputs], help="write baseline keypoint files")
    sub.add_parser("register", parents=[common, inputs, reg], help="register the sequence")
    m = sub.add_parser("mosaic", parents=[common, inputs, subst], help="blend a registered sequence")
    m.add_argument("--trace", required=True)
    e = sub.add_parser("eval", parents=[common, inputs, ev, subst], help="similarity and drift metrics")
    e.add_argument("--trace", required=True)
    sub.add_parser("run", parents=[common, inputs, reg, ev, subst], help="register + mosaic + eval")
    return p


COMMANDS = {"synth": cmd_synth, "detect": cmd_detect, "register": cmd_register,
            "mosaic": cmd_mosaic, "eval": cmd_eval, "run": cmd_run}


def main(argv=None) -> int:
    level = os.environ.get("MOSAIC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MosaicError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
