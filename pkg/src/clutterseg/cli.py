"""Command-line entry point: segment, query, update, eval, gen-fixture."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .config import ConfigError, PipelineConfig, load_config, parse_override
from .scene_io import BundleError

logger = logging.getLogger("clutterseg")

EXIT_OK, EXIT_INPUT, EXIT_INVARIANT = 0, 1, 2


class InvariantError(RuntimeError):
    """An internal consistency check failed."""


def _config(args) -> PipelineConfig:
    path = getattr(args, "config", None) or os.environ.get("CLUTTERSEG_CONFIG")
    if path and not Path(path).exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = load_config(path)
    overrides = dict(parse_override(s) for s in getattr(args, "set", None) or [])
    return cfg.with_overrides(**overrides) if overrides else cfg


def _threads(args) -> int:
    return args.threads if args.threads else (os.cpu_count() or 1)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- segment

def cmd_segment(args) -> int:
    from .pipeline import segment_scene
    from .scene_io import load_scene_bundle, write_instance_output

    cfg = _config(args)
    t0 = time.perf_counter()
    bundle = load_scene_bundle(args.scene)
    load_s = time.perf_counter() - t0
    substitution = False if args.no_substitution else None
    res = segment_scene(bundle, cfg, substitution=substitution, threads=_threads(args))
    _check_segmentation(res)
    out = Path(args.out)
    stats = res.stats
    write_instance_output(res.instances, res.cloud, res.supervoxels, out,
                          extra={"scene_id": bundle.scene_id, "config": cfg.to_dict()})
    _dump(out / "stats.json", {k: v for k, v in stats.items()})
    _dump(out / "timing.json", {"load": load_s, **res.timings})
    logger.info("stage-1 merges: %d, stage-2 merges: %d", stats["merges"]["spatial"], stats["merges"]["semantic"])
    logger.info("substitution rounds: %d (bound %d)", stats["substitution"]["iterations"], stats["substitution"]["bound"])
    print(f"{len(res.instances)} instances written to {out}")
    return EXIT_OK


def _check_segmentation(res) -> None:
    seen = {}
    for inst in res.instances:
        for k in np.asarray(inst.supervoxels).tolist():
            if k in seen:
                raise InvariantError(f"super-voxel {k} assigned to instances {seen[k]} and {inst.id}")
            seen[k] = inst.id
    ids = [i.id for i in res.instances]
    if ids != list(range(len(ids))):
        raise InvariantError(f"instance ids are not 0..n-1: {ids}")


# ---------------------------------------------------------------- query

def cmd_query(args) -> int:
    from .scene_io import read_instance_manifest, read_query_embedding
    from .semantics import identify_target

    manifest = read_instance_manifest(args.instances)
    instances = [SimpleNamespace(id=int(m["id"]), confidence=float(m["confidence"]),
                                 embedding=np.asarray(m["embedding"], float)) for m in manifest["instances"]]
    dim = len(instances[0].embedding) if instances else None
    query = read_query_embedding(args.text_embedding)
    if dim is not None and len(query) != dim:
        raise ValueError(f"embedding dimension mismatch: query {len(query)} vs instances {dim}")
    result = identify_target(query, instances)
    top = result.top(args.top)
    for rank, (iid, score) in enumerate(top, 1):
        print(f"{rank}\tinstance {iid}\tscore {score:.6f}")
    out = Path(args.out) if args.out else Path(args.instances) / "query_result.json"
    _dump(out, {"query": str(args.text_embedding), "ranking": [{"instance": i, "score": s} for i, s in top]})
    return EXIT_OK


# ---------------------------------------------------------------- update

def cmd_update(args) -> int:
    from .scene_io import load_frame
    from .scene_update import SceneState, UpdateParams, analyze_post_frame, apply_update
    from .geometry import GeometryParams

    cfg = _config(args)
    state = SceneState.load(args.scene)
    dim = len(next(iter(state.instances.values())).embedding) if state.instances else 0
    post = load_frame(Path(args.post_frame), 0, dim, require_depth=False)
    traces = {} if args.traces else None
    t0 = time.perf_counter()
    report = analyze_post_frame(state, post, UpdateParams.from_config(cfg), threads=_threads(args), traces=traces)
    elapsed = time.perf_counter() - t0
    new_state = apply_update(state, report, GeometryParams.from_config(cfg))
    out = Path(args.out)
    new_state.save(out)
    _dump(out / "change_report.json", report.to_dict())
    (out / "change_report.txt").write_text(report.to_text())
    _dump(out / "timing.json", {"update": elapsed})
    if traces is not None:
        _dump(out / "traces.json", {str(k): [list(t) for t in v] for k, v in traces.items()})
    for c in report.changes:
        extra = f" ({c.optimization})" if c.optimization and c.optimization != "ok" else ""
        print(f"instance {c.instance_id}: {c.status}{extra} iou {c.iou:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    from .evaluation import (instance_ap, ground_truth_from_bundle, predictions_from_output, semantic_iou,
                             voxelize, write_report)
    from .fixtures import load_ground_truth
    from .scene_io import load_scene_bundle, read_instance_manifest, read_point_file, read_query_embedding
    from .semantics import identify_target

    cfg = _config(args)
    gt_path = Path(args.gt)
    record = load_ground_truth(gt_path)
    bundle = load_scene_bundle(gt_path)
    gts = ground_truth_from_bundle(bundle, record, cfg)
    if not gts:
        raise BundleError(f"incomplete bundle: no ground-truth instances in {gt_path}")
    out = Path(args.out) if args.out else Path(args.pred)
    if args.semantic:
        manifest = read_instance_manifest(args.pred)
        insts = [SimpleNamespace(id=int(m["id"]), confidence=float(m["confidence"]),
                                 embedding=np.asarray(m["embedding"], float)) for m in manifest["instances"]]
        pts = read_point_file(Path(args.pred) / "points.ply")
        xyz = np.stack([pts["x"], pts["y"], pts["z"]], axis=1)
        gt_cat: dict = {}
        for g in gts:
            gt_cat[g.category] = gt_cat.get(g.category, frozenset()) | g.voxels
        predicted = {}
        for q in sorted((gt_path / "queries").glob("category_*.f32")):
            c = int(q.stem.split("_")[1])
            if not insts:
                predicted[c] = frozenset()
                continue
            target = identify_target(read_query_embedding(q), insts).target
            predicted[c] = voxelize(xyz[pts["label"] == target], cfg.eval_voxel_m)
        report = semantic_iou(predicted, gt_cat)
    else:
        preds = predictions_from_output(args.pred, cfg.eval_voxel_m)
        report = instance_ap(preds, gts, interpolation="all" if cfg.ap_interpolation == "all" else "101")
    write_report(out, report)
    print(report.to_text(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- gen-fixture

def cmd_gen_fixture(args) -> int:
    from .fixtures import FixtureSpec, generate_scene, write_ground_truth
    from .scene_io import write_scene_bundle

    spec = FixtureSpec(seed=args.seed, n_objects=args.objects, n_views=args.views, p_split=args.p_split,
                       p_merge=args.p_merge, sigma=args.sigma, n_categories=args.categories,
                       width=args.width, height=args.height)
    if spec.n_views < 2:
        logger.warning("only %d view: grouping needs at least 2 frames", spec.n_views)
    bundle, gt = generate_scene(spec)
    if bundle is None:
        bundle = SimpleNamespace(frames=tuple(gt.frames), scene_id=f"fixture_{spec.seed}",
                                 embedding_dim=spec.embedding_dim, units="meters", gravity_axis="z")
    write_scene_bundle(args.out, bundle)
    write_ground_truth(args.out, gt)
    print(f"fixture written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="clutterseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.add_argument("--threads", type=int, default=0, help="worker count (default: available cores)")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file (fallback: $CLUTTERSEG_CONFIG)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config value")

    s = sub.add_parser("segment", help="segment a scene bundle into 3D instances")
    s.add_argument("--scene", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--no-substitution", action="store_true", help="skip residual parent substitution")
    with_config(s)
    s.set_defaults(func=cmd_segment)

    q = sub.add_parser("query", help="rank instances against a text embedding")
    q.add_argument("--instances", required=True)
    q.add_argument("--text-embedding", required=True)
    q.add_argument("--top", type=int, default=5)
    q.add_argument("--out")
    q.set_defaults(func=cmd_query)

    u = sub.add_parser("update", help="apply one post-interaction frame")
    u.add_argument("--scene", required=True, help="segment output directory")
    u.add_argument("--post-frame", required=True)
    u.add_argument("--out", required=True)
    u.add_argument("--traces", action="store_true", help="also write per-instance optimization traces")
    with_config(u)
    u.set_defaults(func=cmd_update)

    e = sub.add_parser("eval", help="score predictions against fixture ground truth")
    e.add_argument("--pred", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--semantic", action="store_true")
    e.add_argument("--out")
    with_config(e)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gen-fixture", help="write a synthetic scene bundle with ground truth")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--objects", type=int, default=10)
    g.add_argument("--views", type=int, default=8)
    g.add_argument("--p-split", type=float, default=0.0)
    g.add_argument("--p-merge", type=float, default=0.0)
    g.add_argument("--sigma", type=float, default=0.02)
    g.add_argument("--categories", type=int, default=None)
    g.add_argument("--width", type=int, default=640)
    g.add_argument("--height", type=int, default=480)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_fixture)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InvariantError as exc:
        print(f"error: invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (BundleError, ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
