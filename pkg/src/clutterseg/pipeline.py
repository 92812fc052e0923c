"""End-to-end segmentation of a scene bundle into 3D instances."""

from __future__ import annotations

import logging
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

from .config import PipelineConfig
from .geometry import GeometryParams, PointCloud, SuperVoxelSet, build_supervoxels, estimate_normals, fuse_and_downsample
from .cross_view_grouping import LeafGraph, MaskTable, build_mask_table, construct_leaf_graph, group_by_similarity, substitute_residuals
from .mask_hierarchy import InstanceForest, build_forests
from .instance_map import Instance3D, majority_vote
from .semantics import table_embedder

logger = logging.getLogger(__name__)


@dataclass
class SegmentationResult:
    cloud: PointCloud
    supervoxels: SuperVoxelSet
    forests: list[InstanceForest]
    table: MaskTable
    graph: LeafGraph
    instances: list[Instance3D]
    timings: dict = field(default_factory=dict)
    stats: dict = field(default_factory=dict)


@contextmanager
def _timed(timings, name):
    t0 = time.perf_counter()
    yield
    timings[name] = time.perf_counter() - t0
    logger.info("%-13s %.3f s", name, timings[name])


def segment_scene(bundle, cfg: PipelineConfig | None = None, substitution: bool | None = None,
                  threads: int = 1) -> SegmentationResult:
    cfg = cfg or PipelineConfig()
    if substitution is None:
        substitution = cfg.substitution
    timings: dict[str, float] = {}
    params = GeometryParams.from_config(cfg)
    executor = ThreadPoolExecutor(threads) if threads > 1 else None
    try:
        with _timed(timings, "geometry"):
            cloud = fuse_and_downsample(bundle.frames, params)
            estimate_normals(cloud, params.k_nn)
            supervoxels = build_supervoxels(cloud, params)
        with _timed(timings, "hierarchy"):
            forests = build_forests(bundle.frames, cfg.tau_contain)
        with _timed(timings, "occupancy"):
            table = build_mask_table(bundle.frames, forests, cloud, supervoxels,
                                     cfg.visibility_tol_m, cfg.eps, executor)
    finally:
        if executor is not None:
            executor.shutdown()
    with _timed(timings, "grouping"):
        graph = construct_leaf_graph(forests, table, cfg.tau_spat, cfg.tau_sem)
        merges = group_by_similarity(graph)
    sub = {"rounds": [], "iterations": 0, "bound": max((f.max_depth for f in forests), default=0)}
    with _timed(timings, "substitution"):
        if substitution:
            sub = substitute_residuals(graph, forests)
    with _timed(timings, "vote"):
        instances = majority_vote(graph.groups(), table, supervoxels, table_embedder(table), cfg.vote_min_score)
    timings["total"] = sum(timings.values())
    stats = {
        "points": len(cloud),
        "supervoxels": supervoxels.count,
        "masks": len(table.keys),
        "leaves": sum(len(f.leaves) for f in forests),
        "merges": merges,
        "substitution": sub,
        "groups": len(graph.sets),
        "instances": len(instances),
    }
    logger.info("%d instances from %d groups", len(instances), len(graph.sets))
    return SegmentationResult(cloud, supervoxels, forests, table, graph, instances, timings, stats)


def substitution_histogram(results) -> dict[int, int]:
    """Count of scenes by the number of substitution rounds that changed something."""
    return dict(sorted(Counter(r.stats["substitution"]["iterations"] for r in results).items()))
