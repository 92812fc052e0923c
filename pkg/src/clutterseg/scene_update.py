"""Post-interaction scene update from a single posed RGB-D frame.

Stored instances are re-associated with the new frame's masks, instances
whose projected footprint no longer agrees with their mask are flagged as
displaced, and each displaced instance's rigid motion is recovered by
descending a contour + photometric + gravity-prior loss.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .config import PipelineConfig
from .geometry import GeometryParams, knn_edges, pair_distance, project_points
from .mask_hierarchy import build_instance_forest
from .scene_io import UNASSIGNED, read_instance_manifest, read_point_file, write_point_file

logger = logging.getLogger(__name__)

STATIC, DISPLACED, UNMATCHED = "static", "displaced", "unmatched"


# ---------------------------------------------------------------- transforms

@dataclass(frozen=True)
class RigidTransform:
    """x -> R x + t in world coordinates; R stored as an axis-angle vector."""

    rotvec: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    @property
    def matrix(self) -> np.ndarray:
        return Rotation.from_rotvec(np.asarray(self.rotvec, float)).as_matrix()

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.translation, float)

    @property
    def angle(self) -> float:
        return float(np.linalg.norm(self.rotvec))

    def as_matrix4(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.matrix
        T[:3, 3] = self.t
        return T

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, float) @ self.matrix.T + self.t

    def compose(self, first: "RigidTransform") -> "RigidTransform":
        """The transform applying ``first`` and then ``self``."""
        R = self.matrix @ first.matrix
        return RigidTransform.from_matrix(R, self.matrix @ first.t + self.t)

    def inverse(self) -> "RigidTransform":
        Rt = self.matrix.T
        return RigidTransform.from_matrix(Rt, -Rt @ self.t)

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0)) -> "RigidTransform":
        rv = Rotation.from_matrix(np.asarray(R, float)).as_rotvec()
        return cls(tuple(float(x) for x in rv), tuple(float(x) for x in np.asarray(t, float)))

    @classmethod
    def about(cls, rotvec, t, center) -> "RigidTransform":
        """x -> R (x - c) + c + t, re-expressed as a world transform."""
        R = Rotation.from_rotvec(np.asarray(rotvec, float)).as_matrix()
        c = np.asarray(center, float)
        return cls(tuple(float(x) for x in rotvec), tuple(float(x) for x in c + np.asarray(t, float) - R @ c))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()


def rotation_error_deg(R_est, R_true) -> float:
    cos = (np.trace(np.asarray(R_est).T @ np.asarray(R_true)) - 1.0) / 2.0
    return math.degrees(math.acos(float(np.clip(cos, -1.0, 1.0))))


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class StageWeights:
    chamfer: float
    photo: float
    reg_z: float

    def __post_init__(self):
        if min(self.chamfer, self.photo, self.reg_z) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass(frozen=True)
class UpdateParams:
    tau_iou: float = 0.75
    coarse: StageWeights = StageWeights(50.0, 0.5, 10.0)
    fine: StageWeights = StageWeights(10.0, 2.0, 1.0)
    coarse_iters: int = 200
    fine_iters: int = 100
    coarse_step: float = 0.01
    fine_step: float = 0.005
    fd_step: float = 1e-4
    momentum: float = 0.9
    patience: int = 25
    init_centroid_align: bool = True
    tau_sem: float = 0.65
    tau_contain: float = 0.95
    cosine_weight: float = 0.5
    visibility_tol_m: float = 0.02
    voxel_size_m: float = 0.005
    reg_z_unit_m: float = 0.001
    init_yaw_scan_deg: float = 45.0

    def __post_init__(self):
        if self.init_yaw_scan_deg < 0:
            raise ValueError("init_yaw_scan_deg must be >= 0")
        if not self.reg_z_unit_m > 0:
            raise ValueError("reg_z_unit_m must be > 0")
        if not 0.0 < self.tau_iou < 1.0:
            raise ValueError("tau_iou must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.coarse_iters < 0 or self.fine_iters < 0:
            raise ValueError("iteration counts must be >= 0")
        if not (self.coarse_step > 0 and self.fine_step > 0 and self.fd_step > 0):
            raise ValueError("step sizes must be > 0")

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "UpdateParams":
        return cls(
            tau_iou=cfg.tau_iou,
            coarse=StageWeights(cfg.coarse_chamfer, cfg.coarse_photo, cfg.coarse_reg_z),
            fine=StageWeights(cfg.fine_chamfer, cfg.fine_photo, cfg.fine_reg_z),
            coarse_iters=cfg.coarse_iters, fine_iters=cfg.fine_iters,
            coarse_step=cfg.coarse_step, fine_step=cfg.fine_step, fd_step=cfg.fd_step,
            momentum=cfg.momentum, patience=cfg.patience, init_centroid_align=cfg.init_centroid_align,
            tau_sem=cfg.tau_sem, tau_contain=cfg.tau_contain, cosine_weight=cfg.match_cosine_weight,
            visibility_tol_m=cfg.visibility_tol_m, voxel_size_m=cfg.voxel_size_m,
            reg_z_unit_m=cfg.reg_z_unit_m, init_yaw_scan_deg=cfg.init_yaw_scan_deg,
        )


# ---------------------------------------------------------------- scene state

@dataclass
class SceneInstance:
    id: int
    points: np.ndarray          # indices into the scene arrays
    embedding: np.ndarray
    confidence: float = 0.0


@dataclass
class SceneState:
    positions: np.ndarray
    colors: np.ndarray
    normals: np.ndarray
    labels: np.ndarray          # instance id per point, UNASSIGNED elsewhere
    supervoxels: np.ndarray     # super-voxel id per point
    instances: dict             # id -> SceneInstance
    meta: dict = field(default_factory=dict)

    def instance_points(self, iid) -> np.ndarray:
        return self.positions[self.instances[iid].points]

    def copy(self) -> "SceneState":
        return SceneState(self.positions.copy(), self.colors.copy(), self.normals.copy(), self.labels.copy(),
                          self.supervoxels.copy(), {k: replace(v) for k, v in self.instances.items()},
                          dict(self.meta))

    @classmethod
    def from_segmentation(cls, result) -> "SceneState":
        n = len(result.cloud)
        labels = np.full(n, UNASSIGNED, dtype=np.int64)
        inst = {}
        for i in result.instances:
            labels[i.points] = i.id
            inst[i.id] = SceneInstance(i.id, np.asarray(i.points), np.asarray(i.embedding, float), float(i.confidence))
        return cls(result.cloud.positions.copy(), result.cloud.colors.copy(), result.cloud.normals.copy(),
                   labels, result.supervoxels.point_labels.copy(), inst)

    @classmethod
    def load(cls, path) -> "SceneState":
        path = Path(path)
        manifest = read_instance_manifest(path)
        rec = read_point_file(path / "points.ply")
        pos = np.stack([rec["x"], rec["y"], rec["z"]], axis=1)
        col = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1).astype(float)
        nrm = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(float)
        labels = rec["label"].astype(np.int64)
        inst = {}
        for m in manifest["instances"]:
            iid = int(m["id"])
            inst[iid] = SceneInstance(iid, np.flatnonzero(labels == iid), np.asarray(m["embedding"], float),
                                      float(m["confidence"]))
        meta = {k: v for k, v in manifest.items() if k != "instances"}
        return cls(pos, col, nrm, labels, rec["supervoxel"].astype(np.int64), inst, meta)

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        write_point_file(path / "points.ply", self.positions, self.colors, self.normals,
                         self.labels.astype(np.int32), self.supervoxels.astype(np.int32))
        manifest = {
            "instances": [
                {"id": int(i.id), "confidence": float(i.confidence),
                 "supervoxels": sorted(set(self.supervoxels[i.points].tolist())),
                 "n_points": int(len(i.points)), "members": [],
                 "embedding": [float(x) for x in i.embedding]}
                for i in sorted(self.instances.values(), key=lambda i: i.id)
            ],
            "n_points": int(len(self.positions)),
            "n_supervoxels": int(self.supervoxels.max() + 1) if len(self.supervoxels) else 0,
        }
        (path / "instances.json").write_text(json.dumps(manifest, indent=1))
        return path


# ---------------------------------------------------------------- projection helpers

def splat_radius(z, focal, voxel) -> np.ndarray:
    """Pixel radius covering one voxel at depth z (at least one pixel)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.rint(0.5 * voxel * focal / np.maximum(z, 1e-6))
    return np.clip(r, 1, 8).astype(np.int64)


def visible_mask(points, frame, tol=0.02) -> np.ndarray:
    """Points that land in the image and are not hidden behind the frame's depth."""
    H, W = frame.shape
    u, v, z = project_points(points, frame.intrinsics, frame.pose)
    ok = (z > 1e-6) & (u > -0.5) & (u < W - 0.5) & (v > -0.5) & (v < H - 0.5)
    ui = np.clip(np.rint(u), 0, W - 1).astype(np.int64)
    vi = np.clip(np.rint(v), 0, H - 1).astype(np.int64)
    d = np.asarray(frame.depth)[vi, ui]
    return ok & ((d <= 0) | (z <= d + tol))


def footprint(points, frame, voxel=0.005, dilate=1, cull=None) -> np.ndarray:
    """Boolean image covered by splatted projections of ``points``.

    Each point paints a square whose half-size matches one voxel at its
    depth, and the result is dilated by ``dilate`` pixels. ``cull`` is an
    optional boolean selecting which points to draw.
    """
    H, W = frame.shape
    F = np.zeros((H, W), dtype=bool)
    crop, (v0, u0) = footprint_crop(points, frame, voxel, dilate, cull)
    if crop is not None:
        F[v0:v0 + crop.shape[0], u0:u0 + crop.shape[1]] = crop
    return F


def footprint_crop(points, frame, voxel=0.005, dilate=1, cull=None, clip=True):
    """Footprint restricted to its bounding box: (crop, (row, col) offset).

    With ``clip=False`` the crop may extend past the image and the offset
    may be negative.
    """
    H, W = frame.shape
    pts = np.asarray(points, float)
    if cull is not None:
        pts = pts[cull]
    if len(pts) == 0:
        return None, (0, 0)
    u, v, z = project_points(pts, frame.intrinsics, frame.pose)
    ok = z > 1e-6
    u, v, z = u[ok], v[ok], z[ok]
    r = splat_radius(z, frame.intrinsics[0], voxel)
    ui, vi = np.rint(u).astype(np.int64), np.rint(v).astype(np.int64)
    reach = r - 1 + dilate
    inside = (ui + reach >= 0) & (ui - reach < W) & (vi + reach >= 0) & (vi - reach < H)
    if not inside.any():
        return None, (0, 0)
    ui, vi, r = ui[inside], vi[inside], r[inside]
    pad = int(r.max()) + dilate + 1
    u0, v0 = int(ui.min()) - pad, int(vi.min()) - pad
    h, w = int(vi.max()) + pad + 1 - v0, int(ui.max()) + pad + 1 - u0
    img = np.zeros((h, w), dtype=bool)
    for rad in np.unique(r):
        sel = r == rad
        one = np.zeros((h, w), dtype=bool)
        one[vi[sel] - v0, ui[sel] - u0] = True
        img |= ndimage.binary_dilation(one, np.ones((2 * rad - 1, 2 * rad - 1), bool)) if rad > 1 else one
    if dilate:
        img = ndimage.binary_dilation(img, iterations=dilate)
    # gaps between sparse surface samples are not part of the silhouette
    img = ndimage.binary_fill_holes(img)
    if not clip:
        return img, (v0, u0)
    # clip to the image
    a0, b0 = max(v0, 0), max(u0, 0)
    a1, b1 = min(v0 + h, H), min(u0 + w, W)
    if a0 >= a1 or b0 >= b1:
        return None, (0, 0)
    return img[a0 - v0:a1 - v0, b0 - u0:b1 - u0], (a0, b0)


def mask_iou(a, b) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def boundary_pixels(mask) -> np.ndarray:
    """(u, v) coordinates of mask pixels with a 4-neighbour outside the mask.

    The image border does not count as outside: a mask cut by the frame
    edge has no object contour there.
    """
    m = np.asarray(mask, bool)
    inner = ndimage.binary_erosion(m, border_value=1)
    vv, uu = np.nonzero(m & ~inner)
    return np.stack([uu, vv], axis=1).astype(float)


# ---------------------------------------------------------------- matching

def _instance_footprints(state: SceneState, frame, voxel, tol):
    out = {}
    for iid in sorted(state.instances):
        pts = state.instance_points(iid)
        out[iid] = footprint(pts, frame, voxel, 1, visible_mask(pts, frame, tol))
    return out


def match_post_masks(post_frame, state: SceneState, params: UpdateParams | None = None,
                     footprints: dict | None = None) -> dict:
    """One-to-one assignment of post-frame masks to stored instances.

    Candidates are the forest leaves of the post frame, except that leaves
    whose best cosine falls below ``tau_sem`` are replaced by their parent
    whenever the parent's whole subtree is of that kind. Pairs are taken
    greedily by ``w * cosine + (1 - w) * overlap``, where overlap is the
    share of the mask covered by the instance's projected footprint.
    """
    params = params or UpdateParams()
    if not state.instances or not post_frame.masks:
        return {}
    forest = build_instance_forest(post_frame.index, post_frame.masks, params.tau_contain)
    ids = sorted(state.instances)
    E = np.stack([state.instances[i].embedding / np.linalg.norm(state.instances[i].embedding) for i in ids])

    def best_cos(mid):
        return float((E @ np.asarray(post_frame.embeddings[mid], float)).max())

    cands = set(forest.leaves)
    changed = True
    while changed:
        changed = False
        for leaf in sorted(cands):
            if leaf not in cands or best_cos(leaf) >= params.tau_sem:
                continue
            parent = forest.nodes[leaf].parent
            if parent is None:
                continue
            sub = [d for d in forest.descendants(parent) if d in cands]
            below = set(forest.descendants(parent))
            if any(d in cands and best_cos(d) >= params.tau_sem for d in below):
                continue
            cands -= set(sub)
            cands.add(parent)
            changed = True
    if footprints is None:
        footprints = _instance_footprints(state, post_frame, params.voxel_size_m, params.visibility_tol_m)
    pairs = []
    w = params.cosine_weight
    for mid in sorted(cands):
        m = forest.nodes[mid].mask
        e = np.asarray(post_frame.embeddings[mid], float)
        area = forest.nodes[mid].area
        for k, iid in enumerate(ids):
            cos = float(E[k] @ e)
            if cos < params.tau_sem:
                continue
            overlap = np.count_nonzero(m & footprints[iid]) / area
            pairs.append((-(w * cos + (1 - w) * overlap), iid, mid))
    pairs.sort()
    matched, used = {}, set()
    for _, iid, mid in pairs:
        if iid in matched or mid in used:
            continue
        matched[iid] = mid
        used.add(mid)
    return matched


def detect_displaced(points, mask, frame, tau_iou=0.75, voxel=0.005, tol=0.02):
    """(status, IoU) of an instance against its matched post mask."""
    if mask is None:
        return UNMATCHED, 0.0
    F = footprint(points, frame, voxel, 1, visible_mask(points, frame, tol))
    iou = mask_iou(F, np.asarray(mask, bool))
    return (DISPLACED if iou < tau_iou else STATIC), iou


# ---------------------------------------------------------------- losses

@dataclass
class ContourSets:
    P: np.ndarray        # k x 2 sub-pixel (u, v)
    C: np.ndarray        # m x 2 boundary pixels of the mask


class DistanceField:
    """Euclidean distance to the nearest pixel of a point set, sampled bilinearly."""

    def __init__(self, C, shape):
        self.shape = shape
        H, W = shape
        C = np.asarray(C, float)
        if len(C) == 0:
            raise ValueError("degenerate contour")
        img = np.ones(shape, dtype=bool)
        ci = np.rint(C).astype(np.int64)
        img[ci[:, 1], ci[:, 0]] = False
        self.field = ndimage.distance_transform_edt(img)

    def __call__(self, P) -> np.ndarray:
        H, W = self.shape
        P = np.asarray(P, float)
        u = np.clip(P[:, 0], 0, W - 1)
        v = np.clip(P[:, 1], 0, H - 1)
        d = ndimage.map_coordinates(self.field, [v, u], order=1, mode="nearest")
        # outside the image, add the straight-line distance back to the border
        return d + np.hypot(P[:, 0] - u, P[:, 1] - v)


def _grid_for(P, C, pad=2):
    pts = np.vstack([P, C])
    lo = np.floor(pts.min(axis=0)).astype(int) - pad
    hi = np.ceil(pts.max(axis=0)).astype(int) + pad
    return lo, (hi[1] - lo[1] + 1, hi[0] - lo[0] + 1)


def chamfer_loss(P, C, field: DistanceField | None = None) -> float:
    """Mean nearest distance P -> C plus mean nearest distance C -> P (pixels)."""
    P = np.asarray(P, float).reshape(-1, 2)
    C = np.asarray(C, float).reshape(-1, 2)
    if len(P) == 0 or len(C) == 0:
        raise ValueError("degenerate contour")
    if field is None:
        lo, shape = _grid_for(P, C)
        field = DistanceField(C - lo, shape)
        pc = field(P - lo)
    else:
        pc = field(P)
    cp, _ = cKDTree(P).query(C, k=1)
    return float(pc.mean() + cp.mean())


def bilinear(image, u, v) -> np.ndarray:
    img = np.asarray(image, float)
    return np.stack([ndimage.map_coordinates(img[..., c], [v, u], order=1, mode="nearest")
                     for c in range(img.shape[2])], axis=1)


def photometric_loss(colors, uv, image, mask, support=None):
    """Mean L1 color difference over points whose projection falls inside ``mask``.

    Returns ``(loss, n_support)``, with loss 0 when no point contributes.
    """
    H, W = np.asarray(mask).shape
    uv = np.asarray(uv, float).reshape(-1, 2)
    ui, vi = np.rint(uv[:, 0]).astype(np.int64), np.rint(uv[:, 1]).astype(np.int64)
    ok = (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
    if support is not None:
        ok &= support
    ok[ok] = np.asarray(mask, bool)[vi[ok], ui[ok]]
    if not ok.any():
        return 0.0, 0
    sampled = bilinear(image, uv[ok, 0], uv[ok, 1])
    diff = np.abs(np.asarray(colors, float)[ok] - sampled).sum(axis=1)
    return float(diff.mean()), int(ok.sum())


def reg_z_loss(t, unit=1.0, dz=None) -> float:
    """Squared vertical translation, with t_z expressed in multiples of ``unit`` meters.

    With ``dz`` (per-point vertical displacements) the mean of dz**2 is used
    instead, which equals t_z**2 for a pure translation and also charges
    tilting an instance off its support.
    """
    if dz is not None:
        return float(np.mean((np.asarray(dz, float) / unit) ** 2))
    return float((np.asarray(t, float)[2] / unit) ** 2)


def total_loss(components, weights: StageWeights) -> float:
    """Weighted sum of (chamfer, photometric, reg_z) components."""
    ch, ph, rz = components
    return weights.chamfer * ch + weights.photo * ph + weights.reg_z * rz


# ---------------------------------------------------------------- optimization

@dataclass
class AlignmentProblem:
    """Everything the loss needs for one instance in one post frame."""

    points: np.ndarray
    colors: np.ndarray
    normals: np.ndarray
    frame: object
    mask: np.ndarray
    voxel: float = 0.005
    tol: float = 0.02
    z_unit: float = 1.0

    def __post_init__(self):
        self.center = self.points.mean(axis=0)
        # rotation coordinates are scaled by this radius so all six are meters
        self.radius = float(max(np.sqrt(((self.points - self.center) ** 2).sum(axis=1).mean()), 1e-3))
        self.C = boundary_pixels(self.mask)
        if len(self.C) == 0:
            raise ValueError("degenerate contour")
        self.field = DistanceField(self.C, self.mask.shape)
        self.image = np.asarray(self.frame.rgb, float)

    def rotvec(self, theta) -> np.ndarray:
        return np.asarray(theta[:3]) / self.radius

    def transformed(self, theta):
        R = Rotation.from_rotvec(self.rotvec(theta)).as_matrix()
        return (self.points - self.center) @ R.T + self.center + theta[3:], R

    def project(self, X):
        u, v, z = project_points(X, self.frame.intrinsics, self.frame.pose)
        return np.stack([u, v], axis=1), z

    def contour_selection(self, theta) -> np.ndarray:
        """Indices of points whose projection lies on the footprint boundary."""
        X, _ = self.transformed(theta)
        uv, z = self.project(X)
        crop, (v0, u0) = footprint_crop(X, self.frame, self.voxel, 1, clip=False)
        if crop is None:
            return np.zeros(0, dtype=np.int64)
        edge = crop & ~ndimage.binary_erosion(crop, border_value=0)
        width = int(splat_radius(np.median(z), self.frame.intrinsics[0], self.voxel)) + 1
        near = ndimage.binary_dilation(edge, iterations=width)
        h, w = crop.shape
        H, W = self.mask.shape
        ui = np.rint(uv[:, 0]).astype(np.int64) - u0
        vi = np.rint(uv[:, 1]).astype(np.int64) - v0
        ok = (z > 1e-6) & (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        ok[ok] = near[vi[ok], ui[ok]]
        # the band around a silhouette that leaves the frame reaches back in
        # along the border; those points have no mask contour to match
        b = width + 1
        ok &= (ui + u0 >= b) & (ui + u0 < W - b) & (vi + v0 >= b) & (vi + v0 < H - b)
        # drop points hidden behind something else in the post frame
        idx = np.flatnonzero(ok)
        gu, gv = ui[idx] + u0, vi[idx] + v0
        d = np.asarray(self.frame.depth)[gv, gu]
        hidden = (d > 0) & (z[idx] > d + self.tol) & ~self.mask[gv, gu]
        return idx[~hidden]

    def contours(self, theta, sel=None) -> ContourSets:
        X, _ = self.transformed(theta)
        sel = self.contour_selection(theta) if sel is None else sel
        uv, z = self.project(X[sel])
        H, W = self.mask.shape
        ok = (z > 1e-6) & (uv[:, 0] >= 0) & (uv[:, 0] <= W - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= H - 1)
        return ContourSets(uv[ok], self.C)

    def components(self, theta, sel=None):
        X, R = self.transformed(theta)
        cs = self.contours(theta, sel)
        if len(cs.P) == 0:
            raise ValueError("degenerate contour")
        ch = chamfer_loss(cs.P, cs.C, self.field)
        uv, _ = self.project(X)
        to_cam = self.frame.pose[:3, 3] - X
        facing = np.einsum("ij,ij->i", self.normals @ R.T, to_cam) > 0
        ph, _ = photometric_loss(self.colors, uv, self.image, self.mask, facing)
        return ch, ph, reg_z_loss(theta[3:], self.z_unit, X[:, 2] - self.points[:, 2])

    def loss(self, theta, weights, sel=None) -> float:
        try:
            return total_loss(self.components(theta, sel), weights)
        except ValueError:
            return math.inf

    def iou(self, theta) -> float:
        X, _ = self.transformed(theta)
        return mask_iou(footprint(X, self.frame, self.voxel, 1), self.mask)

    def yaw_scan(self, theta, weights, half_range_deg=45.0, step_deg=5.0) -> np.ndarray:
        """Best of ``theta`` with its yaw replaced by grid values in +-half_range."""
        best, best_loss = theta, self.loss(theta, weights)
        for deg in np.arange(-half_range_deg, half_range_deg + 1e-9, step_deg):
            cand = theta.copy()
            cand[2] = math.radians(deg) * self.radius
            val = self.loss(cand, weights)
            if val < best_loss:
                best, best_loss = cand, val
        return best

    def centroid_init(self) -> np.ndarray:
        """Translation along the horizontal plane through the centroid that
        brings the projected centroid onto the mask centroid."""
        vv, uu = np.nonzero(self.mask)
        fx, fy, cx, cy = self.frame.intrinsics
        d_cam = np.array([(uu.mean() - cx) / fx, (vv.mean() - cy) / fy, 1.0])
        pose = self.frame.pose
        d = pose[:3, :3] @ d_cam
        o = pose[:3, 3]
        uv, _ = self.project(self.points)
        # shift by the difference between mask centroid and footprint centroid rays
        d0 = pose[:3, :3] @ np.array([(uv[:, 0].mean() - cx) / fx, (uv[:, 1].mean() - cy) / fy, 1.0])
        if abs(d[2]) < 1e-9 or abs(d0[2]) < 1e-9:
            return np.zeros(6)
        h = self.center[2]
        p1 = o + d * (h - o[2]) / d[2]
        p0 = o + d0 * (h - o[2]) / d0[2]
        theta = np.zeros(6)
        theta[3:5] = (p1 - p0)[:2]
        return theta


@dataclass
class OptimizationResult:
    transform: RigidTransform
    iou: float
    loss: float
    init_loss: float
    trace: list
    status: str = "ok"
    early_exit: bool = False
    seconds: float = 0.0


def fd_gradient(f, theta, h=1e-4) -> np.ndarray:
    g = np.zeros_like(theta)
    for k in range(len(theta)):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (f(theta + e) - f(theta - e)) / (2 * h)
    return g


def _descend(problem, theta, weights, iters, step, params, trace, stage, best):
    """Momentum descent on a normalized gradient with accept/reject step control.

    The direction is a momentum average (``params.momentum``) of the
    gradient divided by its RMS, so ``step`` is a length in meters. A step
    that raises the loss is rejected: the step halves and momentum resets.
    Accepted steps grow the step again, up to ``step``. The stage stops
    early once ``params.patience`` iterations pass without the best loss
    dropping by a relative 1e-4.
    """
    m = np.zeros(6)
    lr = step
    cur = problem.loss(theta, weights)
    last_gain = 0
    for it in range(iters):
        if not math.isfinite(cur) or lr < step * 1e-4 or it - last_gain > params.patience:
            break
        trace.append((stage, it, cur))
        if cur < best[0]:
            if cur < best[0] - 1e-4 * abs(best[0]):
                last_gain = it
            best[0], best[1] = cur, theta.copy()
        sel = problem.contour_selection(theta)
        f = lambda th: problem.loss(th, weights, sel)  # noqa: E731
        g = fd_gradient(f, theta, params.fd_step)
        if not np.all(np.isfinite(g)):
            break
        rms = math.sqrt(float(np.mean(g * g)))
        if rms == 0.0:
            break
        m = params.momentum * m + (1 - params.momentum) * g / rms
        cand = theta - lr * m / max(np.linalg.norm(m) / math.sqrt(6), 1e-12)
        # accept on the same contour selection the gradient was taken with
        if f(cand) < f(theta):
            theta = cand
            cur = problem.loss(theta, weights)
            lr = min(lr * 1.2, step)
        else:
            lr *= 0.5
            m[:] = 0.0
    if cur < best[0]:
        best[0], best[1] = cur, theta.copy()
    return theta


def optimize_transform(points, colors, normals, frame, mask, params: UpdateParams | None = None) -> OptimizationResult:
    """Recover the rigid motion that re-aligns an instance with its post mask."""
    params = params or UpdateParams()
    t0 = time.perf_counter()
    try:
        problem = AlignmentProblem(np.asarray(points, float), np.asarray(colors, float),
                                   np.asarray(normals, float), frame, np.asarray(mask, bool), params.voxel_size_m,
                                   params.visibility_tol_m, params.reg_z_unit_m)
    except ValueError:
        return OptimizationResult(RigidTransform.identity(), 0.0, math.inf, math.inf, [], "optimization failed")
    zero = np.zeros(6)
    init_loss = problem.loss(zero, params.coarse)
    theta = zero
    if params.init_centroid_align:
        cand = problem.centroid_init()
        if problem.loss(cand, params.coarse) < init_loss:
            theta = cand
    if params.init_yaw_scan_deg > 0:
        theta = problem.yaw_scan(theta, params.coarse, params.init_yaw_scan_deg)
    if not math.isfinite(problem.loss(theta, params.coarse)):
        return OptimizationResult(RigidTransform.identity(), 0.0, math.inf, init_loss, [], "optimization failed")
    trace: list = []
    best = [problem.loss(theta, params.coarse), theta.copy()]
    _descend(problem, theta, params.coarse, params.coarse_iters, params.coarse_step, params, trace, "coarse", best)
    theta = best[1]
    iou = problem.iou(theta)
    early = iou > params.tau_iou
    final_loss = best[0]
    if not early and params.fine_iters > 0:
        best = [problem.loss(theta, params.fine), theta.copy()]
        _descend(problem, theta, params.fine, params.fine_iters, params.fine_step, params, trace, "fine", best)
        theta = best[1]
        iou = problem.iou(theta)
        final_loss = best[0]
        init_loss = problem.loss(zero, params.fine)
    if final_loss > init_loss:
        # never hand back something worse than not moving at all
        theta, final_loss, iou = zero, init_loss, problem.iou(zero)
    T = RigidTransform.about(problem.rotvec(theta), theta[3:], problem.center)
    return OptimizationResult(T, iou, final_loss, init_loss, trace, "ok", early, time.perf_counter() - t0)


# ---------------------------------------------------------------- reports

@dataclass
class InstanceChange:
    instance_id: int
    status: str
    mask_id: int | None = None
    iou: float = 0.0
    transform: RigidTransform | None = None
    loss: float | None = None
    final_iou: float | None = None
    optimization: str | None = None
    early_exit: bool | None = None
    seconds: float | None = None        # optimization wall time; not serialized

    def __post_init__(self):
        if self.status == DISPLACED and self.transform is None:
            raise ValueError(f"instance {self.instance_id}: displaced status requires a transform")


@dataclass
class ChangeReport:
    changes: list[InstanceChange]

    def by_status(self, status) -> list[int]:
        return [c.instance_id for c in self.changes if c.status == status]

    @property
    def displaced(self) -> list[int]:
        return self.by_status(DISPLACED)

    def to_dict(self) -> dict:
        out = []
        for c in self.changes:
            rec = {"instance": c.instance_id, "status": c.status, "mask": c.mask_id, "iou": round(c.iou, 6)}
            if c.transform is not None:
                rec["transform"] = [round(float(x), 9) for x in c.transform.as_matrix4().ravel()]
                rec["rotvec"] = list(c.transform.rotvec)
                rec["translation"] = list(c.transform.translation)
            if c.loss is not None:
                rec.update(loss=round(c.loss, 6), final_iou=round(c.final_iou, 6),
                           optimization=c.optimization, early_exit=c.early_exit)
            out.append(rec)
        return {"instances": out}

    def to_text(self) -> str:
        lines = []
        for c in self.changes:
            s = f"instance {c.instance_id} status {c.status} mask {c.mask_id if c.mask_id is not None else '-'} iou {c.iou:.4f}"
            if c.transform is not None:
                s += " transform " + " ".join(f"{x:.6f}" for x in c.transform.as_matrix4().ravel())
            if c.loss is not None:
                s += f" loss {c.loss:.6f} final_iou {c.final_iou:.4f} optimization {c.optimization}"
            lines.append(s)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d) -> "ChangeReport":
        changes = []
        for r in d["instances"]:
            T = None
            if "rotvec" in r:
                T = RigidTransform(tuple(r["rotvec"]), tuple(r["translation"]))
            changes.append(InstanceChange(r["instance"], r["status"], r.get("mask"), r.get("iou", 0.0), T,
                                          r.get("loss"), r.get("final_iou"), r.get("optimization"), r.get("early_exit")))
        return cls(changes)


def analyze_post_frame(state: SceneState, post_frame, params: UpdateParams | None = None, threads: int = 1,
                       traces: dict | None = None) -> ChangeReport:
    """Match, detect displacement and optimize every displaced instance."""
    params = params or UpdateParams()
    prints = _instance_footprints(state, post_frame, params.voxel_size_m, params.visibility_tol_m)
    matched = match_post_masks(post_frame, state, params, prints)
    changes, jobs = {}, []
    for iid in sorted(state.instances):
        mid = matched.get(iid)
        if mid is None:
            changes[iid] = InstanceChange(iid, UNMATCHED)
            continue
        mask = np.asarray(post_frame.masks[mid], bool)
        iou = mask_iou(prints[iid], mask)
        if iou >= params.tau_iou:
            changes[iid] = InstanceChange(iid, STATIC, mid, iou)
        else:
            jobs.append((iid, mid, iou))

    def run(job):
        iid, mid, iou = job
        pts = state.instances[iid].points
        res = optimize_transform(state.positions[pts], state.colors[pts], state.normals[pts],
                                 post_frame, post_frame.masks[mid], params)
        return iid, mid, iou, res

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(run, jobs))
    else:
        results = [run(j) for j in jobs]
    for iid, mid, iou, res in results:
        changes[iid] = InstanceChange(iid, DISPLACED, mid, iou, res.transform, res.loss, res.iou,
                                      res.status, res.early_exit, res.seconds)
        if traces is not None:
            traces[iid] = res.trace
        logger.info("instance %d displaced: IoU %.3f -> %.3f in %.2f s (%s)", iid, iou, res.iou, res.seconds, res.status)
    return ChangeReport([changes[i] for i in sorted(changes)])


def _local_supervoxels(positions, normals, params: GeometryParams, offset):
    n = len(positions)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    if n == 1:
        return np.array([offset])
    i, j = knn_edges(positions, min(params.k_nn, n))
    d = pair_distance(positions[i], normals[i], positions[j], normals[j], params.alpha, params.beta)
    sel = d <= params.tau_merge
    _, comp = connected_components(coo_matrix((np.ones(sel.sum()), (i[sel], j[sel])), shape=(n, n)), directed=False)
    _, first = np.unique(comp, return_index=True)
    remap = np.empty_like(first)
    remap[np.argsort(first)] = np.arange(len(first))
    return remap[comp] + offset


def apply_update(state: SceneState, report: ChangeReport, geometry: GeometryParams | None = None) -> SceneState:
    """New scene state with displaced instances moved by their recovered motion.

    Points of other instances are left untouched. Moved points get fresh
    super-voxel ids computed among themselves; embeddings do not change.
    """
    geometry = geometry or GeometryParams()
    out = state.copy()
    next_sv = int(out.supervoxels.max()) + 1 if len(out.supervoxels) else 0
    for c in report.changes:
        if c.status != DISPLACED or c.transform is None or c.optimization == "optimization failed":
            continue
        pts = out.instances[c.instance_id].points
        R, t = c.transform.matrix, c.transform.t
        out.positions[pts] = out.positions[pts] @ R.T + t
        out.normals[pts] = out.normals[pts] @ R.T
        sv = _local_supervoxels(out.positions[pts], out.normals[pts], geometry, next_sv)
        out.supervoxels[pts] = sv
        if len(sv):
            next_sv = int(sv.max()) + 1
    return out
