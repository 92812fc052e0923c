"""Deterministic synthetic tabletop scenes with full ground truth.

Boxes, cylinders and spheres rest on a finite table plane at z = 0 and are
ray-cast from a ring of cameras. Per-view masks come straight from the
z-buffer and can be corrupted with controlled over-segmentation (an object
split into fragments under its full mask) and under-segmentation (the union
of two touching objects above both originals).

Randomness: the object layout uses its own stream and every view gets a
stream spawned from the master seed, so changing the view count never moves
the objects and views can be generated in any order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .scene_io import (
    BundleError,
    CameraFrame,
    SceneBundle,
    quantize_rgb,
    read_rle_file,
    write_embeddings,
    write_rle_file,
    write_scene_bundle,
)

SHAPES = ("box", "cylinder", "sphere")
LIGHT = np.array([0.4, 0.25, 1.0]) / np.linalg.norm([0.4, 0.25, 1.0])
TABLE_COLOR = np.array([0.78, 0.76, 0.72])


@dataclass(frozen=True)
class FixtureSpec:
    seed: int = 0
    n_objects: int = 10
    n_categories: int | None = None       # None: one category per object
    shapes: tuple = SHAPES
    size_range: tuple = (0.055, 0.09)     # characteristic object size, meters
    n_views: int = 8
    ring_radius: float = 0.6
    ring_elevation_deg: float = 50.0
    ring_arc_deg: float = 360.0
    azimuth_jitter_deg: float = 4.0
    width: int = 640
    height: int = 480
    focal: float = 570.0                  # at 640 px width; scaled with resolution
    p_split: float = 0.0
    p_merge: float = 0.0
    embedding_dim: int = 128
    sigma: float = 0.02
    fragment_sigma: float = 0.15          # fragments carry less context
    boundary_noise: float = 0.0
    layout_radius: float = 0.2
    min_gap: float = 0.025
    table_half: float = 0.32
    min_mask_area: int = 80               # at 640x480; scaled with resolution

    def __post_init__(self):
        for name in ("p_split", "p_merge", "boundary_noise"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.n_objects < 1 or self.n_views < 1:
            raise ValueError("need at least one object and one view")
        if self.sigma < 0 or self.fragment_sigma < 0:
            raise ValueError("noise levels must be >= 0")
        if not set(self.shapes) <= set(SHAPES):
            raise ValueError(f"unknown shapes {set(self.shapes) - set(SHAPES)}")

    @property
    def categories(self) -> int:
        return self.n_categories or self.n_objects

    @property
    def scale(self) -> float:
        return self.width / 640.0

    def intrinsics(self) -> np.ndarray:
        f = self.focal * self.scale
        return np.array([f, f, (self.width - 1) / 2.0, (self.height - 1) / 2.0])


@dataclass(frozen=True)
class ObjectSpec:
    id: int
    category: int
    shape: str
    center: tuple           # (x, y) on the table
    yaw: float
    dims: tuple             # box (lx, ly, lz); cylinder (r, h); sphere (r,)
    color: tuple

    @property
    def footprint_radius(self) -> float:
        if self.shape == "box":
            return 0.5 * math.hypot(self.dims[0], self.dims[1])
        return self.dims[0]

    @property
    def height(self) -> float:
        return {"box": lambda d: d[2], "cylinder": lambda d: d[1], "sphere": lambda d: 2 * d[0]}[self.shape](self.dims)

    def moved(self, dx, dy, dyaw) -> "ObjectSpec":
        return replace(self, center=(self.center[0] + dx, self.center[1] + dy), yaw=self.yaw + dyaw)


@dataclass
class GroundTruth:
    spec: FixtureSpec
    objects: list[ObjectSpec]
    labels: list[np.ndarray]                # per view, -1 = background
    mask_info: list[dict]                   # per view: mask_id -> {"kind", "objects"}
    prototypes: np.ndarray                  # categories x D
    transform: dict | None = None           # planted post-interaction motion

    def category_of(self, obj_id) -> int:
        return self.objects[obj_id].category


# ---------------------------------------------------------------- scene layout

def _rng_streams(seed: int, n_views: int):
    ss = np.random.SeedSequence(seed)
    layout, emb, post = (np.random.default_rng(s) for s in ss.spawn(3))
    views = [np.random.default_rng(s) for s in np.random.SeedSequence([seed, 7919]).spawn(max(n_views, 1))]
    return layout, emb, post, views


def _hsv_color(rng):
    h = rng.uniform(0, 1)
    s, v = rng.uniform(0.55, 0.95), rng.uniform(0.55, 0.95)
    i = int(h * 6) % 6
    f = h * 6 - int(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]


def _draw_object(oid, spec, rng, cats):
    lo, hi = spec.size_range
    shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
    s = rng.uniform(lo, hi)
    if shape == "box":
        dims = (s, s * rng.uniform(0.55, 0.9), s * rng.uniform(0.6, 1.0))
    elif shape == "cylinder":
        dims = (0.5 * s * rng.uniform(0.75, 0.95), s * rng.uniform(0.9, 1.4))
    else:
        dims = (0.5 * s * rng.uniform(0.85, 1.0),)
    yaw = rng.uniform(-math.pi, math.pi)
    category = int(cats[oid % len(cats)]) if spec.n_categories is None else int(rng.integers(spec.categories))
    return shape, dims, yaw, category, _hsv_color(rng)


def layout_objects(spec: FixtureSpec, rng, restarts=50) -> list[ObjectSpec]:
    """Non-overlapping placement by rejection sampling, restarting the whole
    layout when an object finds no free spot."""
    cats = rng.permutation(spec.categories)
    drawn = [_draw_object(oid, spec, rng, cats) for oid in range(spec.n_objects)]
    for _ in range(restarts):
        objects: list[ObjectSpec] = []
        for oid, (shape, dims, yaw, category, color) in enumerate(drawn):
            for _ in range(500):
                r = spec.layout_radius * math.sqrt(rng.uniform(0, 1))
                a = rng.uniform(0, 2 * math.pi)
                cand = ObjectSpec(oid, category, shape, (r * math.cos(a), r * math.sin(a)), yaw, dims, color)
                if all(math.dist(cand.center, o.center) >= cand.footprint_radius + o.footprint_radius + spec.min_gap
                       for o in objects):
                    objects.append(cand)
                    break
            else:
                break
        if len(objects) == spec.n_objects:
            return objects
    raise ValueError(f"cannot place {spec.n_objects} objects within layout_radius={spec.layout_radius}")


def ring_poses(spec: FixtureSpec, view_rngs) -> list[np.ndarray]:
    target = np.array([0.0, 0.0, 0.03])
    e = math.radians(spec.ring_elevation_deg)
    poses = []
    for i in range(spec.n_views):
        frac = i / spec.n_views if spec.ring_arc_deg >= 360 else (i / max(spec.n_views - 1, 1) - 0.5)
        az = math.radians(spec.ring_arc_deg * frac + view_rngs[i].uniform(-1, 1) * spec.azimuth_jitter_deg)
        pos = target + spec.ring_radius * np.array([math.cos(e) * math.cos(az), math.cos(e) * math.sin(az), math.sin(e)])
        poses.append(look_at(pos, target))
    return poses


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    f = np.asarray(target, float) - np.asarray(position, float)
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    pose = np.eye(4)
    pose[:3, :3] = np.stack([r, d, f], axis=1)
    pose[:3, 3] = position
    return pose


# ---------------------------------------------------------------- ray casting

def _rotz(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _hit_box(o, D, obj):
    lx, ly, lz = obj.dims
    c = np.array([obj.center[0], obj.center[1], lz / 2])
    Rt = _rotz(obj.yaw).T
    ol = Rt @ (o - c)
    Dl = D @ Rt.T
    e = np.array([lx, ly, lz]) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-e - ol) / Dl
        t2 = (e - ol) / Dl
    tn = np.fmin(t1, t2)
    tf = np.fmax(t1, t2)
    tmin = np.nanmax(tn, axis=1)
    tmax = np.nanmin(tf, axis=1)
    hit = (tmax >= tmin) & (tmin > 1e-6)
    t = np.where(hit, tmin, np.inf)
    axis = np.argmax(tn, axis=1)
    nl = np.zeros_like(Dl)
    idx = np.arange(len(D))
    nl[idx, axis] = -np.sign(Dl[idx, axis])
    return t, nl @ Rt


def _hit_cylinder(o, D, obj):
    r, h = obj.dims
    ox, oy, oz = o[0] - obj.center[0], o[1] - obj.center[1], o[2]
    a = D[:, 0] ** 2 + D[:, 1] ** 2
    b = 2 * (ox * D[:, 0] + oy * D[:, 1])
    c = ox * ox + oy * oy - r * r
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        ts = (-b - np.sqrt(disc)) / (2 * a)
        zs = oz + ts * D[:, 2]
        side = (disc >= 0) & (ts > 1e-6) & (zs >= 0) & (zs <= h)
        tc = (h - oz) / D[:, 2]
        xc, yc = ox + tc * D[:, 0], oy + tc * D[:, 1]
        cap = (tc > 1e-6) & (xc * xc + yc * yc <= r * r)
    t_side = np.where(side, ts, np.inf)
    t_cap = np.where(cap, tc, np.inf)
    t = np.minimum(t_side, t_cap)
    n = np.zeros_like(D)
    use_side = t_side <= t_cap
    n[use_side, 0] = (ox + ts[use_side] * D[use_side, 0]) / r
    n[use_side, 1] = (oy + ts[use_side] * D[use_side, 1]) / r
    n[~use_side, 2] = 1.0
    return t, n


def _hit_sphere(o, D, obj):
    (r,) = obj.dims
    c = np.array([obj.center[0], obj.center[1], r])
    oc = o - c
    a = np.einsum("ij,ij->i", D, D)
    b = 2 * D @ oc
    cc = oc @ oc - r * r
    disc = b * b - 4 * a * cc
    with np.errstate(invalid="ignore"):
        t = (-b - np.sqrt(disc)) / (2 * a)
    ok = (disc >= 0) & (t > 1e-6)
    t = np.where(ok, t, np.inf)
    p = o + np.where(ok, t, 0)[:, None] * D
    return t, (p - c) / r


_HIT = {"box": _hit_box, "cylinder": _hit_cylinder, "sphere": _hit_sphere}


def render(objects, intrinsics, pose, shape, table_half=0.32):
    """Ray-cast a view. Returns (depth, rgb, labels); labels -1 = background."""
    H, W = shape
    fx, fy, cx, cy = intrinsics
    v, u = np.mgrid[0:H, 0:W]
    dc = np.stack([(u - cx) / fx, (v - cy) / fy, np.ones_like(u, dtype=float)], axis=-1).reshape(-1, 3)
    D = dc @ pose[:3, :3].T
    o = pose[:3, 3]
    n_pix = H * W
    best = np.full(n_pix, np.inf)
    label = np.full(n_pix, -1, dtype=np.int64)
    normal = np.zeros((n_pix, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        tt = -o[2] / D[:, 2]
    px, py = o[0] + tt * D[:, 0], o[1] + tt * D[:, 1]
    table = (tt > 0) & (np.abs(px) <= table_half) & (np.abs(py) <= table_half)
    best[table] = tt[table]
    normal[table] = (0.0, 0.0, 1.0)
    colors = np.zeros((n_pix, 3))
    colors[table] = TABLE_COLOR
    for obj in objects:
        t, n = _HIT[obj.shape](o, D, obj)
        closer = t < best
        best[closer] = t[closer]
        label[closer] = obj.id
        normal[closer] = n[closer]
        colors[closer] = obj.color
    hit = np.isfinite(best)
    shade = 0.35 + 0.65 * np.clip(normal @ LIGHT, 0, 1)
    rgb = np.where(hit[:, None], colors * shade[:, None], 0.0)
    depth = np.where(hit, best, 0.0)
    return depth.reshape(H, W), rgb.reshape(H, W, 3), label.reshape(H, W)


# ---------------------------------------------------------------- noisy masks

def _jitter_boundary(mask, frac, rng):
    if frac <= 0:
        return mask
    inner = mask & ~ndimage.binary_erosion(mask)
    outer = ndimage.binary_dilation(mask) & ~mask
    m = mask.copy()
    m[inner & (rng.random(mask.shape) < frac / 2)] = False
    m[outer & (rng.random(mask.shape) < frac / 2)] = True
    return m


def split_mask(mask, k, rng):
    """Cut a mask into k slabs of equal pixel count along a random direction."""
    vv, uu = np.nonzero(mask)
    a = rng.uniform(0, math.pi)
    proj = uu * math.cos(a) + vv * math.sin(a)
    edges = np.quantile(proj, np.linspace(0, 1, k + 1)[1:-1])
    part = np.searchsorted(edges, proj, side="right")
    out = []
    for j in range(k):
        f = np.zeros_like(mask)
        f[vv[part == j], uu[part == j]] = True
        out.append(f)
    return out


def _noisy_embedding(proto, sigma, rng):
    e = proto + sigma * rng.standard_normal(proto.shape)
    return e / np.linalg.norm(e)


def make_view_masks(label, objects, prototypes, spec: FixtureSpec, rng):
    """Per-view masks, embeddings and provenance with the configured noise."""
    min_area = max(int(spec.min_mask_area * spec.scale ** 2), 4)
    raw = []   # (mask, kind, objects, sigma-or-proto-mix)
    obj_masks = {}
    for obj in objects:
        m = label == obj.id
        if m.sum() < min_area:
            continue
        m = _jitter_boundary(m, spec.boundary_noise, rng)
        obj_masks[obj.id] = m
    for oid, m in obj_masks.items():
        raw.append((m, "object", [oid]))
        if spec.p_split > 0 and rng.random() < spec.p_split:
            k = int(rng.integers(2, 4))
            frags = [f for f in split_mask(m, k, rng) if f.sum() >= max(min_area // 4, 2)]
            if len(frags) >= 2:
                raw.extend((f, "fragment", [oid]) for f in frags)
    if spec.p_merge > 0 and len(obj_masks) > 1:
        merged = set()
        for oid in rng.permutation(sorted(obj_masks)).tolist():
            if oid in merged or rng.random() >= spec.p_merge:
                continue
            grown = ndimage.binary_dilation(obj_masks[oid], iterations=3)
            nbrs = [o for o in sorted(obj_masks) if o != oid and o not in merged and (grown & obj_masks[o]).any()]
            if not nbrs:
                continue
            other = nbrs[int(rng.integers(len(nbrs)))]
            merged |= {oid, other}
            raw.append((obj_masks[oid] | obj_masks[other], "cluster", sorted([oid, other])))
    category = {o.id: o.category for o in objects}
    order = rng.permutation(len(raw))
    masks, embs, info = {}, {}, {}
    for new_id, j in enumerate(order.tolist()):
        m, kind, objs = raw[j]
        protos = prototypes[[category[o] for o in objs]]
        base = protos.mean(axis=0)
        base /= np.linalg.norm(base)
        sigma = spec.fragment_sigma if kind == "fragment" else spec.sigma
        masks[new_id] = m
        embs[new_id] = _noisy_embedding(base, sigma, rng)
        info[new_id] = {"kind": kind, "objects": objs}
    return masks, embs, info


# ---------------------------------------------------------------- generation

def _prototypes(spec: FixtureSpec, rng):
    P = rng.standard_normal((spec.categories, spec.embedding_dim))
    return P / np.linalg.norm(P, axis=1, keepdims=True)


def _make_frame(index, objects, pose, prototypes, spec, rng):
    intr = spec.intrinsics()
    depth, rgb, label = render(objects, intr, pose, (spec.height, spec.width), spec.table_half)
    masks, embs, info = make_view_masks(label, objects, prototypes, spec, rng)
    frame = CameraFrame(
        index=index,
        intrinsics=intr,
        pose=pose,
        rgb=quantize_rgb(rgb),
        depth=depth.astype(np.float32).astype(np.float64),
        masks=masks,
        embeddings={k: v.astype(np.float32).astype(np.float64) for k, v in embs.items()},
    )
    return frame, label, info


def generate_scene(spec: FixtureSpec):
    """Render a scene bundle and its ground truth. Single-view specs return a
    bare frame list inside the ground truth (a bundle needs two frames)."""
    layout_rng, emb_rng, _, view_rngs = _rng_streams(spec.seed, spec.n_views)
    objects = layout_objects(spec, layout_rng)
    prototypes = _prototypes(spec, emb_rng)
    poses = ring_poses(spec, view_rngs)
    frames, labels, infos = [], [], []
    for i, pose in enumerate(poses):
        f, lab, info = _make_frame(i, objects, pose, prototypes, spec, view_rngs[i])
        frames.append(f)
        labels.append(lab)
        infos.append(info)
    if not any((lab >= 0).any() for lab in labels):
        raise ValueError("camera ring places every object out of view")
    gt = GroundTruth(spec, objects, labels, infos, prototypes)
    if len(frames) < 2:
        gt.frames = frames  # type: ignore[attr-defined]
        return None, gt
    bundle = SceneBundle(tuple(frames), scene_id=f"fixture_{spec.seed}", embedding_dim=spec.embedding_dim)
    return bundle, gt


def oracle_grouping(bundle, gt: GroundTruth) -> dict:
    """Reference assignment from construction metadata.

    Returns ``{"masks": {(frame, mask_id): object id | "cluster"},
    "groups": {object id: [(frame, mask_id) of full-object masks]}}``.
    """
    masks, groups = {}, {}
    for f, info in enumerate(gt.mask_info):
        for mid, rec in info.items():
            if rec["kind"] == "cluster":
                masks[(f, mid)] = "cluster"
            else:
                masks[(f, mid)] = rec["objects"][0]
                if rec["kind"] == "object":
                    groups.setdefault(rec["objects"][0], []).append((f, mid))
    return {"masks": masks, "groups": {k: sorted(v) for k, v in sorted(groups.items())}}


def rigid_from_yaw(obj: ObjectSpec, dx, dy, dyaw):
    """World (R, t) moving ``obj`` by a yaw about its vertical axis plus (dx, dy)."""
    R = _rotz(dyaw)
    p = np.array([obj.center[0], obj.center[1], 0.0])
    t = p + np.array([dx, dy, 0.0]) - R @ p
    return R, t


def plant_displacement(gt: GroundTruth, obj_id: int, dx=0.0, dy=0.0, dyaw=0.0, view=0,
                       pose=None, remove=False, check_collision=True):
    """Re-render one view after moving (or removing) an object.

    Returns ``(post_frame, post_gt)``; ``post_gt`` carries the moved objects,
    label image, mask provenance and the planted world transform.
    """
    spec = gt.spec
    if abs(dyaw) > math.radians(45) + 1e-12 or math.hypot(dx, dy) > 0.15 + 1e-12:
        raise ValueError("planted motion must have |yaw| <= 45 deg and in-plane translation <= 0.15 m")
    obj = gt.objects[obj_id]
    if remove:
        objects = [o for o in gt.objects if o.id != obj_id]
        R, t = np.eye(3), np.zeros(3)
    else:
        moved = obj.moved(dx, dy, dyaw)
        if check_collision:
            for o in gt.objects:
                if o.id != obj_id and math.dist(o.center, moved.center) < o.footprint_radius + moved.footprint_radius + 0.005:
                    raise ValueError(f"moved object {obj_id} would collide with object {o.id}")
            if max(abs(moved.center[0]), abs(moved.center[1])) + moved.footprint_radius > spec.table_half:
                raise ValueError(f"moved object {obj_id} leaves the table")
        objects = [moved if o.id == obj_id else o for o in gt.objects]
        R, t = rigid_from_yaw(obj, dx, dy, dyaw)
    if pose is None:
        _, _, _, view_rngs = _rng_streams(spec.seed, spec.n_views)
        pose = ring_poses(spec, view_rngs)[view]
    post_rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 104729, obj_id, view]))
    frame, label, info = _make_frame(view, objects, pose, gt.prototypes, spec, post_rng)
    if not remove and not (label == obj_id).any():
        raise ValueError(f"moved object {obj_id} is fully out of frame")
    post = GroundTruth(spec, objects, [label], [info], gt.prototypes,
                       transform={"object": obj_id, "R": R.tolist(), "t": t.tolist(), "removed": bool(remove),
                                  "dx": dx, "dy": dy, "dyaw": dyaw})
    return frame, post


# ---------------------------------------------------------------- files

def write_fixture(path, bundle, gt: GroundTruth) -> Path:
    path = Path(path)
    write_scene_bundle(path, bundle)
    write_ground_truth(path, gt, frames=bundle.frames)
    return path


def write_ground_truth(path, gt: GroundTruth, frames=None) -> None:
    path = Path(path)
    for f, lab in enumerate(gt.labels):
        fdir = path / f"frame_{f}"
        fdir.mkdir(parents=True, exist_ok=True)
        write_rle_file(fdir / "gt_labels.rle", {o.id: lab == o.id for o in gt.objects if (lab == o.id).any()}, lab.shape)
    record = {
        "spec": asdict(gt.spec),
        "objects": [asdict(o) for o in gt.objects],
        "masks": {str(f): {str(k): v for k, v in info.items()} for f, info in enumerate(gt.mask_info)},
        "transform": gt.transform,
    }
    (path / "gt_instances.json").write_text(json.dumps(record, indent=1))
    qdir = path / "queries"
    qdir.mkdir(exist_ok=True)
    for c in range(len(gt.prototypes)):
        write_embeddings(qdir / f"category_{c}.f32", {0: gt.prototypes[c]})


def write_post_frame(path, frame: CameraFrame, post_gt: GroundTruth) -> Path:
    from .scene_io import write_frame
    path = Path(path)
    write_frame(path, frame)
    write_rle_file(path / "gt_labels.rle",
                   {o.id: post_gt.labels[0] == o.id for o in post_gt.objects if (post_gt.labels[0] == o.id).any()},
                   post_gt.labels[0].shape)
    (path / "gt_transform.json").write_text(json.dumps(post_gt.transform, indent=1))
    return path


def load_ground_truth(path) -> dict:
    """Read ``gt_instances.json`` and per-frame label images of a fixture bundle."""
    path = Path(path)
    gfile = path / "gt_instances.json"
    if not gfile.exists():
        raise BundleError(f"incomplete bundle: no gt_instances.json in {path}")
    rec = json.loads(gfile.read_text())
    labels = []
    for f in sorted(int(k) for k in rec["masks"]):
        masks, shape = read_rle_file(path / f"frame_{f}" / "gt_labels.rle")
        lab = np.full(shape, -1, dtype=np.int64)
        for oid, m in masks.items():
            lab[m] = oid
        labels.append(lab)
    rec["labels"] = labels
    return rec
