"""Depth back-projection, voxel aggregation, normals and super-voxels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .config import PipelineConfig


@dataclass(frozen=True)
class GeometryParams:
    voxel_size_m: float = 0.005
    min_occupancy: int = 3
    alpha: float = 0.5
    beta: float = 1.0
    tau_merge: float = 0.01
    k_nn: int = 16

    def __post_init__(self):
        if not self.voxel_size_m > 0:
            raise ValueError("voxel_size_m must be > 0")
        if self.min_occupancy < 1:
            raise ValueError("min_occupancy must be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if not self.tau_merge > 0:
            raise ValueError("tau_merge must be > 0")
        if self.k_nn < 3:
            raise ValueError("k_nn must be >= 3")

    @classmethod
    def from_config(cls, cfg: PipelineConfig) -> "GeometryParams":
        return cls(cfg.voxel_size_m, cfg.min_occupancy, cfg.alpha, cfg.beta, cfg.tau_merge, cfg.k_nn)


@dataclass
class PointCloud:
    positions: np.ndarray
    colors: np.ndarray
    normals: np.ndarray | None = None
    counts: np.ndarray | None = None
    view_centers: np.ndarray | None = None  # mean camera center of contributing views
    labels: np.ndarray | None = None        # optional per-point ground-truth label

    def __len__(self):
        return len(self.positions)


# ---------------------------------------------------------------- projection

def pixel_rays(shape, intrinsics):
    H, W = shape
    fx, fy, cx, cy = intrinsics
    v, u = np.mgrid[0:H, 0:W]
    return (u - cx) / fx, (v - cy) / fy


def backproject_depth(depth, intrinsics, pose):
    """World points for valid pixels, plus their flat pixel indices."""
    depth = np.asarray(depth)
    xr, yr = pixel_rays(depth.shape, intrinsics)
    valid = depth > 0
    d = depth[valid]
    cam = np.stack([xr[valid] * d, yr[valid] * d, d], axis=1)
    pts = cam @ pose[:3, :3].T + pose[:3, 3]
    return pts, np.flatnonzero(valid.ravel())


def backproject_frame(frame):
    """Back-project a frame's valid depth pixels; returns (points, colors)."""
    pts, idx = backproject_depth(frame.depth, frame.intrinsics, frame.pose)
    cols = frame.rgb.reshape(-1, 3)[idx]
    return pts, cols


def world_to_camera(points, pose):
    R = pose[:3, :3]
    return (np.asarray(points) - pose[:3, 3]) @ R


def project_points(points, intrinsics, pose):
    """Return (u, v, z) of world points in a camera; z is the camera-frame depth."""
    cam = world_to_camera(points, pose)
    fx, fy, cx, cy = intrinsics
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = fx * cam[:, 0] / z + cx
        v = fy * cam[:, 1] / z + cy
    return u, v, z


# ---------------------------------------------------------------- voxel aggregation

_OFF = 1 << 20


def voxel_keys(points, edge):
    """Pack floor(p / edge) into one int64 per point (lower bin on exact ties)."""
    ijk = np.floor(np.asarray(points) / edge).astype(np.int64) + _OFF
    if len(ijk) and (ijk.min() < 0 or ijk.max() >= 2 * _OFF):
        raise ValueError("points outside the representable voxel range")
    return (ijk[:, 0] << 42) | (ijk[:, 1] << 21) | ijk[:, 2]


def unpack_voxel_keys(keys):
    keys = np.asarray(keys, dtype=np.int64)
    mask = (1 << 21) - 1
    return np.stack([(keys >> 42) & mask, (keys >> 21) & mask, keys & mask], axis=1) - _OFF


def _majority(inverse, labels, n):
    """Most frequent label per group; ties go to the smaller label."""
    order = np.lexsort((labels, inverse))
    g, l = inverse[order], labels[order]
    brk = np.flatnonzero((np.diff(g) != 0) | (np.diff(l) != 0)) + 1
    starts = np.concatenate([[0], brk])
    runs = np.diff(np.concatenate([starts, [len(g)]]))
    rg, rl = g[starts], l[starts]
    # stable within a group, largest run first, smaller label first on ties
    o = np.lexsort((rl, -runs, rg))
    first = np.concatenate([[True], np.diff(rg[o]) != 0])
    out = np.full(n, -1, dtype=np.int64)
    out[rg[o][first]] = rl[o][first]
    return out


def fuse_and_downsample(frames, params: GeometryParams, labels=None) -> PointCloud:
    """Fuse frames into one cloud by voxel averaging.

    Voxels with fewer than ``params.min_occupancy`` source points are dropped.
    ``labels`` (one H x W int image per frame) gives each output point the
    majority label of its sources.
    """
    pts, cols, centers, labs = [], [], [], []
    for i, f in enumerate(frames):
        p, idx = backproject_depth(f.depth, f.intrinsics, f.pose)
        pts.append(p)
        cols.append(f.rgb.reshape(-1, 3)[idx])
        centers.append(np.broadcast_to(f.pose[:3, 3], p.shape))
        if labels is not None:
            labs.append(np.asarray(labels[i]).ravel()[idx])
    if not pts or sum(len(p) for p in pts) == 0:
        empty = np.zeros((0, 3))
        return PointCloud(empty, empty.copy(), counts=np.zeros(0, int), view_centers=empty.copy(),
                          labels=np.zeros(0, int) if labels is not None else None)
    P = np.concatenate(pts)
    C = np.concatenate(cols)
    V = np.concatenate(centers)
    keys = voxel_keys(P, params.voxel_size_m)
    uniq, inv, counts = np.unique(keys, return_inverse=True, return_counts=True)
    n = len(uniq)

    def mean(a):
        return np.stack([np.bincount(inv, a[:, j], minlength=n) for j in range(a.shape[1])], 1) / counts[:, None]

    keep = counts >= params.min_occupancy
    cloud = PointCloud(
        positions=mean(P)[keep],
        colors=mean(C)[keep],
        counts=counts[keep],
        view_centers=mean(V)[keep],
    )
    if labels is not None:
        cloud.labels = _majority(inv, np.concatenate(labs).astype(np.int64), n)[keep]
    return cloud


# ---------------------------------------------------------------- normals

def estimate_normals(cloud: PointCloud, k_nn: int = 16) -> PointCloud:
    """PCA normals over k nearest neighbours, flipped toward the contributing cameras."""
    n = len(cloud.positions)
    if n < k_nn:
        raise ValueError(f"cloud too small: {n} points for k_nn={k_nn}")
    tree = cKDTree(cloud.positions)
    _, nbr = tree.query(cloud.positions, k=k_nn)
    nb = cloud.positions[nbr]
    nb = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    if cloud.view_centers is not None:
        flip = np.einsum("ij,ij->i", normals, cloud.view_centers - cloud.positions) < 0
        normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cloud.normals = normals
    return cloud


# ---------------------------------------------------------------- super-voxels

def pair_distance(x_i, n_i, x_j, n_j, alpha=0.5, beta=1.0):
    """alpha * |x_i - x_j| + beta * (1 - <n_i, n_j>); vectorized over leading axes."""
    x_i, x_j = np.asarray(x_i, float), np.asarray(x_j, float)
    n_i, n_j = np.asarray(n_i, float), np.asarray(n_j, float)
    dist = np.sqrt(np.sum((x_i - x_j) ** 2, axis=-1))
    return alpha * dist + beta * (1.0 - np.sum(n_i * n_j, axis=-1))


def cloud_pair_distance(cloud: PointCloud, i, j, alpha=0.5, beta=1.0):
    return pair_distance(cloud.positions[i], cloud.normals[i], cloud.positions[j], cloud.normals[j],
                         alpha, beta)


@dataclass
class SuperVoxelSet:
    point_labels: np.ndarray   # point -> super-voxel id
    sizes: np.ndarray          # w_k
    centroids: np.ndarray
    normals: np.ndarray
    _members: list | None = field(default=None, repr=False)

    @property
    def count(self) -> int:
        return len(self.sizes)

    @property
    def weights(self) -> np.ndarray:
        """Normalized weights, proportional to member count."""
        return self.sizes / self.sizes.sum()

    def members(self, k: int) -> np.ndarray:
        if self._members is None:
            order = np.argsort(self.point_labels, kind="stable")
            bounds = np.concatenate([[0], np.cumsum(self.sizes)])
            self._members = [order[bounds[i]:bounds[i + 1]] for i in range(self.count)]
        return self._members[k]

    @classmethod
    def from_labels(cls, labels, positions, normals) -> "SuperVoxelSet":
        labels = np.asarray(labels, dtype=np.int64)
        n = int(labels.max()) + 1 if len(labels) else 0
        sizes = np.bincount(labels, minlength=n)
        cen = np.stack([np.bincount(labels, positions[:, j], minlength=n) for j in range(3)], 1) / sizes[:, None]
        nrm = np.stack([np.bincount(labels, normals[:, j], minlength=n) for j in range(3)], 1)
        norm = np.linalg.norm(nrm, axis=1, keepdims=True)
        nrm = np.divide(nrm, norm, out=np.zeros_like(nrm), where=norm > 0)
        return cls(labels, sizes, cen, nrm)


def knn_edges(positions, k_nn):
    """Undirected k-NN edge list (i < j, deduplicated)."""
    n = len(positions)
    k = min(k_nn, n)
    _, nbr = cKDTree(positions).query(positions, k=k)
    i = np.repeat(np.arange(n), k)
    j = nbr.ravel()
    keep = i != j
    a, b = np.minimum(i[keep], j[keep]), np.maximum(i[keep], j[keep])
    e = np.unique(a * n + b)
    return e // n, e % n


def build_supervoxels(cloud: PointCloud, params: GeometryParams) -> SuperVoxelSet:
    """Contract k-NN edges with pair distance <= tau_merge; components are super-voxels."""
    if cloud.normals is None:
        estimate_normals(cloud, params.k_nn)
    n = len(cloud.positions)
    i, j = knn_edges(cloud.positions, params.k_nn)
    d = cloud_pair_distance(cloud, i, j, params.alpha, params.beta)
    sel = d <= params.tau_merge
    graph = coo_matrix((np.ones(sel.sum()), (i[sel], j[sel])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    # relabel by first occurrence so ids follow point order
    _, first = np.unique(comp, return_index=True)
    remap = np.empty_like(first)
    remap[np.argsort(first)] = np.arange(len(first))
    labels = remap[comp]
    return SuperVoxelSet.from_labels(labels, cloud.positions, cloud.normals)
