"""Cross-view grouping of leaf masks.

Every mask (leaf or not) gets a sparse super-voxel occupancy vector and an
embedding. Leaves from different frames are connected by edges carrying a
weighted-Jaccard spatial similarity and a cosine semantic similarity; pairs
are merged greedily, first by spatial then by semantic similarity. Leaves
left ungrouped may afterwards be swapped for their parent mask and
regrouped.
"""

from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .geometry import project_points

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------- occupancy

def visible_pixels(positions, frame, vis_tol=0.02):
    """Flat pixel index of every point that projects in-bounds and passes the
    depth test (within ``vis_tol`` of the frame depth); -1 otherwise."""
    H, W = frame.shape
    u, v, z = project_points(positions, frame.intrinsics, frame.pose)
    ok = z > 1e-9
    ui = np.full(len(z), -1, dtype=np.int64)
    vi = np.full(len(z), -1, dtype=np.int64)
    ui[ok] = np.rint(u[ok]).astype(np.int64)
    vi[ok] = np.rint(v[ok]).astype(np.int64)
    ok &= (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
    pix = np.full(len(z), -1, dtype=np.int64)
    pix[ok] = vi[ok] * W + ui[ok]
    d = frame.depth.ravel()
    vis = ok.copy()
    vis[ok] = (d[pix[ok]] > 0) & (np.abs(d[pix[ok]] - z[ok]) <= vis_tol)
    pix[~vis] = -1
    return pix


def occupancy_from_pixels(mask, pix, point_sv, sv_sizes):
    """Sparse occupancy (super-voxel ids, ratios) of one mask given visible pixels."""
    sel = pix >= 0
    inside = np.zeros(len(pix), dtype=bool)
    inside[sel] = np.asarray(mask).ravel()[pix[sel]]
    counts = np.bincount(point_sv[inside], minlength=len(sv_sizes))
    idx = np.flatnonzero(counts)
    return idx, counts[idx] / sv_sizes[idx]


def compute_occupancy(mask, supervoxels, frame, positions, vis_tol=0.02):
    """Occupancy ratio o(k) of every super-voxel k for one mask, as a dict."""
    m = mask.mask if hasattr(mask, "mask") else mask
    pix = visible_pixels(positions, frame, vis_tol)
    idx, val = occupancy_from_pixels(m, pix, supervoxels.point_labels, supervoxels.sizes)
    return dict(zip(idx.tolist(), val.tolist()))


# ---------------------------------------------------------------- similarities

def spatial_similarity(o_i, o_j, weights, eps=1e-8) -> float:
    """Weighted Jaccard index of two occupancy vectors.

    ``o_i``/``o_j`` are dense arrays over super-voxels or ``{k: o(k)}`` dicts.
    """
    if isinstance(o_i, dict) or isinstance(o_j, dict):
        o_i, o_j = dict(o_i), dict(o_j)
        keys = set(o_i) | set(o_j)
        num = sum(weights[k] * min(o_i.get(k, 0.0), o_j.get(k, 0.0)) for k in keys)
        den = sum(weights[k] * max(o_i.get(k, 0.0), o_j.get(k, 0.0)) for k in keys)
        return float(num / (den + eps))
    o_i, o_j, w = np.asarray(o_i, float), np.asarray(o_j, float), np.asarray(weights, float)
    num = float(np.sum(w * np.minimum(o_i, o_j)))
    den = float(np.sum(w * np.maximum(o_i, o_j)))
    return num / (den + eps)


def semantic_similarity(e_i, e_j) -> float:
    e_i, e_j = np.asarray(e_i, float), np.asarray(e_j, float)
    if e_i.shape != e_j.shape:
        raise ValueError(f"embedding dimension mismatch: {e_i.shape} vs {e_j.shape}")
    return float(np.dot(e_i, e_j))


def pairwise_spatial(O: sparse.csr_matrix, weights, eps=1e-8) -> np.ndarray:
    """All-pairs weighted Jaccard over the rows of a sparse occupancy matrix."""
    O = O.tocsr()
    n = O.shape[0]
    w = np.asarray(weights, float)
    union_part = np.asarray(O.multiply(w[None, :]).sum(axis=1)).ravel()
    w_data = w[O.indices]
    row_of = np.repeat(np.arange(n), np.diff(O.indptr))
    inter = np.zeros((n, n))
    for i in range(n):
        dense = np.zeros(O.shape[1])
        lo, hi = O.indptr[i], O.indptr[i + 1]
        dense[O.indices[lo:hi]] = O.data[lo:hi]
        vals = np.minimum(dense[O.indices], O.data) * w_data
        inter[i] = np.bincount(row_of, vals, minlength=n)
    inter = 0.5 * (inter + inter.T)
    union = union_part[:, None] + union_part[None, :] - inter
    return inter / (union + eps)


# ---------------------------------------------------------------- mask table

@dataclass
class MaskTable:
    """Occupancy, embeddings and pairwise similarities of every mask in a scene."""

    keys: list[tuple[int, int]]            # (frame, mask_id) per atom
    frames: np.ndarray
    areas: np.ndarray
    occupancy: sparse.csr_matrix          # atoms x super-voxels
    embeddings: np.ndarray                # atoms x D, unit norm
    weights: np.ndarray                   # normalized super-voxel weights
    s_spat: np.ndarray
    s_sem: np.ndarray
    index: dict = field(default_factory=dict)

    def __post_init__(self):
        self.index = {k: i for i, k in enumerate(self.keys)}

    def atom(self, frame, mask_id) -> int:
        return self.index[(frame, mask_id)]


def build_mask_table(frames, forests, cloud, supervoxels, vis_tol=0.02, eps=1e-8, executor=None) -> MaskTable:
    keys, rows, embs, areas = [], [], [], []

    def one_frame(args):
        frame, forest = args
        pix = visible_pixels(cloud.positions, frame, vis_tol)
        out = []
        for mid in sorted(forest.nodes):
            idx, val = occupancy_from_pixels(forest.nodes[mid].mask, pix, supervoxels.point_labels, supervoxels.sizes)
            out.append(((frame.index, mid), idx, val, frame.embeddings[mid], forest.nodes[mid].area))
        return out

    jobs = list(zip(frames, forests))
    results = list(executor.map(one_frame, jobs)) if executor is not None else [one_frame(j) for j in jobs]
    for res in results:
        for key, idx, val, e, a in res:
            keys.append(key)
            rows.append((idx, val))
            embs.append(e)
            areas.append(a)
    n, K = len(keys), supervoxels.count
    indptr = np.concatenate([[0], np.cumsum([len(r[0]) for r in rows])]).astype(np.int64)
    indices = np.concatenate([r[0] for r in rows]) if rows else np.zeros(0, np.int64)
    data = np.concatenate([r[1] for r in rows]) if rows else np.zeros(0)
    O = sparse.csr_matrix((data, indices, indptr), shape=(n, K))
    E = np.asarray(embs, float).reshape(n, -1)
    w = supervoxels.weights
    return MaskTable(
        keys=keys,
        frames=np.array([k[0] for k in keys], dtype=np.int64),
        areas=np.asarray(areas, dtype=np.int64),
        occupancy=O,
        embeddings=E,
        weights=w,
        s_spat=pairwise_spatial(O, w, eps) if n else np.zeros((0, 0)),
        s_sem=0.5 * (E @ E.T + (E @ E.T).T) if n else np.zeros((0, 0)),
    )


# ---------------------------------------------------------------- leaf graph

@dataclass
class LeafGraph:
    table: MaskTable
    tau_spat: float = 0.5
    tau_sem: float = 0.65
    sets: dict[int, tuple[int, ...]] = field(default_factory=dict)   # node -> atoms
    edges: dict[tuple[int, int], tuple[float, float]] = field(default_factory=dict)
    adj: dict[int, set[int]] = field(default_factory=dict)
    next_id: int = 0
    merges: list = field(default_factory=list)      # (stage, u, v, w, value)
    substitutions: list = field(default_factory=list)  # (iteration, removed atoms, added atom)

    # -- structure
    def add_node(self, atoms) -> int:
        nid = self.next_id
        self.next_id += 1
        self.sets[nid] = tuple(sorted(atoms))
        self.adj[nid] = set()
        return nid

    def remove_node(self, nid):
        for x in self.adj.pop(nid):
            self.adj[x].discard(nid)
            self.edges.pop((min(nid, x), max(nid, x)), None)
        del self.sets[nid]

    def remove_edge(self, u, v):
        self.edges.pop((min(u, v), max(u, v)), None)
        self.adj[u].discard(v)
        self.adj[v].discard(u)

    def node_frames(self, nid) -> set[int]:
        return set(self.table.frames[list(self.sets[nid])].tolist())

    def conflict(self, u, v) -> bool:
        return bool(self.node_frames(u) & self.node_frames(v))

    def similarity(self, u, v) -> tuple[float, float] | None:
        """Mean pairwise similarities over cross-frame constituent pairs."""
        A, B = list(self.sets[u]), list(self.sets[v])
        fa, fb = self.table.frames[A], self.table.frames[B]
        cross = fa[:, None] != fb[None, :]
        if not cross.any():
            return None
        sp = self.table.s_spat[np.ix_(A, B)][cross].mean()
        se = self.table.s_sem[np.ix_(A, B)][cross].mean()
        return float(sp), float(se)

    def connect(self, u, v) -> bool:
        s = self.similarity(u, v)
        if s is None:
            return False
        self.edges[(min(u, v), max(u, v))] = s
        self.adj[u].add(v)
        self.adj[v].add(u)
        return True

    def edge(self, u, v):
        return self.edges.get((min(u, v), max(u, v)))

    @property
    def nodes(self) -> list[int]:
        return sorted(self.sets)

    def groups(self) -> list[tuple[int, tuple[int, ...]]]:
        return [(n, self.sets[n]) for n in self.nodes]

    def residuals(self) -> list[int]:
        return [n for n in self.nodes if len(self.sets[n]) == 1]

    def dump(self, path, stage=""):
        """Plain-text dump of nodes and edges, for inspection and diffs."""
        lines = [f"# stage {stage}", f"# nodes {len(self.sets)} edges {len(self.edges)}"]
        keys = self.table.keys
        for n in self.nodes:
            lines.append(f"node {n} " + " ".join(f"{keys[a][0]}:{keys[a][1]}" for a in self.sets[n]))
        for (u, v) in sorted(self.edges):
            sp, se = self.edges[(u, v)]
            lines.append(f"edge {u} {v} {sp:.6f} {se:.6f}")
        with open(path, "a") as fh:
            fh.write("\n".join(lines) + "\n")


def construct_leaf_graph(forests, table: MaskTable, tau_spat=0.5, tau_sem=0.65) -> LeafGraph:
    """Leaf nodes of every forest; an edge for every pair from different frames."""
    g = LeafGraph(table, tau_spat, tau_sem)
    for forest in forests:
        for mid in forest.leaves:
            g.add_node([table.atom(forest.frame, mid)])
    ids = g.nodes
    fr = np.array([table.frames[g.sets[n][0]] for n in ids])
    atoms = np.array([g.sets[n][0] for n in ids])
    for a in range(len(ids)):
        for b in np.flatnonzero(fr[a + 1:] != fr[a]) + a + 1:
            u, v = ids[a], ids[b]
            g.edges[(u, v)] = (float(table.s_spat[atoms[a], atoms[b]]), float(table.s_sem[atoms[a], atoms[b]]))
            g.adj[u].add(v)
            g.adj[v].add(u)
    return g


def group_and_rewire(graph: LeafGraph, u: int, v: int) -> int | None:
    """Merge u and v into a new node and rewire their neighbours.

    A merge that would put two masks of one frame in the same node is
    rejected: the edge is dropped and None returned. Rewired edges that would
    join frame-sharing nodes are never created, since they could never merge.
    """
    if graph.edge(u, v) is None:
        raise KeyError(f"no edge between {u} and {v}")
    if graph.conflict(u, v):
        graph.remove_edge(u, v)
        return None
    nbrs = (graph.adj[u] | graph.adj[v]) - {u, v}
    w = graph.add_node(graph.sets[u] + graph.sets[v])
    wf = graph.node_frames(w)
    for x in sorted(nbrs):
        if not (wf & graph.node_frames(x)):
            graph.connect(w, x)
    graph.remove_node(u)
    graph.remove_node(v)
    return w


_STAGES = {"spatial": 0, "semantic": 1}


def group_by_similarity(graph: LeafGraph, stages=("spatial", "semantic")) -> dict:
    """Greedy argmax merging, one stage per similarity. Returns merge counts."""
    counts = {}
    for stage in stages:
        col = _STAGES[stage]
        tau = graph.tau_spat if col == 0 else graph.tau_sem
        heap = [(-s[col], u, v) for (u, v), s in graph.edges.items() if s[col] >= tau]
        heapq.heapify(heap)
        n_merge = 0
        while heap:
            neg, u, v = heapq.heappop(heap)
            if (u, v) not in graph.edges:
                continue
            w = group_and_rewire(graph, u, v)
            if w is None:
                continue
            n_merge += 1
            graph.merges.append((stage, u, v, w, -neg))
            for x in graph.adj[w]:
                s = graph.edges[(min(w, x), max(w, x))]
                if s[col] >= tau:
                    heapq.heappush(heap, (-s[col], min(w, x), max(w, x)))
        counts[stage] = n_merge
    return counts


# ---------------------------------------------------------------- substitution

def substitute_residuals(graph: LeafGraph, forests, max_iterations: int | None = None) -> dict:
    """Replace residual leaves by their parent mask where the whole subtree is residual.

    After each substitution round both grouping stages are rerun. Stops when
    no substitution applies or after ``max_iterations`` rounds (default: the
    deepest tree). Returns per-round statistics.
    """
    by_frame = {f.frame: f for f in forests}
    if max_iterations is None:
        max_iterations = max((f.max_depth for f in forests), default=0)
    t = graph.table
    rounds = []
    for it in range(max_iterations):
        atom_node = {graph.sets[n][0]: n for n in graph.nodes if len(graph.sets[n]) == 1}
        grouped_atoms = {a for n in graph.nodes if len(graph.sets[n]) > 1 for a in graph.sets[n]}
        done_parents = set()
        added = []
        for n in graph.residuals():
            if n not in graph.sets:
                continue
            a = graph.sets[n][0]
            frame, mid = t.keys[a]
            forest = by_frame[frame]
            parent = forest.nodes[mid].parent
            if parent is None or (frame, parent) in done_parents:
                continue
            desc = [t.index[(frame, d)] for d in forest.descendants(parent) if (frame, d) in t.index]
            in_graph = [d for d in desc if d in atom_node or d in grouped_atoms]
            if any(d in grouped_atoms for d in in_graph):
                continue
            done_parents.add((frame, parent))
            for d in in_graph:
                graph.remove_node(atom_node.pop(d))
            p_atom = t.index[(frame, parent)]
            p = graph.add_node([p_atom])
            atom_node[p_atom] = p
            added.append(p)
            graph.substitutions.append((it, tuple(in_graph), p_atom))
        if not added:
            break
        for p in added:
            if p not in graph.sets:
                continue
            pf = graph.node_frames(p)
            for x in graph.nodes:
                if x != p and not (pf & graph.node_frames(x)):
                    graph.connect(p, x)
        merges = group_by_similarity(graph)
        rounds.append({"iteration": it, "substituted": len(added), **merges})
    return {"rounds": rounds, "iterations": len(rounds), "bound": max_iterations}
