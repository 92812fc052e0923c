"""Per-frame mask forests ordered by pixel containment.

A mask's parent is the smallest-area mask that contains at least
``tau_contain`` of its pixels, so a chain cluster > object > part comes out
root-to-leaf. Leaves are the candidates for cross-view grouping.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)


@dataclass
class MaskNode:
    mask_id: int
    frame: int
    mask: np.ndarray
    area: int
    parent: int | None = None
    children: list[int] = field(default_factory=list)

    @property
    def key(self) -> tuple[int, int]:
        return (self.frame, self.mask_id)


@dataclass
class InstanceForest:
    frame: int
    nodes: dict[int, MaskNode]
    roots: list[int]
    leaves: list[int]
    aliases: dict[int, int] = field(default_factory=dict)  # duplicate mask id -> kept id

    def depth(self, mask_id: int) -> int:
        d = 0
        node = self.nodes[mask_id]
        while node.parent is not None:
            d += 1
            node = self.nodes[node.parent]
        return d

    @property
    def max_depth(self) -> int:
        return max((self.depth(m) for m in self.leaves), default=0)

    def descendants(self, mask_id: int) -> list[int]:
        out, stack = [], list(self.nodes[mask_id].children)
        while stack:
            m = stack.pop()
            out.append(m)
            stack.extend(self.nodes[m].children)
        return sorted(out)

    def path_to_root(self, mask_id: int) -> list[int]:
        path = [mask_id]
        while self.nodes[path[-1]].parent is not None:
            path.append(self.nodes[path[-1]].parent)
        return path


def containment_ratio(a, b) -> float:
    """|a & b| / |b|: the share of b lying inside a."""
    a = a.mask if isinstance(a, MaskNode) else np.asarray(a, bool)
    b = b.mask if isinstance(b, MaskNode) else np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError("masks differ in shape")
    nb = int(b.sum())
    if nb == 0:
        raise ValueError("empty mask")
    return float(np.logical_and(a, b).sum()) / nb


def _overlap_matrix(masks: list[np.ndarray]) -> np.ndarray:
    rows = [np.flatnonzero(m.ravel()) for m in masks]
    indptr = np.concatenate([[0], np.cumsum([len(r) for r in rows])])
    indices = np.concatenate(rows) if rows else np.zeros(0, int)
    size = masks[0].size if masks else 0
    M = sparse.csr_matrix((np.ones(len(indices), dtype=np.int32), indices, indptr), shape=(len(masks), size))
    return (M @ M.T).toarray()


def build_instance_forest(frame_index: int, masks: dict, tau_contain: float = 0.95) -> InstanceForest:
    """Build the containment forest for one frame's masks (``{mask_id: bool HxW}``).

    Identical duplicates are collapsed onto the lowest id and recorded in
    ``aliases``. Candidate parents with equal area are resolved by lower id.
    """
    ids = sorted(masks)
    areas = {m: int(np.count_nonzero(masks[m])) for m in ids}
    for m in [m for m in ids if areas[m] == 0]:
        logger.warning("frame %d: dropping empty mask %d", frame_index, m)
    ids = [m for m in ids if areas[m] > 0]
    if not ids:
        return InstanceForest(frame_index, {}, [], [])

    inter = _overlap_matrix([masks[m] for m in ids])
    aliases: dict[int, int] = {}
    kept = []
    for a_i, a in enumerate(ids):
        dup = next((k for k in kept if areas[ids[k]] == areas[a] and inter[k, a_i] == areas[a]), None)
        if dup is None:
            kept.append(a_i)
        else:
            aliases[a] = ids[dup]

    nodes = {ids[k]: MaskNode(ids[k], frame_index, masks[ids[k]], areas[ids[k]]) for k in kept}

    # strict total order: (area, -id); a parent must rank above its child
    def rank(k):
        return (areas[ids[k]], -ids[k])

    for b in kept:
        best = None
        for a in kept:
            if a == b or rank(a) <= rank(b):
                continue
            if inter[a, b] / areas[ids[b]] >= tau_contain:
                if best is None or (areas[ids[a]], ids[a]) < (areas[ids[best]], ids[best]):
                    best = a
        if best is not None:
            nodes[ids[b]].parent = ids[best]
    for m, node in nodes.items():
        if node.parent is not None:
            nodes[node.parent].children.append(m)
    for node in nodes.values():
        node.children.sort()
    roots = sorted(m for m, n in nodes.items() if n.parent is None)
    leaves = sorted(m for m, n in nodes.items() if not n.children)
    return InstanceForest(frame_index, nodes, roots, leaves, aliases)


def build_forests(frames, tau_contain: float = 0.95) -> list[InstanceForest]:
    return [build_instance_forest(f.index, f.masks, tau_contain) for f in frames]
