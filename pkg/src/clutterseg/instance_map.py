"""Super-voxel majority vote: converged groups become 3D instances."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class Instance3D:
    id: int
    supervoxels: np.ndarray
    confidence: int                       # number of constituent masks
    embedding: np.ndarray
    members: tuple = ()                   # (frame, mask_id) of constituent masks
    group_id: int = -1
    points: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def vote_scores(groups, occupancy):
    """Score matrix (groups x super-voxels): summed occupancy of each group's masks."""
    O = occupancy.tocsr()
    rows = [np.asarray(O[list(atoms)].sum(axis=0)).ravel() for _, atoms in groups]
    return np.vstack(rows) if rows else np.zeros((0, O.shape[1]))


def assign_supervoxels(scores, confidences, group_ids, min_score=0.0):
    """Per super-voxel winning group index, or -1.

    Ties on score go to the higher confidence, then the lower group id. A
    super-voxel is labeled only when the winning score is positive and at
    least ``min_score``.
    """
    scores = np.asarray(scores, float)
    if scores.shape[0] == 0:
        return np.full(scores.shape[1], -1, dtype=np.int64)
    order = np.lexsort((np.asarray(group_ids), -np.asarray(confidences)))
    ranked = scores[order]
    best = np.argmax(ranked, axis=0)
    top = ranked[best, np.arange(scores.shape[1])]
    out = order[best].astype(np.int64)
    out[(top <= 0) | (top < min_score)] = -1
    return out


def majority_vote(groups, table, supervoxels, embed=None, min_score=0.0) -> list[Instance3D]:
    """Assign super-voxels to groups by coverage-weighted vote.

    ``groups`` is a list of ``(group_id, atom indices)``. Groups that win no
    super-voxel produce no instance. Instances are numbered by descending
    confidence, then group id.
    """
    scores = vote_scores(groups, table.occupancy)
    conf = np.array([len(a) for _, a in groups])
    gids = np.array([g for g, _ in groups])
    winner = assign_supervoxels(scores, conf, gids, min_score)
    won = [np.flatnonzero(winner == gi) for gi in range(len(groups))]
    order = sorted((gi for gi in range(len(groups)) if len(won[gi])), key=lambda gi: (-conf[gi], gids[gi]))
    out = []
    for new_id, gi in enumerate(order):
        gid, atoms = groups[gi]
        emb = embed(atoms) if embed is not None else np.zeros(table.embeddings.shape[1])
        pts = np.flatnonzero(np.isin(supervoxels.point_labels, won[gi]))
        out.append(Instance3D(new_id, won[gi], int(conf[gi]), emb,
                              tuple(table.keys[a] for a in atoms), int(gid), pts))
    return out
