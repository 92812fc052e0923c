"""Instance embeddings and text-query ranking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def aggregate_group_embedding(embeddings, areas=None) -> np.ndarray:
    """Normalized mean of unit embeddings.

    If the mean vanishes (e.g. antipodal inputs) the embedding of the
    largest-area constituent is returned instead.
    """
    E = np.atleast_2d(np.asarray(embeddings, float))
    if E.shape[0] == 0:
        raise ValueError("empty group")
    m = E.mean(axis=0)
    n = np.linalg.norm(m)
    if n < 1e-9:
        k = int(np.argmax(areas)) if areas is not None else 0
        return E[k] / np.linalg.norm(E[k])
    return m / n


def table_embedder(table):
    """Closure mapping a tuple of mask atoms to their aggregated embedding."""
    def embed(atoms):
        atoms = list(atoms)
        return aggregate_group_embedding(table.embeddings[atoms], table.areas[atoms])
    return embed


@dataclass
class QueryResult:
    ranking: list[tuple[int, float]]

    @property
    def target(self) -> int:
        return self.ranking[0][0]

    def top(self, k: int):
        return self.ranking[:k]


def identify_target(text_embedding, instances) -> QueryResult:
    """Rank instances by cosine to the query; ties go to higher confidence, then lower id."""
    if not instances:
        raise ValueError("no instances")
    q = np.asarray(text_embedding, float)
    dims = {np.asarray(i.embedding).shape for i in instances}
    if dims != {q.shape}:
        raise ValueError(f"embedding dimension mismatch: query {q.shape} vs instances {sorted(dims)}")
    q = q / np.linalg.norm(q)
    scored = []
    for inst in instances:
        e = np.asarray(inst.embedding, float)
        scored.append((float(np.dot(q, e) / np.linalg.norm(e)), inst.confidence, inst.id))
    scored.sort(key=lambda s: (-s[0], -s[1], s[2]))
    return QueryResult([(i, s) for s, _, i in scored])
