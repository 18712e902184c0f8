"""Affinity graphs over embedding vectors and their connected components."""

from dataclasses import dataclass

import numpy as np


def affinity_matrix(vectors: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of row vectors, [K,K] in [-1,1], diag 1."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 1:
        raise ValueError(f"expected [K,D] with K >= 1, got shape {vectors.shape}")
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding vector")
    unit = vectors / norms
    a = np.clip(unit @ unit.T, -1.0, 1.0)
    np.fill_diagonal(a, 1.0)
    return (a + a.T) / 2.0


def connected_components(adjacency: np.ndarray) -> list[list[int]]:
    """Connected components of a symmetric boolean adjacency matrix.

    Components are returned sorted by their smallest member, members
    ascending, so the output is deterministic.
    """
    adjacency = np.asarray(adjacency)
    k = adjacency.shape[0]
    if adjacency.shape != (k, k):
        raise ValueError(f"adjacency must be square, got shape {adjacency.shape}")
    seen = np.zeros(k, dtype=bool)
    components = []
    for start in range(k):
        if seen[start]:
            continue
        frontier = [start]
        seen[start] = True
        members = []
        while frontier:
            node = frontier.pop()
            members.append(node)
            neighbors = np.flatnonzero(adjacency[node] & ~seen)
            seen[neighbors] = True
            frontier.extend(neighbors.tolist())
        components.append(sorted(members))
    return components


@dataclass
class AffinityGraph:
    """Similarity matrix, thresholded adjacency and its components."""

    matrix: np.ndarray
    threshold: float
    components: list[list[int]]

    @classmethod
    def build(cls, vectors: np.ndarray, threshold: float) -> "AffinityGraph":
        a = affinity_matrix(vectors)
        adjacency = a > threshold
        np.fill_diagonal(adjacency, True)
        return cls(matrix=a, threshold=threshold,
                   components=connected_components(adjacency))
