"""All-pairs hop distances on unweighted graphs.

The numba kernel runs one BFS per source over a CSR adjacency.  Set
``PVH_DISABLE_NUMBA=1`` (or run without numba installed) to use the numpy
path, which expands reachability frontiers with boolean matrix products.
"""

from __future__ import annotations

import os

import numpy as np

UNREACHABLE = -1

_DISABLED = os.environ.get("PVH_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("disabled by PVH_DISABLE_NUMBA")
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


def _hop_matrix_numpy(indptr: np.ndarray, indices: np.ndarray, n: int) -> np.ndarray:
    adj = np.zeros((n, n), dtype=np.int32)
    for u in range(n):
        adj[u, indices[indptr[u]:indptr[u + 1]]] = 1
    dist = np.full((n, n), UNREACHABLE, dtype=np.int32)
    np.fill_diagonal(dist, 0)
    reached = np.eye(n, dtype=bool)
    frontier = reached.copy()
    hop = 0
    while frontier.any():
        hop += 1
        nxt = (frontier.astype(np.int32) @ adj) > 0
        nxt &= ~reached
        dist[nxt] = hop
        reached |= nxt
        frontier = nxt
    return dist


if HAS_NUMBA:

    @njit(cache=True)
    def _hop_matrix_jit(indptr, indices, n):
        dist = np.full((n, n), -1, dtype=np.int32)
        queue = np.empty(n, dtype=np.int64)
        for s in range(n):
            dist[s, s] = 0
            head = 0
            tail = 1
            queue[0] = s
            while head < tail:
                u = queue[head]
                head += 1
                du = dist[s, u]
                for k in range(indptr[u], indptr[u + 1]):
                    v = indices[k]
                    if dist[s, v] < 0:
                        dist[s, v] = du + 1
                        queue[tail] = v
                        tail += 1
        return dist


def to_csr(n: int, edges) -> tuple[np.ndarray, np.ndarray]:
    """CSR arrays for an undirected graph given ``(u, v)`` index pairs."""
    nbrs = [set() for _ in range(n)]
    for u, v in edges:
        if u != v:
            nbrs[u].add(v)
            nbrs[v].add(u)
    indptr = np.zeros(n + 1, dtype=np.int64)
    flat = []
    for u in range(n):
        row = sorted(nbrs[u])
        flat.extend(row)
        indptr[u + 1] = indptr[u] + len(row)
    return indptr, np.asarray(flat, dtype=np.int64)


def hop_matrix(indptr: np.ndarray, indices: np.ndarray, n: int, use_numba: bool | None = None) -> np.ndarray:
    """Return an ``n x n`` int32 matrix of hop counts (-1 where unreachable)."""
    if use_numba is None:
        use_numba = HAS_NUMBA
    if use_numba and HAS_NUMBA:
        return _hop_matrix_jit(indptr, indices, n)
    return _hop_matrix_numpy(indptr, indices, n)
