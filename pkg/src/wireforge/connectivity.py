"""Minimum-spanning-tree regularizer over the wire-endpoint graph.

Every pair of wires gets an edge weighted by the smallest of the four
squared endpoint-to-endpoint distances (head/head, tail/head, tail/tail,
head/tail). Prim's algorithm picks the tree; its total weight is the
connectivity budget, and each tree edge pulls its realized endpoint pair
together with gradient 2(a - b). The tree topology and the per-edge argmin
are recomputed every iteration and held fixed within a step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import WireArt

# endpoint-combination order for the four-way distance; ties take the first
_COMBOS = ((0, 0), (1, 0), (1, 1), (0, 1))  # (end of i, end of j), 0=head 1=tail


@dataclass(frozen=True)
class EndpointPair:
    i: int
    j: int
    end_i: int  # 0 = head, 1 = tail
    end_j: int
    weight: float


@dataclass
class WireGraph:
    """Dense symmetric pairwise weights plus the realizing endpoint combo."""

    weights: np.ndarray  # (n, n) squared distances, inf on the diagonal
    combo: np.ndarray  # (n, n) index into _COMBOS

    @property
    def n(self) -> int:
        return self.weights.shape[0]


@dataclass
class MstResult:
    edges: list  # n-1 EndpointPair records
    total_weight: float

    def to_json_dict(self) -> dict:
        return {
            "total_weight": self.total_weight,
            "edges": [
                {"i": e.i, "j": e.j, "end_i": e.end_i, "end_j": e.end_j,
                 "weight": e.weight}
                for e in self.edges
            ],
        }


def endpoint_distance(art: WireArt, i: int, j: int) -> EndpointPair:
    """Four-way squared endpoint distance between wires i and j."""
    if i == j:
        raise ValueError("endpoint distance needs two distinct wires")
    ends_i = (art.wires[i].head, art.wires[i].tail)
    ends_j = (art.wires[j].head, art.wires[j].tail)
    best = None
    for ci, (ei, ej) in enumerate(_COMBOS):
        d = ends_i[ei] - ends_j[ej]
        w = float(d @ d)
        if best is None or w < best[0]:
            best = (w, ei, ej)
    return EndpointPair(i, j, best[1], best[2], best[0])


def build_graph(art: WireArt) -> WireGraph:
    """Complete endpoint graph over all wires, vectorized."""
    ep = art.points[art.endpoints]  # (n, 2, 3) head/tail positions
    diff = ep[:, None, :, None, :] - ep[None, :, None, :, :]  # (n,n,2,2,3)
    d2 = np.einsum("ijabk,ijabk->ijab", diff, diff)
    # reorder the (end_i, end_j) grid into the documented combo order
    flat = np.stack([d2[:, :, ei, ej] for ei, ej in _COMBOS], axis=-1)  # (n,n,4)
    combo = np.argmin(flat, axis=-1)
    weights = np.min(flat, axis=-1)
    np.fill_diagonal(weights, np.inf)
    return WireGraph(weights, combo)


def prim_mst(graph: WireGraph) -> MstResult:
    """Array Prim from vertex 0; key ties resolve to the smallest vertex."""
    n = graph.n
    if n <= 1:
        return MstResult([], 0.0)
    key = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    in_tree = np.zeros(n, dtype=bool)
    key[0] = 0.0
    edges = []
    for _ in range(n):
        u = int(np.argmin(np.where(in_tree, np.inf, key)))  # argmin takes first
        in_tree[u] = True
        if parent[u] >= 0:
            p = int(parent[u])
            ci, cj = _order_edge(graph, p, u)
            edges.append(EndpointPair(p, u, ci, cj, float(graph.weights[p, u])))
        improve = ~in_tree & (graph.weights[u] < key)  # strict: keep older parent on ties
        key[improve] = graph.weights[u][improve]
        parent[improve] = u
    total = float(sum(e.weight for e in edges))
    return MstResult(edges, total)


def _order_edge(graph: WireGraph, i: int, j: int):
    """Combo endpoints of edge (i, j) expressed for that vertex order."""
    if i < j:
        ei, ej = _COMBOS[graph.combo[i, j]]
    else:
        ej, ei = _COMBOS[graph.combo[j, i]]
    return ei, ej


def mst_loss_and_grad(art: WireArt):
    """MST budget and its gradient on the flat control-point array.

    Returns (loss, grad, mst) with grad shaped like art.points; only the
    realized endpoint rows of tree edges are nonzero.
    """
    grad = np.zeros_like(art.points)
    if art.n_wires <= 1:
        return 0.0, grad, MstResult([], 0.0)
    mst = prim_mst(build_graph(art))
    ep_idx = art.endpoints
    for e in mst.edges:
        ai = int(ep_idx[e.i, e.end_i])
        bi = int(ep_idx[e.j, e.end_j])
        d = art.points[ai] - art.points[bi]
        grad[ai] += 2.0 * d
        grad[bi] -= 2.0 * d
    return mst.total_weight, grad, mst
