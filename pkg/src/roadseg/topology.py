"""Road-topology evaluation: masks -> skeletons -> graphs -> APLS.

Binary masks are thinned with Zhang-Suen iterative thinning, traced
into an undirected weighted graph (junctions/endpoints as nodes,
degree-2 chains as edges, axial steps cost 1 and diagonal steps sqrt 2),
and compared by Average Path Length Similarity: control nodes are
injected along edges, ground-truth control nodes are snapped onto the
prediction, and shortest-path lengths between all valid ground-truth
pairs are compared pairwise.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .tensor import DomainError

SQRT2 = float(np.sqrt(2.0))

# 8-neighborhood, fixed order: N, NE, E, SE, S, SW, W, NW
_OFFSETS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def skeletonize(mask):
    """Zhang-Suen thinning; anti-extensive and idempotent."""
    img = np.ascontiguousarray(np.asarray(mask, dtype=bool))
    img = img.copy()
    while True:
        changed = False
        for sub in (0, 1):
            p = np.pad(img, 1, constant_values=False)
            p2 = p[:-2, 1:-1]
            p3 = p[:-2, 2:]
            p4 = p[1:-1, 2:]
            p5 = p[2:, 2:]
            p6 = p[2:, 1:-1]
            p7 = p[2:, :-2]
            p8 = p[1:-1, :-2]
            p9 = p[:-2, :-2]
            ring = (p2, p3, p4, p5, p6, p7, p8, p9)
            b = np.zeros(img.shape, dtype=np.int8)
            a = np.zeros(img.shape, dtype=np.int8)
            for i in range(8):
                b += ring[i]
                a += (~ring[i]) & ring[(i + 1) % 8]
            cond = img & (b >= 2) & (b <= 6) & (a == 1)
            if sub == 0:
                cond &= ~(p2 & p4 & p6) & ~(p4 & p6 & p8)
            else:
                cond &= ~(p2 & p4 & p8) & ~(p2 & p6 & p8)
            if cond.any():
                img[cond] = False
                changed = True
        if not changed:
            return img


def _step_cost(p, q):
    return SQRT2 if p[0] != q[0] and p[1] != q[1] else 1.0


@dataclass
class Edge:
    u: int
    v: int
    length: float
    pixels: list  # (row, col) chain including both endpoint pixels


@dataclass
class RoadGraph:
    """Undirected weighted graph; multi-edges and self-loops permitted."""

    nodes: dict = field(default_factory=dict)   # id -> (row, col)
    edges: list = field(default_factory=list)

    def is_empty(self):
        return not self.edges

    def total_length(self):
        return sum(e.length for e in self.edges)

    def adjacency(self):
        adj = {u: [] for u in self.nodes}
        for e in self.edges:
            if e.u == e.v:
                continue
            adj[e.u].append((e.v, e.length))
            adj[e.v].append((e.u, e.length))
        return adj

    def copy(self):
        return RoadGraph(dict(self.nodes),
                         [Edge(e.u, e.v, e.length, list(e.pixels)) for e in self.edges])

    def export_text(self):
        lines = [f"NODES {len(self.nodes)} EDGES {len(self.edges)}"]
        for nid in sorted(self.nodes):
            r, c = self.nodes[nid]
            lines.append(f"{nid} {r:g} {c:g}")
        for e in self.edges:
            lines.append(f"{e.u} {e.v} {e.length:.9g}")
        return "\n".join(lines) + "\n"


def _intra_cluster_dists(cluster, source, neighbors):
    """Step-cost shortest paths from source to every pixel of a cluster.

    Returns (dist, prev) where prev traces each pixel back to source.
    """
    dist = {source: 0.0}
    prev = {source: None}
    heap = [(0.0, source)]
    while heap:
        d, p = heapq.heappop(heap)
        if d > dist.get(p, np.inf):
            continue
        for q in neighbors(p):
            if q not in cluster:
                continue
            nd = d + _step_cost(p, q)
            if nd < dist.get(q, np.inf) - 1e-12:
                dist[q] = nd
                prev[q] = p
                heapq.heappush(heap, (nd, q))
    return dist, prev


def skeleton_to_graph(skel):
    """Trace a thinned mask into a graph.

    Node sites are skeleton pixels whose 8-neighbor degree differs
    from 2: endpoints stand alone, while 8-connected clusters of
    junction pixels (degree >= 3) collapse to a single node at the
    cluster pixel with the smallest total step cost to the rest of the
    cluster (a crossing of two lines yields one junction, not five).
    One anchor pixel marks each pure cycle. Edges follow degree-2
    chains; their length includes the steps from the cluster entry
    pixel to the cluster's node pixel.
    """
    skel = np.asarray(skel, dtype=bool)
    pixels = {(int(r), int(c)) for r, c in zip(*np.nonzero(skel))}

    def neighbors(p):
        r, c = p
        return [(r + dr, c + dc) for dr, dc in _OFFSETS if (r + dr, c + dc) in pixels]

    degree = {p: len(neighbors(p)) for p in pixels}
    node_pixels = {p for p in pixels if degree[p] != 2}
    junctions = {p for p in node_pixels if degree[p] >= 3}

    # cluster junction pixels; choose each cluster's cost-median pixel
    cluster_of = {}
    site_of = {}        # node pixel -> (site pixel, attach cost to site)
    seen = set()
    for start in sorted(junctions):
        if start in seen:
            continue
        cluster = {start}
        frontier = [start]
        while frontier:
            p = frontier.pop()
            for q in neighbors(p):
                if q in junctions and q not in cluster:
                    cluster.add(q)
                    frontier.append(q)
        seen |= cluster
        rep = min(sorted(cluster),
                  key=lambda p: (sum(_intra_cluster_dists(cluster, p, neighbors)[0].values()), p))
        rep_dist, rep_prev = _intra_cluster_dists(cluster, rep, neighbors)
        for p in cluster:
            cluster_of[p] = rep
            path = [p]
            while rep_prev[path[-1]] is not None:
                path.append(rep_prev[path[-1]])
            site_of[p] = (rep, rep_dist[p], path[::-1])   # rep -> ... -> p
    for p in node_pixels - junctions:
        site_of[p] = (p, 0.0, [p])

    g = RoadGraph()
    node_id = {}
    for site in sorted({s for s, _, _ in site_of.values()}):
        node_id[site] = len(node_id)
        g.nodes[node_id[site]] = (float(site[0]), float(site[1]))

    def endpoints_of(p, q, base_cost, chain):
        # extend the chain to each site pixel so length == sum of pixel steps
        sp, cp, path_p = site_of[p]
        sq, cq, path_q = site_of[q]
        full = path_p[:-1] + chain + path_q[-2::-1]
        return Edge(node_id[sp], node_id[sq], base_cost + cp + cq, full)

    visited_steps = set()
    chained = set()

    def trace(start, first):
        """Walk from a node pixel through degree-2 pixels to the next node."""
        chain = [start, first]
        cost = _step_cost(start, first)
        prev, cur = start, first
        while cur not in node_pixels and cur not in node_id:
            chained.add(cur)
            nxt = [q for q in neighbors(cur) if q != prev]
            if not nxt:   # dead end inside a chain cannot occur on a thinned mask
                break
            prev, cur = cur, nxt[0]
            cost += _step_cost(prev, cur)
            chain.append(cur)
        return chain, cost

    for p in sorted(node_pixels):
        for q in neighbors(p):
            if q in node_pixels:
                # direct adjacency; same junction cluster is internal
                if q < p or cluster_of.get(p) == cluster_of.get(q) is not None:
                    continue
                g.edges.append(endpoints_of(p, q, _step_cost(p, q), [p, q]))
                continue
            if (p, q) in visited_steps:
                continue
            chain, cost = trace(p, q)
            end = chain[-1]
            visited_steps.add((p, q))
            if end in node_pixels:
                visited_steps.add((end, chain[-2]))
                g.edges.append(endpoints_of(p, end, cost, chain))

    # pure cycles: degree-2 components untouched by any chain
    remaining = {p for p in pixels if degree[p] == 2 and p not in chained
                 and p not in node_pixels}
    while remaining:
        start = min(remaining)
        nid = len(node_id)
        node_id[start] = nid
        g.nodes[nid] = (float(start[0]), float(start[1]))
        first = neighbors(start)[0]
        chain, cost = trace(start, first)
        g.edges.append(Edge(nid, nid, cost, chain))
        remaining -= set(chain)
        remaining.discard(start)

    return g


def mask_to_graph(mask):
    """Convenience: skeletonize then trace."""
    return skeleton_to_graph(skeletonize(mask))


def inject_control_nodes(g, spacing):
    """Subdivide edges along their pixel chains at intervals <= spacing.

    Greedy cuts at pixel positions conserve total length exactly; edges
    not longer than the spacing are left untouched.
    """
    if spacing <= 0:
        raise DomainError("control-node spacing must be positive")
    out = RoadGraph(dict(g.nodes), [])
    next_id = max(g.nodes) + 1 if g.nodes else 0

    for e in g.edges:
        if e.length <= spacing or len(e.pixels) < 3:
            out.edges.append(Edge(e.u, e.v, e.length, list(e.pixels)))
            continue
        seg_pixels = [e.pixels[0]]
        seg_cost = 0.0
        cur_u = e.u
        for prev, cur in zip(e.pixels, e.pixels[1:]):
            step = _step_cost(prev, cur)
            if seg_cost + step > spacing and seg_cost > 0.0:
                nid = next_id
                next_id += 1
                out.nodes[nid] = (float(prev[0]), float(prev[1]))
                out.edges.append(Edge(cur_u, nid, seg_cost, seg_pixels))
                cur_u = nid
                seg_pixels = [prev]
                seg_cost = 0.0
            seg_pixels.append(cur)
            seg_cost += step
        out.edges.append(Edge(cur_u, e.v, seg_cost, seg_pixels))
    return out


def snap_nodes(from_g, to_g, max_dist):
    """Map each node of from_g to its nearest node of to_g within max_dist.

    Ties break toward the lowest target node id; nodes with no target in
    range map to None.
    """
    if max_dist <= 0:
        raise DomainError("snap radius must be positive")
    targets = sorted(to_g.nodes.items())
    mapping = {}
    for u, (r, c) in from_g.nodes.items():
        best, best_d = None, None
        for v, (tr, tc) in targets:
            d = np.hypot(tr - r, tc - c)
            if d <= max_dist and (best_d is None or d < best_d - 1e-12):
                best, best_d = v, d
        mapping[u] = best
    return mapping


def dijkstra(g, source, adj=None):
    """Shortest-path lengths from source over edge lengths."""
    if adj is None:
        adj = g.adjacency()
    dist = {source: 0.0}
    heap = [(0.0, source)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist.get(u, np.inf):
            continue
        for v, length in adj[u]:
            nd = d + length
            if nd < dist.get(v, np.inf):
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return dist


def shortest_path_length(g, u, v):
    """Length of the shortest u-v path, or None when disconnected."""
    if u == v:
        return 0.0
    return dijkstra(g, u).get(v)


@dataclass
class APLSReport:
    score: float
    path_count: int
    missing_paths: int
    terms: list


def _apls_one_way(gt, pred, spacing, snap_dist):
    if gt.is_empty() and pred.is_empty():
        return APLSReport(1.0, 0, 0, [])
    if gt.is_empty() or pred.is_empty():
        return APLSReport(0.0, 0, 0, [])

    gt_i = inject_control_nodes(gt, spacing)
    pred_i = inject_control_nodes(pred, spacing)
    snapped = snap_nodes(gt_i, pred_i, snap_dist)

    gt_adj = gt_i.adjacency()
    pred_adj = pred_i.adjacency()
    control = sorted(gt_i.nodes)
    pred_dists = {}

    def pred_dist_from(src):
        if src not in pred_dists:
            pred_dists[src] = dijkstra(pred_i, src, pred_adj)
        return pred_dists[src]

    terms = []
    missing = 0
    for i, a in enumerate(control):
        da = dijkstra(gt_i, a, gt_adj)
        for b in control[i + 1:]:
            length = da.get(b)
            if length is None or length <= 0.0:
                continue
            a2, b2 = snapped[a], snapped[b]
            if a2 is None or b2 is None:
                terms.append(1.0)
                missing += 1
                continue
            length_p = pred_dist_from(a2).get(b2) if a2 != b2 else 0.0
            if length_p is None:
                terms.append(1.0)
                missing += 1
            else:
                terms.append(min(1.0, abs(length - length_p) / length))
    if not terms:
        return APLSReport(1.0, 0, 0, [])
    return APLSReport(1.0 - float(np.mean(terms)), len(terms), missing, terms)


def apls(gt, pred, spacing=50.0, snap_dist=4.0, symmetric=False):
    """Average Path Length Similarity of pred against gt.

    One-directional by default (paths sampled in the ground truth); with
    ``symmetric`` the two directional scores are averaged. Both graphs
    empty scores 1.0; exactly one empty scores 0.0.
    """
    if spacing <= 0 or snap_dist <= 0:
        raise DomainError("spacing and snap_dist must be positive")
    fwd = _apls_one_way(gt, pred, spacing, snap_dist)
    if not symmetric:
        return fwd
    bwd = _apls_one_way(pred, gt, spacing, snap_dist)
    score = 0.5 * (fwd.score + bwd.score)
    return APLSReport(score, fwd.path_count + bwd.path_count,
                      fwd.missing_paths + bwd.missing_paths,
                      [1.0 - fwd.score, 1.0 - bwd.score])
