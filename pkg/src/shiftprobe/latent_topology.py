"""Neighborhood graphs over pooled embeddings and the integrity score.

Vertices are the union of unshifted (Z) and shifted (Zt) embeddings.
Edges join natural spatial neighbors: in 2-D, the exact Delaunay graph
(vertices whose Voronoi cells touch); in higher dimensions, the Gabriel
graph, a guaranteed Delaunay subgraph that stays tractable at any d.
Each edge is homogeneous (same-origin endpoints) or heterogeneous, and
the quality score q = 1 - homogeneous/total measures how interleaved the
two sets are: 1 means fully mixed, 0 means fully separated.

The 2-D construction is incremental insertion with exact in-circle and
orientation predicates (float filter, exact rational fallback), plus a
ghost vertex so hull growth needs no giant bounding triangle. Cocircular
ties count as conflicts, which pins the triangulation deterministically
to the insertion (input) order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Callable

import numpy as np

from . import rng
from .encoders import ORIGIN_SHIFTED, ORIGIN_UNSHIFTED, Embedding, EmbeddingSet
from .shifts import ShiftKind, ShiftSpec, apply as apply_shift
from .signal_core import MultichannelEpoch, RawRecording, preprocess

GHOST = -1

# Float filters for the geometric predicates (Shewchuk-style A bounds).
_ORIENT_BOUND = 3.3306690738754716e-16
_INCIRCLE_BOUND = 1.1102230246251565e-15


def _orient(pts, a: int, b: int, c: int) -> int:
    """Sign of the signed area of triangle (a, b, c): +1 CCW, -1 CW, 0 collinear."""
    ax, ay = pts[a]
    bx, by = pts[b]
    cx, cy = pts[c]
    left = (bx - ax) * (cy - ay)
    right = (by - ay) * (cx - ax)
    det = left - right
    bound = _ORIENT_BOUND * (abs(left) + abs(right))
    if abs(det) > bound:
        return 1 if det > 0 else -1
    fax, fay = Fraction(ax), Fraction(ay)
    det_exact = (Fraction(bx) - fax) * (Fraction(cy) - fay) - (
        Fraction(by) - fay
    ) * (Fraction(cx) - fax)
    return (det_exact > 0) - (det_exact < 0)


def _incircle(pts, a: int, b: int, c: int, d: int) -> int:
    """Sign test: +1 if d is strictly inside the circumcircle of CCW (a, b, c)."""
    adx = pts[a][0] - pts[d][0]
    ady = pts[a][1] - pts[d][1]
    bdx = pts[b][0] - pts[d][0]
    bdy = pts[b][1] - pts[d][1]
    cdx = pts[c][0] - pts[d][0]
    cdy = pts[c][1] - pts[d][1]
    alift = adx * adx + ady * ady
    blift = bdx * bdx + bdy * bdy
    clift = cdx * cdx + cdy * cdy
    det = (
        alift * (bdx * cdy - cdx * bdy)
        + blift * (cdx * ady - adx * cdy)
        + clift * (adx * bdy - bdx * ady)
    )
    permanent = (
        (abs(bdx * cdy) + abs(cdx * bdy)) * alift
        + (abs(cdx * ady) + abs(adx * cdy)) * blift
        + (abs(adx * bdy) + abs(bdx * ady)) * clift
    )
    if abs(det) > _INCIRCLE_BOUND * permanent:
        return 1 if det > 0 else -1
    fa = [Fraction(v) for v in (adx, ady)]
    fb = [Fraction(v) for v in (bdx, bdy)]
    fc = [Fraction(v) for v in (cdx, cdy)]
    la = fa[0] * fa[0] + fa[1] * fa[1]
    lb = fb[0] * fb[0] + fb[1] * fb[1]
    lc = fc[0] * fc[0] + fc[1] * fc[1]
    det_exact = (
        la * (fb[0] * fc[1] - fc[0] * fb[1])
        + lb * (fc[0] * fa[1] - fa[0] * fc[1])
        + lc * (fa[0] * fb[1] - fb[0] * fa[1])
    )
    return (det_exact > 0) - (det_exact < 0)


def _on_open_segment(pts, a: int, b: int, p: int) -> bool:
    """True when p lies strictly between a and b (caller ensures collinearity)."""
    ax, ay = pts[a]
    bx, by = pts[b]
    px, py = pts[p]
    dot = (Fraction(px) - Fraction(ax)) * (Fraction(px) - Fraction(bx)) + (
        Fraction(py) - Fraction(ay)
    ) * (Fraction(py) - Fraction(by))
    return dot < 0


class _Triangulation:
    """Incremental Delaunay over point indices, with a ghost vertex at infinity.

    Triangles are stored as oriented triples (canonical rotation); ghost
    triples (x, y, GHOST) mark hull edge x->y with the outside on its left.
    """

    def __init__(self, pts):
        self.pts = pts
        self.tris: set[tuple[int, int, int]] = set()
        self.edge_map: dict[frozenset, set[tuple[int, int, int]]] = {}

    @staticmethod
    def _canon(tri: tuple[int, int, int]) -> tuple[int, int, int]:
        a, b, c = tri
        rotations = ((a, b, c), (b, c, a), (c, a, b))
        return min(rotations)

    def _add(self, tri: tuple[int, int, int]) -> None:
        tri = self._canon(tri)
        self.tris.add(tri)
        for e in self._edges(tri):
            self.edge_map.setdefault(frozenset(e), set()).add(tri)

    def _remove(self, tri: tuple[int, int, int]) -> None:
        self.tris.discard(tri)
        for e in self._edges(tri):
            key = frozenset(e)
            self.edge_map[key].discard(tri)
            if not self.edge_map[key]:
                del self.edge_map[key]

    @staticmethod
    def _edges(tri):
        a, b, c = tri
        return ((a, b), (b, c), (c, a))

    def _conflict(self, tri: tuple[int, int, int], p: int) -> int:
        """0: no conflict, 1: tie (on circle / on hull edge), 2: strict."""
        if GHOST in tri:
            idx = tri.index(GHOST)
            x, y = tri[(idx + 1) % 3], tri[(idx + 2) % 3]
            o = _orient(self.pts, x, y, p)
            if o > 0:
                return 2
            if o == 0 and _on_open_segment(self.pts, x, y, p):
                return 1
            return 0
        side = _incircle(self.pts, *tri, p)
        if side > 0:
            return 2
        return 1 if side == 0 else 0

    def insert(self, p: int) -> None:
        strengths = {tri: self._conflict(tri, p) for tri in self.tris}
        bad = {tri for tri, s in strengths.items() if s > 0}
        if not bad:
            raise RuntimeError("insertion point conflicts with no triangle")
        seed = min(
            (tri for tri in bad if strengths[tri] == 2), default=min(bad)
        )
        cavity = {seed}
        frontier = [seed]
        while frontier:
            tri = frontier.pop()
            for e in self._edges(tri):
                for nb in self.edge_map[frozenset(e)]:
                    if nb in bad and nb not in cavity:
                        cavity.add(nb)
                        frontier.append(nb)
        boundary: list[tuple[int, int]] = []
        for tri in cavity:
            for d0, d1 in self._edges(tri):
                neighbors = self.edge_map[frozenset((d0, d1))]
                if neighbors - cavity:
                    boundary.append((d0, d1))
        for tri in list(cavity):
            self._remove(tri)
        for d0, d1 in boundary:
            self._add((d0, d1, p))

    def real_edges(self) -> set[frozenset]:
        out: set[frozenset] = set()
        for tri in self.tris:
            if GHOST in tri:
                continue
            for e in self._edges(tri):
                out.add(frozenset(e))
        return out


def delaunay_exact_2d(points: np.ndarray) -> list[tuple[int, int]]:
    """Exact 2-D Delaunay edges by incremental insertion in input order.

    Cocircular ties are resolved deterministically (on-circle counts as a
    conflict), so outputs are a pure function of the input sequence.
    Coincident points are rejected; callers should jitter duplicates.
    """
    pts = [(float(x), float(y)) for x, y in np.asarray(points, dtype=np.float64)]
    n = len(pts)
    if n < 2:
        raise ValueError("need at least 2 points")
    seen: dict[tuple[float, float], int] = {}
    for i, p in enumerate(pts):
        if p in seen:
            raise ValueError(
                f"points {seen[p]} and {i} coincide; resolve duplicates before triangulating"
            )
        seen[p] = i
    if n == 2:
        return [(0, 1)]

    first_noncol = next(
        (k for k in range(2, n) if _orient(pts, 0, 1, k) != 0), None
    )
    if first_noncol is None:
        order = sorted(range(n), key=lambda i: pts[i])
        return [tuple(sorted((order[i], order[i + 1]))) for i in range(n - 1)]

    tri = _Triangulation(pts)
    a, b, c = 0, 1, first_noncol
    if _orient(pts, a, b, c) < 0:
        a, b = b, a
    tri._add((a, b, c))
    tri._add((b, a, GHOST))
    tri._add((c, b, GHOST))
    tri._add((a, c, GHOST))
    for i in range(2, n):
        if i == first_noncol:
            continue
        tri.insert(i)
    return sorted(tuple(sorted(e)) for e in tri.real_edges())


def gabriel_graph(points: np.ndarray) -> list[tuple[int, int]]:
    """Gabriel edges in any dimension: (u, v) iff the open ball on diameter
    uv contains no third point. Brute force over all pairs; a third point w
    blocks the edge exactly when |wu|^2 + |wv|^2 < |uv|^2.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if n < 2:
        raise ValueError("need at least 2 points")
    sq = np.sum(pts * pts, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (pts @ pts.T)
    np.maximum(d2, 0.0, out=d2)
    edges = []
    for i in range(n - 1):
        # blocked[j] = min_k (|ki|^2 + |kj|^2); k in {i, j} attains |ij|^2.
        closest = (d2[i][None, :] + d2).min(axis=1)
        for j in range(i + 1, n):
            if not closest[j] < d2[i, j]:
                edges.append((i, j))
    return edges


# ---------------------------------------------------------------------------
# Tagged graphs and the quality score
# ---------------------------------------------------------------------------

EDGE_HOMO_Z = "homo_Z"
EDGE_HOMO_ZT = "homo_Zt"
EDGE_HETERO = "hetero"


@dataclass
class TaggedPointSet:
    points: np.ndarray  # (n, d)
    tags: list[str]  # ORIGIN_UNSHIFTED / ORIGIN_SHIFTED per point

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("points must be finite")
        if len(self.tags) != len(self.points):
            raise ValueError("one tag per point required")


@dataclass
class NeighborhoodGraph:
    vertices: TaggedPointSet
    edges: list[tuple[int, int]]
    edge_classes: list[str]
    meta: dict | None = None

    def counts(self) -> dict[str, int]:
        out = {EDGE_HOMO_Z: 0, EDGE_HOMO_ZT: 0, EDGE_HETERO: 0}
        for c in self.edge_classes:
            out[c] += 1
        return out


def classify_edge(tag_u: str, tag_v: str) -> str:
    if tag_u != tag_v:
        return EDGE_HETERO
    return EDGE_HOMO_Z if tag_u == ORIGIN_UNSHIFTED else EDGE_HOMO_ZT


def _resolve_duplicates(points: np.ndarray, jitter_seed: int) -> np.ndarray:
    """Deterministically jitter repeated coordinates (1e-9 x data diameter)."""
    pts = np.array(points, dtype=np.float64, copy=True)
    groups: dict[bytes, list[int]] = {}
    for i, row in enumerate(pts):
        groups.setdefault(row.tobytes(), []).append(i)
    dupes = [idx for idxs in groups.values() for idx in idxs[1:]]
    if not dupes:
        return pts
    span = pts.max(axis=0) - pts.min(axis=0)
    diameter = float(np.linalg.norm(span)) or 1.0
    for idx in dupes:
        offset = rng.stream(jitter_seed, "jitter", idx).uniform(-1.0, 1.0, pts.shape[1])
        pts[idx] = pts[idx] + 1e-9 * diameter * offset
    return pts


def build_neighborhood_graph(
    unshifted: EmbeddingSet,
    shifted: EmbeddingSet,
    method: str = "gabriel",
    jitter_seed: int = 0,
) -> NeighborhoodGraph:
    """Pool two embedding sets, build spatial-neighbor edges, classify them.

    method "exact2d" requires dimension <= 2; "gabriel" works at any d.
    Exact duplicate coordinates (identity shifts) are jittered first.
    """
    if unshifted.dim != shifted.dim:
        raise ValueError(
            f"dimension mismatch: {unshifted.dim} vs {shifted.dim}"
        )
    points = np.vstack([unshifted.matrix(), shifted.matrix()])
    tags = [ORIGIN_UNSHIFTED] * len(unshifted) + [ORIGIN_SHIFTED] * len(shifted)
    points = _resolve_duplicates(points, jitter_seed)
    if method == "exact2d":
        if points.shape[1] > 2:
            raise ValueError("exact2d needs dimension <= 2")
        coords = points
        if coords.shape[1] == 1:
            coords = np.hstack([coords, np.zeros((len(coords), 1))])
        edges = delaunay_exact_2d(coords)
    elif method == "gabriel":
        edges = gabriel_graph(points)
    else:
        raise ValueError(f"unknown graph method {method!r}")
    classes = [classify_edge(tags[u], tags[v]) for u, v in edges]
    meta = {"records": _vertex_records(unshifted, shifted)}
    return NeighborhoodGraph(TaggedPointSet(points, tags), edges, classes, meta)


def _vertex_records(unshifted: EmbeddingSet, shifted: EmbeddingSet) -> list[tuple]:
    records = []
    for emb_set in (unshifted, shifted):
        for e in emb_set.embeddings:
            records.append((e.origin, e.recording_id, e.epoch_index))
    return records


def quality(graph: NeighborhoodGraph) -> float:
    """1 - homogeneous/total edge fraction, in [0, 1]."""
    total = len(graph.edges)
    if total == 0:
        raise ValueError("quality is undefined on a graph with no edges")
    counts = graph.counts()
    return 1.0 - (counts[EDGE_HOMO_Z] + counts[EDGE_HOMO_ZT]) / total


# ---------------------------------------------------------------------------
# Integrity scoring over recordings
# ---------------------------------------------------------------------------

EpochEncoder = Callable[[MultichannelEpoch, str, str, int], Embedding]


@dataclass
class IntegrityResult:
    encoder_id: str
    shift_token: str
    method: str
    mode: str
    n_unshifted: int
    n_shifted: int
    edges: int
    homo_z: int
    homo_zt: int
    hetero: int
    q: float
    q_sd: float | None = None  # populated in per-recording mode
    graph: "NeighborhoodGraph | None" = None  # pooled graph, for export

    def record(self) -> dict:
        out = {
            "encoder": self.encoder_id,
            "shift": self.shift_token,
            "method": self.method,
            "mode": self.mode,
            "n_Z": self.n_unshifted,
            "n_Zt": self.n_shifted,
            "edges": self.edges,
            "homo_Z": self.homo_z,
            "homo_Zt": self.homo_zt,
            "hetero": self.hetero,
            "q": round(self.q, 6),
        }
        if self.q_sd is not None:
            out["q_sd"] = round(self.q_sd, 6)
        return out


def _embed_recordings(
    encode: EpochEncoder,
    recordings: list[RawRecording],
    shift: ShiftSpec | None,
    origin: str,
) -> dict[tuple[str, int], Embedding]:
    """Shift (optionally), preprocess, and embed every valid epoch."""
    out: dict[tuple[str, int], Embedding] = {}
    for raw in recordings:
        if shift is not None and shift.kind is not ShiftKind.NO_SHIFT:
            data = apply_shift(shift, raw.data, fs=raw.fs, recording_id=raw.id)
            raw = RawRecording(
                id=raw.id, layout=raw.layout, fs=raw.fs, data=data,
                grade=raw.grade, age=raw.age, domain=raw.domain,
            )
        rec = preprocess(raw)
        for idx, (ep, ok) in enumerate(zip(rec.epochs, rec.valid_mask)):
            if ok:
                out[(raw.id, idx)] = encode(ep, origin, raw.id, idx)
    return out


def integrity_score(
    encode: EpochEncoder,
    recordings: list[RawRecording],
    shift: ShiftSpec,
    method: str = "gabriel",
    subsample: int = 500,
    seed: int = 0,
    mode: str = "pooled",
    encoder_id: str = "",
) -> IntegrityResult:
    """Latent-integrity score between unshifted and shifted embeddings.

    Embeds every valid epoch twice (clean and shifted pipelines), pairs
    epochs present in both, optionally subsamples pairs (the same epochs
    on both sides), builds the neighborhood graph, and scores it. The
    identity shift is scored as a self-comparison baseline: two disjoint
    random halves of the unshifted embeddings.

    mode "pooled" builds one graph over everything; "per_recording"
    scores each recording separately and reports mean q (sd in q_sd).
    """
    if mode not in ("pooled", "per_recording"):
        raise ValueError(f"unknown integrity mode {mode!r}")
    clean = _embed_recordings(encode, recordings, None, ORIGIN_UNSHIFTED)
    if len(clean) < 10:
        raise ValueError(f"integrity scoring needs >= 10 epochs, got {len(clean)}")
    token = shift.token()
    if shift.kind is ShiftKind.NO_SHIFT:
        keys = sorted(clean)
        order = rng.stream(seed, "baseline").permutation(len(keys))
        half = len(keys) // 2
        z_keys = [keys[i] for i in order[:half]]
        zt_keys = [keys[i] for i in order[half : 2 * half]]
        z_map = {k: clean[k] for k in z_keys}
        zt_map = {
            k: Embedding(
                clean[k].vector.copy(), ORIGIN_SHIFTED, clean[k].recording_id,
                clean[k].epoch_index, clean[k].encoder_id,
            )
            for k in zt_keys
        }
        pairs_z, pairs_zt = z_map, zt_map
    else:
        shifted = _embed_recordings(encode, recordings, shift, ORIGIN_SHIFTED)
        common = sorted(set(clean) & set(shifted))
        if len(common) < 2:
            raise ValueError("too few epochs survive preprocessing on both sides")
        pairs_z = {k: clean[k] for k in common}
        pairs_zt = {k: shifted[k] for k in common}

    z_sel, zt_sel = _paired_subsample(pairs_z, pairs_zt, subsample, seed)
    enc_id = encoder_id or next(iter(z_sel.values())).encoder_id

    if mode == "pooled":
        graph = _graph_from_maps(z_sel, zt_sel, method, seed)
        counts = graph.counts()
        return IntegrityResult(
            enc_id, token, method, mode, len(z_sel), len(zt_sel),
            len(graph.edges), counts[EDGE_HOMO_Z], counts[EDGE_HOMO_ZT],
            counts[EDGE_HETERO], quality(graph), graph=graph,
        )

    by_rec: dict[str, list] = {}
    for key in z_sel:
        by_rec.setdefault(key[0], []).append(key)
    qs = []
    totals = {"edges": 0, EDGE_HOMO_Z: 0, EDGE_HOMO_ZT: 0, EDGE_HETERO: 0}
    n_z = n_zt = 0
    for rec_id in sorted(by_rec):
        keys = by_rec[rec_id]
        zs = {k: z_sel[k] for k in keys}
        zts = {k: zt_sel[k] for k in keys if k in zt_sel}
        if not zts or len(zs) + len(zts) < 3:
            continue
        graph = _graph_from_maps(zs, zts, method, seed)
        counts = graph.counts()
        qs.append(quality(graph))
        totals["edges"] += len(graph.edges)
        for k in (EDGE_HOMO_Z, EDGE_HOMO_ZT, EDGE_HETERO):
            totals[k] += counts[k]
        n_z += len(zs)
        n_zt += len(zts)
    if not qs:
        raise ValueError("no recording had enough paired epochs for a graph")
    return IntegrityResult(
        enc_id, token, method, mode, n_z, n_zt, totals["edges"],
        totals[EDGE_HOMO_Z], totals[EDGE_HOMO_ZT], totals[EDGE_HETERO],
        float(np.mean(qs)), float(np.std(qs)),
    )


def _paired_subsample(pairs_z, pairs_zt, subsample, seed):
    """Keep at most `subsample` pairs, the same keys on both sides.

    For the identity-shift baseline the two sides hold disjoint keys;
    each side is then capped independently.
    """
    if subsample is None or subsample <= 0:
        return pairs_z, pairs_zt
    if set(pairs_z) == set(pairs_zt):
        keys = sorted(pairs_z)
        if len(keys) <= subsample:
            return pairs_z, pairs_zt
        pick = rng.stream(seed, "subsample").choice(len(keys), subsample, replace=False)
        chosen = [keys[i] for i in sorted(pick)]
        return {k: pairs_z[k] for k in chosen}, {k: pairs_zt[k] for k in chosen}
    out = []
    for side, label in ((pairs_z, "Z"), (pairs_zt, "Zt")):
        keys = sorted(side)
        if len(keys) <= subsample:
            out.append(side)
            continue
        pick = rng.stream(seed, "subsample", label).choice(len(keys), subsample, replace=False)
        out.append({keys[i]: side[keys[i]] for i in sorted(pick)})
    return out[0], out[1]


def _graph_from_maps(z_map, zt_map, method, seed) -> NeighborhoodGraph:
    z_set = EmbeddingSet([z_map[k] for k in sorted(z_map)])
    zt_set = EmbeddingSet([zt_map[k] for k in sorted(zt_map)])
    return build_neighborhood_graph(z_set, zt_set, method=method, jitter_seed=seed)


def cross_domain_integrity(
    emb_a: EmbeddingSet,
    emb_b: EmbeddingSet,
    method: str = "gabriel",
    subsample: int = 500,
    seed: int = 0,
    label: str = "domain_B",
) -> IntegrityResult:
    """Integrity between two independently drawn embedding sets (no pairing)."""
    a_map = {(e.recording_id, e.epoch_index): e for e in emb_a.embeddings}
    b_map = {
        (e.recording_id, e.epoch_index): Embedding(
            e.vector, ORIGIN_SHIFTED, e.recording_id, e.epoch_index, e.encoder_id
        )
        for e in emb_b.embeddings
    }
    a_sel, b_sel = _paired_subsample(a_map, b_map, subsample, seed)
    graph = _graph_from_maps(a_sel, b_sel, method, seed)
    counts = graph.counts()
    return IntegrityResult(
        emb_a.embeddings[0].encoder_id, label, method, "pooled",
        len(a_sel), len(b_sel), len(graph.edges), counts[EDGE_HOMO_Z],
        counts[EDGE_HOMO_ZT], counts[EDGE_HETERO], quality(graph), graph=graph,
    )


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def save_graph(graph: NeighborhoodGraph, edges_path: str | Path, vertices_path: str | Path) -> None:
    """Edge list CSV (u, v, class) and vertex CSV (index, origin, recording, epoch)."""
    with open(edges_path, "w") as fh:
        fh.write("u,v,class\n")
        for (u, v), cls in zip(graph.edges, graph.edge_classes):
            fh.write(f"{u},{v},{cls}\n")
    records = (graph.meta or {}).get("records")
    with open(vertices_path, "w") as fh:
        fh.write("index,origin,recording_id,epoch_index\n")
        for i, tag in enumerate(graph.vertices.tags):
            if records is not None:
                origin, rid, idx = records[i]
            else:
                origin, rid, idx = tag, "", -1
            fh.write(f"{i},{origin},{rid},{idx}\n")


def save_integrity_records(path: str | Path, results: list[IntegrityResult]) -> None:
    with open(path, "w") as fh:
        for res in results:
            fh.write(json.dumps(res.record()) + "\n")
