"""Triangle-mesh objects: OBJ loading, scaling, closest-point and signed-distance queries.

Queries go through an axis-aligned bounding-volume tree (median split on the
longest centroid axis, at most four triangles per leaf). Single-point queries
walk the tree; batched queries test every point against every leaf box, which
is cheaper in numpy than per-point traversal for the mesh sizes used here.

Signs come from ray-parity voting along three fixed directions on watertight
meshes, falling back to the angle-weighted pseudonormal of the closest
feature when the vote is inconclusive.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

log = logging.getLogger(__name__)

LEAF_SIZE = 4
_RAY_DIRS = np.array([
    [0.5773502691896258, 0.5773502691896258, 0.5773502691896258],
    [-0.2672612419124244, 0.5345224838248488, -0.8017837257372732],
    [0.8164965809277261, -0.4082482904638631, -0.4082482904638631],
])
_RAY_DIRS = _RAY_DIRS / np.linalg.norm(_RAY_DIRS, axis=1, keepdims=True)


class MeshError(ValueError):
    pass


def _dot(u, v):
    return u[..., 0] * v[..., 0] + u[..., 1] * v[..., 1] + u[..., 2] * v[..., 2]


def _normalize(v):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


@dataclass
class BVH:
    lo: np.ndarray        # (nodes, 3)
    hi: np.ndarray        # (nodes, 3)
    left: np.ndarray      # child index or -1
    right: np.ndarray
    start: np.ndarray     # leaf range into ``order``
    count: np.ndarray     # 0 for inner nodes
    order: np.ndarray     # triangle permutation
    leaves: np.ndarray    # node ids of leaves
    leaf_tris: np.ndarray  # (n_leaves, LEAF_SIZE), -1 padded


def build_bvh(vertices, triangles, leaf_size=LEAF_SIZE):
    tri = vertices[triangles]
    tlo, thi = tri.min(axis=1), tri.max(axis=1)
    cent = tri.mean(axis=1)
    lo, hi, left, right, start, count = [], [], [], [], [], []
    order = np.arange(len(triangles))

    def node(s, e):
        nid = len(lo)
        idx = order[s:e]
        lo.append(tlo[idx].min(axis=0))
        hi.append(thi[idx].max(axis=0))
        left.append(-1)
        right.append(-1)
        start.append(s)
        count.append(0)
        if e - s <= leaf_size:
            count[nid] = e - s
            return nid
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        # stable sort keeps the build deterministic under ties
        perm = np.argsort(c[:, axis], kind="stable")
        order[s:e] = idx[perm]
        mid = s + (e - s) // 2
        left[nid] = node(s, mid)
        right[nid] = node(mid, e)
        return nid

    node(0, len(triangles))
    count = np.array(count)
    leaves = np.flatnonzero(count > 0)
    leaf_tris = -np.ones((len(leaves), leaf_size), dtype=int)
    for k, nid in enumerate(leaves):
        leaf_tris[k, :count[nid]] = order[start[nid]:start[nid] + count[nid]]
    return BVH(np.array(lo), np.array(hi), np.array(left), np.array(right),
               np.array(start), count, order, leaves, leaf_tris)


class TriangleMesh:
    """Immutable triangle mesh with vertex normals and a BVH."""

    def __init__(self, vertices, triangles, *, dropped_degenerate=0, pruned_vertices=0):
        self.vertices = np.array(vertices, dtype=float)
        self.triangles = np.array(triangles, dtype=int).reshape(-1, 3)
        if len(self.triangles) == 0:
            raise MeshError("empty mesh")
        if self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices):
            raise MeshError("triangle index out of range")
        self.dropped_degenerate = dropped_degenerate
        self.pruned_vertices = pruned_vertices
        v = self.vertices
        a, b, c = v[self.triangles[:, 0]], v[self.triangles[:, 1]], v[self.triangles[:, 2]]
        self.face_normals = _normalize(np.cross(b - a, c - a))

        # angle-weighted vertex pseudonormals
        vn = np.zeros_like(v)
        corners = ((a, b, c), (b, c, a), (c, a, b))
        for k, (p0, p1, p2) in enumerate(corners):
            e1, e2 = _normalize(p1 - p0), _normalize(p2 - p0)
            ang = np.arccos(np.clip(_dot(e1, e2), -1.0, 1.0))
            np.add.at(vn, self.triangles[:, k], self.face_normals * ang[:, None])
        self.vertex_normals = _normalize(vn)

        # edge pseudonormals: edge k of a triangle joins corner k and k+1
        edges = np.stack([self.triangles[:, [0, 1]], self.triangles[:, [1, 2]],
                          self.triangles[:, [2, 0]]], axis=1)
        key = np.sort(edges, axis=2).reshape(-1, 2)
        uniq, inv, cnt = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        inv = inv.reshape(-1)
        self.watertight = bool(np.all(cnt == 2))
        acc = np.zeros((len(uniq), 3))
        np.add.at(acc, inv, np.repeat(self.face_normals, 3, axis=0))
        self.edge_normals = _normalize(acc[inv]).reshape(-1, 3, 3)

        for arr in (self.vertices, self.triangles, self.face_normals, self.vertex_normals,
                    self.edge_normals):
            arr.setflags(write=False)
        self.bvh = build_bvh(self.vertices, self.triangles)
        self._kdtree = cKDTree(self.vertices)

    def __repr__(self):
        return f"TriangleMesh(vertices={len(self.vertices)}, triangles={len(self.triangles)})"

    @classmethod
    def from_arrays(cls, vertices, triangles):
        """Build a mesh, dropping zero-area triangles and unreferenced vertices."""
        vertices = np.asarray(vertices, dtype=float).reshape(-1, 3)
        triangles = np.asarray(triangles, dtype=int).reshape(-1, 3)
        if len(vertices) == 0 or len(triangles) == 0:
            raise MeshError("empty mesh")
        if triangles.min() < 0 or triangles.max() >= len(vertices):
            raise MeshError("triangle index out of range")
        a, b, c = (vertices[triangles[:, k]] for k in range(3))
        area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
        keep = area > 0.0
        dropped = int(np.count_nonzero(~keep))
        triangles = triangles[keep]
        if len(triangles) == 0:
            raise MeshError("empty mesh after dropping degenerate triangles")
        used = np.unique(triangles)
        remap = -np.ones(len(vertices), dtype=int)
        remap[used] = np.arange(len(used))
        pruned = len(vertices) - len(used)
        if dropped:
            log.info("dropped %d degenerate triangles", dropped)
        return cls(vertices[used], remap[triangles], dropped_degenerate=dropped,
                   pruned_vertices=pruned)

    def stats(self):
        lo, hi = self.vertices.min(axis=0), self.vertices.max(axis=0)
        return {
            "vertices": len(self.vertices),
            "triangles": len(self.triangles),
            "watertight": self.watertight,
            "dropped_degenerate": self.dropped_degenerate,
            "pruned_vertices": self.pruned_vertices,
            "bbox_min": lo.tolist(),
            "bbox_max": hi.tolist(),
            "bvh_nodes": len(self.bvh.lo),
            "bvh_leaves": len(self.bvh.leaves),
        }


def load_mesh(path):
    """Read the ``v``/``f`` records of an OBJ file; everything else is ignored."""
    verts, faces = [], []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                    if len(idx) != 3:
                        raise MeshError(f"{path}:{lineno}: only triangle faces are supported")
                    faces.append([i - 1 if i > 0 else len(verts) + i for i in idx])
    except (ValueError, IndexError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"{path}: cannot parse OBJ: {exc}") from exc
    if not verts or not faces:
        raise MeshError(f"{path}: empty mesh")
    return TriangleMesh.from_arrays(verts, faces)


def save_obj(mesh, path):
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def scale_mesh(mesh, s):
    """Uniformly scale vertex positions about the origin."""
    if not s > 0:
        raise MeshError(f"scale factor must be positive, got {s}")
    out = TriangleMesh(mesh.vertices * s, mesh.triangles,
                       dropped_degenerate=mesh.dropped_degenerate,
                       pruned_vertices=mesh.pruned_vertices)
    return out


# --------------------------------------------------------------------------- closest point

def closest_point_on_triangles(p, a, b, c):
    """Closest point on each triangle (a, b, c) to p, all ``(M, 3)``.

    Returns ``(closest, region)`` with region 0 = face interior, 1/2/3 = edges
    ab/bc/ca, 4/5/6 = vertices a/b/c.
    """
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    bp = p - b
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    cp = p - c
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    out = np.empty_like(p)
    region = np.full(len(p), -1)
    done = np.zeros(len(p), dtype=bool)

    def assign(mask, pts, code):
        m = mask & ~done
        out[m] = pts[m] if pts.ndim == 2 else pts
        region[m] = code
        done[m] = True

    assign((d1 <= 0) & (d2 <= 0), a, 4)
    assign((d3 >= 0) & (d4 <= d3), b, 5)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = d1 / (d1 - d3)
        assign((vc <= 0) & (d1 >= 0) & (d3 <= 0), a + v[:, None] * ab, 1)
        assign((d6 >= 0) & (d5 <= d6), c, 6)
        w = d2 / (d2 - d6)
        assign((vb <= 0) & (d2 >= 0) & (d6 <= 0), a + w[:, None] * ac, 3)
        w2 = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        assign((va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0), b + w2[:, None] * (c - b), 2)
        denom = 1.0 / (va + vb + vc)
        vv, ww = vb * denom, vc * denom
        assign(np.ones(len(p), dtype=bool), a + vv[:, None] * ab + ww[:, None] * ac, 0)
    return out, region


def _feature_normal(mesh, tri, region):
    n = np.empty((len(tri), 3))
    f = region == 0
    n[f] = mesh.face_normals[tri[f]]
    for code, k in ((1, 0), (2, 1), (3, 2)):
        m = region == code
        n[m] = mesh.edge_normals[tri[m], k]
    for code, k in ((4, 0), (5, 1), (6, 2)):
        m = region == code
        n[m] = mesh.vertex_normals[mesh.triangles[tri[m], k]]
    return n


@dataclass
class SurfaceQueryResult:
    closest_point: np.ndarray
    distance: float
    signed_distance: float
    normal: np.ndarray
    vertex_index: int
    triangle_index: int
    sign_valid: bool = True


@dataclass
class BatchQuery:
    """Vectorised counterpart of :class:`SurfaceQueryResult`."""

    closest: np.ndarray
    distance: np.ndarray
    signed_distance: np.ndarray
    normal: np.ndarray
    vertex_index: np.ndarray
    triangle_index: np.ndarray
    sign_valid: bool
    gradient: np.ndarray  # d(signed_distance)/d(point)

    def __len__(self):
        return len(self.distance)

    def __getitem__(self, i):
        return SurfaceQueryResult(self.closest[i], float(self.distance[i]),
                                  float(self.signed_distance[i]), self.normal[i],
                                  int(self.vertex_index[i]), int(self.triangle_index[i]),
                                  self.sign_valid)


def _box_dist2(points, lo, hi):
    d = np.maximum(lo[None] - points[:, None], 0.0) + np.maximum(points[:, None] - hi[None], 0.0)
    return _dot(d, d)


def _closest_bruteforce_tris(mesh, points, tris):
    """Closest point of each point against the given triangles; ``tris`` aligned with points."""
    t = mesh.triangles[tris]
    v = mesh.vertices
    return closest_point_on_triangles(points, v[t[:, 0]], v[t[:, 1]], v[t[:, 2]])


def _nearest_batch(mesh, points):
    """Exact nearest surface point per query point using BVH leaf culling."""
    P = len(points)
    bvh = mesh.bvh
    ub, _ = mesh._kdtree.query(points)
    ub2 = ub * ub * (1 + 1e-9) + 1e-300
    lb2 = _box_dist2(points, bvh.lo[bvh.leaves], bvh.hi[bvh.leaves])
    pi, li = np.nonzero(lb2 <= ub2[:, None])
    tris = bvh.leaf_tris[li]
    pi = np.repeat(pi, tris.shape[1])
    tris = tris.reshape(-1)
    ok = tris >= 0
    pi, tris = pi[ok], tris[ok]
    cp, reg = _closest_bruteforce_tris(mesh, points[pi], tris)
    diff = points[pi] - cp
    d2 = _dot(diff, diff)
    # per-point argmin; ties resolved to the lowest triangle index
    order = np.lexsort((tris, d2, pi))
    pi_s = pi[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pi_s[1:] != pi_s[:-1]
    sel = order[first]
    if len(sel) != P:
        raise RuntimeError("nearest-point culling lost a query point")
    return cp[sel], np.sqrt(d2[sel]), tris[sel], reg[sel]


def _ray_votes(mesh, points, direction):
    """Crossing parity of rays from ``points``; returns (odd, ambiguous) booleans."""
    bvh = mesh.bvh
    lo, hi = bvh.lo[bvh.leaves], bvh.hi[bvh.leaves]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t1 = (lo[None] - points[:, None]) * inv
        t2 = (hi[None] - points[:, None]) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=2)
    tmax = np.nanmin(np.maximum(t1, t2), axis=2)
    pi, li = np.nonzero((tmax >= np.maximum(tmin, 0.0)))
    tris = bvh.leaf_tris[li]
    pi = np.repeat(pi, tris.shape[1])
    tris = tris.reshape(-1)
    ok = tris >= 0
    pi, tris = pi[ok], tris[ok]
    t = mesh.triangles[tris]
    v = mesh.vertices
    a, b, c = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]
    e1, e2 = b - a, c - a
    h = np.cross(np.broadcast_to(direction, e2.shape), e2)
    det = _dot(e1, h)
    with np.errstate(divide="ignore", invalid="ignore"):
        f = 1.0 / det
        s = points[pi] - a
        u = f * _dot(s, h)
        qv = np.cross(s, e1)
        w = f * _dot(np.broadcast_to(direction, qv.shape), qv)
        tt = f * _dot(e2, qv)
    eps = 1e-10
    parallel = np.abs(det) < 1e-14
    u, w, tt = (np.where(parallel, -1.0, x) for x in (u, w, tt))
    hit = ~parallel & (u >= 0) & (w >= 0) & (u + w <= 1) & (tt > 0)
    near_edge = ~parallel & (tt > 0) & (
        (np.abs(u) < eps) | (np.abs(w) < eps) | (np.abs(1 - u - w) < eps)
    ) & (u > -eps) & (w > -eps) & (u + w < 1 + eps)
    P = len(points)
    hits = np.bincount(pi[hit], minlength=P)
    amb = np.bincount(pi[near_edge], minlength=P) > 0
    return hits % 2 == 1, amb


def query_points(mesh, points, signed=True):
    """Batched nearest-point / signed-distance query."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    cp, dist, tri, reg = _nearest_batch(mesh, points)
    normal = _feature_normal(mesh, tri, reg)
    _, vidx = mesh._kdtree.query(points)
    delta = points - cp
    sign = np.ones(len(points))
    sign_valid = mesh.watertight
    if signed and mesh.watertight:
        inside_votes = np.zeros(len(points), dtype=int)
        valid_votes = np.zeros(len(points), dtype=int)
        # anything outside the root box is outside the mesh
        boxed = np.all((points >= mesh.bvh.lo[0]) & (points <= mesh.bvh.hi[0]), axis=1)
        valid_votes[~boxed] = len(_RAY_DIRS)
        if np.any(boxed):
            sub = points[boxed]
            for d in _RAY_DIRS:
                odd, amb = _ray_votes(mesh, sub, d)
                inside_votes[boxed] += odd & ~amb
                valid_votes[boxed] += ~amb
        outside_votes = valid_votes - inside_votes
        sign = np.where(inside_votes > outside_votes, -1.0, 1.0)
        tie = inside_votes == outside_votes
        if np.any(tie):
            pseudo = _dot(delta[tie], normal[tie])
            sign[tie] = np.where(pseudo < 0, -1.0, 1.0)
    sd = sign * dist if sign_valid else dist.copy()
    s = sign if sign_valid else np.ones(len(points))
    safe = np.where(dist > 1e-12, dist, 1.0)
    grad = np.where((dist > 1e-12)[:, None], (s / safe)[:, None] * delta, normal)
    return BatchQuery(cp, dist, sd, normal, vidx.astype(int), tri, sign_valid, grad)


def nearest_point(mesh, p):
    """Closest surface point to ``p`` found by best-first BVH traversal."""
    p = np.asarray(p, dtype=float)
    bvh = mesh.bvh
    best_d2, best_cp, best_tri, best_reg = np.inf, None, -1, -1
    stack = [0]
    while stack:
        nid = stack.pop()
        d = np.maximum(bvh.lo[nid] - p, 0.0) + np.maximum(p - bvh.hi[nid], 0.0)
        if _dot(d, d) > best_d2:
            continue
        if bvh.count[nid]:
            tris = bvh.order[bvh.start[nid]:bvh.start[nid] + bvh.count[nid]]
            cp, reg = _closest_bruteforce_tris(mesh, np.repeat(p[None], len(tris), 0), tris)
            diff = p - cp
            d2 = _dot(diff, diff)
            k = np.lexsort((tris, d2))[0]
            if d2[k] < best_d2 or (d2[k] == best_d2 and tris[k] < best_tri):
                best_d2, best_cp, best_tri, best_reg = d2[k], cp[k], tris[k], reg[k]
        else:
            l, r = bvh.left[nid], bvh.right[nid]
            dl = _box_dist2(p[None], bvh.lo[[l, r]], bvh.hi[[l, r]])[0]
            # push the farther child first so the nearer one is explored next
            if dl[0] <= dl[1]:
                stack.extend([r, l])
            else:
                stack.extend([l, r])
    q = query_points(mesh, p[None])
    res = q[0]
    res.closest_point = best_cp
    res.distance = float(np.sqrt(best_d2))
    res.signed_distance = float(np.copysign(res.distance, q.signed_distance[0])) \
        if q.sign_valid else res.distance
    return res


def signed_distance(mesh, p):
    """Signed distance (negative inside). Unsigned on non-watertight meshes."""
    q = query_points(mesh, np.asarray(p, dtype=float)[None])
    if not q.sign_valid:
        log.warning("mesh is not watertight; returning unsigned distance")
    return float(q.signed_distance[0])


def signed_distances(mesh, points):
    return query_points(mesh, points).signed_distance


def brute_force_nearest(mesh, p):
    """Reference closest-point search over every triangle (no acceleration)."""
    p = np.asarray(p, dtype=float)
    F = len(mesh.triangles)
    cp, _ = _closest_bruteforce_tris(mesh, np.repeat(p[None], F, 0), np.arange(F))
    diff = p - cp
    d2 = _dot(diff, diff)
    k = int(np.argmin(d2))
    return cp[k], float(np.sqrt(d2[k]))


def icosphere(radius=1.0, subdivisions=2, center=(0.0, 0.0, 0.0)):
    """Outward-wound icosphere as a :class:`TriangleMesh`."""
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
             [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
             [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    faces = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
             [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
             [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
             [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [list(np.array(v, float) / np.linalg.norm(v)) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = np.array(verts[i]) + np.array(verts[j])
                verts.append(list(m / np.linalg.norm(m)))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = new
    v = np.array(verts) * radius + np.asarray(center, dtype=float)
    return TriangleMesh.from_arrays(v, faces)


def box_mesh(size=1.0, center=(0.0, 0.0, 0.0)):
    """Axis-aligned cube with outward winding."""
    h = size / 2.0
    v = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
    v = v + np.asarray(center, dtype=float)
    f = [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5],
         [0, 4, 5], [0, 5, 1], [2, 3, 7], [2, 7, 6],
         [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
    return TriangleMesh.from_arrays(v, f)
