"""Axis-aligned bounding-volume hierarchy over triangles, traversed in ray packets."""

from __future__ import annotations

import numpy as np

LEAF_SIZE = 4
_PAD = 1e-9
_DET_EPS = 1e-14


def _triangle_boxes(vertices, faces):
    tri = vertices[faces]
    return tri.min(1) - _PAD, tri.max(1) + _PAD


class Bvh:
    """Median-split BVH with leaves of at most ``leaf_size`` faces.

    Nodes are stored in pre-order, so every child index is larger than its
    parent's and :meth:`refit` can sweep the arrays backwards.
    """

    def __init__(self, vertices: np.ndarray, faces: np.ndarray, leaf_size: int = LEAF_SIZE):
        vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        self.leaf_size = leaf_size
        centroids = vertices[self.faces].mean(1)
        order = np.arange(len(self.faces))
        left, right, start, count, depth = [], [], [], [], []

        def build(idx, level=0):
            node = len(left)
            left.append(-1)
            right.append(-1)
            start.append(0)
            count.append(0)
            depth.append(level)
            if len(idx) <= leaf_size:
                start[node] = len(leaf_faces)
                count[node] = len(idx)
                leaf_faces.extend(idx.tolist())
                return node
            c = centroids[idx]
            axis = int(np.argmax(c.max(0) - c.min(0)))
            idx = idx[np.argsort(c[:, axis], kind="stable")]
            mid = len(idx) // 2
            left[node] = build(idx[:mid], level + 1)
            right[node] = build(idx[mid:], level + 1)
            return node

        leaf_faces: list[int] = []
        build(order)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.start = np.asarray(start, dtype=np.int64)
        self.count = np.asarray(count, dtype=np.int64)
        self.leaf_faces = np.asarray(leaf_faces, dtype=np.int64)
        self.is_leaf = self.left < 0
        self._leaves = np.nonzero(self.is_leaf)[0]
        depth = np.asarray(depth)
        inner = np.nonzero(~self.is_leaf)[0]
        self._levels = [inner[depth[inner] == d] for d in range(int(depth.max()), -1, -1)]
        n = len(self.left)
        self.bmin = np.zeros((n, 3))
        self.bmax = np.zeros((n, 3))
        self.vertices = vertices
        self.refit(vertices)

    def __len__(self):
        return len(self.left)

    def refit(self, vertices: np.ndarray) -> None:
        """Recompute boxes for moved vertices (same topology)."""
        self.vertices = np.asarray(vertices, dtype=np.float64)
        fmin, fmax = _triangle_boxes(self.vertices, self.faces)
        # leaves own consecutive runs of leaf_faces, in node order
        starts = self.start[self._leaves]
        self.bmin[self._leaves] = np.minimum.reduceat(fmin[self.leaf_faces], starts, axis=0)
        self.bmax[self._leaves] = np.maximum.reduceat(fmax[self.leaf_faces], starts, axis=0)
        for nodes in self._levels:   # deepest internal nodes first
            l, r = self.left[nodes], self.right[nodes]
            self.bmin[nodes] = np.minimum(self.bmin[l], self.bmin[r])
            self.bmax[nodes] = np.maximum(self.bmax[l], self.bmax[r])

    def check(self) -> None:
        """Assert the structural invariants (each face in one leaf, nested boxes)."""
        counts = np.bincount(self.leaf_faces, minlength=len(self.faces))
        assert (counts == 1).all(), "every face must appear in exactly one leaf"
        assert (self.count[self.is_leaf] <= self.leaf_size).all()
        for node in np.nonzero(~self.is_leaf)[0]:
            for child in (self.left[node], self.right[node]):
                assert (self.bmin[node] <= self.bmin[child]).all()
                assert (self.bmax[node] >= self.bmax[child]).all()

    def intersect(self, origins, directions, t_min, t_max):
        """Nearest hit per ray with ``t_min < t < t_max``.

        Returns ``(face, t, u, v)``; ``face`` is -1 where the ray misses.
        Ties in ``t`` go to the lower face index.
        """
        o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
        n = len(o)
        best_t = np.full(n, float(t_max))
        best_f = np.full(n, -1, dtype=np.int64)
        best_u = np.zeros(n)
        best_v = np.zeros(n)
        rays = np.arange(n)
        nodes = np.zeros(n, dtype=np.int64)
        while len(rays):
            hit = _slab(o[rays], d[rays], self.bmin[nodes], self.bmax[nodes], t_min, best_t[rays])
            rays, nodes = rays[hit], nodes[hit]
            leaf = self.is_leaf[nodes]
            lr, ln = rays[leaf], nodes[leaf]
            if len(lr):
                reps = self.count[ln]
                ray_rep = np.repeat(lr, reps)
                offs = np.arange(reps.sum()) - np.repeat(np.cumsum(reps) - reps, reps)
                face = self.leaf_faces[np.repeat(self.start[ln], reps) + offs]
                t, u, v, ok = moller_trumbore(o[ray_rep], d[ray_rep], self.vertices[self.faces[face]],
                                              t_min, t_max)
                _merge_hits(ray_rep[ok], face[ok], t[ok], u[ok], v[ok], best_t, best_f, best_u, best_v)
            inner = ~leaf
            rays = np.concatenate([rays[inner], rays[inner]])
            nodes = np.concatenate([self.left[nodes[inner]], self.right[nodes[inner]]])
        return best_f, np.where(best_f >= 0, best_t, np.inf), best_u, best_v


def _slab(o, d, bmin, bmax, t_min, t_best):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (bmin - o) * inv
        t2 = (bmax - o) * inv
    lo = np.minimum(t1, t2)
    hi = np.maximum(t1, t2)
    parallel = d == 0
    inside = (o >= bmin) & (o <= bmax)
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = lo.max(1)
    t_far = hi.min(1)
    return (t_near <= t_far) & (t_far >= t_min) & (t_near <= t_best + 1e-9)


def moller_trumbore(o, d, tri, t_min, t_max):
    """Vectorized ray/triangle test. ``tri`` is (N, 3, 3); returns (t, u, v, hit)."""
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = v1 - v0
    e2 = v2 - v0
    p = np.cross(d, e2)
    det = (e1 * p).sum(1)
    ok = np.abs(det) > _DET_EPS
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = o - v0
    u = (s * p).sum(1) * inv
    q = np.cross(s, e1)
    v = (d * q).sum(1) * inv
    t = (e2 * q).sum(1) * inv
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > t_min) & (t < t_max)
    return t, u, v, hit


def _merge_hits(ray, face, t, u, v, best_t, best_f, best_u, best_v):
    if not len(ray):
        return
    # sort candidates by (ray, t, face) and keep the first per ray
    order = np.lexsort((face, t, ray))
    ray, face, t, u, v = ray[order], face[order], t[order], u[order], v[order]
    first = np.ones(len(ray), dtype=bool)
    first[1:] = ray[1:] != ray[:-1]
    ray, face, t, u, v = ray[first], face[first], t[first], u[first], v[first]
    cur_t = best_t[ray]
    cur_f = best_f[ray]
    better = (t < cur_t) | ((t == cur_t) & ((cur_f < 0) | (face < cur_f)))
    ray, face, t, u, v = ray[better], face[better], t[better], u[better], v[better]
    best_t[ray] = t
    best_f[ray] = face
    best_u[ray] = u
    best_v[ray] = v


def intersect_brute(vertices, faces, origins, directions, t_min, t_max):
    """Exhaustive scan over all triangles; same output convention as :meth:`Bvh.intersect`."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    n = len(o)
    best_t = np.full(n, float(t_max))
    best_f = np.full(n, -1, dtype=np.int64)
    best_u = np.zeros(n)
    best_v = np.zeros(n)
    tri_all = vertices[faces]
    for f in range(len(faces)):
        tri = np.broadcast_to(tri_all[f], (n, 3, 3))
        t, u, v, ok = moller_trumbore(o, d, tri, t_min, t_max)
        ray = np.nonzero(ok)[0]
        _merge_hits(ray, np.full(len(ray), f), t[ok], u[ok], v[ok], best_t, best_f, best_u, best_v)
    return best_f, np.where(best_f >= 0, best_t, np.inf), best_u, best_v
