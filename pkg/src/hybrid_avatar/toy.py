"""A small capsule avatar that exercises every part of the parametric model.

Four joints (root, spine, left arm, right arm), a capsule torso whose top cap
is tagged as face, two capsule arms whose tips are tagged as hands, two shape
directions (uniform scale, girth), one expression direction and a pose basis.
"""

from __future__ import annotations

import numpy as np

from .geometry import REGIONS, ParametricModel

TORSO_RADIUS = 0.16
TORSO_HALF = 0.28
ARM_RADIUS = 0.055
SHOULDER = np.array([0.16, 0.2, 0.0])
ARM_START_X = 0.10
ARM_LENGTH = 0.36
A_POSE_ANGLE = 0.5


def capsule(p0, p1, radius, n_around=16, n_cap=4, n_cyl=6):
    """Closed triangulated capsule between ``p0`` and ``p1``.

    Returns ``(vertices, faces, s)`` where ``s`` is the signed coordinate of
    each vertex along the axis (0 at ``p0``).
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    axis = axis / length
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, helper)
    u /= np.linalg.norm(u)
    w = np.cross(axis, u)

    profile = []  # (s, ring radius)
    for i in range(1, n_cap + 1):
        phi = -np.pi / 2 + i * (np.pi / 2) / n_cap
        profile.append((radius * np.sin(phi), radius * np.cos(phi)))
    for j in range(1, n_cyl + 1):
        profile.append((length * j / n_cyl, radius))
    for i in range(1, n_cap):
        phi = i * (np.pi / 2) / n_cap
        profile.append((length + radius * np.sin(phi), radius * np.cos(phi)))

    ang = 2 * np.pi * np.arange(n_around) / n_around
    ring_dir = np.cos(ang)[:, None] * u + np.sin(ang)[:, None] * w
    verts = [p0 - radius * axis]
    s = [-radius]
    for s_k, r_k in profile:
        verts.extend(p0 + s_k * axis + r_k * ring_dir)
        s.extend([s_k] * n_around)
    verts.append(p0 + (length + radius) * axis)
    s.append(length + radius)
    verts = np.asarray(verts)

    n_rings = len(profile)
    faces = []
    for a in range(n_around):
        b = (a + 1) % n_around
        faces.append((0, 1 + b, 1 + a))
    for r in range(n_rings - 1):
        base0 = 1 + r * n_around
        base1 = base0 + n_around
        for a in range(n_around):
            b = (a + 1) % n_around
            faces.append((base0 + a, base0 + b, base1 + b))
            faces.append((base0 + a, base1 + b, base1 + a))
    top = len(verts) - 1
    last = 1 + (n_rings - 1) * n_around
    for a in range(n_around):
        b = (a + 1) % n_around
        faces.append((last + a, last + b, top))
    return verts, np.asarray(faces, dtype=np.int64), np.asarray(s)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def capsule_model(radius=0.3, half_length=0.3, n_around=24, n_cap=6, n_cyl=10) -> ParametricModel:
    """Single rigid capsule along y, one joint; used for projection checks."""
    v, f, _ = capsule([0, -half_length, 0], [0, half_length, 0], radius, n_around, n_cap, n_cyl)
    nv = len(v)
    return ParametricModel(
        template_vertices=v, faces=f,
        shape_dirs=(0.1 * v)[:, :, None],
        pose_dirs=np.zeros((nv, 3, 0)),
        expr_dirs=np.zeros((nv, 3, 1)),
        skin_weights=np.ones((1, nv)),
        joint_regressor=np.full((1, nv), 1.0 / nv),
        parents=[-1],
        region_labels=np.zeros(nv, dtype=np.int64),
        canonical_pose=np.zeros((1, 3)),
    )


def toy_model(seed: int = 0) -> ParametricModel:
    """The shipped toy avatar (about 570 vertices, 4 joints)."""
    tv, tf, ts = capsule([0, -TORSO_HALF, 0], [0, TORSO_HALF, 0], TORSO_RADIUS,
                         n_around=20, n_cap=4, n_cyl=8)
    parts_v, parts_f, kinds, coords = [tv], [tf], [np.zeros(len(tv), dtype=int)], [ts]
    offset = len(tv)
    for side in (1.0, -1.0):
        p0 = np.array([side * ARM_START_X, SHOULDER[1], 0.0])
        p1 = np.array([side * (ARM_START_X + ARM_LENGTH), SHOULDER[1], 0.0])
        av, af, as_ = capsule(p0, p1, ARM_RADIUS, n_around=12, n_cap=3, n_cyl=6)
        parts_v.append(av)
        parts_f.append(af + offset)
        kinds.append(np.full(len(av), 1 if side > 0 else 2))
        coords.append(as_)
        offset += len(av)
    verts = np.concatenate(parts_v)
    faces = np.concatenate(parts_f)
    kind = np.concatenate(kinds)   # 0 torso, 1 left arm, 2 right arm
    nv = len(verts)
    x, y, z = verts.T

    # skinning: root/spine along the torso, spine/arm across the shoulder
    weights = np.zeros((4, nv))
    torso = kind == 0
    w_spine = _smoothstep((y[torso] + 0.15) / 0.25)
    weights[0, torso] = 1.0 - w_spine
    weights[1, torso] = w_spine
    for k, joint in ((1, 2), (2, 3)):
        arm = kind == k
        u = np.abs(x[arm]) - SHOULDER[0]
        w_arm = _smoothstep((u + 0.04) / 0.1)
        weights[joint, arm] = w_arm
        weights[1, arm] = 1.0 - w_arm

    # joint regressor: average of the ring closest to each joint location
    regressor = np.zeros((4, nv))
    targets = [(torso, 1, -0.21), (torso, 1, 0.0), (kind == 1, 0, SHOULDER[0]),
               (kind == 2, 0, -SHOULDER[0])]
    for j, (sel, axis, value) in enumerate(targets):
        idx = np.nonzero(sel)[0]
        d = np.abs(verts[idx, axis] - value)
        ring = idx[np.isclose(d, d.min(), atol=1e-9)]
        regressor[j, ring] = 1.0 / len(ring)

    labels = np.zeros(nv, dtype=np.int64)
    labels[torso & (y > 0.30)] = REGIONS.index("face")
    labels[(kind > 0) & (np.abs(x) > 0.40)] = REGIONS.index("hands")

    shape_dirs = np.zeros((nv, 3, 2))
    shape_dirs[:, :, 0] = 0.1 * verts
    radial = np.zeros_like(verts)
    radial[torso, 0] = x[torso]
    radial[torso, 2] = z[torso]
    for k in (1, 2):
        arm = kind == k
        radial[arm, 1] = y[arm] - SHOULDER[1]
        radial[arm, 2] = z[arm]
    norm = np.linalg.norm(radial, axis=1, keepdims=True)
    radial = np.divide(radial, norm, out=np.zeros_like(radial), where=norm > 1e-9)
    girth = np.where(torso, 0.02 * _smoothstep((0.44 - np.abs(y)) / 0.15), 0.008)
    shape_dirs[:, :, 1] = radial * girth[:, None]

    expr_dirs = np.zeros((nv, 3, 1))
    front = np.clip(z / TORSO_RADIUS, 0.0, 1.0) * (labels == REGIONS.index("face"))
    expr_dirs[:, 1, 0] = -0.01 * front
    expr_dirs[:, 2, 0] = 0.015 * front

    rng = np.random.default_rng(seed)
    pose_dirs = np.zeros((nv, 3, 27))
    for j in (1, 2, 3):
        influence = weights[j] * (1.0 - weights[j]) * 4.0
        coef = rng.uniform(-1.0, 1.0, size=9)
        for e in range(9):
            pose_dirs[:, :, 9 * (j - 1) + e] = 0.01 * coef[e] * radial * influence[:, None]

    canonical = np.zeros((4, 3))
    canonical[2, 2] = -A_POSE_ANGLE
    canonical[3, 2] = A_POSE_ANGLE

    return ParametricModel(
        template_vertices=verts, faces=faces, shape_dirs=shape_dirs, pose_dirs=pose_dirs,
        expr_dirs=expr_dirs, skin_weights=weights, joint_regressor=regressor,
        parents=[-1, 0, 1, 1], region_labels=labels, canonical_pose=canonical,
    )
