"""Segment collision queries for shelf avoidance and box grasping.

Robot links are capsules (their yaml segment plus a radius). The shelf
is a set of static line segments that never exert forces; overlap only
raises the undesired-collision flag, which training penalizes and
terminates on. Runs at control rate in plain numpy, so clarity wins
over speed here.
"""

from __future__ import annotations

import numpy as np

from .robot import RobotModel, SceneSpec, _rot, fk_frames


def segment_distance(a0, a1, b0, b1):
    """Smallest distance between two 2D segments."""
    a0, a1, b0, b1 = (np.asarray(v, dtype=np.float64) for v in (a0, a1, b0, b1))
    d1 = a1 - a0
    d2 = b1 - b0
    r = a0 - b0
    A = d1 @ d1
    C = d2 @ d2
    B = d1 @ d2
    denom = A * C - B * B
    if denom > 1e-12:
        s = np.clip((B * (d2 @ r) - C * (d1 @ r)) / denom, 0.0, 1.0)
    else:
        s = 0.0  # parallel or degenerate: scan endpoints below
    t = np.clip(((a0 + s * d1 - b0) @ d2) / C, 0.0, 1.0) if C > 1e-12 else 0.0
    best = np.linalg.norm(a0 + s * d1 - (b0 + t * d2))
    # endpoint sweep covers the clamped corners the closed form can miss
    for p, q0, q1 in ((a0, b0, b1), (a1, b0, b1), (b0, a0, a1), (b1, a0, a1)):
        best = min(best, point_segment_distance(p, q0, q1))
    return best


def point_segment_distance(p, s0, s1):
    p, s0, s1 = (np.asarray(v, dtype=np.float64) for v in (p, s0, s1))
    d = s1 - s0
    L2 = d @ d
    if L2 < 1e-12:
        return float(np.linalg.norm(p - s0))
    t = np.clip(((p - s0) @ d) / L2, 0.0, 1.0)
    return float(np.linalg.norm(p - (s0 + t * d)))


def link_segments_world(model: RobotModel, base_pose, q):
    """World-space capsule segments, one per link."""
    origins, angles = fk_frames(model, base_pose, q)
    segs = np.zeros((model.n_links, 2, 2))
    for l in range(model.n_links):
        R = _rot(angles[l])
        segs[l, 0] = origins[l] + R @ model.capsule[l, 0]
        segs[l, 1] = origins[l] + R @ model.capsule[l, 1]
    return segs


def box_side_faces(scene: SceneSpec, box_pose):
    """Left/right vertical face segments of the box at a given com pose."""
    w, h = scene.box_size
    cx, cz = box_pose[0], box_pose[1]
    lo, hi = cz - 0.5 * h, cz + 0.5 * h
    left = np.array([[cx - 0.5 * w, lo], [cx - 0.5 * w, hi]])
    right = np.array([[cx + 0.5 * w, lo], [cx + 0.5 * w, hi]])
    return left, right


def box_graspable(scene: SceneSpec, box_pose, hand_pos):
    """Hand close enough to straddle the box: within threshold of both
    side faces at once."""
    if not scene.has_box:
        return False
    left, right = box_side_faces(scene, box_pose)
    dl = point_segment_distance(hand_pos, left[0], left[1])
    dr = point_segment_distance(hand_pos, right[0], right[1])
    return max(dl, dr) <= scene.grasp_threshold


def query_collisions(model: RobotModel, scene: SceneSpec, base_pose, q,
                     box_pose=None, hand_pos=None):
    """Per-link x per-segment overlap report plus box grasp info."""
    n_seg = len(scene.shelf_segments)
    report = np.zeros((model.n_links, n_seg), dtype=bool)
    segs = link_segments_world(model, base_pose, q)
    for si, seg in enumerate(scene.shelf_segments):
        for l in range(model.n_links):
            d = segment_distance(segs[l, 0], segs[l, 1], seg[0], seg[1])
            report[l, si] = d < model.radius[l]
    graspable = False
    if box_pose is not None and hand_pos is not None:
        graspable = box_graspable(scene, box_pose, hand_pos)
    return report, graspable


def any_shelf_collision(model: RobotModel, scene: SceneSpec, base_pose, q):
    if len(scene.shelf_segments) == 0:
        return False
    report, _ = query_collisions(model, scene, base_pose, q)
    return bool(report.any())


# batched variants of the queries above, vectorized over environments so
# shelf scenes stay affordable inside training loops; same geometry, same
# results as the scalar path


def point_segment_distance_batch(p, s0, s1):
    """point_segment_distance over broadcast leading dims; last dim = 2."""
    d = s1 - s0
    L2 = np.sum(d * d, axis=-1)
    safe = np.where(L2 < 1e-12, 1.0, L2)
    t = np.clip(np.sum((p - s0) * d, axis=-1) / safe, 0.0, 1.0)
    t = np.where(L2 < 1e-12, 0.0, t)
    return np.linalg.norm(p - (s0 + t[..., None] * d), axis=-1)


def segment_distance_batch(a0, a1, b0, b1):
    """segment_distance over broadcast leading dims; last dim = 2."""
    d1 = a1 - a0
    d2 = b1 - b0
    r = a0 - b0
    A = np.sum(d1 * d1, axis=-1)
    C = np.sum(d2 * d2, axis=-1)
    B = np.sum(d1 * d2, axis=-1)
    denom = A * C - B * B
    ok = denom > 1e-12
    s = np.where(ok, np.clip((B * np.sum(d2 * r, axis=-1)
                              - C * np.sum(d1 * r, axis=-1))
                             / np.where(ok, denom, 1.0), 0.0, 1.0), 0.0)
    Cok = C > 1e-12
    t = np.where(Cok, np.clip(np.sum((a0 + s[..., None] * d1 - b0) * d2, axis=-1)
                              / np.where(Cok, C, 1.0), 0.0, 1.0), 0.0)
    best = np.linalg.norm(a0 + s[..., None] * d1 - (b0 + t[..., None] * d2),
                          axis=-1)
    for p, q0, q1 in ((a0, b0, b1), (a1, b0, b1), (b0, a0, a1), (b1, a0, a1)):
        best = np.minimum(best, point_segment_distance_batch(p, q0, q1))
    return best


def fk_segments_batch(model: RobotModel, qpos):
    """World capsule segments for every env and link: (n, L, 2, 2)."""
    n = qpos.shape[0]
    L = model.n_links
    origins = np.zeros((n, L, 2))
    angles = np.zeros((n, L))
    origins[:, 0] = qpos[:, :2]
    angles[:, 0] = qpos[:, 2]
    q = qpos[:, 3:]
    for l in range(1, L):
        p = model.parent[l]
        c, s = np.cos(angles[:, p]), np.sin(angles[:, p])
        ax, az = model.joint_anchor[l - 1]
        origins[:, l, 0] = origins[:, p, 0] + c * ax - s * az
        origins[:, l, 1] = origins[:, p, 1] + s * ax + c * az
        angles[:, l] = angles[:, p] + q[:, l - 1]
    c, s = np.cos(angles), np.sin(angles)
    segs = np.zeros((n, L, 2, 2))
    for k in range(2):
        px, pz = model.capsule[:, k, 0], model.capsule[:, k, 1]
        segs[:, :, k, 0] = origins[:, :, 0] + c * px[None, :] - s * pz[None, :]
        segs[:, :, k, 1] = origins[:, :, 1] + s * px[None, :] + c * pz[None, :]
    return segs


def shelf_hits_batch(model: RobotModel, scene: SceneSpec, qpos):
    """any_shelf_collision for a whole batch at once: (n,) bool."""
    if len(scene.shelf_segments) == 0:
        return np.zeros(qpos.shape[0], dtype=bool)
    segs = fk_segments_batch(model, qpos)
    sh = scene.shelf_segments
    d = segment_distance_batch(segs[:, :, None, 0], segs[:, :, None, 1],
                               sh[None, None, :, 0], sh[None, None, :, 1])
    return np.any(d < model.radius[None, :, None], axis=(1, 2))
