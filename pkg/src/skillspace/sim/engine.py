"""Batched simulator frontend over the numba kernels.

BatchSim owns all per-environment state as (n_envs, ...) arrays and
advances every environment one control step per call. Instances share
nothing mutable, so many can coexist; a single instance must not be
stepped concurrently. Sim is the single-robot convenience wrapper with
the snapshot-in/snapshot-out interface.
"""

from __future__ import annotations

import numpy as np

from . import collision, kernels
from .robot import (
    BASE_DOF,
    RobotModel,
    RobotState,
    SceneSpec,
    SimConfig,
    fk_frames,
    hand_pose_world,
    reset_base_height,
    site_world,
)


class SimulationDiverged(RuntimeError):
    def __init__(self, body: str):
        super().__init__(f"simulation diverged at body '{body}'")
        self.body = body


def forward_kinematics(model: RobotModel, q, base_pose=None):
    """Planar hand-site pose; base frame by default, world if a base pose
    is given."""
    if base_pose is None:
        base_pose = np.zeros(3)
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (model.n_joints,):
        raise ValueError(f"expected {model.n_joints} joint angles, got {q.shape}")
    return hand_pose_world(model, np.asarray(base_pose, dtype=np.float64), q)


def _probe_points(model: RobotModel):
    """Non-foot points whose ground contact counts as undesired."""
    links, pts = [], []
    for l in range(model.n_links):
        if l in model.foot_links:
            continue
        links.append(l)
        pts.append(model.capsule[l, 0])
        links.append(l)
        pts.append(model.capsule[l, 1])
    return np.array(links, dtype=np.int64), np.array(pts, dtype=np.float64)


class BatchSim:
    def __init__(self, model: RobotModel, config: SimConfig,
                 scene: SceneSpec | None = None, n_envs: int = 1, seed: int = 0):
        self.model = model
        self.config = config
        self.scene = scene if scene is not None else SceneSpec()
        self.n_envs = n_envs
        self.seed = seed
        nd, J = model.n_dofs, model.n_joints
        n = n_envs
        self.qpos = np.zeros((n, nd))
        self.qvel = np.zeros((n, nd))
        self.anch = np.zeros((n, 5))
        self.box_q = np.zeros((n, 3))
        self.box_v = np.zeros((n, 2))
        self.box_att = np.zeros(n, dtype=np.uint8)
        self.box_off = np.zeros((n, 3))
        self.mass_scale = np.ones(n)
        self.fric = np.full(n, config.friction)
        self.gain_scale = np.ones(n)
        self.foot_f_mean = np.zeros((n, 2, 2))
        self.foot_f_end = np.zeros((n, 2))
        self.foot_contact = np.zeros((n, 2), dtype=np.uint8)
        self.foot_vel = np.zeros((n, 2, 2))
        self.foot_pos = np.zeros((n, 2, 2))
        self.hand = np.zeros((n, 6))       # x, z, angle, vx, vz, omega
        self.head = np.zeros((n, 2))
        self.collide_ground = np.zeros(n, dtype=np.uint8)
        self.shelf_hit = np.zeros(n, dtype=bool)
        self.fric_excess = np.zeros(n)
        self.diverged = np.full(n, -1, dtype=np.int64)
        self.step_count = np.zeros(n, dtype=np.int64)
        self._episode = np.zeros(n, dtype=np.int64)
        self._rngs = [None] * n
        self._push_dv = np.zeros((n, 2))
        self._probe_links, self._probe_pts = _probe_points(model)
        self._z0 = reset_base_height(model, config)
        self.reset()

    def reset(self, env_ids=None, randomize=True):
        m, cfg = self.model, self.config
        ids = range(self.n_envs) if env_ids is None else np.atleast_1d(env_ids)
        for e in ids:
            rng = np.random.default_rng([self.seed, int(e), int(self._episode[e])])
            self._rngs[e] = rng
            self._episode[e] += 1
            self.qpos[e, :BASE_DOF] = (0.0, self._z0, 0.0)
            self.qpos[e, BASE_DOF:] = m.q0
            self.qvel[e] = 0.0
            self.anch[e] = 0.0
            if randomize:
                self.mass_scale[e] = rng.uniform(*cfg.mass_scale_range)
                self.fric[e] = rng.uniform(*cfg.friction_range)
                self.gain_scale[e] = rng.uniform(*cfg.gain_scale_range)
            else:
                self.mass_scale[e] = 1.0
                self.fric[e] = cfg.friction
                self.gain_scale[e] = 1.0
            self.box_att[e] = 0
            if self.scene.has_box:
                self.box_q[e] = (*self.scene.box_pose, 0.0)
                self.box_v[e] = 0.0
                self.anch[e, 4] = self.scene.box_pose[0]
            self.foot_f_mean[e] = 0.0
            self.foot_f_end[e] = 0.0
            self.foot_contact[e] = 0
            self.collide_ground[e] = 0
            self.shelf_hit[e] = False
            self.fric_excess[e] = 0.0
            self.diverged[e] = -1
            self.step_count[e] = 0
        # warm-start readouts (hand pose etc.) from the reset configuration
        self._refresh_sites(ids)
        return ids

    def _refresh_sites(self, ids):
        m = self.model
        for e in ids:
            origins, angles, vels, rates = _fk_full(m, self.qpos[e], self.qvel[e])
            for f in range(2):
                fl = m.foot_links[f]
                mid = 0.5 * (m.foot_pts[f, 0] + m.foot_pts[f, 1])
                self.foot_pos[e, f] = site_world(origins, angles, fl, mid)
                self.foot_vel[e, f] = 0.0
                for pt in range(2):
                    # friction anchors start under the contact points
                    self.anch[e, f * 2 + pt] = site_world(
                        origins, angles, fl, m.foot_pts[f, pt])[0]
            hp = site_world(origins, angles, m.hand_link, m.hand_pt)
            self.hand[e] = (hp[0], hp[1], angles[m.hand_link], 0.0, 0.0, 0.0)
            self.head[e] = site_world(origins, angles, 0, m.head_pt)

    def step(self, pd_targets):
        """Advance every env one control step (config.substeps substeps)."""
        m, cfg = self.model, self.config
        targets = np.clip(np.asarray(pd_targets, dtype=np.float64).reshape(
            self.n_envs, m.n_joints), m.q_lo, m.q_hi)
        if not np.all(np.isfinite(targets)):
            raise ValueError("pd targets must be finite")
        self._push_dv[:] = 0.0
        if cfg.push_interval > 0 and cfg.push_max_impulse > 0:
            period = max(1, int(round(cfg.push_interval / cfg.control_dt)))
            for e in range(self.n_envs):
                if self.step_count[e] > 0 and self.step_count[e] % period == 0:
                    rng = self._rngs[e]
                    mag = rng.uniform(0.0, cfg.push_max_impulse)
                    ang = rng.uniform(0.0, 2.0 * np.pi)
                    self._push_dv[e] = mag / m.total_mass * np.array(
                        [np.cos(ang), np.sin(ang)])
        self.collide_ground[:] = 0
        self.fric_excess[:] = 0.0
        kernels.step_batch(
            self.qpos, self.qvel, self.anch,
            self.box_q, self.box_v, self.box_att, self.box_off,
            targets, self._push_dv,
            m.parent, m.mass, m.inertia, m.com, m.joint_anchor,
            m.active_dofs, m.n_active,
            m.q_lo, m.q_hi, m.torque_limit, m.kp, m.kd,
            m.foot_links, m.foot_pts, m.hand_link, m.hand_pt, m.head_pt,
            self._probe_links, self._probe_pts,
            self.mass_scale, self.fric, self.gain_scale,
            cfg.timestep, cfg.substeps, cfg.gravity,
            cfg.contact_stiffness, cfg.contact_damping,
            cfg.tangent_stiffness, cfg.tangent_damping,
            cfg.limit_stiffness, cfg.limit_damping,
            self.scene.box_mass, _box_inertia(self.scene),
            0.5 * self.scene.box_size[1], 1 if self.scene.has_box else 0,
            self.foot_f_mean, self.foot_f_end, self.foot_contact,
            self.foot_vel, self.foot_pos, self.hand, self.head,
            self.collide_ground, self.fric_excess, self.diverged,
        )
        self.step_count += 1
        if len(self.scene.shelf_segments):
            ok = self.diverged < 0
            hits = collision.shelf_hits_batch(m, self.scene, self.qpos)
            self.shelf_hit[ok] = hits[ok]
        else:
            self.shelf_hit[:] = False

    @property
    def collision(self):
        return (self.collide_ground.astype(bool)) | self.shelf_hit

    def diverged_body(self, e):
        dof = int(self.diverged[e])
        if dof < 0:
            return None
        return "torso" if dof < BASE_DOF else self.model.link_names[dof - BASE_DOF + 1]

    def graspable(self, e=0):
        return collision.box_graspable(self.scene, self.box_q[e], self.hand[e, :2])

    def attach_box(self, e=0):
        """Weld the box to the hand if graspable; no-op (False) otherwise."""
        if self.box_att[e] == 1 or not self.graspable(e):
            return False
        hx, hz, ha = self.hand[e, 0], self.hand[e, 1], self.hand[e, 2]
        m = self.model
        origins, angles = fk_frames(m, self.qpos[e, :BASE_DOF], self.qpos[e, BASE_DOF:])
        Ph = origins[m.hand_link]
        ca, sa = np.cos(angles[m.hand_link]), np.sin(angles[m.hand_link])
        d = self.box_q[e, :2] - Ph
        # offset stored in the hand-link frame so the weld is configuration-free
        self.box_off[e, 0] = ca * d[0] + sa * d[1]
        self.box_off[e, 1] = -sa * d[0] + ca * d[1]
        self.box_off[e, 2] = self.box_q[e, 2] - angles[m.hand_link]
        self.box_att[e] = 1
        return True

    def detach_box(self, e=0):
        if self.box_att[e] == 0:
            return False
        # kernel already wrote the welded com velocity into box_v
        self.box_att[e] = 0
        return True

    def state(self, e=0) -> RobotState:
        if self.diverged[e] >= 0:
            raise SimulationDiverged(self.diverged_body(e))
        return RobotState(
            base_pose=self.qpos[e, :BASE_DOF].copy(),
            base_vel=self.qvel[e, :BASE_DOF].copy(),
            q=self.qpos[e, BASE_DOF:].copy(),
            qd=self.qvel[e, BASE_DOF:].copy(),
            c_left=bool(self.foot_contact[e, 0]),
            c_right=bool(self.foot_contact[e, 1]),
            f_foot=self.foot_f_mean[e].copy(),
            v_foot=self.foot_vel[e].copy(),
            hand_pose=self.hand[e, :3].copy(),
            collision=bool(self.collision[e]),
        )


def _fk_full(model, qpos, qvel):
    from .robot import fk_velocities

    return fk_velocities(model, qpos[:BASE_DOF], qvel[:BASE_DOF],
                         qpos[BASE_DOF:], qvel[BASE_DOF:])


def _box_inertia(scene: SceneSpec):
    w, h = scene.box_size
    return scene.box_mass * (w * w + h * h) / 12.0 if scene.has_box else 0.0


class Sim:
    """Single-robot wrapper: step(state, targets) -> state semantics."""

    def __init__(self, model: RobotModel, config: SimConfig | None = None,
                 scene: SceneSpec | None = None, seed: int = 0):
        self.batch = BatchSim(model, config or SimConfig(), scene, n_envs=1, seed=seed)

    @property
    def model(self):
        return self.batch.model

    @property
    def config(self):
        return self.batch.config

    def reset(self, randomize=False) -> RobotState:
        self.batch.reset(randomize=randomize)
        return self.batch.state(0)

    def step(self, pd_targets) -> RobotState:
        self.batch.step(np.asarray(pd_targets)[None, :])
        return self.batch.state(0)

    def attach_box(self):
        return self.batch.attach_box(0)

    def detach_box(self):
        return self.batch.detach_box(0)
