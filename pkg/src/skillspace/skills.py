"""Primitive motor skills: locomotion, body-pose adjustment, hand reaching.

Each skill is a goal-conditioned PPO policy over its own body part (legs
for loco/body, arm for hand) while the other part is PD-held at the
default pose. Rewards follow the command / behavior / regularization
split; every term is a pure function so the distillation stage can
recombine them per active skill.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .nets import LOG_STD_MAX
from .rl import MetricsCsv, PpoConfig, PpoError, VanillaActorCritic, collect_rollouts, ppo_update
from .sim import BatchSim, SimConfig, load_robot

LEG_IDX = np.arange(0, 6)
ARM_IDX = np.arange(6, 9)
LEFT_LEG = np.arange(0, 3)
RIGHT_LEG = np.arange(3, 6)

SKILL_NAMES = ("loco", "body", "hand")

# v_x in m/s; heights as fractions of the nominal base height
LOCO_V_RANGE = (-0.6, 1.0)
BODY_H_FRAC_RANGE = (0.45, 1.0)
BODY_PITCH_RANGE = (0.0, 1.2)
STAND_V_THRESHOLD = 0.1


@dataclass
class GaitSchedule:
    """Cyclic stance/swing schedule; C_foot(phase) is the probability the
    foot should be in stance once von Mises phase noise is applied."""

    period: float = 0.8
    offsets: tuple = (0.0, 0.5)
    kappa: float = 16.0
    duty: float = 0.55

    def __post_init__(self):
        if not 0.0 < self.duty < 1.0:
            raise ValueError("duty must be in (0, 1)")
        self._table = None

    def _build_table(self, n=2048, m=4096):
        # P((phase + noise/2pi) mod 1 < duty) with noise ~ vonMises(0, kappa),
        # midpoint rule over the noise distribution, self-normalized
        delta = (np.arange(m) + 0.5) / m * 2.0 * np.pi - np.pi
        w = np.exp(self.kappa * np.cos(delta))
        w /= w.sum()
        phases = np.arange(n) / n
        table = np.empty(n)
        for start in range(0, n, 256):
            chunk = phases[start:start + 256, None] + delta[None, :] / (2.0 * np.pi)
            table[start:start + 256] = ((chunk % 1.0) < self.duty) @ w
        self._table = table

    def contact(self, phase, foot):
        """Desired-stance probability for one foot at wrapped phase."""
        if self._table is None:
            self._build_table()
        local = (np.asarray(phase, dtype=np.float64) + self.offsets[foot]) % 1.0
        n = len(self._table)
        x = local * n
        i0 = np.floor(x).astype(int) % n
        frac = x - np.floor(x)
        return self._table[i0] * (1.0 - frac) + self._table[(i0 + 1) % n] * frac

    def contacts(self, phase):
        """(n, 2) stance probabilities for both feet."""
        return np.stack([self.contact(phase, 0), self.contact(phase, 1)], axis=-1)


def gait_contact_schedule(phase, schedule: GaitSchedule, foot):
    return schedule.contact(phase, foot)


GAIT = GaitSchedule()


def arm_fk(q_arm, model=None):
    """Hand pose (x, z, theta) in the base frame from arm joints; closed
    form so goal sampling stays cheap. Matches the generic FK."""
    q_arm = np.asarray(q_arm, dtype=np.float64)
    if model is None:
        anchor = np.array([0.0, 0.50])
        lens = np.array([0.34, 0.32, 0.10])
    else:
        anchor = model.joint_anchor[6]
        lens = np.array([-model.joint_anchor[7][1], -model.joint_anchor[8][1],
                         -model.hand_pt[1]])
    a1 = q_arm[..., 0]
    a2 = a1 + q_arm[..., 1]
    a3 = a2 + q_arm[..., 2]
    x = anchor[0] + lens[0] * np.sin(a1) + lens[1] * np.sin(a2) + lens[2] * np.sin(a3)
    z = anchor[1] - lens[0] * np.cos(a1) - lens[1] * np.cos(a2) - lens[2] * np.cos(a3)
    return np.stack([x, z, a3], axis=-1)


def sample_goal(skill, rng, n=1, model=None):
    """Command vectors, uniform over the documented ranges. Hand goals are
    sampled in joint space and mapped through FK, so every goal is
    reachable by construction."""
    if skill == "loco":
        return rng.uniform(*LOCO_V_RANGE, size=(n, 1))
    if skill == "body":
        model = model or load_robot()
        h = rng.uniform(*BODY_H_FRAC_RANGE, size=n) * model.nominal_base_height
        b = rng.uniform(*BODY_PITCH_RANGE, size=n)
        return np.stack([h, b], axis=-1)
    if skill == "hand":
        model = model or load_robot()
        q_arm = rng.uniform(model.q_lo[ARM_IDX], model.q_hi[ARM_IDX], size=(n, 3))
        return arm_fk(q_arm, model)
    raise ValueError(f"unknown skill {skill!r}")


def wrap_angle(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def exploration_ceiling(update, updates, floor, start_frac=0.5, end_frac=0.9):
    """Upper bound for the policy log-std at this point in training.

    Unbounded through the exploration phase, then annealed linearly down to
    the floor. Without the squeeze the gait task inflates its noise for the
    whole run (dithering legs is rewarded before a clocked gait is), and the
    deterministic eval policy never sees the behavior the noise was carrying."""
    t = (update / max(updates, 1) - start_frac) / (end_frac - start_frac)
    t = min(max(t, 0.0), 1.0)
    return LOG_STD_MAX + t * (floor - LOG_STD_MAX)


def neutral_goal(skill, model):
    """Command that asks for the default stance; None when the skill has no
    meaningful easy command (hand goals lerped in task space can leave the
    reachable set)."""
    if skill == "loco":
        return np.zeros(1)
    if skill == "body":
        return np.array([model.nominal_base_height, 0.0])
    return None


# ---------------------------------------------------------------------------
# reward terms: pure functions state -> named raw terms; the weight table
# fixes the scale of each row, total = sum(weight * term) exactly

REWARD_WEIGHTS = {
    "loco": {
        "lin_vel": 1.0, "ang_vel": 1.0, "gait_vel": 1.0, "gait_force": 1.0,
        "action_acc": -0.01, "action_rate": -0.01, "collision": -5.0,
        "default_joint": 0.2,
    },
    "body": {
        "height": 1.0, "pitch_track": 1.0, "pitch_dev": 1.0,
        "leg_symmetry": -0.5, "torque_symmetry": -0.2, "contact_ground": 1.0,
        "action_acc": -0.01, "action_rate": -0.01, "collision": -5.0,
        "default_joint": 0.2,
    },
    "hand": {
        "ee_pose": 1.0,
        "action_acc": -0.01, "action_rate": -0.01, "collision": -5.0,
        "default_joint": 0.2,
    },
}


def reward_command(skill, goal, meas):
    if skill == "loco":
        dv = goal[:, 0] - meas["base_vel"][:, 0]
        # yaw rate is degenerate in the planar morphology; the command is
        # pinned to zero so the term stays at its maximum
        return {"lin_vel": np.exp(-5.0 * dv**2),
                "ang_vel": np.exp(-7.0 * np.zeros_like(dv))}
    if skill == "body":
        dh = goal[:, 0] - meas["base_height"]
        db = goal[:, 1] - meas["pitch"]
        return {"height": np.exp(-4.0 * dh**2),
                "pitch_track": np.exp(-4.0 * db**2)}
    if skill == "hand":
        dp = goal[:, :2] - meas["hand_pose"][:, :2]
        dth = wrap_angle(goal[:, 2] - meas["hand_pose"][:, 2])
        err_sq = np.sum(dp**2, axis=-1) + 0.25 * dth**2
        return {"ee_pose": np.exp(-4.0 * err_sq)}
    raise ValueError(f"unknown skill {skill!r}")


def reward_behavior(skill, goal, meas, C=None):
    if skill == "loco":
        # stance feet should be still, swing feet unloaded; standing puts
        # ~190 N on each foot, so the force scale must keep the term
        # responsive across the full stance load or its gradient dies
        vel = np.sum(C * np.exp(-meas["foot_vel_sq"]), axis=-1)
        force = np.sum((1.0 - C) * np.exp(-1e-4 * meas["foot_force_sq"]), axis=-1)
        return {"gait_vel": vel, "gait_force": force}
    if skill == "body":
        q = meas["q"]
        db = goal[:, 1] - meas["pitch"]
        sym = np.linalg.norm(q[:, LEFT_LEG] - q[:, RIGHT_LEG], axis=-1)
        tsym = np.linalg.norm(meas["action"][:, LEFT_LEG] - meas["action"][:, RIGHT_LEG],
                              axis=-1)
        both = (meas["contacts"][:, 0] * meas["contacts"][:, 1]).astype(np.float64)
        return {"pitch_dev": np.exp(-4.0 * db**2), "leg_symmetry": sym,
                "torque_symmetry": tsym, "contact_ground": both}
    if skill == "hand":
        return {}
    raise ValueError(f"unknown skill {skill!r}")


def reward_regularization(joint_idx, meas, q0):
    a, a1, a2 = meas["action"], meas["a_prev"], meas["a_prev2"]
    part = joint_idx
    dq = meas["q"][:, part] - q0[part]
    return {
        "action_acc": np.linalg.norm((a - 2.0 * a1 + a2)[:, part], axis=-1),
        "action_rate": np.linalg.norm((a - a1)[:, part], axis=-1),
        "collision": meas["collisions"].astype(np.float64),
        "default_joint": np.exp(-2.0 * np.sum(dq**2, axis=-1)),
    }


def reward_total(skill, terms):
    w = REWARD_WEIGHTS[skill]
    total = np.zeros_like(next(iter(terms.values())))
    for k in w:
        total = total + w[k] * terms[k]
    return total


def skill_joint_idx(skill):
    return LEG_IDX if skill in ("loco", "body") else ARM_IDX


def skill_fall_frac(skill):
    # the body skill is commanded into deep crouches, so its fall floor
    # sits below the lowest commanded height instead of the walking floor
    return 0.35 if skill == "body" else 0.55


def skill_goal_dim(skill):
    return {"loco": 1, "body": 2, "hand": 3}[skill]


def skill_obs_dim(skill):
    n = len(skill_joint_idx(skill))
    base = 3 + 3 * n  # pitch rate, gravity 2-vec, q/qd/a_prev per joint
    return base + (2 if skill == "loco" else 0)  # gait clock


def measurements(sim):
    """Batched state readouts shared by observations and rewards."""
    qpos, qvel = sim.qpos, sim.qvel
    pitch = qpos[:, 2].astype(np.float64)
    s, c = np.sin(pitch), np.cos(pitch)
    hand = sim.hand.astype(np.float64)
    dx = hand[:, 0] - qpos[:, 0]
    dz = hand[:, 1] - qpos[:, 1]
    hand_pose = np.stack(
        [c * dx + s * dz, -s * dx + c * dz, wrap_angle(hand[:, 2] - pitch)], axis=-1)
    return {
        "base_height": qpos[:, 1].astype(np.float64),
        "base_vel": qvel[:, 0:2].astype(np.float64),
        "pitch": pitch,
        "pitch_rate": qvel[:, 2].astype(np.float64),
        "gravity": np.stack([-s, -c], axis=-1),
        "q": qpos[:, 3:].astype(np.float64),
        "qd": qvel[:, 3:].astype(np.float64),
        "contacts": sim.foot_contact.astype(np.float64),
        "foot_vel_sq": np.sum(sim.foot_vel.astype(np.float64) ** 2, axis=-1),
        "foot_force_sq": np.sum(sim.foot_f_mean.astype(np.float64) ** 2, axis=-1),
        "hand_pose": hand_pose,
        "collisions": sim.collision.astype(np.float64),
    }


def build_obs(skill, meas, a_prev, phase, noise_rng=None, noise=None):
    part = skill_joint_idx(skill)
    q = meas["q"][:, part]
    qd = meas["qd"][:, part]
    grav = meas["gravity"]
    pr = meas["pitch_rate"][:, None]
    if noise_rng is not None:
        pr = pr + noise_rng.standard_normal(pr.shape) * noise["ang_vel"]
        grav = grav + noise_rng.standard_normal(grav.shape) * noise["gravity"]
        q = q + noise_rng.standard_normal(q.shape) * noise["q"]
        qd = qd + noise_rng.standard_normal(qd.shape) * noise["qd"]
    cols = [pr, grav, q, qd, a_prev[:, part]]
    if skill == "loco":
        ang = 2.0 * np.pi * phase
        cols.append(np.stack([np.sin(ang), np.cos(ang)], axis=-1))
    return np.concatenate(cols, axis=-1).astype(np.float32)


class SkillEnv:
    """Vectorized training environment for one primitive skill.

    Actions are [-1, 1] PD-target offsets around the default pose for the
    skill's joints; the other body part is held at the default pose.
    """

    def __init__(self, skill, n_envs=16, seed=0, sim_config=None, model=None,
                 episode_s=20.0, resample_s=(3.0, 6.0), eval_goals=None,
                 gait: GaitSchedule = GAIT):
        if skill not in SKILL_NAMES:
            raise ValueError(f"unknown skill {skill!r}")
        self.skill = skill
        self.model = model or load_robot()
        cfg = sim_config or SimConfig()
        if skill == "hand":
            # fixed legs cannot step to recover, so keep shoves mild
            cfg = replace(cfg, push_max_impulse=min(cfg.push_max_impulse, 5.0))
        self.sim = BatchSim(self.model, cfg, n_envs=n_envs, seed=seed)
        self.n_envs = n_envs
        self.part = skill_joint_idx(skill)
        self.obs_dim = skill_obs_dim(skill)
        self.goal_dim = skill_goal_dim(skill)
        self.act_dim = len(self.part)
        self.gait = gait
        self.dt = cfg.control_dt
        self.episode_steps = int(round(episode_s / self.dt))
        lo = int(round(resample_s[0] / self.dt))
        hi = int(round(resample_s[1] / self.dt))
        self.resample_range = (lo, max(hi, lo + 1))
        self.eval_goals = eval_goals
        self.noise = dict(cfg.obs_noise)
        self.noisy = any(v > 0 for v in self.noise.values())
        self.fall_floor = skill_fall_frac(skill) * self.model.nominal_base_height
        self.scale = np.maximum(self.model.q_hi - self.model.q0,
                                self.model.q0 - self.model.q_lo)
        self.rng = np.random.default_rng([seed, 311])
        # command curriculum: sampled goals are lerped toward the neutral
        # command by this factor; 1.0 = full difficulty (eval goals exempt)
        self.goal_difficulty = 1.0
        self.neutral = neutral_goal(skill, self.model)
        self.goal = np.zeros((n_envs, self.goal_dim))
        self.phase = np.zeros(n_envs)
        self.a_prev = np.zeros((n_envs, 9), dtype=np.float32)
        self.a_prev2 = np.zeros((n_envs, 9), dtype=np.float32)
        self.t_in_ep = np.zeros(n_envs, dtype=np.int64)
        self.next_resample = np.zeros(n_envs, dtype=np.int64)
        self._goal_cursor = 0
        self.episodes = 0
        self.falls = 0
        self.ep_return = np.zeros(n_envs)
        self.ep_len = np.zeros(n_envs, dtype=np.int64)
        self.finished_returns = []
        self.finished_lengths = []
        self.sim.reset()
        self._reset_bookkeeping(np.arange(n_envs))

    def _sample_goals(self, n):
        if self.eval_goals is not None:
            idx = (self._goal_cursor + np.arange(n)) % len(self.eval_goals)
            self._goal_cursor = (self._goal_cursor + n) % len(self.eval_goals)
            return self.eval_goals[idx]
        g = sample_goal(self.skill, self.rng, n, self.model)
        if self.neutral is not None and self.goal_difficulty < 1.0:
            g = self.neutral + self.goal_difficulty * (g - self.neutral)
        return g

    def _reset_bookkeeping(self, ids):
        self.goal[ids] = self._sample_goals(len(ids))
        self.phase[ids] = self.rng.uniform(0.0, 1.0, size=len(ids))
        self.a_prev[ids] = 0.0
        self.a_prev2[ids] = 0.0
        self.t_in_ep[ids] = 0
        self.next_resample[ids] = self.rng.integers(*self.resample_range, size=len(ids))
        self.ep_return[ids] = 0.0
        self.ep_len[ids] = 0

    def _standing(self):
        if self.skill != "loco":
            return np.zeros(self.n_envs, dtype=bool)
        return np.abs(self.goal[:, 0]) < STAND_V_THRESHOLD

    def obs(self):
        meas = measurements(self.sim)
        rng = self.rng if self.noisy else None
        return (build_obs(self.skill, meas, self.a_prev, self.phase, rng, self.noise),
                self.goal.astype(np.float32))

    def step(self, actions):
        actions = np.clip(np.asarray(actions, dtype=np.float32), -1.0, 1.0)
        full = np.zeros((self.n_envs, 9), dtype=np.float32)
        full[:, self.part] = actions
        targets = self.model.q0[None, :] + full * self.scale[None, :]
        self.sim.step(targets)

        standing = self._standing()
        self.phase = np.where(standing, self.phase,
                              (self.phase + self.dt / self.gait.period) % 1.0)
        C = self.gait.contacts(self.phase)
        C[standing] = 1.0

        meas = measurements(self.sim)
        meas["action"] = full.astype(np.float64)
        meas["a_prev"] = self.a_prev.astype(np.float64)
        meas["a_prev2"] = self.a_prev2.astype(np.float64)
        terms = reward_command(self.skill, self.goal, meas)
        terms.update(reward_behavior(self.skill, self.goal, meas, C))
        terms.update(reward_regularization(self.part, meas, self.model.q0))
        reward = reward_total(self.skill, terms)

        self.a_prev2 = self.a_prev
        self.a_prev = full
        self.t_in_ep += 1
        self.ep_return += reward
        self.ep_len += 1

        fell = (meas["base_height"] < self.fall_floor) | (meas["collisions"] > 0)
        diverged = self.sim.diverged >= 0
        timeout = self.t_in_ep >= self.episode_steps
        dones = fell | timeout | diverged
        ids = np.flatnonzero(dones)
        if ids.size:
            self.episodes += ids.size
            self.falls += int(np.count_nonzero(fell[ids] | diverged[ids]))
            self.finished_returns += list(self.ep_return[ids])
            self.finished_lengths += list(self.ep_len[ids])
            del self.finished_returns[:-200]
            del self.finished_lengths[:-200]
            self.sim.reset(ids)
            self._reset_bookkeeping(ids)

        resample = (~dones) & (self.t_in_ep >= self.next_resample)
        rids = np.flatnonzero(resample)
        if rids.size:
            self.goal[rids] = self._sample_goals(len(rids))
            self.next_resample[rids] = self.t_in_ep[rids] + self.rng.integers(
                *self.resample_range, size=len(rids))

        info = {k: v for k, v in terms.items()}
        info["fall"] = fell.astype(np.float64)
        return reward.astype(np.float32), dones, info


def eval_sim_config():
    """Nominal dynamics, no pushes, no observation noise."""
    return SimConfig(
        push_interval=0.0, push_max_impulse=0.0,
        mass_scale_range=(1.0, 1.0), friction_range=(0.9, 0.9),
        gain_scale_range=(1.0, 1.0),
        obs_noise={"ang_vel": 0.0, "gravity": 0.0, "q": 0.0, "qd": 0.0},
    )


def heldout_goals(skill, model=None):
    model = model or load_robot()
    if skill == "loco":
        return np.linspace(-0.6, 1.0, 9)[:, None]
    if skill == "body":
        h = np.array([0.5, 0.62, 0.75, 0.88, 1.0]) * model.nominal_base_height
        b = np.array([0.0, 0.4, 0.8, 1.2])
        hh, bb = np.meshgrid(h, b, indexing="ij")
        return np.stack([hh.ravel(), bb.ravel()], axis=-1)
    return sample_goal("hand", np.random.default_rng(12345), 64, model)


def evaluate_primitive(skill, policy, n_episodes=100, seed=1000, episode_s=6.0,
                       settle_s=2.0, model=None):
    """Deterministic rollouts on held-out commands under nominal dynamics.

    Returns mean tracking error for the skill's command, fall count, and
    episode count; the per-skill gates read from this dict.
    """
    model = model or load_robot()
    n_envs = 10
    env = SkillEnv(skill, n_envs=n_envs, seed=seed, sim_config=eval_sim_config(),
                   model=model, episode_s=episode_s, resample_s=(1e9, 2e9),
                   eval_goals=heldout_goals(skill, model))
    policy.obs_norm.frozen = True
    rng = np.random.default_rng(seed)
    settle = int(round(settle_s / env.dt))
    steps = env.episode_steps
    err_sum = 0.0
    err_n = 0
    falls = 0
    episodes = 0
    errs = np.zeros(n_envs)
    cnts = np.zeros(n_envs)
    while episodes < n_episodes:
        obs, goal = env.obs()
        nobs = policy.norm_obs(obs, update=False)
        a, _, _, _ = policy.act(nobs, goal, rng, deterministic=True)
        meas_goal = env.goal.copy()
        _, dones, info = env.step(a)
        meas = measurements(env.sim)
        active = env.t_in_ep > settle
        if skill == "loco":
            e = np.abs(meas_goal[:, 0] - meas["base_vel"][:, 0])
        elif skill == "body":
            e = np.abs(meas_goal[:, 0] - meas["base_height"])
        else:
            e = np.linalg.norm(meas_goal[:, :2] - meas["hand_pose"][:, :2], axis=-1)
        # done envs were already reset by step(); their readouts are fresh
        valid = active & ~dones
        errs[valid] += e[valid]
        cnts[valid] += 1
        fin = np.flatnonzero(dones)
        if fin.size:
            episodes += fin.size
            falls += int(np.sum(info["fall"][fin] > 0))
            err_sum += float(np.sum(errs[fin] / np.maximum(cnts[fin], 1)))
            err_n += fin.size
            errs[fin] = 0.0
            cnts[fin] = 0.0
    policy.obs_norm.frozen = False
    return {"mean_err": err_sum / max(err_n, 1), "falls": falls,
            "episodes": episodes}


def skill_manifest(skill, model=None, gait: GaitSchedule = GAIT):
    model = model or load_robot()
    part = skill_joint_idx(skill)
    ranges = {
        "loco": {"v_x": list(LOCO_V_RANGE)},
        "body": {"height": [BODY_H_FRAC_RANGE[0] * model.nominal_base_height,
                            BODY_H_FRAC_RANGE[1] * model.nominal_base_height],
                 "pitch": list(BODY_PITCH_RANGE)},
        "hand": {"reach_radius": [0.1, 0.76], "theta": [-4.5, 4.5]},
    }[skill]
    man = {
        "schema_version": 1,
        "skill": skill,
        "obs_dim": skill_obs_dim(skill),
        "goal_dim": skill_goal_dim(skill),
        "act_dim": len(part),
        "joint_idx": [int(i) for i in part],
        "action_scale": [float(s) for s in np.maximum(
            model.q_hi - model.q0, model.q0 - model.q_lo)[part]],
        "command_ranges": ranges,
        "fall_frac": skill_fall_frac(skill),
        "obs_layout": "pitch_rate, gravity[2], q, qd, a_prev"
                      + (", gait_clock[2]" if skill == "loco" else ""),
    }
    if skill == "loco":
        man["gait"] = {"period": gait.period, "offsets": list(gait.offsets),
                       "kappa": gait.kappa, "duty": gait.duty}
    return man


def save_skill(path, skill, policy, extra_meta=None):
    meta = {"kind": "primitive", **skill_manifest(skill)}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, policy.state(), meta)


def load_skill(path, cfg=None):
    arrays, meta = load_checkpoint(path)
    skill = meta["skill"]
    cfg = cfg or PpoConfig()
    policy = VanillaActorCritic(meta["obs_dim"], meta["goal_dim"], meta["act_dim"],
                                cfg, hidden=(128, 128), seed=0)
    policy.load_state(arrays)
    policy.obs_norm.frozen = True
    return policy, meta


def train_primitive(skill, run_dir, updates=20000, n_envs=32, seed=0,
                    lr=3e-4, eval_every=500, eval_episodes=20, log_every=25,
                    entropy_coef=0.0, target_kl=0.02):
    """Full PPO training loop for one skill; writes metrics.csv, last.ckpt
    and best.ckpt (lowest tracking error among fall-free evals) plus the
    manifest consumed by the distillation stage.

    entropy_coef defaults to zero: with Adam any constant entropy bonus
    drifts log_std toward its clip bound over long runs (clipped actions
    give the surrogate no counter-gradient), which shows up as a slow
    policy collapse tens of thousands of updates in."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = PpoConfig(n_envs=n_envs, horizon=24, lr=lr, entropy_coef=entropy_coef,
                    target_kl=target_kl, log_std_min=-1.6)
    env = SkillEnv(skill, n_envs=n_envs, seed=seed)
    policy = VanillaActorCritic(env.obs_dim, env.goal_dim, env.act_dim, cfg,
                                hidden=(128, 128), seed=seed)
    rng = np.random.default_rng([seed, 7])
    term_keys = sorted(REWARD_WEIGHTS[skill]) + ["fall"]
    log = MetricsCsv(run_dir / "metrics.csv",
                     ["update", "steps", "reward", "ep_return", "ep_len", "falls",
                      "episodes", "policy_loss", "value_loss", "entropy",
                      "clip_fraction", "approx_kl", "eval_err", "eval_falls"]
                     + term_keys)
    (run_dir / "manifest.json").write_text(
        json.dumps(skill_manifest(skill, env.model), indent=2, sort_keys=True))
    best = (np.inf, np.inf)  # (falls, err) lexicographic
    for update in range(updates):
        # widen commands from 30% of their range to full over the first 40%
        # of training; tracking mild commands is discoverable from standing,
        # and the policy then follows the range out as it widens
        env.goal_difficulty = min(1.0, 0.3 + 0.7 * update / max(1, int(0.4 * updates)))
        cfg.log_std_max = exploration_ceiling(update, updates, cfg.log_std_min)
        buf = collect_rollouts(policy, env, cfg.horizon, rng)
        try:
            stats = ppo_update(policy, buf, cfg, rng)
        except PpoError:
            save_skill(run_dir / "abort.ckpt", skill, policy,
                       {"update": update, "aborted": True})
            break
        if update % log_every == 0 or update == updates - 1:
            row = {"update": update, "steps": (update + 1) * cfg.horizon * n_envs,
                   "reward": float(buf.rewards.mean()),
                   "ep_return": float(np.mean(env.finished_returns[-100:] or [0.0])),
                   "ep_len": float(np.mean(env.finished_lengths[-100:] or [0.0])),
                   "falls": env.falls, "episodes": env.episodes, **stats,
                   **buf.term_means()}
            if update % eval_every == 0 or update == updates - 1:
                ev = evaluate_primitive(skill, policy, n_episodes=eval_episodes,
                                        seed=1000, model=env.model)
                row["eval_err"] = ev["mean_err"]
                row["eval_falls"] = ev["falls"]
                save_skill(run_dir / "last.ckpt", skill, policy, {"update": update})
                score = (ev["falls"], ev["mean_err"])
                if score < best:
                    best = score
                    save_skill(run_dir / "best.ckpt", skill, policy,
                               {"update": update, "eval_err": ev["mean_err"],
                                "eval_falls": ev["falls"]})
            log.append(row)
    save_skill(run_dir / "last.ckpt", skill, policy, {"update": updates - 1})
    if not (run_dir / "best.ckpt").exists():
        save_skill(run_dir / "best.ckpt", skill, policy, {"update": updates - 1})
    return policy, best
