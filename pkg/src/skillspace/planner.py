"""Goal-reaching tasks driven by a high-level policy acting in the learned
latent space through the frozen decoder.

Four tasks: touch a point with the hand, touch two points (hand + head
site), touch a shelf target, and lift a box to a goal height. The planner
emits one latent action per 0.1 s and the low level decodes it to joint
targets at 50 Hz (zero-order hold in between). Two ablation variants swap
the action space: `primary` drives the frozen primitive teachers through
their command interface (skill pick + commands); `flat` is vanilla PPO on
joint targets at the control rate.

Evaluation logs raw trajectories as structured arrays so success rate and
distance error can be recomputed from the logs alone:
  steps:  (trial u4, step u4, hand f4[2], head f4[2], box_z f4, fell u1)
  trials: (trial u4, task u1, t1 f4[2], t2 f4[2], n_targets u1,
           radius f4, lift_goal f4, lift_success f4)
saved together via np.savez with a json meta string.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .ensemble import HETERO_OBS_DIM, SkillSpace
from .rl import (
    MetricsCsv,
    PpoConfig,
    PpoError,
    VanillaActorCritic,
    collect_rollouts,
    ppo_update,
)
from .skills import (
    ARM_IDX,
    GAIT,
    LEG_IDX,
    LOCO_V_RANGE,
    BODY_H_FRAC_RANGE,
    BODY_PITCH_RANGE,
    REWARD_WEIGHTS,
    arm_fk,
    build_obs,
    eval_sim_config,
    load_skill,
    measurements,
    reward_regularization,
)
from .sim import BatchSim, SceneSpec, SimConfig, load_robot
from .sim.collision import box_graspable

PAPER_ROBOT_HEIGHT = 1.8
TASKS = ("single-point", "dual-point", "shelf", "box")
VARIANTS = ("latent", "primary", "flat")
PLANNER_HOLD = 5  # 50 Hz control / 10 Hz planner
BOX_MASS = 0.5
# box_att value outside the kernel's free(0)/welded(1) branches: the box
# sits untouched on its stand until the first grasp attaches it
BOX_PARKED = 2

STEP_DTYPE = np.dtype([("trial", "<u4"), ("step", "<u4"), ("hand", "<f4", 2),
                       ("head", "<f4", 2), ("box_z", "<f4"), ("fell", "u1")])
TRIAL_DTYPE = np.dtype([("trial", "<u4"), ("task", "u1"), ("t1", "<f4", 2),
                        ("t2", "<f4", 2), ("n_targets", "u1"), ("radius", "<f4"),
                        ("lift_goal", "<f4"), ("lift_success", "<f4")])


def scale_ratio(model=None):
    model = model or load_robot()
    return model.standing_height / PAPER_ROBOT_HEIGHT


def task_geometry(model=None):
    """All task dimensions at the model's scale ratio."""
    rho = scale_ratio(model)
    return {
        "rho": rho,
        "forward": (0.0, 2.0 * rho),
        "height": (0.1 * rho, 2.0 * rho),
        # second target goes to the head site; its reachable height band
        # (crouch and torso bend sweep) is narrower than the hand's
        "head_height": (0.75, 1.70),
        "pair_max": 1.0 * rho,
        "touch_radius": 0.05 * rho,
        "shelf_x": (0.95 * rho, 1.25 * rho),
        "shelf_boards": tuple(z * rho for z in (0.5, 1.0, 1.5, 2.0)),
        "shelf_margin": 0.06 * rho,
        "box_x": 0.7 * rho,
        "box_size": 0.3 * rho,
        "box_base": (0.2 * rho, 1.2 * rho),
        "lift_goal": 1.4 * rho,
        "lift_success": 1.3 * rho,
    }


def shelf_segments(geo):
    """Horizontal board segments [(x0, z), (x1, z)] of the 3-layer shelf."""
    x0, x1 = geo["shelf_x"]
    return [((x0, z), (x1, z)) for z in geo["shelf_boards"]]


def sample_task(task, rng, geo):
    """One trial's target geometry. Returns (targets (2,2), box_z0)."""
    targets = np.zeros((2, 2))
    box_z0 = 0.0
    if task == "single-point":
        targets[0] = [rng.uniform(*geo["forward"]), rng.uniform(*geo["height"])]
    elif task == "dual-point":
        while True:
            t1 = np.array([rng.uniform(*geo["forward"]),
                           rng.uniform(*geo["height"])])
            t2 = np.array([rng.uniform(*geo["forward"]),
                           rng.uniform(*geo["head_height"])])
            if np.linalg.norm(t1 - t2) <= geo["pair_max"]:
                targets[0], targets[1] = t1, t2
                break
    elif task == "shelf":
        boards = geo["shelf_boards"]
        m = geo["shelf_margin"]
        while True:
            z = rng.uniform(boards[0], boards[-1])
            if all(abs(z - b) >= m for b in boards):
                break
        targets[0] = [rng.uniform(*geo["shelf_x"]), z]
    elif task == "box":
        box_z0 = rng.uniform(*geo["box_base"])
        targets[0] = [geo["box_x"], box_z0 + 0.5 * geo["box_size"]]
    else:
        raise ValueError(f"unknown task {task!r}")
    return targets, box_z0


def n_targets(task):
    return 2 if task == "dual-point" else 1


def task_goal_dim(task):
    return {"single-point": 2, "dual-point": 4, "shelf": 2, "box": 4}[task]


def reward_task(task, hand, head, targets, box_center, geo):
    """Dense task terms: exp of negative distance(s) to the targets, or
    approach-plus-lift for the box (side = nearest side-face midpoint)."""
    if task == "box":
        half = 0.5 * geo["box_size"]
        sides = np.stack([box_center + [-half, 0.0], box_center + [half, 0.0]],
                         axis=1)  # (n, 2 sides, 2)
        d_side = np.linalg.norm(sides - hand[:, None, :], axis=-1).min(axis=1)
        lift = np.abs(box_center[:, 1] - geo["lift_goal"])
        return np.exp(-d_side) + np.exp(-lift)
    d = np.linalg.norm(hand - targets[:, 0], axis=-1)
    if task == "dual-point":
        d = d + np.linalg.norm(head - targets[:, 1], axis=-1)
    return np.exp(-d)


def world_to_base(qpos, pts):
    """Rotate world points (n, 2) into each robot's base frame."""
    pitch = qpos[:, 2]
    s, c = np.sin(pitch), np.cos(pitch)
    dx = pts[:, 0] - qpos[:, 0]
    dz = pts[:, 1] - qpos[:, 1]
    return np.stack([c * dx + s * dz, -s * dx + c * dz], axis=-1)


# primary-command variant: action = [2 skill logits, 2 lower-command slots,
# 3 hand slots]; slot 0 is the walk speed or the body height depending on
# the picked skill, slot 1 the torso bend. The hand slots are arm joint
# targets pushed through FK, mirroring how hand-skill goals are sampled,
# so every decoded command is reachable. [-1, 1] maps linearly.
def primary_command_ranges(model):
    h0 = model.nominal_base_height
    return {
        "v": LOCO_V_RANGE,
        "h": (BODY_H_FRAC_RANGE[0] * h0, BODY_H_FRAC_RANGE[1] * h0),
        "b": BODY_PITCH_RANGE,
        "q_arm": (model.q_lo[ARM_IDX].copy(), model.q_hi[ARM_IDX].copy()),
    }


def _lerp(u, rng):
    return rng[0] + u * (rng[1] - rng[0])


class PlannerEnv:
    """Task environment exposing planner-rate steps to the PPO engine
    while running the low-level stack at the control rate inside."""

    def __init__(self, task, variant="latent", skillspace_path=None,
                 teacher_dir=None, n_envs=16, seed=0, sim_config=None,
                 model=None, episode_s=None, record=False):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}")
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.task = task
        self.variant = variant
        self.model = model or load_robot()
        self.geo = task_geometry(self.model)
        cfg = sim_config or SimConfig()
        self.scene = self._build_scene()
        self.sim = BatchSim(self.model, cfg, scene=self.scene,
                            n_envs=n_envs, seed=seed)
        self.n_envs = n_envs
        self.obs_dim = HETERO_OBS_DIM
        self.goal_dim = task_goal_dim(task)
        self.dt = cfg.control_dt
        self.hold = 1 if variant == "flat" else PLANNER_HOLD
        if episode_s is None:
            episode_s = 10.0 if task == "box" else 8.0
        self.episode_steps = int(round(episode_s / self.dt))

        if variant == "latent":
            if skillspace_path is None or not Path(skillspace_path).exists():
                raise FileNotFoundError(
                    f"latent variant needs a skill-space checkpoint, got {skillspace_path}")
            self.space = SkillSpace(skillspace_path)
            self.act_dim = self.space.latent_dim
        elif variant == "primary":
            teacher_dir = Path(teacher_dir or "")
            self.teachers = {}
            for skill in ("loco", "body", "hand"):
                p = teacher_dir / skill / "best.ckpt"
                if not p.exists():
                    raise FileNotFoundError(
                        f"primary variant needs teacher checkpoints, missing {p}")
                self.teachers[skill], _ = load_skill(p)
            self.cmd_ranges = primary_command_ranges(self.model)
            self.act_dim = 7
        else:
            self.act_dim = 9

        self.scale = np.maximum(self.model.q_hi - self.model.q0,
                                self.model.q0 - self.model.q_lo)
        self.fall_floor = 0.35 * self.model.nominal_base_height
        self.rng = np.random.default_rng([seed, 911])
        n = n_envs
        self.targets = np.zeros((n, 2, 2))
        self.box_z0 = np.zeros(n)
        self.box_apex = np.zeros(n)
        self.min_dists = np.full((n, 2), np.inf)
        self.phase = np.zeros(n)
        self.a_prev = np.zeros((n, 9), dtype=np.float32)
        self.a_prev2 = np.zeros((n, 9), dtype=np.float32)
        self.t_ctrl = np.zeros(n, dtype=np.int64)
        self.fell_flag = np.zeros(n, dtype=bool)
        self.episodes = 0
        self.falls = 0
        self.finished_returns = []
        self.finished_lengths = []
        self.ep_return = np.zeros(n)
        self.trial_results = []
        self.record = record
        self.step_rows = []
        self.trial_rows = []
        self.trial_id = np.zeros(n, dtype=np.int64)
        self.next_trial = 0
        # BatchSim ran its own reset in the constructor
        self._reset_bookkeeping(np.arange(n))

    def _build_scene(self):
        if self.task == "shelf":
            return SceneSpec(shelf_segments=np.asarray(shelf_segments(self.geo)))
        if self.task == "box":
            half = 0.5 * self.geo["box_size"]
            return SceneSpec(box_size=(self.geo["box_size"], self.geo["box_size"]),
                             box_mass=BOX_MASS,
                             box_pose=(self.geo["box_x"],
                                       self.geo["box_base"][0] + half))
        return SceneSpec()

    @property
    def carried(self):
        return self.sim.box_att == 1

    @property
    def box_center(self):
        return self.sim.box_q[:, :2]

    def _reset_bookkeeping(self, ids):
        for e in ids:
            self.targets[e], self.box_z0[e] = sample_task(self.task, self.rng,
                                                          self.geo)
            self.trial_id[e] = self.next_trial
            self.next_trial += 1
            if self.record:
                self.trial_rows.append((
                    self.trial_id[e], TASKS.index(self.task),
                    self.targets[e, 0], self.targets[e, 1],
                    n_targets(self.task), self.geo["touch_radius"],
                    self.geo["lift_goal"], self.geo["lift_success"]))
        self.box_apex[ids] = 0.0
        if self.task == "box":
            half = 0.5 * self.geo["box_size"]
            self.sim.box_q[ids, 0] = self.geo["box_x"]
            self.sim.box_q[ids, 1] = self.box_z0[ids] + half
            self.sim.box_q[ids, 2] = 0.0
            self.sim.box_v[ids] = 0.0
            self.sim.box_off[ids] = 0.0
            self.sim.box_att[ids] = BOX_PARKED
            self.sim.anch[ids, 4] = self.geo["box_x"]
            self.box_apex[ids] = self.sim.box_q[ids, 1]
        self.min_dists[ids] = np.inf
        self.phase[ids] = self.rng.uniform(0.0, 1.0, size=len(ids))
        self.a_prev[ids] = 0.0
        self.a_prev2[ids] = 0.0
        self.t_ctrl[ids] = 0
        self.fell_flag[ids] = False
        self.ep_return[ids] = 0.0

    def _student_obs(self, meas):
        ang = 2.0 * np.pi * self.phase
        clock = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
        return np.concatenate([
            meas["pitch_rate"][:, None], meas["gravity"], meas["q"],
            meas["qd"], self.a_prev, clock], axis=-1).astype(np.float32)

    def goal(self):
        qpos = self.sim.qpos
        if self.task == "box":
            box_c = self.box_center
            rel = world_to_base(qpos, box_c)
            lift_err = box_c[:, 1] - self.geo["lift_goal"]
            g = np.concatenate([rel, lift_err[:, None],
                                self.carried[:, None].astype(np.float64)], axis=-1)
        elif self.task == "dual-point":
            g = np.concatenate([world_to_base(qpos, self.targets[:, 0]),
                                world_to_base(qpos, self.targets[:, 1])], axis=-1)
        else:
            g = world_to_base(qpos, self.targets[:, 0])
        return g.astype(np.float32)

    def obs(self):
        return self._student_obs(measurements(self.sim)), self.goal()

    def _joint_actions(self, meas, plan_action):
        """Map a planner action to joint-space actions for one substep."""
        if self.variant == "latent":
            z = np.clip(plan_action, -4.0, 4.0)
            nobs = self.space.norm_obs(self._student_obs(meas))
            return np.clip(self.space.decode_mean(nobs, z), -1.0, 1.0)
        if self.variant == "flat":
            return np.clip(plan_action, -1.0, 1.0)
        # primary: skill pick by logits, command slots mapped into ranges
        a = np.clip(plan_action, -1.0, 1.0)
        is_body = a[:, 1] > a[:, 0]
        u = (a[:, 2:7] + 1.0) * 0.5
        r = self.cmd_ranges
        v_cmd = _lerp(u[:, 0], r["v"])
        h_cmd = _lerp(u[:, 0], r["h"])
        b_cmd = _lerp(u[:, 1], r["b"])
        hand_cmd = arm_fk(_lerp(u[:, 2:5], r["q_arm"]), self.model)
        out = np.zeros((self.n_envs, 9), dtype=np.float32)
        rng = np.random.default_rng(0)
        for skill, mask in (("loco", ~is_body), ("body", is_body)):
            ids = np.flatnonzero(mask)
            if ids.size == 0:
                continue
            pol = self.teachers[skill]
            sub = {k: v[ids] for k, v in meas.items()}
            obs = build_obs(skill, sub, self.a_prev[ids], self.phase[ids])
            goal = (v_cmd[ids, None] if skill == "loco"
                    else np.stack([h_cmd[ids], b_cmd[ids]], axis=-1))
            act, _, _, _ = pol.act(pol.norm_obs(obs, update=False),
                                   goal.astype(np.float32), rng,
                                   deterministic=True)
            out[np.ix_(ids, LEG_IDX)] = act
        pol = self.teachers["hand"]
        obs = build_obs("hand", meas, self.a_prev, self.phase)
        act, _, _, _ = pol.act(pol.norm_obs(obs, update=False),
                               hand_cmd.astype(np.float32), rng,
                               deterministic=True)
        out[:, ARM_IDX] = act
        self._primary_is_body = is_body
        self._primary_v_cmd = v_cmd
        return out

    def _advance_phase(self, meas):
        if self.variant == "primary":
            standing = self._primary_is_body | (np.abs(self._primary_v_cmd) < 0.1)
        else:
            # intent is latent, so freeze the gait clock on measured speed
            standing = np.abs(meas["base_vel"][:, 0]) < 0.1
        self.phase = np.where(standing, self.phase,
                              (self.phase + self.dt / GAIT.period) % 1.0)

    def step(self, plan_actions):
        plan_actions = np.asarray(plan_actions, dtype=np.float32)
        acc = np.zeros(self.n_envs)
        done_latch = np.zeros(self.n_envs, dtype=bool)
        task_acc = np.zeros(self.n_envs)
        reg_acc = np.zeros(self.n_envs)
        for _ in range(self.hold):
            live = ~done_latch
            meas = measurements(self.sim)
            joint_a = self._joint_actions(meas, plan_actions)
            targets_q = self.model.q0[None, :] + joint_a * self.scale[None, :]
            self.sim.step(targets_q)
            self._advance_phase(meas)
            meas = measurements(self.sim)
            meas["action"] = joint_a.astype(np.float64)
            meas["a_prev"] = self.a_prev.astype(np.float64)
            meas["a_prev2"] = self.a_prev2.astype(np.float64)
            hand = self.sim.hand[:, :2].astype(np.float64)
            head = self.sim.head.copy()
            box_c = self.box_center.copy()

            if self.task == "box":
                for e in np.flatnonzero(live & ~self.carried):
                    if box_graspable(self.scene, self.sim.box_q[e],
                                     self.sim.hand[e, :2]):
                        self.sim.attach_box(e)
                self.box_apex = np.maximum(
                    self.box_apex, np.where(live, box_c[:, 1], -np.inf))
                lift_dev = np.abs(box_c[:, 1] - self.geo["lift_goal"])
                self.min_dists[:, 0] = np.minimum(
                    self.min_dists[:, 0], np.where(live, lift_dev, np.inf))
            else:
                d1 = np.linalg.norm(hand - self.targets[:, 0], axis=-1)
                self.min_dists[:, 0] = np.minimum(
                    self.min_dists[:, 0], np.where(live, d1, np.inf))
                if self.task == "dual-point":
                    d2 = np.linalg.norm(head - self.targets[:, 1], axis=-1)
                    self.min_dists[:, 1] = np.minimum(
                        self.min_dists[:, 1], np.where(live, d2, np.inf))

            r_task = reward_task(self.task, hand, head, self.targets,
                                 box_c, self.geo)
            reg_terms = reward_regularization(np.arange(9), meas, self.model.q0)
            w = REWARD_WEIGHTS["loco"]
            r_reg = sum(w[k] * reg_terms[k] for k in
                        ("action_acc", "action_rate", "collision",
                         "default_joint"))
            acc[live] += (r_task + r_reg)[live]
            task_acc[live] += r_task[live]
            reg_acc[live] += r_reg[live]

            self.a_prev2 = self.a_prev
            self.a_prev = joint_a
            self.t_ctrl += live.astype(np.int64)
            fell = ((meas["base_height"] < self.fall_floor)
                    | (meas["collisions"] > 0) | (self.sim.diverged >= 0))
            self.fell_flag |= fell & live
            done_latch |= fell

            if self.record:
                for e in np.flatnonzero(live):
                    self.step_rows.append((
                        self.trial_id[e], self.t_ctrl[e], hand[e], head[e],
                        box_c[e, 1], int(self.fell_flag[e])))

        rewards = acc / self.hold
        self.ep_return += rewards
        timeout = self.t_ctrl >= self.episode_steps
        dones = done_latch | timeout
        # snapshot before resets clear the per-episode flags
        fall_out = self.fell_flag.astype(np.float64)
        min_out = np.where(np.isfinite(self.min_dists[:, 0]),
                           self.min_dists[:, 0], 0.0)
        carried_out = self.carried.astype(np.float64)
        ids = np.flatnonzero(dones)
        if ids.size:
            self.episodes += ids.size
            self.falls += int(np.count_nonzero(self.fell_flag[ids]))
            for e in ids:
                self.trial_results.append({
                    "trial": int(self.trial_id[e]),
                    "min_dists": self.min_dists[e, :n_targets(self.task)].copy(),
                    "apex": float(self.box_apex[e]),
                    "fell": bool(self.fell_flag[e]),
                    "steps": int(self.t_ctrl[e])})
            self.finished_returns += list(self.ep_return[ids])
            self.finished_lengths += list(self.t_ctrl[ids])
            del self.finished_returns[:-200]
            del self.finished_lengths[:-200]
            self.sim.reset(ids)
            self._reset_bookkeeping(ids)

        info = {"task_term": task_acc / self.hold, "reg_term": reg_acc / self.hold,
                "fall": fall_out, "min_dist": min_out, "carried": carried_out}
        return rewards.astype(np.float32), dones, info


def report_from_records(steps, trials):
    """SR/DE recomputed purely from logged arrays; the eval report and the
    independent recompute share this exact code path."""
    by_trial = {}
    for tr in trials:
        by_trial[int(tr["trial"])] = tr
    task = TASKS[int(trials[0]["task"])] if len(trials) else "single-point"
    succ, dists, falls = [], [], 0
    order = np.argsort(steps["trial"], kind="stable")
    s = steps[order]
    bounds = np.searchsorted(s["trial"], np.unique(s["trial"]))
    uniq = np.unique(s["trial"])
    for i, tid in enumerate(uniq):
        lo = bounds[i]
        hi = bounds[i + 1] if i + 1 < len(bounds) else len(s)
        rows = s[lo:hi]
        tr = by_trial[int(tid)]
        if task == "box":
            apex = float(rows["box_z"].max())
            dev = float(np.abs(rows["box_z"] - tr["lift_goal"]).min())
            succ.append(apex > tr["lift_success"])
            dists.append(dev)
        else:
            d1 = np.linalg.norm(rows["hand"] - tr["t1"][None, :], axis=-1).min()
            md = [d1]
            if tr["n_targets"] > 1:
                md.append(np.linalg.norm(rows["head"] - tr["t2"][None, :],
                                         axis=-1).min())
            md = np.array(md)
            succ.append(bool(np.all(md <= tr["radius"])))
            dists.append(float(np.mean(md)))
        falls += int(rows["fell"].max())
    n = len(succ)
    return {"task": task, "trials": n,
            "sr": float(np.mean(succ)) if n else 0.0,
            "de": float(np.mean(dists)) if n else 0.0,
            "falls": falls}


def recompute_report(record_path):
    data = np.load(record_path, allow_pickle=False)
    return report_from_records(data["steps"], data["trials"])


def save_planner(path, policy, meta):
    save_checkpoint(path, policy.state(), {"kind": "planner", **meta})


def load_planner(path, cfg=None):
    arrays, meta = load_checkpoint(path)
    policy = VanillaActorCritic(meta["obs_dim"], meta["goal_dim"],
                                meta["act_dim"], cfg or PpoConfig(),
                                hidden=(128, 128), seed=0)
    policy.load_state(arrays)
    policy.obs_norm.frozen = True
    return policy, meta


def make_planner_env(task, variant, skill_root, n_envs=16, seed=0,
                     sim_config=None, record=False, episode_s=None):
    """skill_root holds ensemble/skillspace.ckpt and <skill>/best.ckpt."""
    root = Path(skill_root)
    return PlannerEnv(task, variant,
                      skillspace_path=root / "ensemble" / "skillspace.ckpt",
                      teacher_dir=root, n_envs=n_envs, seed=seed,
                      sim_config=sim_config, record=record,
                      episode_s=episode_s)


def train_planner(task, run_dir, skill_root, variant="latent", updates=2000,
                  n_envs=16, seed=0, lr=3e-4, eval_every=500, log_every=25,
                  entropy_coef=0.0, target_kl=0.02, eval_trials=100):
    """PPO on the planner action space; the skill space stays frozen (the
    checkpoint digest is asserted unchanged after training)."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = PpoConfig(n_envs=n_envs, horizon=24, lr=lr, entropy_coef=entropy_coef,
                    target_kl=target_kl)
    env = make_planner_env(task, variant, skill_root, n_envs=n_envs, seed=seed)
    digest_before = env.space.digest() if variant == "latent" else None
    policy = VanillaActorCritic(env.obs_dim, env.goal_dim, env.act_dim, cfg,
                                hidden=(128, 128), seed=seed)
    rng = np.random.default_rng([seed, 23])
    meta = {"task": task, "variant": variant, "obs_dim": env.obs_dim,
            "goal_dim": env.goal_dim, "act_dim": env.act_dim, "seed": seed}
    log = MetricsCsv(run_dir / "metrics.csv",
                     ["update", "steps", "reward", "ep_return", "ep_len",
                      "falls", "episodes", "policy_loss", "value_loss",
                      "entropy", "clip_fraction", "approx_kl", "task_term",
                      "reg_term", "min_dist", "eval_sr", "eval_de"])
    best = (-1.0, np.inf)
    for update in range(updates):
        buf = collect_rollouts(policy, env, cfg.horizon, rng)
        try:
            stats = ppo_update(policy, buf, cfg, rng)
        except PpoError:
            save_planner(run_dir / "abort.ckpt", policy,
                         {**meta, "update": update, "aborted": True})
            break
        row = None
        if update % log_every == 0 or update == updates - 1:
            tm = buf.term_means()
            row = {"update": update, "steps": (update + 1) * cfg.horizon * n_envs,
                   "reward": float(buf.rewards.mean()),
                   "ep_return": float(np.mean(env.finished_returns[-100:] or [0.0])),
                   "ep_len": float(np.mean(env.finished_lengths[-100:] or [0.0])),
                   "falls": env.falls, "episodes": env.episodes, **stats,
                   "task_term": tm.get("task_term", 0.0),
                   "reg_term": tm.get("reg_term", 0.0),
                   "min_dist": tm.get("min_dist", 0.0)}
        if (update + 1) % eval_every == 0 or update == updates - 1:
            rep = evaluate(task, policy, skill_root, variant=variant,
                           trials=eval_trials, seed=5000 + seed)
            if row is None:
                row = {"update": update}
            row["eval_sr"] = rep["sr"]
            row["eval_de"] = rep["de"]
            save_planner(run_dir / "last.ckpt", policy, {**meta, "update": update})
            if rep["sr"] > best[0] or (rep["sr"] == best[0]
                                       and rep["de"] < best[1]):
                best = (rep["sr"], rep["de"])
                save_planner(run_dir / "best.ckpt", policy,
                             {**meta, "update": update, "eval_sr": rep["sr"],
                              "eval_de": rep["de"]})
        if row is not None:
            log.append(row)
    if variant == "latent":
        digest_after = env.space.digest()
        if digest_after != digest_before:
            raise RuntimeError("skill-space parameters changed during planner training")
    if not (run_dir / "best.ckpt").exists():
        save_planner(run_dir / "best.ckpt", policy, {**meta, "update": updates - 1})
    save_planner(run_dir / "last.ckpt", policy, {**meta, "update": updates - 1})
    with open(run_dir / "manifest.json", "w") as f:
        json.dump({**meta, "updates": updates,
                   "geo": {k: (list(v) if isinstance(v, tuple) else v)
                           for k, v in task_geometry(env.model).items()}}, f,
                  indent=2)
    return policy


def evaluate(task, policy, skill_root, variant="latent", trials=1000,
             seed=9000, n_envs=16, record_path=None):
    """Deterministic evaluation; the report is derived from the logged
    trajectory arrays so an independent recompute reproduces it exactly."""
    env = make_planner_env(task, variant, skill_root, n_envs=n_envs,
                           seed=seed, sim_config=eval_sim_config(), record=True)
    if policy.act_dim != env.act_dim:
        raise ValueError(
            f"planner action dim {policy.act_dim} does not match the "
            f"{variant} action space ({env.act_dim})")
    rng = np.random.default_rng(seed)
    while len(env.trial_results) < trials:
        obs, goal = env.obs()
        nobs = policy.norm_obs(obs, update=False)
        act, _, _, _ = policy.act(nobs, goal, rng, deterministic=True)
        env.step(act)
    done_ids = {r["trial"] for r in env.trial_results[:trials]}
    steps = np.array([r for r in env.step_rows if r[0] in done_ids],
                     dtype=STEP_DTYPE)
    trial_rows = np.array([r for r in env.trial_rows if r[0] in done_ids],
                          dtype=TRIAL_DTYPE)
    report = report_from_records(steps, trial_rows)
    report.update({"variant": variant, "seed": seed})
    if record_path is not None:
        meta = json.dumps({"task": task, "variant": variant, "seed": seed,
                           "trials": report["trials"]})
        np.savez(record_path, steps=steps, trials=trial_rows,
                 meta=np.array(meta))
    return report


def prior_rollout_stability(skillspace_path, n_trials=100, seconds=3.0,
                            seed=7000, deterministic=False):
    """Decode latents sampled from the learned prior from a standing start;
    the fraction of trials that stay upright is the stability score."""
    space = SkillSpace(skillspace_path)
    cfg = eval_sim_config()
    n_envs = 10
    upright = 0
    done_trials = 0
    env = PlannerEnv("single-point", "latent", skillspace_path=skillspace_path,
                     n_envs=n_envs, seed=seed, sim_config=cfg,
                     episode_s=seconds)
    rng = np.random.default_rng(seed)
    while done_trials < n_trials:
        obs, _ = env.obs()
        nobs = space.norm_obs(obs)
        z = space.prior_sample(nobs, rng, deterministic=deterministic)
        _, dones, info = env.step(z)
        ids = np.flatnonzero(dones)
        for e in ids:
            done_trials += 1
            if info["fall"][e] == 0.0:
                upright += 1
    return {"trials": done_trials, "upright": upright,
            "upright_rate": upright / done_trials}
