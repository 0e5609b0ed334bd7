"""Distilling the three primitive teachers into one latent-skill student.

A CVAE student (encoder, decoder, learnable state-conditioned prior) acts
with its whole body in an environment that issues simultaneous lower-body
and hand commands and switches the lower-body skill mid-episode. Distilled
supervision (teachers label the student's own states) is mixed with an
on-policy clipped-surrogate term; the mixing weight decays so training
shifts from imitation to reinforcement while keeping the supervision
signal alive throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .nets import (
    Adam,
    Mlp,
    MlpSpec,
    gaussian_entropy,
    gaussian_log_prob,
    kl_diag_gaussians,
    reparameterize,
)
from .rl import MetricsCsv, PpoConfig, PpoError, RolloutBuffer, RunningNorm, compute_gae
from .skills import (
    ARM_IDX,
    GAIT,
    LEG_IDX,
    REWARD_WEIGHTS,
    SkillEnv,
    build_obs,
    eval_sim_config,
    load_skill,
    measurements,
    reward_behavior,
    reward_command,
    reward_regularization,
    sample_goal,
    skill_fall_frac,
)
from .sim import BatchSim, SimConfig, load_robot

LATENT_DIM = 8
LOWER_SKILLS = ("loco", "body")
# goal: [onehot loco, onehot body, lower cmd (2 slots), hand cmd (3)]
HETERO_GOAL_DIM = 7
HETERO_OBS_DIM = 1 + 2 + 9 + 9 + 9 + 2  # pitch rate, gravity, q, qd, a_prev, clock


@dataclass
class MixSchedule:
    start: float = 0.95
    end: float = 0.05
    decay_updates: int = 1
    lambda3: float = 0.1
    lambda4: float = 0.005

    def __post_init__(self):
        if not 0.0 <= self.end <= self.start <= 1.0:
            raise ValueError("schedule must satisfy 0 <= end <= start <= 1")
        if self.decay_updates < 1:
            raise ValueError("decay_updates must be >= 1")

    def lambda1(self, update):
        frac = min(max(update / self.decay_updates, 0.0), 1.0)
        return self.start + (self.end - self.start) * frac


def hetero_goal_vec(is_body, lower_cmd, hand_cmd):
    """Pack indicator + commands into the student goal layout."""
    n = len(is_body)
    g = np.zeros((n, HETERO_GOAL_DIM))
    g[:, 0] = ~is_body
    g[:, 1] = is_body
    g[:, 2:4] = lower_cmd
    g[:, 4:7] = hand_cmd
    return g


def sample_switch_schedule(rng, episode_steps, margin_steps, max_switches=2):
    """Switch times for one episode: 0-2 flips at uniform times away from
    the episode edges, sorted ascending."""
    k = int(rng.integers(0, max_switches + 1))
    if k == 0 or episode_steps <= 2 * margin_steps:
        return np.empty(0, dtype=np.int64)
    t = rng.integers(margin_steps, episode_steps - margin_steps, size=k)
    return np.unique(t)


class HeteroEnv:
    """Coordination-and-transition environment for the student.

    Every episode runs one lower-body skill (switching 0-2 times) plus a
    continuous hand goal stream; rewards are the active teacher skills'
    own terms plus one shared whole-body regularization set.
    """

    def __init__(self, teachers, n_envs=16, seed=0, sim_config=None, model=None,
                 episode_s=20.0, resample_s=(3.0, 6.0), max_switches=2,
                 fixed_schedule=None, lower_skills=LOWER_SKILLS,
                 min_loco_speed=0.0):
        self.model = model or load_robot()
        cfg = sim_config or SimConfig()
        self.sim = BatchSim(self.model, cfg, n_envs=n_envs, seed=seed)
        self.teachers = teachers
        self.n_envs = n_envs
        self.obs_dim = HETERO_OBS_DIM
        self.goal_dim = HETERO_GOAL_DIM
        self.act_dim = 9
        self.dt = cfg.control_dt
        self.episode_steps = int(round(episode_s / self.dt))
        lo = int(round(resample_s[0] / self.dt))
        hi = int(round(resample_s[1] / self.dt))
        self.resample_range = (lo, max(hi, lo + 1))
        self.max_switches = max_switches
        self.fixed_schedule = fixed_schedule
        self.lower_skills = lower_skills
        self.min_loco_speed = min_loco_speed
        self.noise = dict(cfg.obs_noise)
        self.noisy = any(v > 0 for v in self.noise.values())
        self.scale = np.maximum(self.model.q_hi - self.model.q0,
                                self.model.q0 - self.model.q_lo)
        self.fall_floors = {s: skill_fall_frac(s) * self.model.nominal_base_height
                            for s in LOWER_SKILLS}
        self.rng = np.random.default_rng([seed, 613])
        n = n_envs
        self.is_body = np.zeros(n, dtype=bool)
        self.lower_cmd = np.zeros((n, 2))
        self.hand_cmd = np.zeros((n, 3))
        self.phase = np.zeros(n)
        self.a_prev = np.zeros((n, 9), dtype=np.float32)
        self.a_prev2 = np.zeros((n, 9), dtype=np.float32)
        self.t_in_ep = np.zeros(n, dtype=np.int64)
        self.next_lower = np.zeros(n, dtype=np.int64)
        self.next_hand = np.zeros(n, dtype=np.int64)
        self.switch_times = [np.empty(0, dtype=np.int64)] * n
        self.episodes = 0
        self.falls = 0
        self.switch_count = 0
        self.switch_falls = 0
        self._had_switch = np.zeros(n, dtype=bool)
        self.finished_returns = []
        self.finished_lengths = []
        self.ep_return = np.zeros(n)
        self.ep_len = np.zeros(n, dtype=np.int64)
        self.sim.reset()
        self._reset_bookkeeping(np.arange(n))

    def _sample_lower(self, ids):
        for e in ids:
            skill = "body" if self.is_body[e] else "loco"
            cmd = sample_goal(skill, self.rng, 1, self.model)[0]
            if skill == "loco" and abs(cmd[0]) < self.min_loco_speed:
                cmd[0] = self.min_loco_speed if cmd[0] >= 0 else -self.min_loco_speed
            self.lower_cmd[e] = 0.0
            self.lower_cmd[e, : len(cmd)] = cmd

    def _reset_bookkeeping(self, ids):
        if len(self.lower_skills) == 1:
            self.is_body[ids] = self.lower_skills[0] == "body"
        else:
            self.is_body[ids] = self.rng.random(len(ids)) < 0.5
        self._sample_lower(ids)
        self.hand_cmd[ids] = sample_goal("hand", self.rng, len(ids), self.model)
        self.phase[ids] = self.rng.uniform(0.0, 1.0, size=len(ids))
        self.a_prev[ids] = 0.0
        self.a_prev2[ids] = 0.0
        self.t_in_ep[ids] = 0
        self.ep_return[ids] = 0.0
        self.ep_len[ids] = 0
        self._had_switch[ids] = False
        self.next_lower[ids] = self.rng.integers(*self.resample_range, size=len(ids))
        self.next_hand[ids] = self.rng.integers(*self.resample_range, size=len(ids))
        margin = int(round(2.0 / self.dt))
        for e in ids:
            if self.fixed_schedule is not None:
                self.switch_times[e] = np.asarray(self.fixed_schedule, dtype=np.int64)
            else:
                self.switch_times[e] = sample_switch_schedule(
                    self.rng, self.episode_steps, margin, self.max_switches)

    def goal(self):
        return hetero_goal_vec(self.is_body, self.lower_cmd, self.hand_cmd)

    def _standing(self):
        return (~self.is_body) & (np.abs(self.lower_cmd[:, 0]) < 0.1)

    def obs(self):
        meas = measurements(self.sim)
        rng = self.rng if self.noisy else None
        q = meas["q"]
        qd = meas["qd"]
        grav = meas["gravity"]
        pr = meas["pitch_rate"][:, None]
        if rng is not None:
            pr = pr + rng.standard_normal(pr.shape) * self.noise["ang_vel"]
            grav = grav + rng.standard_normal(grav.shape) * self.noise["gravity"]
            q = q + rng.standard_normal(q.shape) * self.noise["q"]
            qd = qd + rng.standard_normal(qd.shape) * self.noise["qd"]
        ang = 2.0 * np.pi * self.phase
        clock = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
        full = np.concatenate([pr, grav, q, qd, self.a_prev], axis=-1)
        return (np.concatenate([full, clock], axis=-1).astype(np.float32),
                self.goal().astype(np.float32))

    def teacher_actions(self):
        """Noise-free teacher labels at the current state: the active
        lower-body teacher drives the legs, the hand teacher the arm."""
        meas = measurements(self.sim)
        rng = np.random.default_rng(0)
        a_star = np.zeros((self.n_envs, 9), dtype=np.float32)
        for skill, mask in (("loco", ~self.is_body), ("body", self.is_body)):
            ids = np.flatnonzero(mask)
            if ids.size == 0:
                continue
            pol = self.teachers[skill]
            sub = {k: v[ids] for k, v in meas.items()}
            obs = build_obs(skill, sub, self.a_prev[ids], self.phase[ids])
            goal = self.lower_cmd[ids, :1] if skill == "loco" else self.lower_cmd[ids]
            a, _, _, _ = pol.act(pol.norm_obs(obs, update=False),
                                 goal.astype(np.float32), rng, deterministic=True)
            a_star[np.ix_(ids, LEG_IDX)] = a
        pol = self.teachers["hand"]
        obs = build_obs("hand", meas, self.a_prev, self.phase)
        a, _, _, _ = pol.act(pol.norm_obs(obs, update=False),
                             self.hand_cmd.astype(np.float32), rng, deterministic=True)
        a_star[:, ARM_IDX] = a
        return a_star

    def step(self, actions):
        actions = np.clip(np.asarray(actions, dtype=np.float32), -1.0, 1.0)
        targets = self.model.q0[None, :] + actions * self.scale[None, :]
        self.sim.step(targets)

        standing = self._standing() | self.is_body  # body skill: no gait cycle
        self.phase = np.where(standing, self.phase,
                              (self.phase + self.dt / GAIT.period) % 1.0)
        C = GAIT.contacts(self.phase)
        C[standing] = 1.0

        meas = measurements(self.sim)
        meas["action"] = actions.astype(np.float64)
        meas["a_prev"] = self.a_prev.astype(np.float64)
        meas["a_prev2"] = self.a_prev2.astype(np.float64)

        goal_loco = self.lower_cmd[:, :1]
        goal_body = self.lower_cmd
        t_loco = {**reward_command("loco", goal_loco, meas),
                  **reward_behavior("loco", goal_loco, meas, C)}
        t_body = {**reward_command("body", goal_body, meas),
                  **reward_behavior("body", goal_body, meas)}
        t_hand = reward_command("hand", self.hand_cmd, meas)
        t_reg = reward_regularization(np.arange(9), meas, self.model.q0)

        lower_loco = sum(REWARD_WEIGHTS["loco"][k] * t_loco[k]
                         for k in ("lin_vel", "ang_vel", "gait_vel", "gait_force"))
        lower_body = sum(REWARD_WEIGHTS["body"][k] * t_body[k]
                         for k in ("height", "pitch_track", "pitch_dev",
                                   "leg_symmetry", "torque_symmetry",
                                   "contact_ground"))
        reg = sum(REWARD_WEIGHTS["loco"][k] * t_reg[k]
                  for k in ("action_acc", "action_rate", "collision",
                            "default_joint"))
        lower = np.where(self.is_body, lower_body, lower_loco)
        reward = lower + t_hand["ee_pose"] + reg

        self.a_prev2 = self.a_prev
        self.a_prev = actions
        self.t_in_ep += 1
        self.ep_return += reward
        self.ep_len += 1

        # scheduled lower-skill transitions flip the indicator
        switching = np.zeros(self.n_envs, dtype=bool)
        for e in range(self.n_envs):
            st = self.switch_times[e]
            if st.size and self.t_in_ep[e] >= st[0]:
                self.switch_times[e] = st[1:]
                switching[e] = True
        sids = np.flatnonzero(switching)
        if sids.size:
            self.is_body[sids] = ~self.is_body[sids]
            self._sample_lower(sids)
            self.switch_count += sids.size
            self._had_switch[sids] = True

        floors = np.where(self.is_body, self.fall_floors["body"],
                          self.fall_floors["loco"])
        fell = (meas["base_height"] < floors) | (meas["collisions"] > 0)
        diverged = self.sim.diverged >= 0
        timeout = self.t_in_ep >= self.episode_steps
        dones = fell | timeout | diverged
        ids = np.flatnonzero(dones)
        if ids.size:
            self.episodes += ids.size
            bad = fell[ids] | diverged[ids]
            self.falls += int(np.count_nonzero(bad))
            self.switch_falls += int(np.count_nonzero(bad & self._had_switch[ids]))
            self.finished_returns += list(self.ep_return[ids])
            self.finished_lengths += list(self.ep_len[ids])
            del self.finished_returns[:-200]
            del self.finished_lengths[:-200]
            self.sim.reset(ids)
            self._reset_bookkeeping(ids)

        live = ~dones
        for name, arr in (("next_lower", self.next_lower),
                          ("next_hand", self.next_hand)):
            due = live & (self.t_in_ep >= arr)
            rids = np.flatnonzero(due)
            if rids.size:
                if name == "next_lower":
                    self._sample_lower(rids)
                else:
                    self.hand_cmd[rids] = sample_goal("hand", self.rng, len(rids),
                                                      self.model)
                arr[rids] = self.t_in_ep[rids] + self.rng.integers(
                    *self.resample_range, size=len(rids))

        info = {"reward_lower": lower, "reward_hand": t_hand["ee_pose"],
                "reward_reg": reg, "fall": fell.astype(np.float64),
                "ee_pose": t_hand["ee_pose"], "lin_vel": t_loco["lin_vel"],
                "height": t_body["height"]}
        return reward.astype(np.float32), dones, info


def build_hetero_env(teacher_dir, n_envs=16, seed=0, **kw):
    """Load the three frozen teachers from `<teacher_dir>/<skill>/best.ckpt`
    and wrap them in the coordination environment."""
    teacher_dir = Path(teacher_dir)
    teachers = {}
    for skill in ("loco", "body", "hand"):
        path = teacher_dir / skill / "best.ckpt"
        if not path.exists():
            raise FileNotFoundError(
                f"missing teacher checkpoint for {skill!r}: expected {path}")
        teachers[skill], _ = load_skill(path)
    return HeteroEnv(teachers, n_envs=n_envs, seed=seed, **kw)


class CvaeStudent:
    """Encoder/decoder/prior triple exposed with the policy protocol used
    by the rollout collector; the decoder is the action distribution."""

    def __init__(self, obs_dim=HETERO_OBS_DIM, goal_dim=HETERO_GOAL_DIM,
                 act_dim=9, latent_dim=LATENT_DIM, cfg: PpoConfig = None,
                 hidden=(128, 128), seed=0, dtype=np.float32):
        self.cfg = cfg or PpoConfig()
        self.obs_dim, self.goal_dim = obs_dim, goal_dim
        self.act_dim, self.latent_dim = act_dim, latent_dim
        self.hidden = tuple(hidden)
        rng = np.random.default_rng(seed)
        self.encoder = Mlp(MlpSpec(obs_dim + goal_dim, hidden, latent_dim,
                                   head="gaussian_statedep", out_gain=0.01), rng,
                           dtype=dtype)
        self.decoder = Mlp(MlpSpec(obs_dim + latent_dim, hidden, act_dim,
                                   head="gaussian", init_log_std=-1.0,
                                   out_gain=0.01), rng, dtype=dtype)
        self.prior = Mlp(MlpSpec(obs_dim, hidden, latent_dim,
                                 head="gaussian_statedep", out_gain=0.01), rng,
                         dtype=dtype)
        self.critic = Mlp(MlpSpec(obs_dim + goal_dim, hidden, 1, head="linear",
                                  out_gain=1.0), rng, dtype=dtype)
        self.obs_norm = RunningNorm(obs_dim)
        self.adam = Adam(self.parameters(), lr=self.cfg.lr)

    def parameters(self):
        out = {}
        for tag, net in (("e", self.encoder), ("d", self.decoder),
                         ("p", self.prior), ("c", self.critic)):
            out.update({f"{tag}.{k}": v for k, v in net.parameters().items()})
        return out

    def norm_obs(self, obs, update):
        if update:
            self.obs_norm.update(obs)
        return self.obs_norm.normalize(obs)

    def encode(self, nobs, goal):
        x = np.concatenate([nobs, np.asarray(goal, dtype=np.float32)], axis=-1)
        return self.encoder(Tensor(x))

    def decode(self, nobs, z):
        if isinstance(z, Tensor):
            x = ad.concat([Tensor(np.asarray(nobs, dtype=np.float32)), z], axis=-1)
        else:
            x = Tensor(np.concatenate(
                [nobs, np.asarray(z, dtype=np.float32)], axis=-1))
        return self.decoder(x)

    def prior_dist(self, nobs):
        return self.prior(Tensor(np.asarray(nobs, dtype=np.float32)))

    def _policy_dist(self, nobs, goal, eps_z, deterministic=False):
        enc = self.encode(nobs, goal)
        z = enc.mean if deterministic else reparameterize(enc, eps_z)
        return enc, z, self.decode(nobs, z)

    def act(self, nobs, goal, rng, deterministic=False):
        n = nobs.shape[0]
        eps_z = rng.standard_normal((n, self.latent_dim)).astype(np.float32)
        enc, z, dist = self._policy_dist(nobs, goal, eps_z, deterministic)
        mean, std = dist.mean.value, dist.std.value
        if deterministic:
            action = mean.copy()
        else:
            action = mean + std * rng.standard_normal(mean.shape).astype(np.float32)
        logp = gaussian_log_prob(dist, action).value
        value = self.value_np(nobs, goal)
        return action, logp.astype(np.float32), value, {"eps_z": eps_z}

    def evaluate(self, nobs, goal, actions, aux):
        _, _, dist = self._policy_dist(nobs, goal, aux["eps_z"])
        return gaussian_log_prob(dist, actions), gaussian_entropy(dist)

    def value_np(self, nobs, goal):
        x = np.concatenate([nobs, np.asarray(goal, dtype=np.float32)], axis=-1)
        return self.critic(Tensor(x)).value[:, 0].copy()

    def value_t(self, nobs, goal):
        x = np.concatenate([nobs, np.asarray(goal, dtype=np.float32)], axis=-1)
        return self.critic(Tensor(x))[..., 0]

    def state(self):
        arrays = {}
        for tag, net in (("e", self.encoder), ("d", self.decoder),
                         ("p", self.prior), ("c", self.critic)):
            arrays.update(net.state(prefix=f"{tag}."))
        arrays.update(self.obs_norm.state())
        return arrays

    def load_state(self, arrays):
        for tag, net in (("e", self.encoder), ("d", self.decoder),
                         ("p", self.prior), ("c", self.critic)):
            net.load_state(arrays, prefix=f"{tag}.")
        self.obs_norm.load_state(arrays)


def dagger_loss(student_mean: Tensor, a_star) -> Tensor:
    """Mean squared error between the student's decoder mean and the
    concatenated teacher action."""
    diff = ad.sub(student_mean, Tensor(np.asarray(a_star, dtype=student_mean.dtype)))
    return ad.tmean(ad.square(diff))


def regu_loss(mu_t: Tensor, mu_next: Tensor, valid_mask) -> Tensor:
    """Temporal-consistency penalty: mean L2 distance between consecutive
    encoder means, masked to pairs inside one episode."""
    m = np.asarray(valid_mask, dtype=mu_t.dtype)
    d2 = ad.tsum(ad.square(ad.sub(mu_next, mu_t)), axis=-1)
    norms = ad.sqrt(ad.add(d2, 1e-12))
    total = ad.tsum(ad.mul(norms, Tensor(m)))
    return ad.mul(total, 1.0 / max(float(m.sum()), 1.0))


def kl_loss(enc_dist, prior_dist) -> Tensor:
    return ad.tmean(kl_diag_gaussians(enc_dist, prior_dist))


def composite_losses(student, batch, cfg: PpoConfig, lam1, lam3, lam4):
    """All distillation loss terms plus their weighted total, as graph
    tensors. `batch` holds obs, goal, actions, logp_old, values_old,
    returns, adv, eps_z, a_star, obs_next, goal_next, pair_ok."""
    lam2 = 1.0 - lam1
    enc, z, dist = student._policy_dist(batch["obs"], batch["goal"],
                                        batch["eps_z"])
    logp = gaussian_log_prob(dist, batch["actions"])
    entropy = ad.tmean(gaussian_entropy(dist))
    value = student.value_t(batch["obs"], batch["goal"])

    ratio = ad.exp(ad.sub(logp, Tensor(batch["logp_old"])))
    adv_t = Tensor(batch["adv"])
    lo, hi = 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio
    pol_loss = ad.mul(ad.tmean(ad.minimum(
        ad.mul(ratio, adv_t), ad.mul(ad.clip(ratio, lo, hi), adv_t))), -1.0)
    v_err = ad.square(ad.sub(value, Tensor(batch["returns"])))
    if cfg.value_clip is not None:
        v_old = Tensor(batch["values_old"])
        v_clipped = ad.add(v_old, ad.clip(ad.sub(value, v_old),
                                          -cfg.value_clip, cfg.value_clip))
        v_err = ad.maximum(v_err, ad.square(ad.sub(v_clipped, Tensor(batch["returns"]))))
    v_loss = ad.mul(ad.tmean(v_err), 0.5)
    ppo = ad.add(ad.add(pol_loss, ad.mul(v_loss, cfg.value_coef)),
                 ad.mul(entropy, -cfg.entropy_coef))

    l_dagger = dagger_loss(dist.mean, batch["a_star"])

    enc_next = student.encode(batch["obs_next"], batch["goal_next"])
    l_regu = regu_loss(enc.mean, enc_next.mean, batch["pair_ok"])

    l_kl = kl_loss(enc, student.prior_dist(batch["obs"]))

    total = ad.add(
        ad.add(ad.mul(l_dagger, lam1), ad.mul(ppo, lam2)),
        ad.add(ad.mul(l_regu, lam3), ad.mul(l_kl, lam4)))
    return {"dagger": l_dagger, "ppo": ppo, "ppo_policy": pol_loss,
            "ppo_value": v_loss, "entropy": entropy, "regu": l_regu,
            "kl": l_kl, "total": total, "ratio": ratio, "logp": logp}


def collect_hetero(student, env, horizon, rng):
    """Rollout collector that also stores teacher labels and the latent
    reparameterization noise needed for the surrogate ratio identity."""
    buf = RolloutBuffer(horizon, env.n_envs, env.obs_dim, env.goal_dim, env.act_dim)
    for t in range(horizon):
        obs, goal = env.obs()
        nobs = student.norm_obs(obs, update=True)
        a_star = env.teacher_actions()
        action, logp, value, aux = student.act(nobs, goal, rng)
        aux["a_star"] = a_star
        rewards, dones, info = env.step(action)
        buf.add(t, nobs, goal, action, logp, value, rewards, dones, info, aux)
    obs, goal = env.obs()
    last_values = student.value_np(student.norm_obs(obs, update=False), goal)
    buf.advantages, buf.returns = compute_gae(
        buf.rewards, buf.values, buf.dones, last_values,
        student.cfg.gamma, student.cfg.lam)
    return buf


def mixed_update(student, buf, cfg: PpoConfig, schedule: MixSchedule, update, rng):
    """One distillation update: lam1*DAgger + lam2*PPO + lam3*Regu + lam4*KL
    over minibatched epochs. Non-finite loss restores parameters and raises."""
    lam1 = schedule.lambda1(update)
    lam2 = 1.0 - lam1
    T, N = buf.horizon, buf.n_envs
    obs = buf.flat(buf.obs)
    goal = buf.flat(buf.goal)
    actions = buf.flat(buf.actions)
    logp_old = buf.flat(buf.logp)
    values_old = buf.flat(buf.values)
    returns = buf.flat(buf.returns)
    adv = buf.flat(buf.advantages).astype(np.float64)
    adv = ((adv - adv.mean()) / (adv.std() + 1e-8)).astype(np.float32)
    eps_z = buf.flat(buf.aux["eps_z"])
    a_star = buf.flat(buf.aux["a_star"])
    # flat index i = t*N + e; the in-episode successor is i + N
    has_next = np.zeros(T * N, dtype=bool)
    has_next[: (T - 1) * N] = buf.dones[: T - 1].reshape(-1) < 0.5

    params = student.parameters()
    snapshot = {k: p.value.copy() for k, p in params.items()}
    B = T * N
    mb = B // cfg.minibatches
    stats = {"dagger": 0.0, "ppo": 0.0, "ppo_policy": 0.0, "ppo_value": 0.0,
             "entropy": 0.0, "regu": 0.0, "kl": 0.0, "total": 0.0,
             "clip_fraction": 0.0, "approx_kl": 0.0}
    n_batches = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(B)
        for start in range(0, mb * cfg.minibatches, mb):
            idx = order[start:start + mb]
            ok = has_next[idx]
            safe_nxt = np.where(ok, idx + N, idx)
            batch = {"obs": obs[idx], "goal": goal[idx],
                     "actions": actions[idx], "logp_old": logp_old[idx],
                     "values_old": values_old[idx], "returns": returns[idx],
                     "adv": adv[idx], "eps_z": eps_z[idx],
                     "a_star": a_star[idx], "obs_next": obs[safe_nxt],
                     "goal_next": goal[safe_nxt], "pair_ok": ok}
            losses = composite_losses(student, batch, cfg, lam1,
                                      schedule.lambda3, schedule.lambda4)
            loss = losses["total"]
            if not np.isfinite(loss.value):
                for k, p in params.items():
                    p.value[...] = snapshot[k]
                raise PpoError("non-finite distillation loss; parameters restored")

            student.adam.zero_grad()
            loss.backward()
            student.adam.clip_grad_norm(cfg.max_grad_norm)
            student.adam.step()

            rv = losses["ratio"].value
            for key in ("dagger", "ppo", "ppo_policy", "ppo_value", "entropy",
                        "regu", "kl", "total"):
                stats[key] += float(losses[key].value)
            stats["clip_fraction"] += float(np.mean(np.abs(rv - 1.0) > cfg.clip_ratio))
            stats["approx_kl"] += float(np.mean(logp_old[idx] - losses["logp"].value))
            n_batches += 1
    out = {k: v / max(n_batches, 1) for k, v in stats.items()}
    out["lambda1"] = lam1
    return out


def skillspace_manifest(student):
    return {
        "schema_version": 1,
        "latent_dim": student.latent_dim,
        "obs_dim": student.obs_dim,
        "goal_dim": student.goal_dim,
        "act_dim": student.act_dim,
        "hidden": list(student.hidden),
        "obs_layout": "pitch_rate, gravity[2], q[9], qd[9], a_prev[9], gait_clock[2]",
        "goal_layout": "skill_onehot[2], lower_cmd[2], hand_cmd[3]",
    }


def save_ensemble(path, student, extra_meta=None):
    meta = {"kind": "ensemble", **skillspace_manifest(student)}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, student.state(), meta)


def save_skillspace(path, student, extra_meta=None):
    """Decoder + prior + normalization only: the frozen artifact the
    planner and teleop stages consume."""
    arrays = {}
    arrays.update(student.decoder.state(prefix="d."))
    arrays.update(student.prior.state(prefix="p."))
    arrays.update(student.obs_norm.state())
    meta = {"kind": "skillspace", **skillspace_manifest(student)}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, arrays, meta)


class SkillSpace:
    """Frozen decoder/prior bundle loaded from skillspace.ckpt."""

    def __init__(self, path):
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "skillspace":
            raise ValueError(f"not a skill-space checkpoint: {path}")
        self.meta = meta
        self.latent_dim = meta["latent_dim"]
        self.obs_dim = meta["obs_dim"]
        self.act_dim = meta["act_dim"]
        hidden = tuple(meta.get("hidden", (128, 128)))
        rng = np.random.default_rng(0)
        self.decoder = Mlp(MlpSpec(self.obs_dim + self.latent_dim, hidden,
                                   self.act_dim, head="gaussian",
                                   init_log_std=-1.0, out_gain=0.01), rng)
        self.prior = Mlp(MlpSpec(self.obs_dim, hidden, self.latent_dim,
                                 head="gaussian_statedep", out_gain=0.01), rng)
        self.decoder.load_state(arrays, prefix="d.")
        self.prior.load_state(arrays, prefix="p.")
        self.obs_norm = RunningNorm(self.obs_dim)
        self.obs_norm.load_state(arrays)
        self.obs_norm.frozen = True

    def norm_obs(self, obs):
        return self.obs_norm.normalize(obs)

    def decode_mean(self, nobs, z):
        x = Tensor(np.concatenate(
            [nobs, np.asarray(z, dtype=np.float32)], axis=-1))
        return self.decoder(x).mean.value

    def prior_sample(self, nobs, rng, deterministic=False):
        dist = self.prior(Tensor(np.asarray(nobs, dtype=np.float32)))
        if deterministic:
            return dist.mean.value.copy()
        eps = rng.standard_normal(dist.mean.value.shape).astype(np.float32)
        return dist.mean.value + dist.std.value * eps

    def digest(self):
        import hashlib
        h = hashlib.sha256()
        arrays = {**self.decoder.state(prefix="d."), **self.prior.state(prefix="p.")}
        for k in sorted(arrays):
            h.update(k.encode())
            h.update(np.ascontiguousarray(arrays[k]).tobytes())
        return h.hexdigest()


def train_ensemble(teacher_dir, run_dir, updates=4000, n_envs=16, seed=0,
                   lr=3e-4, mode="full", log_every=25, eval_every=1000,
                   latent_dim=LATENT_DIM):
    """Distill the teachers into the latent-skill student.

    mode: full (mixed objectives), il_only (pure distillation), rl_only
    (no teacher supervision), seq (distill first 50%, then pure RL) —
    the training-pipeline ablation toggles.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = PpoConfig(n_envs=n_envs, horizon=24, lr=lr, entropy_coef=0.0)
    env = build_hetero_env(teacher_dir, n_envs=n_envs, seed=seed)
    student = CvaeStudent(cfg=cfg, seed=seed, latent_dim=latent_dim)
    schedule = MixSchedule(decay_updates=max(int(0.6 * updates), 1))
    rng = np.random.default_rng([seed, 17])
    log = MetricsCsv(run_dir / "metrics.csv",
                     ["update", "steps", "reward", "ep_return", "ep_len", "falls",
                      "episodes", "lambda1", "dagger", "ppo", "ppo_policy",
                      "ppo_value", "entropy", "regu", "kl", "total",
                      "clip_fraction", "approx_kl", "ee_pose", "lin_vel",
                      "height"])
    for update in range(updates):
        buf = collect_hetero(student, env, cfg.horizon, rng)
        if mode == "il_only":
            lam_update = 0  # schedule start: essentially pure imitation
            sched = MixSchedule(start=1.0, end=1.0, decay_updates=1,
                                lambda3=schedule.lambda3, lambda4=schedule.lambda4)
        elif mode == "rl_only":
            sched = MixSchedule(start=0.0, end=0.0, decay_updates=1,
                                lambda3=schedule.lambda3, lambda4=schedule.lambda4)
            lam_update = update
        elif mode == "seq":
            half = updates // 2
            if update < half:
                sched = MixSchedule(start=1.0, end=1.0, decay_updates=1,
                                    lambda3=schedule.lambda3,
                                    lambda4=schedule.lambda4)
            else:
                sched = MixSchedule(start=0.0, end=0.0, decay_updates=1,
                                    lambda3=schedule.lambda3,
                                    lambda4=schedule.lambda4)
            lam_update = update
        else:
            sched = schedule
            lam_update = update
        try:
            stats = mixed_update(student, buf, cfg, sched, lam_update, rng)
        except PpoError:
            save_ensemble(run_dir / "abort.ckpt", student,
                          {"update": update, "aborted": True})
            break
        if update % log_every == 0 or update == updates - 1:
            row = {"update": update, "steps": (update + 1) * cfg.horizon * n_envs,
                   "reward": float(buf.rewards.mean()),
                   "ep_return": float(np.mean(env.finished_returns[-100:] or [0.0])),
                   "ep_len": float(np.mean(env.finished_lengths[-100:] or [0.0])),
                   "falls": env.falls, "episodes": env.episodes, **stats,
                   **{k: buf.term_means().get(k, 0.0)
                      for k in ("ee_pose", "lin_vel", "height")}}
            log.append(row)
        if (update + 1) % eval_every == 0 or update == updates - 1:
            save_ensemble(run_dir / "ensemble.ckpt", student, {"update": update})
            save_skillspace(run_dir / "skillspace.ckpt", student,
                            {"update": update, "mode": mode})
    save_ensemble(run_dir / "ensemble.ckpt", student, {"update": updates - 1})
    save_skillspace(run_dir / "skillspace.ckpt", student,
                    {"update": updates - 1, "mode": mode})
    return student


def load_ensemble(path, cfg=None):
    arrays, meta = load_checkpoint(path)
    student = CvaeStudent(meta["obs_dim"], meta["goal_dim"], meta["act_dim"],
                          meta["latent_dim"], cfg=cfg,
                          hidden=tuple(meta.get("hidden", (128, 128))))
    student.load_state(arrays)
    student.obs_norm.frozen = True
    return student, meta


def evaluate_transitions(student, teacher_dir, n_switches=200, seed=2000,
                         episode_s=10.0):
    """Scheduled loco<->body switches under nominal dynamics; an episode
    counts as a transition failure if the robot falls after its switch."""
    cfg = eval_sim_config()
    env = build_hetero_env(teacher_dir, n_envs=10, seed=seed,
                           sim_config=cfg, episode_s=episode_s,
                           fixed_schedule=[int(round(0.5 * episode_s / cfg.control_dt))])
    rng = np.random.default_rng(seed)
    episodes = 0
    falls = 0
    while episodes < n_switches:
        obs, goal = env.obs()
        nobs = student.norm_obs(obs, update=False)
        a, _, _, _ = student.act(nobs, goal, rng, deterministic=True)
        _, dones, info = env.step(a)
        ids = np.flatnonzero(dones)
        for e in ids:
            episodes += 1
            if info["fall"][e] > 0:
                falls += 1
    return {"switches": episodes, "falls": falls, "fall_rate": falls / episodes}


def evaluate_coordination(student, teacher_dir, n_episodes=50, seed=2100):
    """Hand tracking error while walking (student, simultaneous goals)
    vs the isolated hand teacher standing still."""
    env = build_hetero_env(teacher_dir, n_envs=10, seed=seed,
                           sim_config=eval_sim_config(), episode_s=6.0,
                           max_switches=0, lower_skills=("loco",),
                           min_loco_speed=0.3)
    rng = np.random.default_rng(seed)
    err_sum, err_n, episodes = 0.0, 0, 0
    settle = int(round(1.5 / env.dt))
    while episodes < n_episodes:
        obs, goal = env.obs()
        nobs = student.norm_obs(obs, update=False)
        a, _, _, _ = student.act(nobs, goal, rng, deterministic=True)
        hand_goal = env.hand_cmd.copy()
        _, dones, _ = env.step(a)
        meas = measurements(env.sim)
        ok = (env.t_in_ep > settle) & ~dones
        e = np.linalg.norm(hand_goal[:, :2] - meas["hand_pose"][:, :2], axis=-1)
        err_sum += float(np.sum(e[ok]))
        err_n += int(np.count_nonzero(ok))
        episodes += int(np.count_nonzero(dones))
    return {"hand_err": err_sum / max(err_n, 1), "episodes": episodes}
