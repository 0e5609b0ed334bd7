"""PPO with GAE over batched environments.

One RL engine shared by every training stage: primitive skills use it
directly, distillation reuses the clipped surrogate as its on-policy
loss term, and latent planners train through it with a frozen decoder.
Policies are duck-typed: anything with act / evaluate / value works, so
the distillation student can ride the same update loop.

Environments follow a small vectorized protocol: `obs()` returns the
current (observation, goal) arrays, `step(actions)` returns
(rewards, dones, info dict) and auto-resets finished episodes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import Adam, Mlp, MlpSpec, gaussian_entropy, gaussian_log_prob


class PpoError(RuntimeError):
    pass


@dataclass
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    clip_ratio: float = 0.2
    epochs: int = 5
    minibatches: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.005
    lr: float = 3e-4
    max_grad_norm: float = 1.0
    horizon: int = 24
    n_envs: int = 1024
    # value_clip bounds the per-update value change in return units; None
    # disables the clipped branch (plain MSE). Returns here reach hundreds,
    # so reusing clip_ratio for values starves the critic of gradient.
    value_clip: float | None = None
    # stop the epoch sweep once a minibatch KL estimate exceeds 1.5x this
    target_kl: float | None = None
    # floor on the state-independent log-std, applied after each step; keeps
    # exploration alive on tasks whose best easy behavior is a local optimum
    log_std_min: float | None = None
    # matching ceiling; annealed toward the floor late in training so the
    # mean, not the exploration noise, ends up carrying the behavior
    log_std_max: float | None = None

    def __post_init__(self):
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError("gamma must be in (0, 1]")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.clip_ratio <= 0.0:
            raise ValueError("clip ratio must be positive")
        if self.value_clip is not None and self.value_clip <= 0.0:
            raise ValueError("value clip must be positive when set")
        if self.target_kl is not None and self.target_kl <= 0.0:
            raise ValueError("target kl must be positive when set")
        if (self.log_std_min is not None and self.log_std_max is not None
                and self.log_std_max < self.log_std_min):
            raise ValueError("log_std_max must be >= log_std_min")


class RunningNorm:
    """Welford running mean/std; (x - mean)/max(std, 1e-6) clamped to
    +-10. Frozen once `frozen` is set (evaluation, deployment)."""

    def __init__(self, dim):
        self.count = 0.0
        self.mean = np.zeros(dim, dtype=np.float64)
        self.m2 = np.zeros(dim, dtype=np.float64)
        self.frozen = False

    @property
    def std(self):
        if self.count < 2:
            return np.ones_like(self.mean)
        return np.sqrt(self.m2 / self.count)

    def update(self, batch):
        if self.frozen:
            return
        batch = np.asarray(batch, dtype=np.float64).reshape(-1, self.mean.size)
        n = batch.shape[0]
        if n == 0:
            return
        bmean = batch.mean(axis=0)
        bvar = batch.var(axis=0)
        delta = bmean - self.mean
        tot = self.count + n
        self.mean += delta * n / tot
        self.m2 += bvar * n + delta**2 * self.count * n / tot
        self.count = tot

    def normalize(self, x):
        x = np.asarray(x, dtype=np.float64)
        if self.count < 1:
            return np.clip(x, -10.0, 10.0).astype(np.float32)
        z = (x - self.mean) / np.maximum(self.std, 1e-6)
        return np.clip(z, -10.0, 10.0).astype(np.float32)

    def state(self):
        return {
            "norm_count": np.array([self.count], dtype=np.float32),
            "norm_mean": self.mean.astype(np.float32),
            "norm_m2": self.m2.astype(np.float32),
        }

    def load_state(self, arrays, prefix=""):
        self.count = float(arrays[prefix + "norm_count"][0])
        self.mean = arrays[prefix + "norm_mean"].astype(np.float64)
        self.m2 = arrays[prefix + "norm_m2"].astype(np.float64)


class RolloutBuffer:
    def __init__(self, horizon, n_envs, obs_dim, goal_dim, act_dim):
        T, N = horizon, n_envs
        self.horizon, self.n_envs = T, N
        self.obs = np.zeros((T, N, obs_dim), dtype=np.float32)
        self.goal = np.zeros((T, N, goal_dim), dtype=np.float32)
        self.actions = np.zeros((T, N, act_dim), dtype=np.float32)
        self.logp = np.zeros((T, N), dtype=np.float32)
        self.values = np.zeros((T, N), dtype=np.float32)
        self.rewards = np.zeros((T, N), dtype=np.float32)
        self.dones = np.zeros((T, N), dtype=bool)
        self.aux = {}
        self.advantages = None
        self.returns = None
        self.term_sums = {}
        self._term_count = 0

    def add(self, t, obs, goal, action, logp, value, reward, done, info=None, aux=None):
        self.obs[t] = obs
        self.goal[t] = goal
        self.actions[t] = action
        self.logp[t] = logp
        self.values[t] = value
        self.rewards[t] = reward
        self.dones[t] = done
        if aux:
            for k, v in aux.items():
                if k not in self.aux:
                    self.aux[k] = np.zeros(
                        (self.horizon, self.n_envs) + v.shape[1:], dtype=np.float32)
                self.aux[k][t] = v
        if info:
            for k, v in info.items():
                self.term_sums[k] = self.term_sums.get(k, 0.0) + float(np.mean(v))
            self._term_count += 1

    def term_means(self):
        if self._term_count == 0:
            return {}
        return {k: v / self._term_count for k, v in self.term_sums.items()}

    def flat(self, arr):
        return arr.reshape((self.horizon * self.n_envs,) + arr.shape[2:])


def compute_gae(rewards, values, dones, last_values, gamma, lam):
    """Standard GAE recursion; episode ends cut the bootstrap to zero
    (timeouts included). Returns (advantages, returns)."""
    T, N = rewards.shape
    adv = np.zeros((T, N), dtype=np.float64)
    gae = np.zeros(N, dtype=np.float64)
    for t in range(T - 1, -1, -1):
        nonterminal = 1.0 - dones[t].astype(np.float64)
        v_next = last_values if t == T - 1 else values[t + 1]
        delta = rewards[t] + gamma * v_next * nonterminal - values[t]
        gae = delta + gamma * lam * nonterminal * gae
        adv[t] = gae
    returns = adv + values
    return adv.astype(np.float32), returns.astype(np.float32)


def collect_rollouts(policy, env, horizon, rng):
    """Roll the policy for exactly `horizon` steps in every env."""
    buf = RolloutBuffer(horizon, env.n_envs, env.obs_dim, env.goal_dim, env.act_dim)
    for t in range(horizon):
        obs, goal = env.obs()
        nobs = policy.norm_obs(obs, update=True)
        action, logp, value, aux = policy.act(nobs, goal, rng)
        rewards, dones, info = env.step(action)
        buf.add(t, nobs, goal, action, logp, value, rewards, dones, info, aux)
    obs, goal = env.obs()
    last_values = policy.value_np(policy.norm_obs(obs, update=False), goal)
    buf.advantages, buf.returns = compute_gae(
        buf.rewards, buf.values, buf.dones, last_values,
        policy.cfg.gamma, policy.cfg.lam)
    return buf


class VanillaActorCritic:
    """Diagonal-Gaussian MLP actor plus separate value MLP."""

    def __init__(self, obs_dim, goal_dim, act_dim, cfg: PpoConfig,
                 hidden=(128, 128), seed=0, init_log_std=-1.0):
        self.cfg = cfg
        self.obs_dim, self.goal_dim, self.act_dim = obs_dim, goal_dim, act_dim
        rng = np.random.default_rng(seed)
        in_dim = obs_dim + goal_dim
        self.actor = Mlp(MlpSpec(in_dim, hidden, act_dim, head="gaussian",
                                 init_log_std=init_log_std, out_gain=0.01), rng)
        self.critic = Mlp(MlpSpec(in_dim, hidden, 1, head="linear", out_gain=1.0), rng)
        self.obs_norm = RunningNorm(obs_dim)
        self.adam = Adam(self.parameters(), lr=cfg.lr)

    def parameters(self):
        params = {}
        params.update({"a." + k: v for k, v in self.actor.parameters().items()})
        params.update({"c." + k: v for k, v in self.critic.parameters().items()})
        return params

    def norm_obs(self, obs, update):
        if update:
            self.obs_norm.update(obs)
        return self.obs_norm.normalize(obs)

    def _cat(self, nobs, goal):
        x = np.concatenate(
            [nobs, np.asarray(goal, dtype=np.float32)], axis=-1)
        return Tensor(x)

    def act(self, nobs, goal, rng, deterministic=False):
        dist = self.actor(self._cat(nobs, goal))
        mean, std = dist.mean.value, dist.std.value
        if deterministic:
            action = mean.copy()
        else:
            action = mean + std * rng.standard_normal(mean.shape).astype(np.float32)
        # same code path as evaluate() so stored log-probs match bit for bit
        logp = gaussian_log_prob(dist, action).value
        value = self.value_np(nobs, goal)
        return action, logp.astype(np.float32), value, {}

    def value_np(self, nobs, goal):
        return self.critic(self._cat(nobs, goal)).value[:, 0].copy()

    def evaluate(self, nobs, goal, actions, aux):
        dist = self.actor(self._cat(nobs, goal))
        logp = gaussian_log_prob(dist, actions)
        entropy = gaussian_entropy(dist)
        return logp, entropy

    def value_t(self, nobs, goal):
        return self.critic(self._cat(nobs, goal))[..., 0]

    def state(self):
        arrays = {}
        arrays.update({"a." + k: v.value for k, v in self.actor.parameters().items()})
        arrays.update({"c." + k: v.value for k, v in self.critic.parameters().items()})
        arrays.update(self.obs_norm.state())
        return arrays

    def load_state(self, arrays):
        self.actor.load_state({k[2:]: v for k, v in arrays.items() if k.startswith("a.")})
        self.critic.load_state({k[2:]: v for k, v in arrays.items() if k.startswith("c.")})
        self.obs_norm.load_state(arrays)


def ppo_update(policy, buf, cfg: PpoConfig, rng):
    """Clipped-surrogate update over minibatched epochs.

    Advantages are normalized across the whole buffer once per update.
    A non-finite loss aborts the update, restores the pre-update
    parameters, and raises PpoError.
    """
    obs = buf.flat(buf.obs)
    goal = buf.flat(buf.goal)
    actions = buf.flat(buf.actions)
    logp_old = buf.flat(buf.logp)
    values_old = buf.flat(buf.values)
    returns = buf.flat(buf.returns)
    adv = buf.flat(buf.advantages).astype(np.float64)
    adv = ((adv - adv.mean()) / (adv.std() + 1e-8)).astype(np.float32)
    aux = {k: buf.flat(v) for k, v in buf.aux.items()}

    params = policy.parameters()
    snapshot = {k: p.value.copy() for k, p in params.items()}
    B = obs.shape[0]
    mb = B // cfg.minibatches
    stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0,
             "clip_fraction": 0.0, "approx_kl": 0.0}
    n_batches = 0

    kl_stopped = False
    for _ in range(cfg.epochs):
        order = rng.permutation(B)
        for start in range(0, mb * cfg.minibatches, mb):
            idx = order[start:start + mb]
            mb_aux = {k: v[idx] for k, v in aux.items()}
            logp, entropy = policy.evaluate(obs[idx], goal[idx], actions[idx], mb_aux)
            value = policy.value_t(obs[idx], goal[idx])

            mb_kl = float(np.mean(logp_old[idx] - logp.value))
            if cfg.target_kl is not None and mb_kl > 1.5 * cfg.target_kl:
                kl_stopped = True
                break

            ratio = ad.exp(ad.sub(logp, Tensor(logp_old[idx])))
            adv_t = Tensor(adv[idx])
            lo, hi = 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio
            surr_full = ad.mul(ratio, adv_t)
            surr_clip = ad.mul(ad.clip(ratio, lo, hi), adv_t)
            pol_loss = ad.mul(ad.tmean(ad.minimum(surr_full, surr_clip)), -1.0)

            ret_t = Tensor(returns[idx])
            v_err = ad.square(ad.sub(value, ret_t))
            if cfg.value_clip is not None:
                v_old = Tensor(values_old[idx])
                v_clipped = ad.add(v_old, ad.clip(ad.sub(value, v_old),
                                                  -cfg.value_clip, cfg.value_clip))
                v_err = ad.maximum(v_err, ad.square(ad.sub(v_clipped, ret_t)))
            v_loss = ad.mul(ad.tmean(v_err), 0.5)

            ent = ad.tmean(entropy)
            loss = ad.add(
                ad.add(pol_loss, ad.mul(v_loss, cfg.value_coef)),
                ad.mul(ent, -cfg.entropy_coef))
            if not np.isfinite(loss.value):
                for k, p in params.items():
                    p.value[...] = snapshot[k]
                raise PpoError("non-finite loss; update aborted, parameters restored")

            policy.adam.zero_grad()
            loss.backward()
            policy.adam.clip_grad_norm(cfg.max_grad_norm)
            policy.adam.step()
            if cfg.log_std_min is not None or cfg.log_std_max is not None:
                for name, p in params.items():
                    if name.endswith("log_std"):
                        if cfg.log_std_min is not None:
                            np.maximum(p.value, cfg.log_std_min, out=p.value)
                        if cfg.log_std_max is not None:
                            np.minimum(p.value, cfg.log_std_max, out=p.value)

            rv = ratio.value
            stats["policy_loss"] += float(pol_loss.value)
            stats["value_loss"] += float(v_loss.value)
            stats["entropy"] += float(ent.value)
            stats["clip_fraction"] += float(np.mean(np.abs(rv - 1.0) > cfg.clip_ratio))
            stats["approx_kl"] += mb_kl
            n_batches += 1
        if kl_stopped:
            break

    out = {k: v / max(n_batches, 1) for k, v in stats.items()}
    out["kl_stopped"] = float(kl_stopped)
    return out


class MetricsCsv:
    """Append-only CSV metrics log; header written once."""

    def __init__(self, path, fieldnames):
        self.path = Path(path)
        self.fieldnames = list(fieldnames)
        if not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(self.fieldnames)

    def append(self, row: dict):
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([row.get(k, "") for k in self.fieldnames])
