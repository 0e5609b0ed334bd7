"""Live teleoperation loop: one thread owns the simulator and the
ensembled policy, stepping at the control rate and publishing state
frames at the frame rate. Transport sessions talk to it only through two
queues (commands in, serialized frames out), so the loop never blocks on
the network and absent clients leave the robot standing."""

from __future__ import annotations

import queue
import threading
import time

import numpy as np

from ..ensemble import hetero_goal_vec
from ..skills import (
    GAIT,
    eval_sim_config,
    measurements,
    reward_command,
    skill_fall_frac,
)
from ..sim import BatchSim, load_robot
from .transport import RATES, Command, Frame, build_manifest, clamp_command


class TeleopLoop:
    def __init__(self, student, model=None, sim_config=None, seed=0,
                 realtime=True):
        self.model = model or load_robot()
        self.manifest = build_manifest(self.model)
        cfg = sim_config or eval_sim_config()
        self.sim = BatchSim(self.model, cfg, n_envs=1, seed=seed)
        self.student = student
        self.dt = cfg.control_dt
        self.realtime = realtime
        self.scale = np.maximum(self.model.q_hi - self.model.q0,
                                self.model.q0 - self.model.q_lo)
        self.fall_floor = skill_fall_frac("body") * self.model.nominal_base_height
        self.cmd_q = queue.Queue()
        self._sink = None
        self._sink_lock = threading.Lock()
        self.command = clamp_command(Command(), self.manifest)
        self.last_cmd_time = None
        self.tick = 0
        self.t_sim = 0.0
        self.falls = 0
        self.steps = 0
        self.latency_ms = 0.0
        self.phase = np.zeros(1)
        self.a_prev = np.zeros((1, 9), dtype=np.float32)
        self._stop = threading.Event()
        self.thread = threading.Thread(target=self._run, daemon=True)

    # ---- session side -------------------------------------------------

    def submit(self, cmd: Command):
        self.cmd_q.put(cmd)

    def attach_sink(self, sink):
        """One client at a time; returns False if a session is active."""
        with self._sink_lock:
            if self._sink is not None:
                return False
            self._sink = sink
            return True

    def detach_sink(self):
        with self._sink_lock:
            self._sink = None

    # ---- loop side ----------------------------------------------------

    def start(self):
        if self.thread.is_alive():
            return
        self._stop.clear()
        self.thread = threading.Thread(target=self._run, daemon=True)
        self.thread.start()

    def stop(self):
        self._stop.set()
        if self.thread.is_alive():
            self.thread.join(timeout=2.0)

    def _goal(self):
        c = self.command
        is_body = np.array([c["skill"] == "body"])
        lower = np.array([[c["v"], 0.0] if c["skill"] == "loco"
                          else [c["h"], c["b"]]])
        hand = np.array([c["hand"]])
        g = hetero_goal_vec(is_body, lower, hand)
        return g.astype(np.float32), is_body, lower, hand

    def _obs(self, meas):
        ang = 2.0 * np.pi * self.phase
        clock = np.stack([np.sin(ang), np.cos(ang)], axis=-1)
        return np.concatenate([
            meas["pitch_rate"][:, None], meas["gravity"], meas["q"],
            meas["qd"], self.a_prev, clock], axis=-1).astype(np.float32)

    def _control_step(self, rng):
        while True:  # latest queued command wins, applied this step
            try:
                cmd = self.cmd_q.get_nowait()
            except queue.Empty:
                break
            self.command = clamp_command(cmd, self.manifest)
            self.last_cmd_time = time.monotonic()

        meas = measurements(self.sim)
        goal, is_body, lower, hand = self._goal()
        t0 = time.perf_counter()
        nobs = self.student.norm_obs(self._obs(meas), update=False)
        act, _, _, _ = self.student.act(nobs, goal, rng, deterministic=True)
        ms = (time.perf_counter() - t0) * 1e3
        self.latency_ms = ms if self.steps == 0 else \
            0.9 * self.latency_ms + 0.1 * ms
        act = np.clip(act, -1.0, 1.0)
        targets = self.model.q0[None, :] + act * self.scale[None, :]
        self.sim.step(targets)

        standing = is_body[0] or abs(lower[0, 0]) < 0.1
        if not standing:
            self.phase = (self.phase + self.dt / GAIT.period) % 1.0
        self.a_prev = act.astype(np.float32)
        self.t_sim += self.dt
        self.steps += 1

        meas = measurements(self.sim)
        if meas["base_height"][0] < self.fall_floor or self.sim.diverged[0] >= 0:
            self.falls += 1
            self.sim.reset(np.array([0]))
            self.phase[:] = 0.0
            self.a_prev[:] = 0.0
        return meas, is_body, lower, hand

    def _frame(self, meas, is_body, lower, hand):
        skill = "body" if is_body[0] else "loco"
        terms = reward_command(
            skill, lower[:, :1] if skill == "loco" else lower, meas)
        terms.update(reward_command("hand", hand, meas))
        hand_err = float(np.linalg.norm(hand[0, :2] - meas["hand_pose"][0, :2]))
        age = None if self.last_cmd_time is None \
            else time.monotonic() - self.last_cmd_time
        frame = Frame(
            tick=self.tick, t=round(self.t_sim, 4),
            state={
                "base": [float(x) for x in self.sim.qpos[0, :3]],
                "q": [float(x) for x in self.sim.qpos[0, 3:]],
                "qd": [float(x) for x in self.sim.qvel[0, 3:]],
                "hand_world": [float(x) for x in self.sim.hand[0]],
                "hand_base": [float(x) for x in meas["hand_pose"][0]],
                "contacts": [float(x) for x in meas["contacts"][0]],
                "base_vel": [float(x) for x in meas["base_vel"][0]],
            },
            goal=dict(self.command),
            telemetry={
                "v_meas": float(meas["base_vel"][0, 0]),
                "height": float(meas["base_height"][0]),
                "pitch": float(meas["pitch"][0]),
                "hand_err": hand_err,
                "falls": self.falls,
                "cmd_age_s": None if age is None else round(age, 3),
                **{"r_" + k: float(v[0]) for k, v in terms.items()},
            },
            latency_ms=round(self.latency_ms, 3))
        self.tick += 1
        return frame.model_dump_json()

    def _publish(self, text):
        with self._sink_lock:
            sink = self._sink
        if sink is None:
            return
        try:
            sink.put_nowait(text)
        except queue.Full:  # drop the oldest frame, never block the loop
            try:
                sink.get_nowait()
            except queue.Empty:
                pass
            try:
                sink.put_nowait(text)
            except queue.Full:
                pass

    def _run(self):
        rng = np.random.default_rng(0)
        frame_dt = 1.0 / RATES["frame_hz"]
        steps_per_frame = max(int(round(1.0 / (RATES["frame_hz"] * self.dt))), 1)
        next_step = time.monotonic()
        next_frame = next_step
        while not self._stop.is_set():
            out = self._control_step(rng)
            now = time.monotonic()
            if self.realtime:
                if now >= next_frame:
                    self._publish(self._frame(*out))
                    next_frame += frame_dt
                    if next_frame <= now:  # missed intervals: skip, don't burst
                        next_frame = now + frame_dt
                next_step += self.dt
                if now - next_step > 1.0:
                    next_step = now + self.dt
                delay = next_step - time.monotonic()
                if delay > 0:
                    self._stop.wait(delay)
            elif self.steps % steps_per_frame == 0:
                self._publish(self._frame(*out))
