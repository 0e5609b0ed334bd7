"""Teleop wire schema: JSON text messages with a `type` field.

Four message types flow over the socket:
  hello    server -> client, once: command manifest (ranges, defaults,
           rates) plus one example of every message type
  command  client -> server: full desired command; re-sent on any control
           change and as a 5 Hz heartbeat
  frame    server -> client at 20 Hz: tick, robot state snapshot, the
           clamped command echo, tracking telemetry, policy latency
  error    server -> client: malformed input was rejected; session stays up
"""

from __future__ import annotations

from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ValidationError

from ..skills import (
    ARM_IDX,
    BODY_H_FRAC_RANGE,
    BODY_PITCH_RANGE,
    LOCO_V_RANGE,
    arm_fk,
)

RATES = {"control_hz": 50.0, "frame_hz": 20.0, "heartbeat_hz": 5.0}


class Command(BaseModel):
    type: Literal["command"] = "command"
    skill: Literal["loco", "body"] = "loco"
    v: float = 0.0
    h: Optional[float] = None          # None -> nominal base height
    b: float = 0.0
    hand: Optional[Tuple[float, float, float]] = None  # None -> default pose
    stop: bool = False


class Frame(BaseModel):
    type: Literal["frame"] = "frame"
    tick: int
    t: float
    state: dict
    goal: dict
    telemetry: dict
    latency_ms: float


class Hello(BaseModel):
    type: Literal["hello"] = "hello"
    manifest: dict
    examples: dict


class ErrorMsg(BaseModel):
    type: Literal["error"] = "error"
    message: str


def hand_workspace(model, grid=21):
    """Axis-aligned bounds of the reachable hand poses, swept over the arm
    joint limits; the console clamp and the server clamp both use these."""
    axes = [np.linspace(model.q_lo[j], model.q_hi[j], grid) for j in ARM_IDX]
    q = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    # the default configuration must sit inside its own clamp box
    q = np.concatenate([q, model.q0[None, ARM_IDX]], axis=0)
    pose = arm_fk(q, model)
    return pose.min(axis=0), pose.max(axis=0)


def default_command_dict(model):
    hand0 = arm_fk(model.q0[ARM_IDX], model)
    return {"skill": "loco", "v": 0.0, "h": float(model.nominal_base_height),
            "b": 0.0, "hand": [float(x) for x in hand0], "stop": False}


def build_manifest(model):
    h0 = model.nominal_base_height
    lo, hi = hand_workspace(model)
    return {
        "ranges": {
            "v": list(LOCO_V_RANGE),
            "h": [BODY_H_FRAC_RANGE[0] * h0, BODY_H_FRAC_RANGE[1] * h0],
            "b": list(BODY_PITCH_RANGE),
            "hand_x": [float(lo[0]), float(hi[0])],
            "hand_z": [float(lo[1]), float(hi[1])],
            "hand_theta": [float(lo[2]), float(hi[2])],
        },
        "defaults": default_command_dict(model),
        "rates": dict(RATES),
        "estop": "while stop is set the server drives the standing default "
                 "(zero velocity, nominal height) and ignores other fields",
        "stale_after_s": 1.0,
    }


def clamp_command(cmd: Command, manifest) -> dict:
    """Effective command after the manifest clamp; the client mirrors this
    rule, so both sides agree on what reaches the policy."""
    r = manifest["ranges"]
    d = manifest["defaults"]
    out = {"skill": cmd.skill, "stop": bool(cmd.stop)}
    out["v"] = float(np.clip(cmd.v, *r["v"]))
    out["h"] = float(np.clip(d["h"] if cmd.h is None else cmd.h, *r["h"]))
    out["b"] = float(np.clip(cmd.b, *r["b"]))
    hand = d["hand"] if cmd.hand is None else cmd.hand
    out["hand"] = [float(np.clip(hand[0], *r["hand_x"])),
                   float(np.clip(hand[1], *r["hand_z"])),
                   float(np.clip(hand[2], *r["hand_theta"]))]
    if cmd.stop:
        out.update({"skill": d["skill"], "v": d["v"], "h": d["h"],
                    "b": d["b"], "hand": list(d["hand"])})
    return out


def parse_command(text) -> Command:
    """Raises ValueError with a readable message on malformed input."""
    try:
        return Command.model_validate_json(text)
    except ValidationError as err:
        first = err.errors()[0]
        loc = ".".join(str(p) for p in first["loc"]) or "message"
        raise ValueError(f"bad command: {loc}: {first['msg']}")


def hello_message(model):
    manifest = build_manifest(model)
    examples = {
        "command": Command(skill="loco", v=0.4).model_dump(),
        "frame": {"type": "frame", "tick": 120, "t": 2.4,
                  "state": {"base": [0.1, 0.9, 0.0], "q": [0.0] * 9},
                  "goal": default_command_dict(model),
                  "telemetry": {"v_meas": 0.0}, "latency_ms": 1.2},
        "error": ErrorMsg(message="bad command: v: value is not a valid "
                          "float").model_dump(),
        "hello": {"type": "hello", "manifest": "...", "examples": "..."},
    }
    return Hello(manifest=manifest, examples=examples)
