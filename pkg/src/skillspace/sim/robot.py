"""Robot morphology, state containers, and reference kinematics.

The robot is a planar kinematic tree rooted at a floating base with
coordinates (x, z, pitch). Generalized coordinates are
[x, z, pitch, q_0 .. q_{J-1}] with one revolute joint per non-root link.
Everything the integrator kernels need is flattened into contiguous
float64 arrays at load time.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

SCHEMA_VERSION = 1
BASE_DOF = 3  # x, z, pitch precede the joint block in every dof vector


class ModelError(ValueError):
    pass


@dataclass
class RobotModel:
    """Flattened planar tree. Link 0 is the torso (floating base)."""

    name: str
    link_names: list
    joint_names: list
    parent: np.ndarray        # (L,) int, -1 for the base
    mass: np.ndarray          # (L,)
    inertia: np.ndarray       # (L,) about own com
    com: np.ndarray           # (L, 2) in link frame
    capsule: np.ndarray       # (L, 2, 2) proximal/distal in link frame
    radius: np.ndarray        # (L,)
    joint_anchor: np.ndarray  # (J, 2) in parent frame; joint j moves link j+1
    q_lo: np.ndarray
    q_hi: np.ndarray
    torque_limit: np.ndarray
    kp: np.ndarray
    kd: np.ndarray
    q0: np.ndarray
    foot_links: np.ndarray    # (2,) int, left then right
    foot_pts: np.ndarray      # (2, 2, 2) heel/toe in foot frame
    hand_link: int
    hand_pt: np.ndarray       # (2,) in hand frame
    head_pt: np.ndarray       # (2,) in torso frame
    nominal_base_height: float
    standing_height: float
    # derived: ancestor masks and active-dof lists for the dynamics kernels
    amask: np.ndarray = field(default=None, repr=False)      # (L, 3+J) 0/1
    active_dofs: np.ndarray = field(default=None, repr=False)  # (L, max_nd) int
    n_active: np.ndarray = field(default=None, repr=False)     # (L,) int

    @property
    def n_links(self):
        return len(self.mass)

    @property
    def n_joints(self):
        return len(self.q0)

    @property
    def n_dofs(self):
        return BASE_DOF + self.n_joints

    @property
    def total_mass(self):
        return float(self.mass.sum())

    def __post_init__(self):
        L, J = self.n_links, self.n_joints
        if np.any(self.mass <= 0) or np.any(self.inertia <= 0):
            raise ModelError("masses and inertias must be positive")
        if np.any(self.kp <= 0) or np.any(self.kd < 0):
            raise ModelError("pd gains must have kp > 0, kd >= 0")
        if self.parent[0] != -1 or np.any(self.parent[1:] >= np.arange(1, L)):
            raise ModelError("links must be topologically ordered with base first")
        if len(self.foot_links) != 2:
            raise ModelError("expected exactly 2 foot sites")
        nd = BASE_DOF + J
        amask = np.zeros((L, nd))
        amask[:, :BASE_DOF] = 0.0
        amask[:, 2] = 1.0  # base pitch rotates every link
        for l in range(1, L):
            amask[l] = amask[self.parent[l]]
            amask[l, BASE_DOF + l - 1] = 1.0
        # translation dofs move every com; they are handled explicitly in
        # the kernels, so active_dofs lists angular dofs only
        self.amask = amask
        counts = amask[:, 2:].sum(axis=1).astype(np.int64)
        max_nd = int(counts.max())
        active = np.zeros((L, max_nd), dtype=np.int64)
        for l in range(L):
            idx = np.nonzero(amask[l, 2:])[0] + 2
            active[l, : len(idx)] = idx
        self.active_dofs = active
        self.n_active = counts


@dataclass
class RobotState:
    """Snapshot of one robot at a control-step boundary."""

    base_pose: np.ndarray      # (3,) x, z, pitch
    base_vel: np.ndarray       # (3,)
    q: np.ndarray              # (J,)
    qd: np.ndarray             # (J,)
    c_left: bool
    c_right: bool
    f_foot: np.ndarray         # (2, 2) per-foot mean (ft, fn) over the step
    v_foot: np.ndarray         # (2, 2) per-foot site world velocity
    hand_pose: np.ndarray      # (3,) x, z, orientation
    collision: bool


@dataclass
class SimConfig:
    timestep: float = 0.001
    substeps: int = 20
    gravity: float = 9.81
    contact_stiffness: float = 2.0e4
    contact_damping: float = 200.0
    friction: float = 0.9
    tangent_stiffness: float = 2.0e4
    tangent_damping: float = 200.0
    limit_stiffness: float = 400.0
    limit_damping: float = 5.0
    # randomization ranges must contain the nominal value
    mass_scale_range: tuple = (0.9, 1.1)
    friction_range: tuple = (0.7, 1.1)
    gain_scale_range: tuple = (0.9, 1.1)
    push_interval: float = 4.0
    push_max_impulse: float = 15.0
    obs_noise: dict = field(default_factory=lambda: {
        "ang_vel": 0.02, "gravity": 0.02, "q": 0.01, "qd": 0.1,
    })

    def __post_init__(self):
        if self.timestep <= 0 or self.substeps < 1:
            raise ValueError("timestep must be positive and substeps >= 1")
        for name, rng, nominal in [
            ("mass_scale_range", self.mass_scale_range, 1.0),
            ("friction_range", self.friction_range, self.friction),
            ("gain_scale_range", self.gain_scale_range, 1.0),
        ]:
            lo, hi = rng
            if not (lo <= nominal <= hi):
                raise ValueError(f"{name} {rng} does not contain nominal {nominal}")

    @property
    def control_dt(self):
        return self.timestep * self.substeps


@dataclass
class SceneSpec:
    """Static scene: shelf line segments, an optional box, target points."""

    shelf_segments: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 2, 2)))
    box_size: tuple = (0.0, 0.0)           # width, height; zero width = no box
    box_mass: float = 0.0
    box_pose: tuple = (0.0, 0.0)           # initial com x, z
    targets: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    grasp_threshold: float = 0.45

    def __post_init__(self):
        self.shelf_segments = np.asarray(self.shelf_segments, dtype=np.float64).reshape(-1, 2, 2)
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1, 2)
        if self.shelf_segments.size and self.shelf_segments[..., 1].min() < 0.0:
            raise ValueError("shelf segments must stay at or above the ground")

    @property
    def has_box(self):
        return self.box_size[0] > 0.0

    @classmethod
    def from_dict(cls, d: dict):
        if d.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ModelError(f"unsupported scene schema_version {d.get('schema_version')}")
        return cls(
            shelf_segments=np.asarray(d.get("shelf_segments", []), dtype=np.float64).reshape(-1, 2, 2),
            box_size=tuple(d.get("box_size", (0.0, 0.0))),
            box_mass=float(d.get("box_mass", 0.0)),
            box_pose=tuple(d.get("box_pose", (0.0, 0.0))),
            targets=np.asarray(d.get("targets", []), dtype=np.float64).reshape(-1, 2),
            grasp_threshold=float(d.get("grasp_threshold", 0.45)),
        )


def load_robot(path=None) -> RobotModel:
    """Load a robot description; defaults to the packaged planar biped."""
    if path is None:
        text = importlib.resources.files("skillspace.assets").joinpath(
            "robot_planar.yaml").read_text()
    else:
        text = Path(path).read_text()
    return robot_from_dict(yaml.safe_load(text))


def robot_from_dict(doc: dict) -> RobotModel:
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ModelError(f"unsupported robot schema_version {doc.get('schema_version')}")
    links = doc["links"]
    joints = doc["joints"]
    link_names = [l["name"] for l in links]
    lid = {n: i for i, n in enumerate(link_names)}
    parent = np.full(len(links), -1, dtype=np.int64)
    anchors = np.zeros((len(joints), 2))
    for j, jnt in enumerate(joints):
        child = lid[jnt["child"]]
        if child != j + 1:
            raise ModelError("joint order must follow link order (joint j moves link j+1)")
        parent[child] = lid[jnt["parent"]]
        anchors[j] = jnt["anchor"]
    sites = doc["sites"]
    fl, fr = sites["foot_left"], sites["foot_right"]
    model = RobotModel(
        name=doc.get("name", "robot"),
        link_names=link_names,
        joint_names=[j["name"] for j in joints],
        parent=parent,
        mass=np.array([l["mass"] for l in links], dtype=np.float64),
        inertia=np.array([l["inertia"] for l in links], dtype=np.float64),
        com=np.array([l["com"] for l in links], dtype=np.float64),
        capsule=np.array([l["capsule"] for l in links], dtype=np.float64),
        radius=np.array([l["radius"] for l in links], dtype=np.float64),
        joint_anchor=anchors,
        q_lo=np.array([j["limits"][0] for j in joints], dtype=np.float64),
        q_hi=np.array([j["limits"][1] for j in joints], dtype=np.float64),
        torque_limit=np.array([j["torque_limit"] for j in joints], dtype=np.float64),
        kp=np.array([j["kp"] for j in joints], dtype=np.float64),
        kd=np.array([j["kd"] for j in joints], dtype=np.float64),
        q0=np.array([j["q0"] for j in joints], dtype=np.float64),
        foot_links=np.array([lid[fl["link"]], lid[fr["link"]]], dtype=np.int64),
        foot_pts=np.array([[fl["heel"], fl["toe"]], [fr["heel"], fr["toe"]]], dtype=np.float64),
        hand_link=lid[sites["hand"]["link"]],
        hand_pt=np.array(sites["hand"]["point"], dtype=np.float64),
        head_pt=np.array(sites["head"]["point"], dtype=np.float64),
        nominal_base_height=float(doc["nominal_base_height"]),
        standing_height=float(doc["standing_height"]),
    )
    return model


def _rot(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s], [s, c]])


def fk_frames(model: RobotModel, base_pose, q):
    """World origin, angle, origin velocity=None variant: positions only.

    Returns (origins (L,2), angles (L,)). Built from homogeneous transforms
    composed per link, independently of the incremental kernel cascade.
    """
    L = model.n_links
    origins = np.zeros((L, 2))
    angles = np.zeros(L)
    origins[0] = base_pose[:2]
    angles[0] = base_pose[2]
    for l in range(1, L):
        p = model.parent[l]
        origins[l] = origins[p] + _rot(angles[p]) @ model.joint_anchor[l - 1]
        angles[l] = angles[p] + q[l - 1]
    return origins, angles


def fk_velocities(model: RobotModel, base_pose, base_vel, q, qd):
    """World origin velocities and angular rates for every link."""
    origins, angles = fk_frames(model, base_pose, q)
    L = model.n_links
    vels = np.zeros((L, 2))
    rates = np.zeros(L)
    vels[0] = base_vel[:2]
    rates[0] = base_vel[2]
    for l in range(1, L):
        p = model.parent[l]
        r = origins[l] - origins[p]
        vels[l] = vels[p] + rates[p] * np.array([-r[1], r[0]])
        rates[l] = rates[p] + qd[l - 1]
    return origins, angles, vels, rates


def site_world(origins, angles, link, point):
    return origins[link] + _rot(angles[link]) @ np.asarray(point)


def hand_pose_base_frame(model: RobotModel, q):
    """Planar hand site pose expressed in the robot base frame."""
    origins, angles = fk_frames(model, np.zeros(3), q)
    pos = site_world(origins, angles, model.hand_link, model.hand_pt)
    return np.array([pos[0], pos[1], angles[model.hand_link]])


def hand_pose_world(model: RobotModel, base_pose, q):
    origins, angles = fk_frames(model, base_pose, q)
    pos = site_world(origins, angles, model.hand_link, model.hand_pt)
    return np.array([pos[0], pos[1], angles[model.hand_link]])


def reset_base_height(model: RobotModel, config: SimConfig):
    """Base height placing the soles at static penetration depth.

    Feet carry total weight over four contact points; the penalty spring
    compresses by W / (4 k), so spawning there avoids a touchdown bounce.
    """
    origins, angles = fk_frames(model, np.zeros(3), model.q0)
    sole = min(
        site_world(origins, angles, model.foot_links[f], model.foot_pts[f, p])[1]
        for f in range(2) for p in range(2)
    )
    penetration = model.total_mass * config.gravity / (4.0 * config.contact_stiffness)
    return -sole - penetration
