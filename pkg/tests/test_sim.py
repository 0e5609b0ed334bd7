import numpy as np
import pytest

from skillspace.sim import collision as col
from skillspace.sim import kernels, robot
from skillspace.sim.engine import BatchSim, Sim, SimulationDiverged, forward_kinematics
from skillspace.sim.robot import (
    SceneSpec,
    SimConfig,
    fk_frames,
    fk_velocities,
    hand_pose_base_frame,
    hand_pose_world,
    load_robot,
    robot_from_dict,
    site_world,
)

from .oracles import pendulum_energy

QUIET = dict(push_interval=0.0, push_max_impulse=0.0,
             mass_scale_range=(1.0, 1.0), friction_range=(0.9, 0.9),
             gain_scale_range=(1.0, 1.0))


@pytest.fixture(scope="module")
def model():
    return load_robot()


def pendulum_on_table(theta0):
    """Heavy table resting on its feet, passive 1 m rod hinged above it.

    The table must be much heavier than the rod: the pivot is mounted on
    contact springs, and the measured rod energy genuinely fluctuates by
    the amount exchanged with a light foundation.
    """
    return robot_from_dict({
        "schema_version": 1,
        "name": "pendulum-rig",
        "nominal_base_height": 0.05,
        "standing_height": 0.05,
        "links": [
            {"name": "table", "mass": 1000.0, "inertia": 500.0, "com": [0.0, 0.0],
             "capsule": [[-0.5, 0.0], [0.5, 0.0]], "radius": 0.05},
            {"name": "rod", "mass": 1.0, "inertia": 1.0 / 12.0, "com": [0.0, -0.5],
             "capsule": [[0.0, 0.0], [0.0, -1.0]], "radius": 0.02},
        ],
        "joints": [
            {"name": "pivot", "parent": "table", "child": "rod",
             "anchor": [0.0, 1.6], "limits": [-100.0, 100.0],
             "torque_limit": 0.0, "kp": 1.0, "kd": 0.0, "q0": theta0},
        ],
        "sites": {
            "foot_left": {"link": "table", "heel": [-0.5, -0.05], "toe": [-0.3, -0.05]},
            "foot_right": {"link": "table", "heel": [0.3, -0.05], "toe": [0.5, -0.05]},
            "hand": {"link": "rod", "point": [0.0, -1.0]},
            "head": {"link": "table", "point": [0.0, 0.0]},
        },
    })


def test_passive_pendulum_energy_drift_below_2_percent():
    theta0 = 2.2
    m = pendulum_on_table(theta0)
    cfg = SimConfig(contact_damping=0.0, tangent_damping=0.0,
                    friction=2.0, friction_range=(2.0, 2.0),
                    push_interval=0.0, mass_scale_range=(1.0, 1.0),
                    gain_scale_range=(1.0, 1.0))
    sim = BatchSim(m, cfg, n_envs=1, seed=0)
    sim.reset(randomize=False)
    targets = np.array([[theta0]])
    I_pivot = 1.0 / 12.0 + 1.0 * 0.5**2
    e0 = pendulum_energy(1.0, 0.5, I_pivot, theta0, 0.0)
    worst = 0.0
    for _ in range(500):  # 10 s at 50 Hz
        sim.step(targets)
        theta = sim.qpos[0, 2] + sim.qpos[0, 3]
        omega = sim.qvel[0, 2] + sim.qvel[0, 3]
        e = pendulum_energy(1.0, 0.5, I_pivot, theta, omega)
        worst = max(worst, abs(e - e0))
    # 2% of the swing energy above the hanging rest state
    scale = 1.0 * 9.81 * 0.5 * (1.0 - np.cos(theta0))
    assert worst / scale < 0.02


def test_free_floating_momentum_is_conserved():
    # no gravity, no contact: internal PD torques cannot change momentum.
    # gentle motion keeps the discrete-time drift tiny; assembly sign
    # errors would instead grow secularly by orders of magnitude more.
    m = load_robot()
    cfg = SimConfig(gravity=0.0, **QUIET)
    sim = BatchSim(m, cfg, n_envs=1, seed=1)
    sim.reset(randomize=False)
    sim.qpos[0, 1] = 5.0
    rng = np.random.default_rng(3)
    sim.qvel[0, 3:] = rng.uniform(-0.3, 0.3, m.n_joints)
    sim.qvel[0, :3] = (0.1, 0.05, 0.2)
    p_ref, l_ref = _momenta(m, sim.qpos[0], sim.qvel[0])
    targets = np.tile(m.q0, (1, 1))
    for _ in range(100):
        sim.step(targets)
    p, l = _momenta(m, sim.qpos[0], sim.qvel[0])
    assert np.linalg.norm(p - p_ref) < 5e-3
    assert abs(l - l_ref) < 5e-3


def _momenta(m, qpos, qvel):
    origins, angles, vels, rates = fk_velocities(
        m, qpos[:3], qvel[:3], qpos[3:], qvel[3:])
    P = np.zeros(2)
    L = 0.0
    for l in range(m.n_links):
        R = robot._rot(angles[l])
        rc = R @ m.com[l]
        c = origins[l] + rc
        vc = vels[l] + rates[l] * np.array([-rc[1], rc[0]])
        P += m.mass[l] * vc
        L += m.mass[l] * (c[0] * vc[1] - c[1] * vc[0]) + m.inertia[l] * rates[l]
    return P, L


def test_pd_torque_formula():
    assert kernels.pd_torque(50.0, 1.0, 0.1, 0.0, 0.0, 100.0) == pytest.approx(5.0)
    assert kernels.pd_torque(50.0, 1.0, 0.1, 0.0, 0.0, 2.0) == pytest.approx(2.0)
    assert kernels.pd_torque(50.0, 2.0, 0.0, 0.0, 1.5, 100.0) == pytest.approx(-3.0)


def test_drop_settles_on_both_feet_carrying_weight(model):
    cfg = SimConfig(**QUIET)
    sim = BatchSim(model, cfg, n_envs=1, seed=0)
    sim.reset(randomize=False)
    sim.qpos[0, 1] += 0.05
    targets = model.q0[None, :]
    for _ in range(100):  # 2 s
        sim.step(targets)
    st = sim.state(0)
    assert st.c_left and st.c_right
    total_normal = sim.foot_f_mean[0, :, 1].sum()
    weight = model.total_mass * cfg.gravity
    assert abs(total_normal - weight) / weight < 0.05


def test_static_stance_holds_height_for_10s(model):
    sim = BatchSim(model, SimConfig(**QUIET), n_envs=1, seed=0)
    sim.reset(randomize=False)
    targets = model.q0[None, :]
    for _ in range(500):
        sim.step(targets)
        err = abs(sim.qpos[0, 1] - model.nominal_base_height)
        assert err < 0.02


def test_reset_pose_feet_in_contact_near_nominal_height(model):
    sim = BatchSim(model, SimConfig(**QUIET), n_envs=1, seed=0)
    sim.reset(randomize=False)
    assert abs(sim.qpos[0, 1] - model.nominal_base_height) < 0.01
    sim.step(model.q0[None, :])
    st = sim.state(0)
    assert st.c_left and st.c_right


def test_reset_same_seed_bit_identical(model):
    a = BatchSim(model, SimConfig(), n_envs=3, seed=42)
    b = BatchSim(model, SimConfig(), n_envs=3, seed=42)
    assert np.array_equal(a.qpos, b.qpos)
    assert np.array_equal(a.mass_scale, b.mass_scale)
    assert np.array_equal(a.fric, b.fric)
    assert np.array_equal(a.gain_scale, b.gain_scale)


def test_zero_width_randomization_gives_nominal(model):
    cfg = SimConfig(**QUIET)
    sim = BatchSim(model, cfg, n_envs=2, seed=7)
    assert np.all(sim.mass_scale == 1.0)
    assert np.all(sim.fric == 0.9)
    assert np.all(sim.gain_scale == 1.0)


def test_trajectories_bit_identical_for_same_seed_and_commands(model):
    def run():
        sim = BatchSim(model, SimConfig(), n_envs=2, seed=5)
        hist = []
        for t in range(60):
            tgt = model.q0[None, :] + 0.1 * np.sin(0.1 * t)
            sim.step(np.tile(tgt, (2, 1)))
            hist.append(sim.qpos.copy())
        return np.stack(hist)

    assert np.array_equal(run(), run())


def test_diverged_state_raises_with_body_name(model):
    sim = BatchSim(model, SimConfig(**QUIET), n_envs=1, seed=0)
    sim.reset(randomize=False)
    sim.qpos[0, 4] = np.nan
    sim.step(model.q0[None, :])
    with pytest.raises(SimulationDiverged, match="diverged at body"):
        sim.state(0)


def test_nonfinite_targets_rejected(model):
    sim = BatchSim(model, SimConfig(**QUIET), n_envs=1, seed=0)
    with pytest.raises(ValueError, match="finite"):
        sim.step(np.full((1, model.n_joints), np.nan))


def test_fk_rest_pose_hand_site(model):
    pose = hand_pose_base_frame(model, np.zeros(model.n_joints))
    # shoulder at (0, 0.50), arm segments 0.34 + 0.32 + 0.10 hang straight down
    assert np.allclose(pose, [0.0, 0.50 - 0.76, 0.0], atol=1e-12)


def test_fk_single_link_quarter_turn():
    m = robot_from_dict({
        "schema_version": 1, "name": "one-link",
        "nominal_base_height": 1.0, "standing_height": 1.0,
        "links": [
            {"name": "base", "mass": 1.0, "inertia": 1.0, "com": [0.0, 0.0],
             "capsule": [[0.0, 0.0], [0.0, 0.1]], "radius": 0.05},
            {"name": "arm", "mass": 1.0, "inertia": 0.1, "com": [0.0, -0.5],
             "capsule": [[0.0, 0.0], [0.0, -1.0]], "radius": 0.02},
        ],
        "joints": [
            {"name": "j0", "parent": "base", "child": "arm", "anchor": [0.0, 0.0],
             "limits": [-3.2, 3.2], "torque_limit": 10.0, "kp": 10.0, "kd": 1.0,
             "q0": 0.0},
        ],
        "sites": {
            "foot_left": {"link": "base", "heel": [-0.1, 0.0], "toe": [-0.05, 0.0]},
            "foot_right": {"link": "base", "heel": [0.05, 0.0], "toe": [0.1, 0.0]},
            "hand": {"link": "arm", "point": [0.0, -1.0]},
            "head": {"link": "base", "point": [0.0, 0.0]},
        },
    })
    rest = forward_kinematics(m, [0.0])
    quarter = forward_kinematics(m, [np.pi / 2])
    assert np.allclose(rest, [0.0, -1.0, 0.0], atol=1e-12)
    assert np.allclose(quarter, [1.0, 0.0, np.pi / 2], atol=1e-12)


def test_fk_world_base_round_trip(model):
    q = model.q0 + 0.1
    base = np.array([0.7, 1.1, 0.4])
    world = hand_pose_world(model, base, q)
    local = hand_pose_base_frame(model, q)
    c, s = np.cos(base[2]), np.sin(base[2])
    back = np.array([
        c * (world[0] - base[0]) + s * (world[1] - base[1]),
        -s * (world[0] - base[0]) + c * (world[1] - base[1]),
        world[2] - base[2],
    ])
    assert np.allclose(back, local, atol=1e-9)


def test_engine_hand_pose_matches_reference_fk(model):
    sim = BatchSim(model, SimConfig(**QUIET), n_envs=1, seed=0)
    sim.reset(randomize=False)
    rng = np.random.default_rng(0)
    for _ in range(30):
        tgt = model.q0 + rng.uniform(-0.2, 0.2, model.n_joints)
        sim.step(tgt[None, :])
        ref = hand_pose_world(model, sim.qpos[0, :3], sim.qpos[0, 3:])
        assert np.allclose(sim.hand[0, :3], ref, atol=1e-9)


def test_contact_flags_match_forces_and_friction_cone(model):
    sim = BatchSim(model, SimConfig(**QUIET), n_envs=1, seed=0)
    sim.reset(randomize=False)
    rng = np.random.default_rng(1)
    for _ in range(80):
        tgt = model.q0 + rng.uniform(-0.3, 0.3, model.n_joints)
        sim.step(tgt[None, :])
        for f in range(2):
            assert bool(sim.foot_contact[0, f]) == (sim.foot_f_end[0, f] > 0.0)
        assert np.all(sim.foot_f_mean[0, :, 1] >= 0.0)
        assert sim.fric_excess[0] <= 1e-9


def box_scene(x=0.0, w=0.3, h=0.5, mass=2.0):
    return SceneSpec(box_size=(w, h), box_mass=mass, box_pose=(x, h / 2))


def test_attach_rejected_when_box_out_of_reach(model):
    sim = BatchSim(model, SimConfig(**QUIET), box_scene(x=2.0), n_envs=1, seed=0)
    sim.reset(randomize=False)
    before = sim.box_q[0].copy()
    assert not sim.attach_box(0)
    assert sim.box_att[0] == 0
    assert np.array_equal(sim.box_q[0], before)


def test_attached_box_tracks_hand_weld(model):
    sim = BatchSim(model, SimConfig(**QUIET), box_scene(x=0.0), n_envs=1, seed=0)
    sim.reset(randomize=False)
    assert sim.attach_box(0)
    tgt = model.q0.copy()
    for t in range(100):
        tgt[6] = 0.8 * np.sin(0.05 * t)  # wave the shoulder around
        sim.step(tgt[None, :])
    origins, angles = fk_frames(model, sim.qpos[0, :3], sim.qpos[0, 3:])
    expected = site_world(origins, angles, model.hand_link, sim.box_off[0, :2])
    assert np.allclose(sim.box_q[0, :2], expected, atol=1e-9)
    assert sim.box_q[0, 2] == pytest.approx(
        angles[model.hand_link] + sim.box_off[0, 2], abs=1e-9)


def test_detached_box_falls_ballistically(model):
    sim = BatchSim(model, SimConfig(**QUIET), box_scene(x=0.0), n_envs=1, seed=0)
    sim.reset(randomize=False)
    # grab close to the hand (a long lever overwhelms the wrist motor),
    # ramp the arm up slowly, settle, then release in mid air
    sim.box_q[0, :2] = sim.hand[0, :2] + np.array([0.0, -0.1])
    sim.box_v[0] = 0.0
    assert sim.attach_box(0)
    tgt = model.q0.copy()
    for t in range(120):
        tgt[6] = 1.2 * min(1.0, t / 60.0)
        sim.step(tgt[None, :])
    assert sim.detach_box(0)
    z0 = sim.box_q[0, 1]
    v0 = sim.box_v[0, 1]
    g = sim.config.gravity
    for k in range(1, 16):
        sim.step(tgt[None, :])
        t = k * sim.config.control_dt
        oracle = z0 + v0 * t - 0.5 * g * t * t
        assert sim.box_q[0, 1] == pytest.approx(oracle, abs=0.01)


def arm_on_table():
    """Reaching arm bolted to a heavy wide table: isolates carried-mass
    statics from whole-body balance."""
    return robot_from_dict({
        "schema_version": 1, "name": "arm-rig",
        "nominal_base_height": 0.05, "standing_height": 0.05,
        "links": [
            {"name": "table", "mass": 500.0, "inertia": 300.0, "com": [0.0, 0.0],
             "capsule": [[-1.0, 0.0], [1.0, 0.0]], "radius": 0.05},
            {"name": "upper_arm", "mass": 1.5, "inertia": 0.015, "com": [0.0, -0.15],
             "capsule": [[0.0, 0.0], [0.0, -0.34]], "radius": 0.05},
            {"name": "forearm", "mass": 1.0, "inertia": 0.009, "com": [0.0, -0.14],
             "capsule": [[0.0, 0.0], [0.0, -0.32]], "radius": 0.04},
            {"name": "hand", "mass": 0.4, "inertia": 0.0006, "com": [0.0, -0.05],
             "capsule": [[0.0, 0.0], [0.0, -0.10]], "radius": 0.035},
        ],
        "joints": [
            {"name": "shoulder", "parent": "table", "child": "upper_arm",
             "anchor": [0.0, 1.0], "limits": [-2.8, 2.8], "torque_limit": 60.0,
             "kp": 120.0, "kd": 5.0, "q0": 0.0},
            {"name": "elbow", "parent": "upper_arm", "child": "forearm",
             "anchor": [0.0, -0.34], "limits": [-0.1, 2.5], "torque_limit": 40.0,
             "kp": 60.0, "kd": 2.0, "q0": 0.0},
            {"name": "wrist", "parent": "forearm", "child": "hand",
             "anchor": [0.0, -0.32], "limits": [-1.2, 1.2], "torque_limit": 10.0,
             "kp": 12.0, "kd": 0.5, "q0": 0.0},
        ],
        "sites": {
            "foot_left": {"link": "table", "heel": [-1.0, -0.05], "toe": [-0.6, -0.05]},
            "foot_right": {"link": "table", "heel": [0.6, -0.05], "toe": [1.0, -0.05]},
            "hand": {"link": "hand", "point": [0.0, -0.10]},
            "head": {"link": "table", "point": [0.0, 0.0]},
        },
    })


def test_carried_mass_increases_shoulder_sag():
    rig = arm_on_table()

    def settle(attach):
        sim = BatchSim(rig, SimConfig(**QUIET), box_scene(x=0.0, mass=2.0),
                       n_envs=1, seed=0)
        sim.reset(randomize=False)
        tgt = np.array([1.57, 0.0, 0.0])  # arm horizontal
        for _ in range(100):
            sim.step(tgt[None, :])
        if attach:
            # park the box at the hand, then grab it
            sim.box_q[0, :2] = sim.hand[0, :2]
            sim.box_v[0] = 0.0
            assert sim.attach_box(0)
            for _ in range(200):
                sim.step(tgt[None, :])
        return abs(sim.qpos[0, 3 + 0] - 1.57)

    sag_free = settle(False)
    sag_loaded = settle(True)
    extra = sag_loaded - sag_free
    # static torque balance: added torque ~ m g * horizontal arm / kp
    predicted = 2.0 * 9.81 * 0.7 / rig.kp[0]
    assert extra > 0.02
    assert 0.4 * predicted < extra < 1.8 * predicted


def test_collision_report_empty_far_from_shelf(model):
    scene = SceneSpec(shelf_segments=[[[5.0, 1.0], [6.0, 1.0]]])
    report, _ = col.query_collisions(
        model, scene, np.array([0.0, 1.0, 0.0]), model.q0)
    assert not report.any()


def test_collision_reported_when_link_crosses_segment(model):
    # horizontal segment right through the torso capsule
    scene = SceneSpec(shelf_segments=[[[-0.5, 1.3], [0.5, 1.3]]])
    report, _ = col.query_collisions(
        model, scene, np.array([0.0, 1.0, 0.0]), model.q0)
    assert report[0].any()


def test_scene_rejects_underground_shelf():
    with pytest.raises(ValueError, match="ground"):
        SceneSpec(shelf_segments=[[[0.0, -0.5], [1.0, 1.0]]])


def test_graspable_matches_sampled_face_distances(model):
    scene = box_scene(x=0.0)
    rng = np.random.default_rng(0)
    left, right = col.box_side_faces(scene, (0.0, 0.25))
    for _ in range(40):
        hand = rng.uniform([-1.0, 0.0], [1.0, 1.2])
        samples = np.linspace(0.0, 1.0, 400)[:, None]
        dl = np.min(np.linalg.norm(left[0] + samples * (left[1] - left[0]) - hand, axis=1))
        dr = np.min(np.linalg.norm(right[0] + samples * (right[1] - right[0]) - hand, axis=1))
        brute = max(dl, dr) <= scene.grasp_threshold
        fast = col.box_graspable(scene, (0.0, 0.25), hand)
        if abs(max(dl, dr) - scene.grasp_threshold) > 1e-3:  # skip knife-edge cases
            assert fast == brute


def test_segment_distance_against_point_sampling():
    rng = np.random.default_rng(2)
    for _ in range(30):
        a0, a1, b0, b1 = rng.uniform(-1, 1, (4, 2))
        fast = col.segment_distance(a0, a1, b0, b1)
        ts = np.linspace(0, 1, 300)
        pa = a0 + ts[:, None] * (a1 - a0)
        pb = b0 + ts[:, None] * (b1 - b0)
        brute = np.min(np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1))
        assert fast <= brute + 1e-9
        assert fast > brute - 5e-3  # sampling resolution slack


def test_single_robot_wrapper_round_trip(model):
    sim = Sim(model, SimConfig(**QUIET))
    st = sim.reset()
    assert st.q.shape == (model.n_joints,)
    st = sim.step(model.q0)
    assert np.isfinite(st.hand_pose).all()
    assert st.f_foot.shape == (2, 2)


@pytest.mark.slow
def test_batch_throughput_floor(model):
    import time

    sim = BatchSim(model, SimConfig(), n_envs=16, seed=0)
    tgt = np.tile(model.q0, (16, 1))
    sim.step(tgt)  # compile outside the timed section
    t0 = time.perf_counter()
    for _ in range(100):
        sim.step(tgt)
    dt = time.perf_counter() - t0
    env_steps_per_s = 16 * 100 / dt
    assert env_steps_per_s > 800.0


class TestBatchedCollision:
    """The vectorized collision path must reproduce the scalar one, since
    training loops use the former and the tests above verified the latter."""

    def poses(self, model, n=64, seed=13):
        rng = np.random.default_rng(seed)
        qpos = np.zeros((n, 3 + model.n_joints))
        qpos[:, 0] = rng.uniform(-0.5, 1.8, n)
        qpos[:, 1] = rng.uniform(0.4, 1.3, n)
        qpos[:, 2] = rng.uniform(-0.8, 0.8, n)
        qpos[:, 3:] = rng.uniform(model.q_lo, model.q_hi, (n, model.n_joints))
        return qpos

    def test_fk_segments_match_scalar_fk(self, model):
        qpos = self.poses(model)
        segs = col.fk_segments_batch(model, qpos)
        for e in range(len(qpos)):
            want = col.link_segments_world(model, qpos[e, :3], qpos[e, 3:])
            np.testing.assert_allclose(segs[e], np.asarray(want), atol=1e-12)

    def test_segment_distance_matches_scalar(self):
        rng = np.random.default_rng(7)
        a0, a1, b0, b1 = rng.uniform(-1.5, 1.5, (4, 500, 2))
        a1[:30] = a0[:30]            # degenerate first segment
        b1[30:60] = b0[30:60]        # degenerate second segment
        d = a1[60:80] - a0[60:80]    # parallel pairs
        b0[60:80] = a0[60:80] + [0.3, 0.1]
        b1[60:80] = b0[60:80] + d
        got = col.segment_distance_batch(a0, a1, b0, b1)
        for i in range(500):
            want = col.segment_distance(a0[i], a1[i], b0[i], b1[i])
            assert got[i] == pytest.approx(want, abs=1e-12)

    def test_point_segment_distance_matches_scalar(self):
        rng = np.random.default_rng(9)
        p, s0, s1 = rng.uniform(-2, 2, (3, 200, 2))
        s1[:20] = s0[:20]
        got = col.point_segment_distance_batch(p, s0, s1)
        for i in range(200):
            assert got[i] == pytest.approx(
                col.point_segment_distance(p[i], s0[i], s1[i]), abs=1e-12)

    def test_shelf_hits_match_scalar_query(self, model):
        segs = [((0.9, z), (1.3, z)) for z in (0.5, 1.0, 1.5)]
        scene = SceneSpec(shelf_segments=np.asarray(segs))
        qpos = self.poses(model, seed=21)
        hits = col.shelf_hits_batch(model, scene, qpos)
        want = np.array([col.any_shelf_collision(model, scene, q[:3], q[3:])
                         for q in qpos])
        assert hits.any() and not hits.all()  # the pose sweep crosses boards
        np.testing.assert_array_equal(hits, want)
