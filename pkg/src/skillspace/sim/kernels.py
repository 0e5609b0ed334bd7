"""Batched planar rigid-body dynamics kernels.

Equations of motion are assembled per substep from point-mass Jacobians:
M(q) = sum_b m_b J_b^T J_b + I_b w_b w_b^T, where J_b is the 2 x nd com
Jacobian of body b and w_b its 0/1 angular Jacobian row. In the plane
every angular Jacobian is constant, so the velocity-product bias reduces
to a pure centripetal cascade accumulated alongside forward kinematics.
Integration is semi-implicit Euler. One serial loop over environments;
parallelism across envs is not worth it on a single core.
"""

import numpy as np
from numba import njit

BASE_DOF = 3


@njit(cache=True)
def pd_torque(kp, kd, target, q, qd, limit):
    """clamp(kp (target - q) - kd qd, +-limit); the actuator model."""
    t = kp * (target - q) - kd * qd
    if t > limit:
        t = limit
    elif t < -limit:
        t = -limit
    return t


@njit(cache=True)
def _chol_solve(M, b, out, scratch):
    """Solve M x = b for SPD M via Cholesky. Returns False if not SPD."""
    nd = M.shape[0]
    Lc = scratch
    for i in range(nd):
        for j in range(i + 1):
            s = M[i, j]
            for k in range(j):
                s -= Lc[i, k] * Lc[j, k]
            if i == j:
                if s <= 1e-12:
                    return False
                Lc[i, i] = np.sqrt(s)
            else:
                Lc[i, j] = s / Lc[j, j]
    for i in range(nd):
        s = b[i]
        for k in range(i):
            s -= Lc[i, k] * out[k]
        out[i] = s / Lc[i, i]
    for i in range(nd - 1, -1, -1):
        s = out[i]
        for k in range(i + 1, nd):
            s -= Lc[k, i] * out[k]
        out[i] = s / Lc[i, i]
    return True


@njit(cache=True)
def step_batch(
    qpos, qvel, anch,
    box_q, box_v, box_att, box_off,
    targets, push_dv,
    parent, mass, inertia, com, anchors, active_dofs, n_active,
    q_lo, q_hi, tlim, kp, kd,
    foot_links, foot_pts, hand_link, hand_pt, head_pt,
    probe_links, probe_pts,
    mass_scale, fric, gain_scale,
    dt, n_sub, grav, kc, cc, kt, ct, klim, clim,
    box_mass, box_inertia, box_half_h, box_on,
    foot_f_mean, foot_f_end, foot_contact, foot_vel, foot_pos,
    hand_out, head_out, collide_ground, fric_excess, diverged,
):
    n_env = qpos.shape[0]
    L = mass.shape[0]
    nd = qpos.shape[1]
    J = nd - BASE_DOF

    phi = np.empty(L)
    om = np.empty(L)
    P = np.empty((L, 2))
    V = np.empty((L, 2))
    Ab = np.empty((L, 2))
    M = np.empty((nd, nd))
    Q = np.empty(nd)
    acc = np.empty(nd)
    chol = np.empty((nd, nd))

    for e in range(n_env):
        if diverged[e] >= 0:
            continue
        qvel[e, 0] += push_dv[e, 0]
        qvel[e, 1] += push_dv[e, 1]
        ms = mass_scale[e]
        gs = gain_scale[e]
        mu = fric[e]
        for f in range(2):
            foot_f_mean[e, f, 0] = 0.0
            foot_f_mean[e, f, 1] = 0.0

        for sub in range(n_sub):
            # forward pass: frames, rates, origin velocities, centripetal bias
            phi[0] = qpos[e, 2]
            om[0] = qvel[e, 2]
            P[0, 0] = qpos[e, 0]
            P[0, 1] = qpos[e, 1]
            V[0, 0] = qvel[e, 0]
            V[0, 1] = qvel[e, 1]
            Ab[0, 0] = 0.0
            Ab[0, 1] = 0.0
            for l in range(1, L):
                p = parent[l]
                c = np.cos(phi[p])
                s = np.sin(phi[p])
                ax = anchors[l - 1, 0]
                az = anchors[l - 1, 1]
                rx = c * ax - s * az
                rz = s * ax + c * az
                P[l, 0] = P[p, 0] + rx
                P[l, 1] = P[p, 1] + rz
                phi[l] = phi[p] + qpos[e, BASE_DOF + l - 1]
                om[l] = om[p] + qvel[e, BASE_DOF + l - 1]
                V[l, 0] = V[p, 0] - om[p] * rz
                V[l, 1] = V[p, 1] + om[p] * rx
                w2 = om[p] * om[p]
                Ab[l, 0] = Ab[p, 0] - w2 * rx
                Ab[l, 1] = Ab[p, 1] - w2 * rz

            for i in range(nd):
                Q[i] = 0.0
                for jj in range(nd):
                    M[i, jj] = 0.0

            # bodies: com gravity + centripetal pseudo-force, mass matrix
            for l in range(L):
                c = np.cos(phi[l])
                s = np.sin(phi[l])
                rcx = c * com[l, 0] - s * com[l, 1]
                rcz = s * com[l, 0] + c * com[l, 1]
                cx = P[l, 0] + rcx
                cz = P[l, 1] + rcz
                w2 = om[l] * om[l]
                m_l = mass[l] * ms
                Fx = m_l * (-(Ab[l, 0] - w2 * rcx))
                Fz = m_l * (-grav - (Ab[l, 1] - w2 * rcz))
                I_l = inertia[l] * ms
                Q[0] += Fx
                Q[1] += Fz
                M[0, 0] += m_l
                M[1, 1] += m_l
                na = n_active[l]
                for k in range(na):
                    d = active_dofs[l, k]
                    # pivot of dof d: base origin for pitch, else joint frame
                    pl = 0 if d == 2 else d - 2
                    jx = -(cz - P[pl, 1])
                    jz = cx - P[pl, 0]
                    Q[d] += Fx * jx + Fz * jz
                    M[0, d] += m_l * jx
                    M[1, d] += m_l * jz
                    for k2 in range(k, na):
                        d2 = active_dofs[l, k2]
                        pl2 = 0 if d2 == 2 else d2 - 2
                        jx2 = -(cz - P[pl2, 1])
                        jz2 = cx - P[pl2, 0]
                        M[d, d2] += m_l * (jx * jx2 + jz * jz2) + I_l

            # carried box behaves as an extra body welded to the hand link
            if box_att[e] == 1:
                hl = hand_link
                c = np.cos(phi[hl])
                s = np.sin(phi[hl])
                rcx = c * box_off[e, 0] - s * box_off[e, 1]
                rcz = s * box_off[e, 0] + c * box_off[e, 1]
                cx = P[hl, 0] + rcx
                cz = P[hl, 1] + rcz
                w2 = om[hl] * om[hl]
                Fx = box_mass * (-(Ab[hl, 0] - w2 * rcx))
                Fz = box_mass * (-grav - (Ab[hl, 1] - w2 * rcz))
                Q[0] += Fx
                Q[1] += Fz
                M[0, 0] += box_mass
                M[1, 1] += box_mass
                na = n_active[hl]
                for k in range(na):
                    d = active_dofs[hl, k]
                    pl = 0 if d == 2 else d - 2
                    jx = -(cz - P[pl, 1])
                    jz = cx - P[pl, 0]
                    Q[d] += Fx * jx + Fz * jz
                    M[0, d] += box_mass * jx
                    M[1, d] += box_mass * jz
                    for k2 in range(k, na):
                        d2 = active_dofs[hl, k2]
                        pl2 = 0 if d2 == 2 else d2 - 2
                        jx2 = -(cz - P[pl2, 1])
                        jz2 = cx - P[pl2, 0]
                        M[d, d2] += box_mass * (jx * jx2 + jz * jz2) + box_inertia

            # actuation: PD within torque limits plus joint-limit stops
            for j in range(J):
                qj = qpos[e, BASE_DOF + j]
                qdj = qvel[e, BASE_DOF + j]
                tgt = targets[e, j]
                if tgt < q_lo[j]:
                    tgt = q_lo[j]
                elif tgt > q_hi[j]:
                    tgt = q_hi[j]
                tq = pd_torque(kp[j] * gs, kd[j] * gs, tgt, qj, qdj, tlim[j])
                if qj > q_hi[j]:
                    tq += -klim * (qj - q_hi[j]) - clim * qdj
                elif qj < q_lo[j]:
                    tq += -klim * (qj - q_lo[j]) - clim * qdj
                Q[BASE_DOF + j] += tq

            # foot contacts: penalty normal, anchored tangential friction
            last = sub == n_sub - 1
            for f in range(2):
                fl = foot_links[f]
                c = np.cos(phi[fl])
                s = np.sin(phi[fl])
                if last:
                    foot_f_end[e, f] = 0.0
                for pt in range(2):
                    lx = foot_pts[f, pt, 0]
                    lz = foot_pts[f, pt, 1]
                    rx = c * lx - s * lz
                    rz = s * lx + c * lz
                    px = P[fl, 0] + rx
                    pz = P[fl, 1] + rz
                    vx = V[fl, 0] - om[fl] * rz
                    vz = V[fl, 1] + om[fl] * rx
                    idx = f * 2 + pt
                    if pz < 0.0:
                        fn = -kc * pz - cc * vz
                        if fn < 0.0:
                            fn = 0.0
                    else:
                        fn = 0.0
                    if fn > 0.0:
                        ft = -kt * (px - anch[e, idx]) - ct * vx
                        cap = mu * fn
                        if ft > cap:
                            ft = cap
                            anch[e, idx] = px + (ft + ct * vx) / kt
                        elif ft < -cap:
                            ft = -cap
                            anch[e, idx] = px + (ft + ct * vx) / kt
                        ex = np.abs(ft) - cap
                        if ex > fric_excess[e]:
                            fric_excess[e] = ex
                        Q[0] += ft
                        Q[1] += fn
                        na = n_active[fl]
                        for k in range(na):
                            d = active_dofs[fl, k]
                            pl = 0 if d == 2 else d - 2
                            Q[d] += ft * (-(pz - P[pl, 1])) + fn * (px - P[pl, 0])
                        foot_f_mean[e, f, 0] += ft
                        foot_f_mean[e, f, 1] += fn
                        if last:
                            foot_f_end[e, f] += fn
                    else:
                        anch[e, idx] = px

            # undesired ground contact by any non-foot probe point
            for pr in range(probe_links.shape[0]):
                ll = probe_links[pr]
                c = np.cos(phi[ll])
                s = np.sin(phi[ll])
                pz = P[ll, 1] + s * probe_pts[pr, 0] + c * probe_pts[pr, 1]
                if pz < 0.0:
                    collide_ground[e] = 1

            # free box: axis-aligned, ground contact at the bottom face
            if box_on == 1 and box_att[e] == 0:
                bz = box_q[e, 1] - box_half_h
                bfx = 0.0
                bfz = 0.0
                if bz < 0.0:
                    fn = -kc * bz - cc * box_v[e, 1]
                    if fn < 0.0:
                        fn = 0.0
                    if fn > 0.0:
                        ft = -kt * (box_q[e, 0] - anch[e, 4]) - ct * box_v[e, 0]
                        cap = mu * fn
                        if ft > cap:
                            ft = cap
                            anch[e, 4] = box_q[e, 0] + (ft + ct * box_v[e, 0]) / kt
                        elif ft < -cap:
                            ft = -cap
                            anch[e, 4] = box_q[e, 0] + (ft + ct * box_v[e, 0]) / kt
                        bfx = ft
                        bfz = fn
                    else:
                        anch[e, 4] = box_q[e, 0]
                else:
                    anch[e, 4] = box_q[e, 0]
                box_v[e, 0] += dt * (bfx / box_mass)
                box_v[e, 1] += dt * (bfz / box_mass - grav)
                box_q[e, 0] += dt * box_v[e, 0]
                box_q[e, 1] += dt * box_v[e, 1]

            for i in range(1, nd):
                for jj in range(i):
                    M[i, jj] = M[jj, i]
            ok = _chol_solve(M, Q, acc, chol)
            if not ok:
                diverged[e] = 0
                break
            bad = -1
            for i in range(nd):
                qvel[e, i] += dt * acc[i]
                qpos[e, i] += dt * qvel[e, i]
                if not np.isfinite(qpos[e, i]) or np.abs(qpos[e, i]) > 1e8:
                    bad = i
            if bad >= 0:
                diverged[e] = bad
                break

        # end-of-step site readouts from the final configuration
        phi[0] = qpos[e, 2]
        om[0] = qvel[e, 2]
        P[0, 0] = qpos[e, 0]
        P[0, 1] = qpos[e, 1]
        V[0, 0] = qvel[e, 0]
        V[0, 1] = qvel[e, 1]
        for l in range(1, L):
            p = parent[l]
            c = np.cos(phi[p])
            s = np.sin(phi[p])
            ax = anchors[l - 1, 0]
            az = anchors[l - 1, 1]
            rx = c * ax - s * az
            rz = s * ax + c * az
            P[l, 0] = P[p, 0] + rx
            P[l, 1] = P[p, 1] + rz
            phi[l] = phi[p] + qpos[e, BASE_DOF + l - 1]
            om[l] = om[p] + qvel[e, BASE_DOF + l - 1]
            V[l, 0] = V[p, 0] - om[p] * rz
            V[l, 1] = V[p, 1] + om[p] * rx
        for f in range(2):
            fl = foot_links[f]
            c = np.cos(phi[fl])
            s = np.sin(phi[fl])
            sx = 0.5 * (foot_pts[f, 0, 0] + foot_pts[f, 1, 0])
            sz = 0.5 * (foot_pts[f, 0, 1] + foot_pts[f, 1, 1])
            rx = c * sx - s * sz
            rz = s * sx + c * sz
            foot_pos[e, f, 0] = P[fl, 0] + rx
            foot_pos[e, f, 1] = P[fl, 1] + rz
            foot_vel[e, f, 0] = V[fl, 0] - om[fl] * rz
            foot_vel[e, f, 1] = V[fl, 1] + om[fl] * rx
            foot_contact[e, f] = 1 if foot_f_end[e, f] > 0.0 else 0
            foot_f_mean[e, f, 0] /= n_sub
            foot_f_mean[e, f, 1] /= n_sub
        hl = hand_link
        c = np.cos(phi[hl])
        s = np.sin(phi[hl])
        rx = c * hand_pt[0] - s * hand_pt[1]
        rz = s * hand_pt[0] + c * hand_pt[1]
        hand_out[e, 0] = P[hl, 0] + rx
        hand_out[e, 1] = P[hl, 1] + rz
        hand_out[e, 2] = phi[hl]
        hand_out[e, 3] = V[hl, 0] - om[hl] * rz
        hand_out[e, 4] = V[hl, 1] + om[hl] * rx
        hand_out[e, 5] = om[hl]
        c = np.cos(phi[0])
        s = np.sin(phi[0])
        head_out[e, 0] = P[0, 0] + c * head_pt[0] - s * head_pt[1]
        head_out[e, 1] = P[0, 1] + s * head_pt[0] + c * head_pt[1]
        if box_att[e] == 1:
            c = np.cos(phi[hl])
            s = np.sin(phi[hl])
            rbx = c * box_off[e, 0] - s * box_off[e, 1]
            rbz = s * box_off[e, 0] + c * box_off[e, 1]
            box_q[e, 0] = P[hl, 0] + rbx
            box_q[e, 1] = P[hl, 1] + rbz
            box_q[e, 2] = phi[hl] + box_off[e, 2]
            box_v[e, 0] = V[hl, 0] - om[hl] * rbz
            box_v[e, 1] = V[hl, 1] + om[hl] * rbx
