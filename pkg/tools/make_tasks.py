"""Generate the shipped task assets: finger chains, fingertip mesh and task configs.

Initial grasps are found by damped least-squares inverse kinematics on the
fingertip sphere centre, then corrected so the sampled fingertip surface just
touches the object. Run from the repository root::

    python3 tools/make_tasks.py
"""

import json
from pathlib import Path

import numpy as np

from dexroll.body import SampledBody, capsule_mesh, contact_estimate, hard_contacts, save_obj
from dexroll.geometry import ObjectPose, Primitive, SdfScene, scene_sdf_gradients
from dexroll.kinematics import Finger, Joint, KinematicChain, forward_kinematics, point_jacobian
from dexroll.rotations import quat_from_axis_angle

OUT = Path(__file__).resolve().parents[1] / "src" / "dexroll" / "tasks"
RADIUS = 0.01
TIP = np.array([0.05, 0.0, 0.0])
MESH = "fingertip_capsule.obj"
SPHERE_MESH = "fingertip_sphere.obj"
IDENTITY = [1.0, 0.0, 0.0, 0.0]


def tip_mesh():
    # capsule with its distal sphere centred on the tip point of the last link
    return capsule_mesh(RADIUS, 0.01).transformed([0.04, 0.0, 0.0])


def sphere_tip_mesh():
    # near-spherical tip: a capsule with a vanishing cylindrical section
    return capsule_mesh(RADIUS, 1e-4, n_seg=24, n_ring=12).transformed(TIP)


def make_finger(name, base, heading, axes, lengths, limits, du=0.1):
    base_quat = quat_from_axis_angle([0, 0, 1], heading)
    joints = []
    for k, (axis, lim) in enumerate(zip(axes, limits)):
        origin = [0.0, 0.0, 0.0] if k == 0 else [lengths[k - 1], 0.0, 0.0]
        L = lengths[k] if k < len(lengths) else 0.05
        joints.append(
            Joint(
                name=f"{name}_joint_{k}",
                axis=axis,
                origin_xyz=origin,
                origin_quat=IDENTITY,
                lower=lim[0],
                upper=lim[1],
                u_lower=-du,
                u_upper=du,
                mass=0.02 if L > 0 else 0.0,
                com=[0.5 * L, 0.0, 0.0],
                link=f"{name}_link_{k}",
            )
        )
    return Finger(name, base, base_quat, joints)


def planar_finger(name, base, heading):
    lim = [(-1.5, 1.5), (-2.8, 0.3)]
    return make_finger(name, base, heading, [[0, 0, 1], [0, 0, 1]], [0.05, 0.05], lim, du=0.25)


def spatial_finger(name, base, heading):
    lim = [(-1.2, 1.2), (-0.8, 1.9), (-0.5, 2.0)]
    return make_finger(name, base, heading, [[0, 0, 1], [0, 1, 0], [0, 1, 0]], [0.0, 0.05, 0.05], lim)


def solve_ik(chain, finger, target, guesses, rng):
    sl = chain.finger_slices[finger]
    link = sl.stop - 1
    best = None
    for g in guesses + [None] * 6:
        q = np.zeros(chain.n_q)
        q[sl] = g if g is not None else rng.uniform(chain.q_min[sl], chain.q_max[sl])
        for _ in range(200):
            J = point_jacobian(chain, q, link, TIP)[:, sl]
            fk = forward_kinematics(chain, q[None])
            p = fk.link_rot[0, link] @ TIP + fk.link_pos[0, link]
            e = target - p
            if np.linalg.norm(e) < 1e-12:
                break
            dq = J.T @ np.linalg.solve(J @ J.T + 1e-8 * np.eye(3), e)
            q[sl] = np.clip(q[sl] + dq, chain.q_min[sl] + 1e-3, chain.q_max[sl] - 1e-3)
        err = np.linalg.norm(e)
        if err < 1e-9 and (best is None or np.linalg.norm(q[sl]) < np.linalg.norm(best[sl])):
            best = q.copy()
        if best is not None and g is not None:
            break
    if best is None:
        raise RuntimeError(f"IK failed for finger {finger}")
    return best


def place_grasp(chain, scene, pose, targets, guesses, mesh, seed=0):
    """IK each tip centre onto ``contact + radius * outward normal`` and make samples touch."""
    rng = np.random.default_rng(seed)
    body = SampledBody.from_meshes(chain, [(i, chain.finger_slices[i].stop - 1, mesh) for i in range(len(chain.fingers))], n=512, seed=0)
    q = np.zeros(chain.n_q)
    for i, c in enumerate(targets):
        c = np.asarray(c, float)
        g = scene_sdf_gradients(c[None], scene, pose).d_point[0]
        n = g / np.linalg.norm(g)
        tgt = c + RADIUS * n
        for k in range(3):
            try:
                qi = solve_ik(chain, i, tgt, [guesses[i]], rng)
            except RuntimeError:
                if k == 0:
                    raise
                break  # the gap correction is not reachable (planar fingers)
            q[chain.finger_slices[i]] = qi[chain.finger_slices[i]]
            d = hard_contacts(body, chain, q, scene, pose)[i]["distance"]
            tgt = tgt - d * n
    hc = hard_contacts(body, chain, q, scene, pose)
    return q, [h["distance"] for h in hc], [h["point"] for h in hc]


def softmin_gaps(chain, scene, pose, q, mesh):
    body = SampledBody.from_meshes(chain, [(i, chain.finger_slices[i].stop - 1, mesh) for i in range(len(chain.fingers))], n=512, seed=0)
    return [float(contact_estimate(body, i, chain, q[None], scene, pose, 1000.0).distance[0]) for i in range(len(chain.fingers))]


def box(half, xyz=(0, 0, 0), quat=IDENTITY):
    return Primitive.box(half, xyz, quat).to_dict()


def cyl(r, half, xyz=(0, 0, 0)):
    return Primitive.cylinder(r, half, xyz).to_dict()


def write_task(name, chain, primitives, pose, targets, guesses, goal, cfg, mesh=MESH, sink=False):
    scene = SdfScene.from_list(primitives)
    shape = sphere_tip_mesh() if mesh == SPHERE_MESH else tip_mesh()
    q, dist, pts = place_grasp(chain, scene, pose, targets, guesses, shape)
    if sink:
        # planar fingers cannot close the softmin gap themselves: lower their bases
        gaps = softmin_gaps(chain, scene, pose, q, shape)
        d = chain.to_dict()
        for f, gap in zip(d["fingers"], gaps):
            f["base"]["xyz"] = (np.asarray(f["base"]["xyz"], float) - [0.0, 0.0, gap]).tolist()
        chain = KinematicChain.from_dict(d)
        targets = [np.asarray(c, float) - [0.0, 0.0, gap] for c, gap in zip(targets, gaps)]
        q, dist, pts = place_grasp(chain, scene, pose, targets, guesses, shape)
        print(f"{name}: softmin gaps after lowering {np.round(softmin_gaps(chain, scene, pose, q, shape), 7).tolist()}")
    print(f"{name}: q={np.round(q, 3).tolist()} contact gaps={np.round(dist, 6).tolist()}")
    chain_file = f"hand_{name}.json"
    (OUT / chain_file).write_text(json.dumps(chain.to_dict(), indent=2) + "\n")
    tips = [{"finger": f.name, "link": f.joints[-1].link, "mesh": mesh, "tip_point": TIP.tolist()} for f in chain.fingers]
    data = {
        "name": name,
        "chain": chain_file,
        "fingertips": tips,
        "initial_state": {"q": np.round(q, 10).tolist(), "x": list(map(float, pose.x)), "theta_wxyz": list(map(float, pose.theta))},
        "goal": {"x": list(map(float, goal[0])), "theta_wxyz": list(map(float, goal[1]))},
    }
    data.update(cfg)
    data["object"]["primitives"] = primitives
    (OUT / f"{name}.json").write_text(json.dumps(data, indent=2) + "\n")


# a planned contact has softmin distance 0, i.e. a ~1 mm hard-min overlap; the plant accepts it
PLANT = {"penetration_tol": 1.5e-3}
# spread the turn over the horizon so each executed step stays within the rolling linearization
SMOOTH = [1.0, 100.0, 20.0]


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    save_obj(tip_mesh(), OUT / MESH)
    z = [0.0, 0.0, 1.0]

    # valve: planar two-link fingers resting on the top faces of opposite arms; the
    # turn moves each contact within the face plane
    save_obj(sphere_tip_mesh(), OUT / SPHERE_MESH)
    chain = KinematicChain(
        [
            planar_finger("index", [0.11, 0.03, 0.02], -1.65),
            planar_finger("thumb", [-0.11, -0.03, 0.02], np.pi - 1.65),
        ],
        name="planar_hand",
    )
    prims = [box([0.1, 0.01, 0.01]), box([0.01, 0.1, 0.01])]
    pose = ObjectPose(np.zeros(3), np.array(IDENTITY))
    goal = (np.zeros(3), quat_from_axis_angle(z, np.pi / 4))
    write_task(
        "valve_turning",
        chain,
        prims,
        pose,
        [[0.06, 0.0, 0.01], [-0.06, 0.0, 0.01]],
        [[0.0, -1.9], [0.0, -1.9]],
        goal,
        {
            "description": "Turn a cross-shaped valve (two 2x2x20 cm cuboids, revolute about z) by 45 degrees with two planar two-link fingers.",
            "object": {"mass": 0.1, "joint": {"type": "revolute", "axis": z, "anchor": [0.0, 0.0, 0.0]}},
            "horizon": 10,
            "constraints": {"f_min": 0.05},
            "cost": {"w_x": 0.0, "w_theta": 1.0},
            "plant": PLANT,
            "solver": {"warmup_iters": 100, "online_iters": 30, "particles": 1},
            "metric": {"type": "joint_angle", "axis": z, "goal_angle": float(np.pi / 4), "validity": "none"},
        },
        mesh=SPHERE_MESH,
        sink=True,
    )

    # cuboid turning: hand above, thumb and middle antipodal, index on the +x face
    chain = KinematicChain(
        [
            spatial_finger("index", [0.08, 0.0, 0.05], np.pi),
            spatial_finger("middle", [0.0, 0.09, 0.07], -np.pi / 2),
            spatial_finger("thumb", [0.0, -0.09, 0.07], np.pi / 2),
        ]
    )
    prims = [box([0.02, 0.02, 0.05])]
    goal = (np.zeros(3), quat_from_axis_angle([0, 1, 0], -np.pi / 3))
    write_task(
        "cuboid_turning",
        chain,
        prims,
        pose,
        [[0.02, 0.0, 0.01], [0.0, 0.02, 0.0], [0.0, -0.02, 0.0]],
        [[0.0, 0.3, 1.2], [0.0, 0.3, 1.0], [0.0, 0.3, 1.0]],
        goal,
        {
            "description": "Turn a free 4x4x10 cm cuboid by 60 degrees about y with a downward-facing three-finger hand.",
            "object": {"mass": 0.1},
            "horizon": 10,
            "constraints": {"f_min": 0.1},
            "cost": {"w_x": 1.0, "w_theta": 1.0, "smooth": SMOOTH},
            "plant": PLANT,
            "solver": {"warmup_iters": 200, "online_iters": 30, "particles": 1},
            "metric": {"type": "orientation", "validity": "no_drop"},
        },
    )

    # screwdriver: spherical joint at the shaft bottom, index on top of the handle
    chain = KinematicChain(
        [
            spatial_finger("index", [0.07, 0.0, 0.27], np.pi),
            spatial_finger("middle", [0.0, 0.09, 0.2], -np.pi / 2),
            spatial_finger("thumb", [0.0, -0.09, 0.2], np.pi / 2),
        ]
    )
    prims = [cyl(0.005, 0.05, [0, 0, 0.05]), cyl(0.02, 0.05, [0, 0, 0.15])]
    goal = (np.zeros(3), quat_from_axis_angle(z, np.pi / 2))
    write_task(
        "screwdriver_turning",
        chain,
        prims,
        pose,
        [[0.0, 0.0, 0.2], [0.0, 0.02, 0.15], [0.0, -0.02, 0.15]],
        [[0.0, 0.3, 1.2], [0.0, 0.3, 1.0], [0.0, 0.3, 1.0]],
        goal,
        {
            "description": "Turn a screwdriver (handle r=2 cm, shaft r=0.5 cm, both 10 cm) by 90 degrees about its axis while keeping the top in place.",
            "object": {"mass": 0.1, "com": [0.0, 0.0, 0.12], "joint": {"type": "spherical", "anchor": [0.0, 0.0, 0.0]}},
            "horizon": 12,
            "constraints": {
                "families": ["contact", "rolling", "torque", "wrench", "friction", "min_force", "region"],
                "ablation_families": ["tracking", "torque", "wrench", "friction", "min_force"],
                "f_min": 0.05,
                "region": {"finger": 0, "anchor": [0.0, 0.0, 0.2], "radius": 0.02},
            },
            "cost": {"w_x": 0.0, "w_theta": 1.0, "smooth": SMOOTH},
            "plant": PLANT,
            "solver": {"warmup_iters": 300, "online_iters": 50, "particles": 1},
            "metric": {"type": "orientation", "validity": "top_displacement", "top_point": [0.0, 0.0, 0.2], "max_top_displacement": 0.02},
        },
    )

    # cuboid alignment: 4x4x30 cm peg tilted 45 degrees against a box
    tilt = quat_from_axis_angle([0, 1, 0], np.pi / 4)
    xc = np.array([0.09, 0.0, 0.1])
    pose_ca = ObjectPose(xc, tilt)
    env = [box([0.05, 0.1, 0.1], [-0.08, 0.0, 0.0])]
    R = pose_ca.rotation
    chain = KinematicChain(
        [
            spatial_finger("index", list(xc + R @ [0.0, 0.0, 0.15] + [0.06, 0.0, 0.06]), np.pi),
            spatial_finger("middle", list(xc + R @ [0.0, 0.0, 0.08] + [0.0, 0.09, 0.07]), -np.pi / 2),
            spatial_finger("thumb", list(xc + R @ [0.0, 0.0, 0.08] + [0.0, -0.09, 0.07]), np.pi / 2),
        ]
    )
    write_task(
        "cuboid_alignment",
        chain,
        [box([0.02, 0.02, 0.15])],
        pose_ca,
        [xc + R @ [0.0, 0.0, 0.15], xc + R @ [0.0, 0.02, 0.08], xc + R @ [0.0, -0.02, 0.08]],
        [[0.0, 0.3, 1.2], [0.0, 0.3, 1.0], [0.0, 0.3, 1.0]],
        (xc, np.array(IDENTITY)),
        {
            "description": "Rotate a 4x4x30 cm peg leaning on a box by about 45 degrees to upright, using the box as an extrinsic contact.",
            "object": {"mass": 0.1, "environment": env, "environment_samples": 256},
            "horizon": 10,
            "constraints": {
                "families": ["contact", "rolling", "torque", "wrench", "friction", "min_force", "env_contact"],
                "ablation_families": ["tracking", "torque", "wrench", "friction", "min_force", "env_contact"],
                "f_min": 0.05,
            },
            "cost": {"w_x": 0.0, "w_theta": 1.0, "smooth": SMOOTH},
            "plant": PLANT,
            "solver": {"warmup_iters": 300, "online_iters": 50, "particles": 1},
            "metric": {"type": "orientation", "validity": "no_drop"},
        },
    )

    # complex reorientation: thin bar with two cross pieces, about 15x4x1 cm
    chain = KinematicChain(
        [
            spatial_finger("index", [0.1, 0.0, 0.08], np.pi),
            spatial_finger("middle", [-0.03, 0.07, 0.06], -np.pi / 2),
            spatial_finger("thumb", [-0.03, -0.07, 0.06], np.pi / 2),
        ]
    )
    prims = [box([0.075, 0.01, 0.005]), box([0.01, 0.02, 0.005], [0.05, 0, 0]), box([0.01, 0.02, 0.005], [-0.05, 0, 0])]
    goal = (np.zeros(3), quat_from_axis_angle([1, 0, 0], np.pi / 4))
    write_task(
        "complex_reorientation",
        chain,
        prims,
        pose,
        [[0.05, 0.0, 0.005], [-0.03, 0.01, 0.0], [-0.03, -0.01, 0.0]],
        [[0.0, 0.3, 1.2], [0.0, 0.3, 1.0], [0.0, 0.3, 1.0]],
        goal,
        {
            "description": "Reorient a thin composite object (bar plus two cross pieces) by 45 degrees about its long axis.",
            "object": {"mass": 0.05},
            "horizon": 10,
            "constraints": {"f_min": 0.05},
            "cost": {"w_x": 1.0, "w_theta": 1.0, "smooth": SMOOTH},
            "plant": PLANT,
            "solver": {"warmup_iters": 200, "online_iters": 30, "particles": 1},
            "metric": {"type": "orientation", "validity": "no_drop"},
        },
    )


if __name__ == "__main__":
    main()
