import numpy as np
import numpy.testing as npt
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_diff, perturb_quat, random_quat
from dexroll.body import FingerSamples, SampledBody, contact_estimate, surface_samples_of_primitive
from dexroll.constraints import (
    ObjectModel,
    ablation_tracking,
    angular_velocity,
    contact,
    env_contact,
    env_estimate,
    friction_cone,
    friction_matrix,
    min_force,
    object_wrench_balance,
    region,
    robot_torque_balance,
    rolling,
    tangent_projection,
)
from dexroll.geometry import ObjectPose, Primitive, SdfScene
from dexroll.kinematics import KinematicChain, forward_kinematics, gravity_torque
from dexroll.rotations import quat_from_axis_angle, quat_mul, quat_to_matrix
from oracles import (
    least_squares_grasp_forces,
    point_contacts,
    pyramid_member,
    random_cube_surface_point,
    relative_spin,
    rolling_residuals,
)

CUBE = SdfScene([Primitive.box([0.02, 0.02, 0.02])])
unit3 = arrays(np.float64, 3, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 1e-3).map(lambda v: v / np.linalg.norm(v))


def rel_err(a, b, floor=1e-4):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), floor)


def sphere_finger(center_local, radius=0.01, n=512, axis=(0, 0, 1), base=(0, 0, 0)):
    chain = KinematicChain.from_dict({"fingers": [{"name": "f", "base": {"xyz": list(base)}, "joints": [{"name": "j", "axis": list(axis), "limits": [-4, 4]}]}]})
    pts = surface_samples_of_primitive(Primitive.sphere(radius, position=center_local), n, 0)
    return chain, SampledBody([FingerSamples(0, pts, np.zeros(n, dtype=int))])


class Grasp:
    """A perturbed transition of a shipped task with random finger forces."""

    def __init__(self, task, rng):
        s = task.spec
        st0 = task.initial_state
        self.task, self.spec = task, s
        self.q0 = np.clip(st0.q + rng.normal(0, 0.03, s.chain.n_q), s.chain.q_min, s.chain.q_max)
        self.q1 = self.q0 + rng.normal(0, 0.02, s.chain.n_q)
        self.x0 = st0.x + rng.normal(0, 0.002, 3)
        self.x1 = self.x0 + rng.normal(0, 0.002, 3)
        self.th0 = perturb_quat(st0.theta, rng.normal(0, 0.05, 3))
        self.th1 = perturb_quat(self.th0, rng.normal(0, 0.05, 3))
        self.u = rng.normal(0, 0.02, s.chain.n_q)
        self.f = rng.normal(0, 1.0, (len(s.body), 3))

    def est(self, i, q=None, x=None, th=None):
        q = self.q0 if q is None else q
        x = self.x0 if x is None else x
        th = self.th0 if th is None else th
        s = self.spec
        return contact_estimate(s.body, i, s.chain, q, s.model.scene, ObjectPose(x, th), s.delta)

    def ests(self, **kw):
        return [self.est(i, **kw) for i in range(len(self.spec.body))]

    def smooth(self):
        return not any(e.nonsmooth[0] for e in self.ests())


def smooth_grasps(task, rng, n):
    out = []
    while len(out) < n:
        g = Grasp(task, rng)
        if g.smooth():
            out.append(g)
    return out


class TestContact:
    def test_touching_within_log_sum_exp_bound(self):
        chain, body = sphere_finger([0.03, 0.0, 0.0])
        est = contact_estimate(body, 0, chain, [0.0], CUBE, ObjectPose.identity(), 1000.0)
        assert abs(contact(est).residual[0, 0]) <= np.log(512) / 1000

    def test_far_finger_matches_brute_force_min(self):
        chain, body = sphere_finger([0.08, 0.0, 0.0])
        est = contact_estimate(body, 0, chain, [0.0], CUBE, ObjectPose.identity(), 1000.0)
        # every sample is outside the cube, where the distance is the norm of the clipped excess
        brute = np.min(np.linalg.norm(np.maximum(np.abs(body.fingers[0].points) - 0.02, 0.0), axis=1))
        assert brute == pytest.approx(0.05, abs=1e-3)
        assert contact(est).residual[0, 0] == pytest.approx(brute, abs=np.log(512) / 1000)

    def test_penetration_is_negative(self):
        chain, body = sphere_finger([0.025, 0.0, 0.0])
        est = contact_estimate(body, 0, chain, [0.0], CUBE, ObjectPose.identity(), 1000.0)
        assert contact(est).residual[0, 0] < 0


class TestAngularVelocity:
    def test_static_is_zero(self, rng):
        th = random_quat(rng)
        npt.assert_allclose(angular_velocity(th, th, 0.1), 0.0, atol=1e-14)

    def test_quarter_turn_about_z(self):
        w = angular_velocity(np.array([1.0, 0, 0, 0]), quat_from_axis_angle([0, 0, 1], np.pi / 2), 1.0)
        npt.assert_allclose(w, [0, 0, np.pi / 2], atol=1e-15)

    def test_matches_rotation_matrix_difference(self, rng):
        for _ in range(20):
            th0 = random_quat(rng)
            eps = 1e-4
            th1 = quat_mul(quat_from_axis_angle(rng.normal(size=3) / 1.0, eps), th0)
            R0, R1 = quat_to_matrix(th0), quat_to_matrix(th1)
            W = (R1 - R0) @ R0.T
            W = 0.5 * (W - W.T)
            w_mat = np.array([W[2, 1], W[0, 2], W[1, 0]])
            assert np.linalg.norm(angular_velocity(th0, th1, 1.0) - w_mat) < 10 * eps**2

    def test_half_turn_rejected(self):
        with pytest.raises(ValueError):
            angular_velocity(np.array([1.0, 0, 0, 0]), quat_from_axis_angle([1, 0, 0], np.pi), 0.1)


class TestTangentProjection:
    def test_z_normal_spans_xy(self):
        P = tangent_projection(np.array([0.0, 0, 1]))
        npt.assert_allclose(P[:, 2], 0.0, atol=1e-15)
        npt.assert_allclose(P @ P.T, np.eye(2), atol=1e-15)

    @given(unit3)
    def test_orthonormal_and_orthogonal(self, n):
        P = tangent_projection(n)
        npt.assert_allclose(P @ P.T, np.eye(2), atol=1e-12)
        npt.assert_allclose(P @ n, 0.0, atol=1e-12)

    @given(unit3, arrays(np.float64, 3, elements=st.floats(-10, 10)))
    def test_pythagoras(self, n, v):
        P = tangent_projection(n)
        assert np.sum((P @ v) ** 2) + (n @ v) ** 2 == pytest.approx(v @ v, rel=1e-12, abs=1e-12)

    def test_zero_normal_rejected(self):
        with pytest.raises(ValueError):
            tangent_projection(np.zeros(3))

    def test_least_aligned_axis_construction(self):
        n = np.array([0.8, 0.1, 0.6])
        n /= np.linalg.norm(n)
        # y is least aligned: t1 is y with its normal component removed
        t1 = np.array([0, 1.0, 0]) - n[1] * n
        t1 /= np.linalg.norm(t1)
        P = tangent_projection(n)
        npt.assert_allclose(P[0], t1, atol=1e-15)
        npt.assert_allclose(P[1], np.cross(n, t1), atol=1e-15)


class TestRolling:
    def test_static_robot_and_object(self, tasks):
        task = tasks["cuboid_turning"]
        g = Grasp(task, np.random.default_rng(1))
        ev = rolling(g.est(0), g.q0[None], g.q0[None], g.x0[None], g.th0[None], g.x0[None], g.th0[None], 0.1)
        npt.assert_allclose(ev.residual, 0.0, atol=1e-15)

    def test_no_slip_rolling_on_rotating_plate(self):
        # about the fastest object rotation of the shipped tasks (60 deg in 1 s)
        assert rolling_residuals(omega=1.05, steps=20).max() < 1e-4

    @pytest.mark.parametrize("v", [0.01, 0.05])
    def test_injected_slip_is_measured(self, v):
        r = rolling_residuals(omega=1.05, slip=v, steps=20)
        npt.assert_allclose(r / v, 1.0, atol=0.01)

    def test_sampled_fingertip_apparent_slip_is_spin_times_softmin_offset(self):
        # the softmin point sits about 1/delta inside both surfaces
        delta = 1000.0
        r = rolling_residuals(omega=0.5, delta=delta, steps=20, tip="sampled")
        assert r.max() < 1.5 * relative_spin(0.5, steps=20) / delta

    def test_exactly_affine_in_next_state(self, tasks, rng):
        task = tasks["cuboid_turning"]
        g = Grasp(task, rng)
        est = g.est(0)
        res = lambda a: rolling(est, g.q0[None], (g.q0 + a * (g.q1 - g.q0))[None], g.x0[None], g.th0[None], (g.x0 + a * (g.x1 - g.x0))[None], g.th1[None], 0.1).residual
        r0, r1, r2 = res(0.0), res(1.0), res(2.0)
        npt.assert_allclose(r2 - r0, 2 * (r1 - r0), atol=1e-12)

    @pytest.mark.parametrize("name", ["cuboid_turning", "valve_turning"])
    def test_jacobians_against_differences(self, tasks, rng, name):
        task = tasks[name]
        dt = task.spec.dt
        for g in smooth_grasps(task, rng, 4):
            for i in range(len(task.spec.body)):
                ev = rolling(g.est(i), g.q0[None], g.q1[None], g.x0[None], g.th0[None], g.x1[None], g.th1[None], dt)
                f_q0 = lambda y: rolling(g.est(i, q=y), y[None], g.q1[None], g.x0[None], g.th0[None], g.x1[None], g.th1[None], dt).residual[0]
                f_q1 = lambda y: rolling(g.est(i), g.q0[None], y[None], g.x0[None], g.th0[None], g.x1[None], g.th1[None], dt).residual[0]

                def f_o0(d):
                    x, th = g.x0 + d[:3], perturb_quat(g.th0, d[3:])
                    return rolling(g.est(i, x=x, th=th), g.q0[None], g.q1[None], x[None], th[None], g.x1[None], g.th1[None], dt).residual[0]

                def f_o1(d):
                    x, th = g.x1 + d[:3], perturb_quat(g.th1, d[3:])
                    return rolling(g.est(i), g.q0[None], g.q1[None], g.x0[None], g.th0[None], x[None], th[None], dt).residual[0]

                assert rel_err(ev.jac["q0"][0], central_diff(f_q0, g.q0)) < 1e-2
                assert rel_err(ev.jac["q1"][0], central_diff(f_q1, g.q1)) < 1e-4
                assert rel_err(ev.jac["o0"][0], central_diff(f_o0, np.zeros(6))) < 1e-4
                assert rel_err(ev.jac["o1"][0], central_diff(f_o1, np.zeros(6))) < 1e-4


class TestRobotTorqueBalance:
    def test_free_motion_balances(self, tasks, rng):
        task = tasks["valve_turning"]
        g = Grasp(task, rng)
        chain = task.spec.chain
        ev = robot_torque_balance(chain, 3.0, g.q0[None], (g.q0 + g.u)[None], g.u[None], np.zeros((1, len(task.spec.body), 3)), g.ests())
        npt.assert_allclose(ev.residual, 0.0, atol=1e-15)

    def test_zero_iff_deflected_by_contact_torque(self, tasks, rng):
        task = tasks["valve_turning"]
        g = Grasp(task, rng)
        ests = g.ests()
        Kp = 3.0
        jtf = sum(e.jacobian[0].T @ g.f[i] for i, e in enumerate(ests))
        q1 = g.q0 + g.u - jtf / Kp
        ev = robot_torque_balance(task.spec.chain, Kp, g.q0[None], q1[None], g.u[None], g.f[None], ests)
        npt.assert_allclose(ev.residual, 0.0, atol=1e-14)
        ev = robot_torque_balance(task.spec.chain, Kp, g.q0[None], (q1 + 1e-3)[None], g.u[None], g.f[None], ests)
        assert np.all(np.abs(ev.residual) > 1e-4)

    def test_matches_direct_recomputation(self, rng):
        spec = {"fingers": [{"name": "f", "joints": [{"name": f"j{k}", "axis": [0, 1, 0], "origin": {"xyz": [0.04 * (k > 0), 0, 0]}, "limits": [-2, 2], "link": {"mass": 0.05, "com": [0.02, 0, 0]}} for k in range(2)]}]}
        chain = KinematicChain.from_dict(spec)
        pts = surface_samples_of_primitive(Primitive.sphere(0.01, position=(0.04, 0, 0)), 64, 0)
        body = SampledBody([FingerSamples(0, pts, np.ones(64, dtype=int))])
        q0, q1, u = rng.uniform(-1, 1, (3, 2))
        f = rng.normal(size=(1, 1, 3))
        Kp = np.array([2.0, 4.0])
        est = contact_estimate(body, 0, chain, q0, CUBE, ObjectPose([0.1, 0, 0], [1, 0, 0, 0]), 1000.0)
        ev = robot_torque_balance(chain, Kp, q0[None], q1[None], u[None], f, [est])
        # naive oracle: weighted point Jacobians by explicit cross products
        fk = forward_kinematics(chain, q0)
        pw = pts @ fk.link_rot[1].T + fk.link_pos[1]
        Jc = sum(h * np.stack([np.cross(fk.joint_axis[k], p - fk.joint_pos[k]) for k in range(2)], axis=1) for h, p in zip(est.weights[0], pw))
        expected = Kp * (q1 - q0 - u) - gravity_torque(chain, q0) + Jc.T @ f[0, 0]
        npt.assert_allclose(ev.residual[0], expected, atol=1e-12)

    def test_jacobians_against_differences(self, tasks, rng):
        task = tasks["cuboid_turning"]
        chain, Kp = task.spec.chain, task.spec.Kp
        for g in smooth_grasps(task, rng, 3):
            def res(q0=g.q0, q1=g.q1, u=g.u, f=g.f, x=g.x0, th=g.th0):
                return robot_torque_balance(chain, Kp, q0[None], q1[None], u[None], f[None], g.ests(q=q0, x=x, th=th)).residual[0]

            ev = robot_torque_balance(chain, Kp, g.q0[None], g.q1[None], g.u[None], g.f[None], g.ests())
            assert rel_err(ev.jac["q0"][0], central_diff(lambda y: res(q0=y), g.q0)) < 1e-4
            assert rel_err(ev.jac["o0"][0], central_diff(lambda d: res(x=g.x0 + d[:3], th=perturb_quat(g.th0, d[3:])), np.zeros(6))) < 1e-4
            assert rel_err(ev.jac["q1"][0], central_diff(lambda y: res(q1=y), g.q1)) < 1e-4
            assert rel_err(ev.jac["u"][0], central_diff(lambda y: res(u=y), g.u)) < 1e-4
            for i in range(len(g.f)):
                def with_fi(y, i=i):
                    f = g.f.copy()
                    f[i] = y
                    return res(f=f)

                assert rel_err(ev.jac[f"f{i}"][0], central_diff(with_fi, g.f[i])) < 1e-4


class TestObjectWrenchBalance:
    def test_resting_support_through_com(self):
        model = ObjectModel(CUBE, mass=0.1)
        env = point_contacts([[0.0, 0.0, -0.02]])[0]
        ev = object_wrench_balance(model, np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), np.zeros((1, 0, 3)), [], fe=np.array([[0, 0, 0.98]]), env=env)
        npt.assert_allclose(ev.residual, 0.0, atol=1e-15)
        # the environment force that balances the weight alone
        base = object_wrench_balance(model, np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), np.zeros((1, 0, 3)), [], fe=np.zeros((1, 3)), env=env)
        fe, *_ = np.linalg.lstsq(base.jac["fe"][0], -base.residual[0], rcond=None)
        npt.assert_allclose(fe, [0.0, 0.0, 0.98], atol=1e-15)

    def test_antipodal_grasp_with_least_squares_forces(self, rng):
        model = ObjectModel(CUBE, mass=0.1)
        for _ in range(50):
            p = random_cube_surface_point(rng, 0.02)
            pts = np.array([p, -p])
            f, oracle_res = least_squares_grasp_forces(pts, np.zeros(3), 0.1, np.zeros(3))
            assert oracle_res < 1e-12
            ev = object_wrench_balance(model, np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), f[None], point_contacts(pts))
            assert np.abs(ev.residual).max() < 1e-9
            assert f[:, 2].sum() == pytest.approx(0.98, abs=1e-12)

    def test_three_contact_grasp_with_offset_com(self, rng):
        for _ in range(50):
            com = rng.normal(0, 0.005, 3)
            model = ObjectModel(CUBE, mass=0.1, com=com)
            x = rng.normal(0, 0.05, 3)
            th = random_quat(rng)
            R = quat_to_matrix(th)
            pts = np.array([R @ random_cube_surface_point(rng, 0.02) + x for _ in range(3)])
            f, _ = least_squares_grasp_forces(pts, x, 0.1, R @ com)
            ev = object_wrench_balance(model, x[None], th[None], f[None], point_contacts(pts))
            assert np.abs(ev.residual).max() < 1e-9

    def test_finger_relabeling_symmetry(self, rng):
        model = ObjectModel(CUBE, mass=0.1, com=[0.003, 0, 0])
        pts = rng.normal(0, 0.02, (3, 3))
        f = rng.normal(size=(3, 3))
        th = random_quat(rng)[None]
        a = object_wrench_balance(model, np.zeros((1, 3)), th, f[None], point_contacts(pts)).residual
        perm = [2, 0, 1]
        b = object_wrench_balance(model, np.zeros((1, 3)), th, f[perm][None], point_contacts(pts[perm])).residual
        npt.assert_allclose(a, b, atol=1e-15)

    def test_massless_unloaded_object(self, rng):
        model = ObjectModel(CUBE, mass=0.0)
        ev = object_wrench_balance(model, np.zeros((1, 3)), random_quat(rng)[None], np.zeros((1, 2, 3)), point_contacts(rng.normal(size=(2, 3))))
        npt.assert_array_equal(ev.residual, 0.0)

    def test_revolute_keeps_axis_torque_only(self, rng):
        model = ObjectModel(CUBE, mass=0.1, joint="revolute", axis=[0, 0, 1], anchor=[0, 0, 0])
        pts = rng.normal(0, 0.02, (2, 3))
        f = rng.normal(size=(2, 3))
        ev = object_wrench_balance(model, np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), f[None], point_contacts(pts))
        assert ev.dim == 1
        assert ev.residual[0, 0] == pytest.approx(np.cross(pts, f).sum(axis=0)[2], abs=1e-15)

    def test_spherical_keeps_torques(self, rng):
        model = ObjectModel(CUBE, mass=0.1, joint="spherical", anchor=[0, 0, 0])
        pts = rng.normal(0, 0.02, (2, 3))
        f = rng.normal(size=(2, 3))
        ev = object_wrench_balance(model, np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), f[None], point_contacts(pts))
        npt.assert_allclose(ev.residual[0], np.cross(pts, f).sum(axis=0), atol=1e-15)

    def test_environment_force_needs_point(self):
        with pytest.raises(ValueError):
            object_wrench_balance(ObjectModel(CUBE), np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), np.zeros((1, 0, 3)), [], fe=np.zeros((1, 3)))

    def test_jacobians_against_differences(self, tasks, rng):
        task = tasks["cuboid_turning"]
        model = task.spec.model
        for g in smooth_grasps(task, rng, 3):
            def res(x=g.x0, th=g.th0, th1=g.th1, q=g.q0, f=g.f):
                return object_wrench_balance(model, x[None], th1[None], f[None], g.ests(q=q, x=x, th=th)).residual[0]

            ev = object_wrench_balance(model, g.x0[None], g.th1[None], g.f[None], g.ests())
            assert rel_err(ev.jac["q0"][0], central_diff(lambda y: res(q=y), g.q0)) < 1e-4
            assert rel_err(ev.jac["o0"][0], central_diff(lambda d: res(x=g.x0 + d[:3], th=perturb_quat(g.th0, d[3:])), np.zeros(6))) < 1e-4
            assert rel_err(ev.jac["o1"][0], central_diff(lambda d: res(th1=perturb_quat(g.th1, d[3:])), np.zeros(6))) < 1e-4
            for i in range(len(g.f)):
                def with_fi(y, i=i):
                    f = g.f.copy()
                    f[i] = y
                    return res(f=f)

                assert rel_err(ev.jac[f"f{i}"][0], central_diff(with_fi, g.f[i])) < 1e-4


class TestFrictionCone:
    def test_pure_normal_force_strictly_feasible(self):
        n = np.array([0.0, 0.6, 0.8])
        ev = friction_cone(2.0 * n, n, 0.5)
        npt.assert_allclose(ev.residual[:4], -0.5 * 2.0, atol=1e-15)
        assert np.all(ev.residual < 0)

    def test_boundary_force(self):
        n = np.array([0.0, 0.0, 1.0])
        t1 = tangent_projection(n)[0]
        ev = friction_cone(0.5 * 3.0 * t1 + 3.0 * n, n, 0.5)
        assert ev.residual[0] == pytest.approx(0.0, abs=1e-15)

    def test_agrees_with_membership_oracle(self, rng):
        n_s = 20000
        n = rng.normal(size=(n_s, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        f = rng.normal(size=(n_s, 3))
        mu = rng.uniform(0.2, 1.5, n_s)
        feas = np.all(np.einsum("bri,bi->br", friction_matrix(n, mu[:, None]), f) <= 0, axis=1)
        oracle = np.array([pyramid_member(f[k], n[k], mu[k]) for k in range(n_s)])
        npt.assert_array_equal(feas, oracle)
        fn = np.einsum("bi,bi->b", n, f)[feas]
        ft = np.linalg.norm(f[feas] - fn[:, None] * n[feas], axis=1)
        assert np.all(ft <= np.sqrt(2) * mu[feas] * fn + 1e-12)

    def test_normal_derivative_chain(self, tasks, rng):
        task = tasks["cuboid_turning"]
        for g in smooth_grasps(task, rng, 3):
            e = g.est(0)
            ev = friction_cone(g.f[:1], -e.normal, 0.9, {"q0": -e.d_normal_dq, "o0": -e.d_normal_do})
            fd_q = central_diff(lambda y: friction_cone(g.f[:1], -g.est(0, q=y).normal, 0.9).residual[0], g.q0)
            fd_o = central_diff(lambda d: friction_cone(g.f[:1], -g.est(0, x=g.x0 + d[:3], th=perturb_quat(g.th0, d[3:])).normal, 0.9).residual[0], np.zeros(6))
            assert rel_err(ev.jac["q0"][0], fd_q) < 1e-4
            assert rel_err(ev.jac["o0"][0], fd_o) < 1e-4
            npt.assert_allclose(ev.jac["f"][0], central_diff(lambda y: friction_cone(y[None], -e.normal, 0.9).residual[0], g.f[0]), atol=1e-8)

    def test_nonpositive_mu_rejected(self):
        with pytest.raises(ValueError):
            friction_cone(np.ones(3), np.array([0, 0, 1.0]), 0.0)


class TestMinForce:
    @given(arrays(np.float64, 3, elements=st.floats(-5, 5)))
    def test_zero_threshold_always_feasible(self, f):
        assert min_force(f, 0.0).residual[0] <= 0

    def test_at_threshold(self):
        assert min_force(np.array([0.0, 0.6, 0.8]), 1.0).residual[0] == pytest.approx(0.0, abs=1e-6)

    def test_zero_force_infeasible(self):
        # the smoothed norm of a zero force is the smoothing epsilon, 1e-6 N
        assert min_force(np.zeros(3), 1.0).residual[0] == pytest.approx(1.0 - 1e-6, abs=1e-15)

    def test_gradient(self, rng):
        f = rng.normal(size=3)
        npt.assert_allclose(min_force(f, 0.5).jac["f"], central_diff(lambda y: min_force(y, 0.5).residual, f), atol=1e-9)


class TestEnvironmentContact:
    peg = SdfScene([Primitive.box([0.01, 0.01, 0.04])])
    table = SdfScene([Primitive.box([0.2, 0.2, 0.05], position=(0, 0, -0.05))])

    def samples(self, n=512):
        return surface_samples_of_primitive(self.peg.primitives[0], n, 0)

    def test_flush_face_within_bound(self):
        env = env_estimate(self.table, self.samples(), [0, 0, 0.04], [1, 0, 0, 0], 1000.0)
        assert abs(env_contact(env).residual[0, 0]) <= np.log(512) / 1000

    def test_hovering_peg(self):
        s = self.samples()
        env = env_estimate(self.table, s, [0, 0, 0.07], [1, 0, 0, 0], 1000.0)
        brute = np.min(s[:, 2] + 0.07)
        assert brute == pytest.approx(0.03, abs=1e-12)
        assert env.distance[0] == pytest.approx(0.03, abs=1e-3)
        assert brute <= env.distance[0] <= brute + np.log(512) / 1000

    def test_gradients(self, rng):
        s = self.samples()
        for _ in range(5):
            x = np.array([0, 0, 0.045]) + rng.normal(0, 0.003, 3)
            th = perturb_quat(np.array([1.0, 0, 0, 0]), rng.normal(0, 0.1, 3))
            env = env_estimate(self.table, s, x, th, 1000.0)
            fd = central_diff(lambda d: env_estimate(self.table, s, x + d[:3], perturb_quat(th, d[3:]), 1000.0).distance[0], np.zeros(6))
            assert rel_err(env.d_distance_do[0], fd) < 1e-4
            fd = central_diff(lambda d: env_estimate(self.table, s, x + d[:3], perturb_quat(th, d[3:]), 1000.0).point[0], np.zeros(6))
            assert rel_err(env.d_point_do[0], fd) < 1e-4


class TestRegion:
    def est_at(self, point):
        chain, _ = sphere_finger([0, 0, 0])
        body = SampledBody([FingerSamples(0, np.tile(point, (32, 1)), np.zeros(32, dtype=int))])
        return contact_estimate(body, 0, chain, [0.0], CUBE, ObjectPose.identity(), 1000.0)

    @pytest.mark.parametrize("offset,expected", [(0.0, -0.02), (0.02, 0.0), (0.05, 0.03)])
    def test_distance_from_anchor(self, offset, expected):
        anchor = np.array([0.0, 0.0, 0.02])
        ev = region(self.est_at(anchor + [offset, 0, 0]), np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]), anchor, 0.02)
        assert ev.residual[0, 0] == pytest.approx(expected, abs=2e-6)

    def test_gradients(self, tasks, rng):
        task = tasks["screwdriver_turning"]
        anchor = task.spec.region_anchor
        for g in smooth_grasps(task, rng, 3):
            ev = region(g.est(0), g.x0[None], g.th0[None], anchor)

            def by_o(d):
                x, th = g.x0 + d[:3], perturb_quat(g.th0, d[3:])
                return region(g.est(0, x=x, th=th), x[None], th[None], anchor).residual[0]

            assert rel_err(ev.jac["q0"][0], central_diff(lambda y: region(g.est(0, q=y), g.x0[None], g.th0[None], anchor).residual[0], g.q0)) < 1e-4
            assert rel_err(ev.jac["o0"][0], central_diff(by_o, np.zeros(6))) < 1e-4


class TestAblationTracking:
    def setup(self, tasks):
        task = tasks["cuboid_turning"]
        link, local = task.spec.tips[0]
        return task, task.spec.chain, link, local

    def tip_world(self, chain, q, link, local):
        fk = forward_kinematics(chain, q)
        return fk.link_rot[link] @ local + fk.link_pos[link]

    def test_zero_at_recording_state(self, tasks):
        task, chain, link, local = self.setup(tasks)
        st0 = task.initial_state
        R = quat_to_matrix(st0.theta)
        p_hat = R.T @ (self.tip_world(chain, st0.q, link, local) - st0.x)
        ev = ablation_tracking(chain, st0.q, st0.x[None], st0.theta[None], link, local, p_hat)
        npt.assert_allclose(ev.residual, 0.0, atol=1e-15)

    def test_translation_offsets_residual(self, tasks):
        task, chain, link, local = self.setup(tasks)
        st0 = task.initial_state
        p_hat = quat_to_matrix(st0.theta).T @ (self.tip_world(chain, st0.q, link, local) - st0.x)
        d = np.array([0.003, -0.004, 0.0])
        ev = ablation_tracking(chain, st0.q, (st0.x + d)[None], st0.theta[None], link, local, p_hat)
        assert np.linalg.norm(ev.residual) == pytest.approx(0.005, abs=1e-15)

    def test_gradients(self, tasks, rng):
        task, chain, link, local = self.setup(tasks)
        p_hat = rng.normal(0, 0.02, 3)
        for g in smooth_grasps(task, rng, 3):
            ev = ablation_tracking(chain, g.q0, g.x0[None], g.th0[None], link, local, p_hat)
            fd_q = central_diff(lambda y: ablation_tracking(chain, y, g.x0[None], g.th0[None], link, local, p_hat).residual[0], g.q0)
            fd_o = central_diff(lambda d: ablation_tracking(chain, g.q0, (g.x0 + d[:3])[None], perturb_quat(g.th0, d[3:])[None], link, local, p_hat).residual[0], np.zeros(6))
            assert rel_err(ev.jac["q0"][0], fd_q) < 1e-6
            assert rel_err(ev.jac["o0"][0], fd_o) < 1e-6


class TestObjectModel:
    def test_invalid_models_rejected(self):
        with pytest.raises(ValueError):
            ObjectModel(CUBE, mass=-1.0)
        with pytest.raises(ValueError):
            ObjectModel(CUBE, joint="revolute", anchor=[0, 0, 0])
        with pytest.raises(ValueError):
            ObjectModel(CUBE, joint="hinge")

    def test_revolute_retraction_turns_about_axis(self):
        m = ObjectModel(CUBE, joint="revolute", axis=[0, 0, 1], anchor=[0.1, 0, 0])
        x, th = m.retract(np.zeros(3), np.array([1.0, 0, 0, 0]), np.array([0.3]))
        npt.assert_allclose(x, [0.1, 0, 0])
        assert m.joint_angle(th, np.array([1.0, 0, 0, 0])) == pytest.approx(0.3, abs=1e-14)
