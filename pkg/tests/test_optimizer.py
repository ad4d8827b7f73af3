from dataclasses import replace

import numpy as np
import numpy.testing as npt
import pytest

from dexroll.body import contact_estimate
from dexroll.optimizer import (
    FAMILIES,
    Layout,
    MPCController,
    SolverConfig,
    SolverError,
    State,
    Trajectory,
    evaluate_objective,
    init_trajectory,
    mpc_step,
    pregrasp_solve,
    solve,
)
from dexroll.rotations import quat_from_axis_angle
from oracles import toy_problem

TIGHT = SolverConfig(warmup_iters=60, particles=1, tol_grad=1e-12, tol_step=1e-9)


def state_gap(spec, state):
    est = contact_estimate(spec.body, 0, spec.chain, state.q[None], spec.model.scene, state.pose, spec.delta)
    return float(est.distance[0])


def tip_gap(spec, traj, t=-1):
    return state_gap(spec, traj.state(t))


def chain_quadratic_optimum(y0, goal, w_goal, w_step):
    """Minimiser of ``sum_t w_goal[t] (y_t - goal)^2 + w_step (y_t - y_{t-1})^2`` over ``y_1..y_T``."""
    T = len(w_goal)
    M = np.diag(np.asarray(w_goal, float) + 2 * w_step)
    M[-1, -1] -= w_step
    M -= w_step * (np.eye(T, k=1) + np.eye(T, k=-1))
    rhs = np.asarray(w_goal, float) * goal
    rhs[0] += w_step * y0
    return np.linalg.solve(M, rhs)


def z_angle(theta):
    return 2 * np.arctan2(theta[..., 3], theta[..., 0])


def monotone_or_penalised(history):
    return all(b["eq_violation"] <= a["eq_violation"] or b["rho_increased"] for a, b in zip(history, history[1:]))


@pytest.fixture(scope="module")
def toy_solution():
    spec, start = toy_problem()
    traj, report = solve(spec, init_trajectory(spec, start, 0), SolverConfig(particles=1))
    return spec, start, traj, report


@pytest.fixture(scope="module")
def valve_warmup(tasks):
    task = tasks["valve_turning"]
    ctrl = MPCController(task.spec, task.solver, seed=0)
    ctrl.warmup(task.initial_state)
    return task, ctrl


class TestInitTrajectory:
    def test_delta_action_spread(self):
        # the object stays put, so the actions are the sampled noise alone
        spec, start = toy_problem(T=50, goal_shift=(0, 0, 0), gap=0.03)
        u = np.concatenate([init_trajectory(spec, start, s).u.ravel() for s in range(70)])
        assert u.size > 10_000
        assert np.std(u) == pytest.approx(spec.sigma_u, rel=0.02)

    def test_force_spread_about_inward_push(self):
        spec, start = toy_problem(T=50, goal_shift=(0, 0, 0))
        spec = replace(spec, sigma_f=0.15)
        f = np.stack([init_trajectory(spec, start, s).f for s in range(70)])
        est = contact_estimate(spec.body, 0, spec.chain, start.q[None], spec.model.scene, start.pose, spec.delta)
        push = -est.normal[0] * spec.sigma_f
        assert np.std(f - push) == pytest.approx(spec.sigma_f, rel=0.02)

    def test_object_endpoints(self, tasks):
        task = tasks["cuboid_turning"]
        init = init_trajectory(task.spec, task.initial_state, 3)
        npt.assert_array_equal(init.x[0], task.initial_state.x)
        npt.assert_array_equal(init.theta[0], task.initial_state.theta)
        npt.assert_allclose(init.x[-1], task.spec.goal_x, atol=1e-15)
        assert abs(abs(init.theta[-1] @ task.spec.goal_theta) - 1) < 1e-12

    def test_revolute_object_stays_on_its_axis(self, tasks):
        task = tasks["valve_turning"]
        init = init_trajectory(task.spec, task.initial_state, 0)
        npt.assert_array_equal(init.x, np.broadcast_to(task.spec.model.anchor, init.x.shape))
        assert abs(abs(init.theta[-1] @ task.spec.goal_theta) - 1) < 1e-12

    def test_joint_path_is_cumulative_sum(self, tasks):
        for task in tasks.values():
            init = init_trajectory(task.spec, task.initial_state, 1)
            npt.assert_allclose(init.q[-1] - init.q[0], init.u.sum(axis=0), atol=1e-14)
            npt.assert_allclose(np.diff(init.q, axis=0), init.u, atol=1e-15)

    def test_deterministic_per_seed(self, tasks):
        task = tasks["screwdriver_turning"]
        a, b, c = (init_trajectory(task.spec, task.initial_state, s) for s in (4, 4, 5))
        npt.assert_array_equal(a.q, b.q)
        npt.assert_array_equal(a.f, b.f)
        assert not np.array_equal(a.q, c.q)


class TestObjective:
    def constant(self, spec, state, T):
        rep = lambda a: np.repeat(a[None], T + 1, axis=0)
        return Trajectory(rep(state.q), rep(state.x), rep(state.theta), np.zeros((T, len(state.q))), np.zeros((T, spec.n_fingers, 3)), np.zeros((T, 3)))

    def test_constant_at_goal_costs_nothing(self, tasks):
        task = tasks["cuboid_turning"]
        goal = State(task.initial_state.q, task.spec.goal_x, task.spec.goal_theta)
        value, grad = evaluate_objective(self.constant(task.spec, goal, task.spec.T), task.spec)
        assert value == pytest.approx(0.0, abs=1e-28)
        npt.assert_allclose(grad, 0.0, atol=1e-14)

    def test_constant_trajectory_has_no_smoothness_cost(self, tasks):
        task = tasks["cuboid_turning"]
        spec = replace(task.spec, w_x=0.0, w_theta=0.0)
        value, _ = evaluate_objective(self.constant(spec, task.initial_state, spec.T), spec)
        assert value == pytest.approx(0.0, abs=1e-28)

    def test_goal_cost_is_weighted_squared_error(self, tasks):
        task = tasks["cuboid_turning"]
        spec = replace(task.spec, w_smooth=(0.0, 0.0, 0.0), w_theta=0.0)
        state = State(task.initial_state.q, task.spec.goal_x + [0.01, 0, 0], task.spec.goal_theta)
        value, _ = evaluate_objective(self.constant(spec, state, spec.T), spec)
        assert value == pytest.approx(spec.w_x * 1e-4 * (spec.T - 1 + spec.terminal_weight), rel=1e-12)

    @pytest.mark.parametrize("name", ["cuboid_turning", "valve_turning", "screwdriver_turning", "complex_reorientation"])
    def test_gradient_matches_differences(self, tasks, name):
        task = tasks[name]
        spec = task.spec
        traj = init_trajectory(spec, task.initial_state, 2)
        lay = Layout(spec, traj.T)
        value, grad = evaluate_objective(traj, spec)
        h = 1e-6
        fd = np.empty(lay.n)
        for i in range(lay.n):
            e = np.zeros(lay.n)
            e[i] = h
            fd[i] = (evaluate_objective(lay.apply(spec, traj, e), spec)[0] - evaluate_objective(lay.apply(spec, traj, -e), spec)[0]) / (2 * h)
        # coordinates sitting on a clamp boundary cannot be differenced both ways
        z = lay.pack(traj)
        free = (z - h > lay.lower) & (z + h < lay.upper)
        assert free.sum() > 0.9 * lay.n
        assert np.isfinite(value)
        assert np.linalg.norm(grad[free] - fd[free]) / np.linalg.norm(fd[free]) < 1e-6


class TestSolve:
    def test_bound_only_quadratic_reaches_clamped_optimum(self):
        spec, start = toy_problem(T=4, families=(), goal_shift=(0.02, -0.01, 0.005))
        spec = replace(spec, goal_theta=quat_from_axis_angle([0, 0, 1], 0.3))
        # the first joint starts beyond its upper limit; its optimum is the limit itself
        start = State(np.array([1.7, 0.2, -0.1]), start.x, start.theta)
        traj, report = solve(spec, init_trajectory(spec, start, 0), TIGHT)
        assert report["status"] == "converged"
        w_goal = spec.w_x * np.array([1, 1, 1, spec.terminal_weight])
        for k in range(3):
            y = chain_quadratic_optimum(start.x[k], spec.goal_x[k], w_goal, spec.w_smooth[1])
            npt.assert_allclose(traj.x[1:, k], y, atol=1e-9)
        angle = chain_quadratic_optimum(0.0, 0.3, spec.w_theta / spec.w_x * w_goal, spec.w_smooth[2])
        npt.assert_allclose(z_angle(traj.theta[1:]), angle, atol=1e-9)
        npt.assert_allclose(traj.q[1:], np.broadcast_to([1.5, 0.2, -0.1], (4, 3)), atol=1e-9)

    def test_one_finger_follows_moving_sphere(self, toy_solution):
        spec, start, traj, report = toy_solution
        assert report["status"] == "converged"
        assert np.linalg.norm(traj.x[-1] - start.x) > 2e-3
        for t in range(traj.T + 1):
            assert abs(tip_gap(spec, traj, t)) < 1e-3

    def test_valve_warmup_residuals(self, valve_warmup):
        _, ctrl = valve_warmup
        families = ctrl.reports[0]["families"]
        assert set(families) == set(ctrl.spec.families)
        assert max(families.values()) < 5e-3

    def test_report_contents(self, toy_solution):
        report = toy_solution[3]
        for key in ("status", "iterations", "cost", "families", "history", "particles", "active_families", "inactive_families"):
            assert key in report
        assert report["active_families"] == ["contact"]
        assert set(report["inactive_families"]) == set(FAMILIES) - {"contact"}

    def test_monotone_feasibility_or_penalty_growth(self, toy_solution, valve_warmup):
        assert monotone_or_penalised(toy_solution[3]["history"])
        assert monotone_or_penalised(valve_warmup[1].reports[0]["history"])

    def test_bounds_hold_exactly(self, valve_warmup, toy_solution):
        for spec, traj in ((valve_warmup[1].spec, valve_warmup[1].plan), toy_solution[::2]):
            ch = spec.chain
            assert np.all((traj.q >= ch.q_min) & (traj.q <= ch.q_max))
            assert np.all((traj.u >= ch.u_min) & (traj.u <= ch.u_max))

    def test_quaternions_stay_unit_after_every_step(self, monkeypatch):
        seen = []
        apply = Layout.apply

        def recording(self, spec, traj, dz):
            out = apply(self, spec, traj, dz)
            seen.append(np.abs(np.linalg.norm(out.theta, axis=1) - 1).max())
            return out

        monkeypatch.setattr(Layout, "apply", recording)
        spec, start = toy_problem(goal_shift=(0.01, 0, 0))
        spec = replace(spec, goal_theta=quat_from_axis_angle([1, 1, 0], 0.5))
        solve(spec, init_trajectory(spec, start, 0), SolverConfig(particles=1, warmup_iters=20))
        assert len(seen) > 5
        assert max(seen) < 1e-9

    def test_deterministic(self):
        spec, start = toy_problem()
        cfg = SolverConfig(particles=3, warmup_iters=15)
        a, ra = solve(spec, init_trajectory(spec, start, 0), cfg)
        b, rb = solve(spec, init_trajectory(spec, start, 0), cfg)
        for k in ("q", "x", "theta", "u", "f", "fe"):
            npt.assert_array_equal(getattr(a, k), getattr(b, k))
        assert ra["cost"] == rb["cost"]

    def test_resolving_an_optimum_changes_nothing(self):
        spec, start = toy_problem(T=4, families=())
        first, _ = solve(spec, init_trajectory(spec, start, 0), TIGHT)
        cfg = SolverConfig(particles=1, tol_grad=1e-6)
        again, report = solve(spec, first, cfg)
        assert report["iterations"] == 0
        for k in ("q", "x", "theta", "u", "f"):
            assert np.max(np.abs(getattr(again, k) - getattr(first, k))) < cfg.tol_grad

    def test_resolving_a_feasible_plan_stays_put(self, toy_solution):
        spec, _, traj, _ = toy_solution
        cfg = SolverConfig(particles=1)
        again, _ = solve(spec, traj, cfg)
        lay = Layout(spec, traj.T)
        moved = np.abs(lay.pack(again) - lay.pack(traj)) / lay.unit
        assert moved.max() < cfg.tol_step

    def test_non_finite_values_abort(self):
        spec, start = toy_problem(families=())
        init = init_trajectory(spec, start, 0)
        with pytest.raises(SolverError):
            solve(replace(spec, goal_x=np.array([np.nan, 0, 0])), init, SolverConfig(particles=1))

    def test_budget_exhaustion_is_reported(self):
        spec, start = toy_problem(goal_shift=(0.03, 0, 0))
        _, report = solve(spec, init_trajectory(spec, start, 0), SolverConfig(particles=1, warmup_iters=1))
        assert report["iterations"] == 1
        assert report["status"] in ("converged", "not_converged")
        assert set(report["families"]) == {"contact"}

    def test_invalid_configuration_rejected(self):
        with pytest.raises(ValueError):
            SolverConfig(warmup_iters=0)
        with pytest.raises(ValueError):
            SolverConfig(rho0=0.0)
        spec, _ = toy_problem()
        with pytest.raises(ValueError):
            replace(spec, T=0)
        with pytest.raises(ValueError):
            replace(spec, w_x=-1.0)
        with pytest.raises(ValueError):
            replace(spec, families=("contact", "teleport"))


class TestReceding:
    def test_one_step_shrinks_horizon(self):
        spec, start = toy_problem(T=12)
        ctrl = MPCController(spec, SolverConfig(particles=1, warmup_iters=5), seed=0)
        plan = ctrl.warmup(start)
        assert ctrl.horizon == 12
        action, warm = mpc_step(ctrl)
        assert warm.T == 11 and ctrl.horizon == 11
        npt.assert_array_equal(action["u"], plan.u[0])
        for k in ("q", "x", "theta"):
            npt.assert_array_equal(getattr(warm, k), getattr(plan, k)[1:])
        for k in ("u", "f", "fe"):
            npt.assert_array_equal(getattr(warm, k), getattr(plan, k)[1:])

    def test_episode_executes_initial_horizon_actions(self):
        spec, start = toy_problem(T=5)
        ctrl = MPCController(spec, SolverConfig(particles=1, warmup_iters=10, online_iters=3), seed=0)
        ctrl.warmup(start)
        executed, horizons = 0, []
        while ctrl.plan is not None:
            horizons.append(ctrl.horizon)
            _, plan = ctrl.step()
            executed += 1
            if plan is not None:
                ctrl.replan(plan.state(0))
        assert executed == 5
        assert horizons == [5, 4, 3, 2, 1]
        assert [r["phase"] for r in ctrl.reports] == ["warmup"] + ["online"] * 4
        assert all(r["iterations"] <= 3 for r in ctrl.reports[1:])

    def test_replan_starts_from_measured_state(self):
        spec, start = toy_problem(T=4)
        ctrl = MPCController(spec, SolverConfig(particles=1, warmup_iters=10, online_iters=2), seed=0)
        ctrl.warmup(start)
        _, plan = ctrl.step()
        measured = plan.state(0)
        measured.q = measured.q + 1e-3
        npt.assert_array_equal(ctrl.replan(measured).q[0], measured.q)

    def test_horizon_one_cannot_shift(self):
        spec, start = toy_problem(T=1)
        with pytest.raises(ValueError):
            init_trajectory(spec, start, 0).shift()


class TestPregrasp:
    def test_closes_five_millimetre_gap(self):
        spec, start = toy_problem(gap=0.005, goal_shift=(0, 0, 0))
        assert state_gap(spec, start) > 4e-3
        traj, report = pregrasp_solve(spec, start, SolverConfig(particles=1))
        assert report["status"] == "converged"
        assert abs(tip_gap(spec, traj)) < 2e-3

    def test_task_fingers_reach_object(self, tasks):
        from dexroll.runner import retract_fingers

        task = tasks["cuboid_turning"]
        start = retract_fingers(task.spec, task.initial_state, clearance=0.005)
        traj, _ = pregrasp_solve(task.spec, start, task.solver, seed=0)
        for i in range(task.spec.n_fingers):
            est = contact_estimate(task.spec.body, i, task.spec.chain, traj.q[-1][None], task.spec.model.scene, traj.state(-1).pose, task.spec.delta)
            assert abs(est.distance[0]) < 2e-3

    def test_in_contact_start_barely_moves(self):
        spec, start = toy_problem(gap=0.0, goal_shift=(0, 0, 0))
        traj, _ = pregrasp_solve(spec, start, SolverConfig(particles=1))
        # only the softmin offset of under a millimetre remains to close
        assert np.abs(traj.u).max() < 0.4 * spec.sigma_u
        npt.assert_allclose(traj.x, np.broadcast_to(start.x, traj.x.shape), atol=1e-5)

    def test_commands_reproduce_joint_path(self):
        spec, start = toy_problem(gap=0.005, goal_shift=(0, 0, 0))
        traj, _ = pregrasp_solve(spec, start, SolverConfig(particles=1))
        npt.assert_allclose(np.cumsum(traj.u, axis=0), traj.q[1:] - traj.q[0], atol=1e-12)

    def test_only_terminal_contact_is_active(self):
        spec, start = toy_problem(gap=0.005, goal_shift=(0, 0, 0))
        _, report = pregrasp_solve(spec, start, SolverConfig(particles=1))
        assert report["active_families"] == ["terminal_contact"]
        assert set(report["inactive_families"]) == set(FAMILIES) - {"terminal_contact"}
        assert set(report["families"]) == {"terminal_contact"}
