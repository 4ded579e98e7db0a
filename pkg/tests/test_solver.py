import numpy as np
import pytest

from govnet.constraints import (
    HalfSpace,
    LocalConstraintSet,
    LocalProblem,
    build_local_problems,
    eval_h,
)
from govnet.graph import NetworkTopology
from govnet.oracle import grid_project
from govnet.plant import PlantState
from govnet.solver import (
    FlowDivergenceError,
    FlowEngine,
    SolverParams,
    SolverState,
    consensus_disagreement,
    dual_diagnostics,
    governed_reference,
    kkt_residual,
    lambda_derivative,
    make_reference_optimum,
    nu_derivative,
    solver_derivative,
    solver_step,
    static_solve,
)

from conftest import RING_ADJACENCY, RING_Q0, R_ADMISSIBLE

LINE = HalfSpace(np.array([1.0, 1.0]), 3.0)
SINGLE = NetworkTopology(adjacency=np.zeros((1, 1)), leaders=(0,))


def single_problems(halfspaces=(), q=(0.0, 0.0), xi=(0.0, 0.0), r=(1.0, 2.0)):
    sets = [LocalConstraintSet.assemble(list(halfspaces), None, 0, SINGLE, 1.0)]
    return build_local_problems(
        np.array(q, dtype=float), np.array(xi, dtype=float), np.array(r, dtype=float),
        SINGLE, sets,
    )


def all_follower_problems(topology, pin=0.0):
    sets = [
        LocalConstraintSet.assemble([], None, i, topology, 1.0)
        for i in range(topology.n)
    ]
    return [
        LocalProblem(
            agent=i,
            is_leader=False,
            r=np.zeros(2),
            constraint_set=sets[i],
            q_i=np.full(2, pin),
            xi_i=np.full(2, pin),
            n=topology.n,
        )
        for i in range(topology.n)
    ]


def test_derivative_zero_at_consensus_without_forcing(ring_topology, ring_params):
    # Agreeing estimates, zero multipliers, follower objectives, and state
    # copies matching the pins leave nothing to push on.
    problems = all_follower_problems(ring_topology, pin=0.7)
    state = SolverState.initial(problems, ring_topology, "zeros")
    state.z[:] = 0.7
    dz, dzeta = solver_derivative(state, problems, ring_topology, ring_params)
    assert np.all(dz == 0.0)
    assert np.all(dzeta == 0.0)


def test_single_agent_reference_block_is_linear_flow():
    problems = single_problems()
    params = SolverParams(alpha=2.0)
    state = SolverState.initial(problems, SINGLE, "measurements")
    state.z[0, :2] = [5.0, -3.0]
    dz, _ = solver_derivative(state, problems, SINGLE, params)
    r = np.array([1.0, 2.0])
    assert np.allclose(dz[0, :2], -params.alpha * 2.0 * (state.z[0, :2] - r))
    # follow the flow: the reference block decays exponentially at rate
    # 2 * alpha toward r
    m0 = state.z[0, :2] - r
    t_end = 1.0
    steps = int(round(t_end / params.dt_solver))
    for _ in range(steps):
        state = solver_step(state, problems, SINGLE, params)
    expected = r + m0 * np.exp(-2.0 * params.alpha * t_end)
    assert np.abs(state.z[0, :2] - expected).max() < 2e-3


def test_oracle_optimum_is_flow_equilibrium(
    ring_topology, ring_params, ring_problems, oracle_t0
):
    ref = make_reference_optimum(oracle_t0, ring_problems, ring_topology, ring_params)
    assert ref.balance_residual < 1e-6
    state = SolverState(
        z=np.tile(ref.z_star, (5, 1)),
        zeta=ref.zeta_star.copy(),
        lam=[l.copy() for l in ref.lam_star],
        nu=ref.nu_star.copy(),
    )
    dz, dzeta = solver_derivative(state, ring_problems, ring_topology, ring_params)
    assert np.abs(dz).max() < 1e-6
    assert np.abs(dzeta).max() < 1e-6
    assert kkt_residual(state, ring_problems) < 1e-6


def test_switch_rule_branches():
    problems = single_problems(halfspaces=[LINE], q=(0.0, 0.0))
    state = SolverState.initial(problems, SINGLE, "measurements")

    def eta_for(lam_value, m):
        state.z[0, :2] = m
        state.lam[0][:] = lam_value
        return lambda_derivative(state, problems)[0]

    # strictly feasible point: center entry negative
    eta = eta_for(0.0, np.array([0.0, 0.0]))
    assert eta[0] == 0.0  # lam = 0, g < 0 -> hold

    state.lam[0][:] = 0.5
    eta = lambda_derivative(state, problems)[0]
    z = state.z[0]
    from govnet.constraints import eval_g

    assert np.allclose(eta, eval_g(problems[0], z))  # lam > 0 -> follow g

    # violated point: center entry positive even with lam = 0
    eta = eta_for(0.0, np.array([5.0, 5.0]))
    assert eta[0] > 0.0
    from govnet.constraints import eval_g as eg

    assert eta[0] == pytest.approx(eg(problems[0], state.z[0])[0])


def test_nu_derivative_matches_equality_values():
    problems = single_problems(q=(1.0, 2.0))
    state = SolverState.initial(problems, SINGLE, "measurements")
    assert np.allclose(nu_derivative(state, problems), 0.0)

    state = SolverState.initial(problems, SINGLE, "zeros")
    assert np.allclose(nu_derivative(state, problems)[0], [-1.0, -2.0, 0.0, 0.0])

    rng = np.random.default_rng(2)
    for _ in range(100):
        state.z = rng.normal(size=state.z.shape)
        expected = np.array(
            [eval_h(p, state.z[i]) for i, p in enumerate(problems)]
        )
        assert np.array_equal(nu_derivative(state, problems), expected)


def test_step_fixed_point_is_bitwise_stationary(ring_topology, ring_params):
    problems = all_follower_problems(ring_topology, pin=1.25)
    state = SolverState.initial(problems, ring_topology, "zeros")
    state.z[:] = 1.25  # consensus, zero forcing, equalities satisfied
    stepped = solver_step(state, problems, ring_topology, ring_params)
    assert np.array_equal(stepped.z, state.z)
    assert np.array_equal(stepped.zeta, state.zeta)
    assert np.array_equal(stepped.nu, state.nu)


def test_multipliers_pinned_at_zero_stay_zero():
    # Feasible configuration held fixed: a multiplier starting at zero with
    # a strictly negative inequality never moves.
    problems = single_problems(halfspaces=[LINE], q=(0.0, 0.0), r=(0.5, 0.5))
    params = SolverParams(alpha=2.0)
    state = SolverState.initial(problems, SINGLE, "measurements")
    for _ in range(2000):
        state = solver_step(state, problems, SINGLE, params)
        assert np.all(state.lam[0] == 0.0)


def test_halving_dt_solver_endpoint():
    problems = single_problems(halfspaces=[LINE], q=(0.2, 0.1), r=(2.5, 2.5))

    def endpoint(dt):
        params = SolverParams(alpha=2.0, dt_solver=dt, max_time=5.0, check_every=10**9)
        result = static_solve(
            SolverState.initial(problems, SINGLE, "zeros"), problems, SINGLE, params
        )
        s = result.state
        return np.concatenate([s.z.ravel(), s.zeta.ravel(), s.nu.ravel(), s.lam[0]])

    assert np.abs(endpoint(1e-4) - endpoint(5e-5)).max() < 1e-4


def test_static_solve_unconstrained_reaches_reference(ring_topology):
    sets = [LocalConstraintSet.assemble([], None, i, ring_topology, 1.0) for i in range(5)]
    problems = build_local_problems(
        RING_Q0, np.zeros(10), R_ADMISSIBLE, ring_topology, sets
    )
    params = SolverParams(alpha=2.0, max_time=400.0)
    result = static_solve(
        SolverState.initial(problems, ring_topology, "zeros"),
        problems, ring_topology, params,
    )
    assert result.converged
    assert np.abs(result.m - R_ADMISSIBLE).max() < 1e-2


def test_static_solve_inactive_constraint_returns_reference():
    problems = single_problems(
        halfspaces=[HalfSpace(np.array([1.0, 0.0]), 50.0)], q=(0.0, 0.0), r=(1.0, 2.0)
    )
    params = SolverParams(alpha=2.0, max_time=60.0)
    result = static_solve(
        SolverState.initial(problems, SINGLE, "measurements"), problems, SINGLE, params
    )
    assert result.converged
    assert np.abs(result.m - np.array([1.0, 2.0])).max() < 1e-2
    assert np.abs(result.state.lam[0]).max() < 1e-6


def test_static_solve_initialization_independence(
    ring_topology, ring_params, ring_problems
):
    res_zero = static_solve(
        SolverState.initial(ring_problems, ring_topology, "zeros"),
        ring_problems, ring_topology, ring_params,
    )
    res_meas = static_solve(
        SolverState.initial(ring_problems, ring_topology, "measurements"),
        ring_problems, ring_topology, ring_params,
    )
    assert res_zero.converged and res_meas.converged
    assert np.abs(res_zero.m - res_meas.m).max() < 10.0 * ring_params.tol_consensus


def test_static_solve_equivariant_under_ring_rotation(ring_topology, ring_params):
    # Rotating every agent label by one is a graph automorphism of the ring;
    # rotating the whole scenario must leave the agreed reference unchanged.
    line_sets = [
        LocalConstraintSet.assemble([LINE] if i == 4 else [], None, i, ring_topology, 1.0)
        for i in range(5)
    ]
    problems = build_local_problems(
        RING_Q0, np.zeros(10), R_ADMISSIBLE, ring_topology, line_sets
    )
    perm = [(i + 1) % 5 for i in range(5)]  # new index of old agent i
    adj_rot = np.zeros_like(RING_ADJACENCY)
    for i in range(5):
        for j in range(5):
            adj_rot[perm[i], perm[j]] = RING_ADJACENCY[i, j]
    top_rot = NetworkTopology(adjacency=adj_rot, leaders=(perm[4],))
    q_rot = np.zeros(10)
    for i in range(5):
        q_rot[2 * perm[i] : 2 * perm[i] + 2] = RING_Q0[2 * i : 2 * i + 2]
    sets_rot = [
        LocalConstraintSet.assemble(
            [LINE] if i == perm[4] else [], None, i, top_rot, 1.0
        )
        for i in range(5)
    ]
    problems_rot = build_local_problems(
        q_rot, np.zeros(10), R_ADMISSIBLE, top_rot, sets_rot
    )
    params = SolverParams(alpha=2.0, max_time=80.0, check_every=10**9)
    res = static_solve(
        SolverState.initial(problems, ring_topology, "zeros"),
        problems, ring_topology, params,
    )
    res_rot = static_solve(
        SolverState.initial(problems_rot, top_rot, "zeros"),
        problems_rot, top_rot, params,
    )
    assert np.abs(res.m - res_rot.m).max() < 1e-10


def test_static_solve_timeout_report():
    problems = single_problems(halfspaces=[LINE], q=(0.2, 0.1), r=(2.5, 2.5))
    params = SolverParams(alpha=2.0, max_time=0.05)
    result = static_solve(
        SolverState.initial(problems, SINGLE, "zeros"), problems, SINGLE, params
    )
    assert not result.converged
    assert result.reason == "timeout"
    assert np.isfinite(result.kkt_residual)


def test_static_solve_detects_diverging_multipliers():
    # Measured state violates the constraint, so the problem is infeasible
    # and the multiplier grows without bound.
    problems = single_problems(halfspaces=[LINE], q=(10.0, 10.0), r=(0.0, 0.0))
    params = SolverParams(alpha=2.0, max_time=50.0, multiplier_bound=10.0)
    result = static_solve(
        SolverState.initial(problems, SINGLE, "measurements"), problems, SINGLE, params
    )
    assert not result.converged
    assert result.reason == "multiplier_bound"


def test_static_solve_rejects_negative_multipliers(ring_topology, ring_params, ring_problems):
    state = SolverState.initial(ring_problems, ring_topology, "zeros")
    state.lam[4][0] = -0.5
    with pytest.raises(ValueError, match="nonnegative"):
        static_solve(state, ring_problems, ring_topology, ring_params)


def test_flow_divergence_error():
    problems = single_problems(halfspaces=[LINE], q=(0.0, 0.0))
    params = SolverParams(alpha=2.0, dt_solver=1e150)
    state = SolverState.initial(problems, SINGLE, "zeros")
    state.z[0, :] = 1e160
    with np.errstate(all="ignore"):
        with pytest.raises(FlowDivergenceError):
            for _ in range(10):
                state = solver_step(state, problems, SINGLE, params)


def test_engine_matches_composed_reference_steps(ring_topology, ring_params):
    sets = [
        LocalConstraintSet.assemble([LINE] if i == 4 else [], None, i, ring_topology, 1.0)
        for i in range(5)
    ]
    problems = build_local_problems(
        RING_Q0, np.zeros(10), R_ADMISSIBLE, ring_topology, sets
    )
    engine = FlowEngine(problems, ring_topology, ring_params)
    rng = np.random.default_rng(31)
    state = SolverState.initial(problems, ring_topology, "zeros")
    dt = ring_params.dt_solver
    for _ in range(25):
        state.z = rng.normal(size=state.z.shape)
        state.zeta = rng.normal(size=state.zeta.shape)
        state.nu = rng.normal(size=state.nu.shape)
        state.lam = [np.abs(rng.normal(size=l.shape)) for l in state.lam]
        for l in state.lam:
            if l.size:
                l[rng.random(l.size) < 0.3] = 0.0
        fast = engine.step(state)
        dz, dzeta = solver_derivative(state, problems, ring_topology, ring_params)
        dlam = lambda_derivative(state, problems)
        dnu = nu_derivative(state, problems)
        assert np.allclose(fast.z, state.z + dt * dz, atol=1e-12)
        assert np.allclose(fast.zeta, state.zeta + dt * dzeta, atol=1e-12)
        assert np.allclose(fast.nu, state.nu + dt * dnu, atol=1e-12)
        for got, l, dl in zip(fast.lam, state.lam, dlam):
            assert np.allclose(got, np.maximum(l + dt * dl, 0.0), atol=1e-12)
        assert engine.kkt_residual(state) == pytest.approx(
            kkt_residual(state, problems), rel=1e-9, abs=1e-12
        )


def test_engine_margins_match_eval_g(ring_topology, ring_params):
    sets = [
        LocalConstraintSet.assemble([LINE] if i == 4 else [], None, i, ring_topology, 1.0)
        for i in range(5)
    ]
    problems = build_local_problems(
        RING_Q0, np.zeros(10), R_ADMISSIBLE, ring_topology, sets
    )
    engine = FlowEngine(problems, ring_topology, ring_params)
    from govnet.constraints import eval_g

    rng = np.random.default_rng(13)
    for _ in range(10):
        m = rng.normal(size=2)
        q = rng.normal(size=10)
        xi = rng.normal(size=10)
        margins = engine.margins(m, q, xi)
        z = np.concatenate([m, q, xi])
        probs = build_local_problems(q, xi, R_ADMISSIBLE, ring_topology, sets)
        for i, p in enumerate(probs):
            if p.inequality_count:
                assert margins[i] == pytest.approx(-eval_g(p, z).max(), abs=1e-12)
            else:
                assert margins[i] == np.inf


def test_consensus_disagreement_and_governed_reference(ring_topology):
    problems = all_follower_problems(ring_topology)
    state = SolverState.initial(problems, ring_topology, "zeros")
    state.z[0, :] = 1.0
    assert consensus_disagreement(state, ring_topology) == pytest.approx(
        np.sqrt(22.0)
    )
    state.z[:, :2] = [[1, 2], [3, 4], [5, 6], [7, 8], [9, 10]]
    assert np.allclose(governed_reference(state, ring_topology), [9.0, 10.0])


def test_kkt_residual_zero_at_exact_unconstrained_optimum():
    problems = single_problems(q=(0.3, -0.4), xi=(0.1, 0.2), r=(1.0, 2.0))
    state = SolverState.initial(problems, SINGLE, "measurements")
    state.z[0, :2] = [1.0, 2.0]  # reference block at the minimizer
    assert kkt_residual(state, problems) == 0.0


def test_kkt_residual_infeasible_point_lower_bound():
    problems = single_problems(halfspaces=[LINE], q=(4.0, 4.0))
    state = SolverState.initial(problems, SINGLE, "measurements")
    state.z[0, :2] = [4.0, 4.0]
    from govnet.constraints import eval_g

    g = eval_g(problems[0], state.z.mean(axis=0))
    assert kkt_residual(state, problems) >= g.max() > 0.0


def test_dual_diagnostics_zero_at_reference(
    ring_topology, ring_params, ring_problems, oracle_t0
):
    ref = make_reference_optimum(oracle_t0, ring_problems, ring_topology, ring_params)
    state = SolverState(
        z=np.tile(ref.z_star, (5, 1)),
        zeta=ref.zeta_star.copy(),
        lam=[l.copy() for l in ref.lam_star],
        nu=ref.nu_star.copy(),
    )
    diag = dual_diagnostics(state, ref, ring_problems, ring_params)
    assert diag.storage_estimator == pytest.approx(0.0, abs=1e-18)
    assert diag.storage_dual == pytest.approx(0.0, abs=1e-18)
    assert diag.supply_dual == pytest.approx(0.0, abs=1e-12)
    assert diag.supply_estimator == pytest.approx(0.0, abs=1e-12)


def test_initial_state_modes(ring_problems, ring_topology):
    zeros = SolverState.initial(ring_problems, ring_topology, "zeros")
    assert np.all(zeros.z == 0.0) and np.all(zeros.zeta == 0.0)
    meas = SolverState.initial(ring_problems, ring_topology, "measurements")
    for i in range(5):
        assert np.allclose(meas.z[i, :2], RING_Q0[2 * i : 2 * i + 2])
        assert np.allclose(meas.z[i, 2 + 2 * i : 2 + 2 * i + 2], RING_Q0[2 * i : 2 * i + 2])
    with pytest.raises(ValueError, match="initialization"):
        SolverState.initial(ring_problems, ring_topology, "warm")
