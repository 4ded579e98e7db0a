"""Distributed primal-dual flow computing the governed reference.

Every agent carries an estimate of the full decision vector z = (m, z_q,
z_xi). A proportional-integral consensus coupling over the communication
graph drives the estimates together while gradient descent on the local
objectives and dual ascent on the local multipliers drive the agreed point
toward the constrained optimum. Inequality multipliers stay nonnegative
through a switch rule on their derivative plus a post-step projection.

Equilibria of the flow are KKT points of the stacked problem; the energy
of the estimator half plus the squared multiplier error of the dual half
acts as the Lyapunov pair monitored by dual_diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from govnet.constraints import (
    NORM_SMOOTHING,
    LocalProblem,
    eval_f,
    eval_g,
    eval_g_gradient,
    eval_h,
    eval_h_gradient,
)
from govnet.graph import NetworkTopology, build_laplacian
from govnet.oracle import OracleResult, recover_multipliers

NORM_SMOOTHING_SQ = NORM_SMOOTHING**2

try:  # compiled step kernel; the numpy path below is the fallback
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False


if HAVE_NUMBA:

    @numba.njit(cache=True, fastmath=False)
    def _step_kernel(
        z, zeta, nu, lam_c, lam_b, steps,
        lap, C, c0, scale, offsets, pin_q, pin_xi, r, leader_mask, row_agent,
        alpha, dt, eps_sq,
    ):
        n, dim = z.shape
        n2 = (dim - 2) // 2
        n_rows = lam_c.shape[0]
        force = np.empty((n, dim))
        vq = np.empty((n, n2))
        w = np.empty(n)
        w_eps = np.empty(n)
        lamb_sum = np.empty(n)
        z_new = np.empty_like(z)
        zeta_new = np.empty_like(zeta)
        for _ in range(steps):
            for i in range(n):
                for c in range(dim):
                    force[i, c] = 0.0
                if leader_mask[i]:
                    force[i, 0] += 2.0 * (z[i, 0] - r[0])
                    force[i, 1] += 2.0 * (z[i, 1] - r[1])
                qc = 2 + 2 * i
                xc = 2 + n2 + 2 * i
                force[i, qc] += nu[i, 0]
                force[i, qc + 1] += nu[i, 1]
                force[i, xc] += nu[i, 2]
                force[i, xc + 1] += nu[i, 3]
                s = 0.0
                for j in range(n2 // 2):
                    vx = z[i, 0] + offsets[i, 2 * j] - z[i, 2 + 2 * j]
                    vy = z[i, 1] + offsets[i, 2 * j + 1] - z[i, 2 + 2 * j + 1]
                    vq[i, 2 * j] = vx
                    vq[i, 2 * j + 1] = vy
                    s += vx * vx + vy * vy
                for j in range(n2):
                    s += z[i, 2 + n2 + j] * z[i, 2 + n2 + j]
                w[i] = np.sqrt(s)
                w_eps[i] = np.sqrt(s + eps_sq)
                lamb_sum[i] = 0.0
            for k in range(n_rows):
                i = row_agent[k]
                center = C[k, 0] * z[i, 0] + C[k, 1] * z[i, 1] + c0[k]
                ball = w[i] + scale[k] * center
                eta_c = 0.0 if (lam_c[k] == 0.0 and center < 0.0) else center
                eta_b = 0.0 if (lam_b[k] == 0.0 and ball < 0.0) else ball
                coef = lam_c[k] + lam_b[k] * scale[k]
                force[i, 0] += coef * C[k, 0]
                force[i, 1] += coef * C[k, 1]
                lamb_sum[i] += lam_b[k]
                lc = lam_c[k] + dt * eta_c
                lb = lam_b[k] + dt * eta_b
                lam_c[k] = lc if lc > 0.0 else 0.0
                lam_b[k] = lb if lb > 0.0 else 0.0
            for i in range(n):
                if lamb_sum[i] != 0.0:
                    inv = 1.0 / w_eps[i]
                    sx = 0.0
                    sy = 0.0
                    for j in range(n2 // 2):
                        sx += vq[i, 2 * j]
                        sy += vq[i, 2 * j + 1]
                    force[i, 0] += lamb_sum[i] * sx * inv
                    force[i, 1] += lamb_sum[i] * sy * inv
                    for j in range(n2):
                        force[i, 2 + j] -= lamb_sum[i] * vq[i, j] * inv
                        force[i, 2 + n2 + j] += lamb_sum[i] * z[i, 2 + n2 + j] * inv
            for i in range(n):
                qc = 2 + 2 * i
                xc = 2 + n2 + 2 * i
                nu[i, 0] += dt * (z[i, qc] - pin_q[i, 0])
                nu[i, 1] += dt * (z[i, qc + 1] - pin_q[i, 1])
                nu[i, 2] += dt * (z[i, xc] - pin_xi[i, 0])
                nu[i, 3] += dt * (z[i, xc + 1] - pin_xi[i, 1])
            for i in range(n):
                for c in range(dim):
                    lz = 0.0
                    lzeta = 0.0
                    for j in range(n):
                        lij = lap[i, j]
                        if lij != 0.0:
                            lz += lij * z[j, c]
                            lzeta += lij * zeta[j, c]
                    z_new[i, c] = z[i, c] + dt * (-lz + lzeta - alpha * force[i, c])
                    zeta_new[i, c] = zeta[i, c] - dt * lz
            for i in range(n):
                for c in range(dim):
                    z[i, c] = z_new[i, c]
                    zeta[i, c] = zeta_new[i, c]
        ok = True
        for i in range(n):
            for c in range(dim):
                if not np.isfinite(z[i, c]):
                    ok = False
        for i in range(n):
            for c in range(4):
                if not np.isfinite(nu[i, c]):
                    ok = False
        return ok


class FlowDivergenceError(RuntimeError):
    """Solver state became non-finite; usually signals an infeasible problem."""

    def __init__(self, t: float):
        self.t = t
        super().__init__(f"solver flow diverged at t={t:.6g}s (possible infeasibility)")


@dataclass(frozen=True, eq=False)
class SolverParams:
    """Flow gain, step size, and termination thresholds.

    dt_solver defaults to 1e-3 / alpha so the effective step of the scaled
    forcing terms stays constant across gains. tol_consensus bounds the
    neighbor-to-neighbor estimate gap, tol_kkt the residual of the KKT
    system at the mean estimate.
    """

    alpha: float = 2.0
    dt_solver: float | None = None
    tol_consensus: float = 1e-3
    tol_kkt: float = 1e-3
    max_time: float = 600.0
    multiplier_bound: float = 1e6
    check_every: int = 100

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.tol_consensus <= 0 or self.tol_kkt <= 0:
            raise ValueError("tolerances must be positive")
        if self.dt_solver is None:
            object.__setattr__(self, "dt_solver", 1e-3 / self.alpha)
        if self.dt_solver <= 0:
            raise ValueError(f"dt_solver must be positive, got {self.dt_solver}")


@dataclass(eq=False)
class SolverState:
    """Per-agent estimates, consensus integrators, and multipliers.

    z and zeta are (n, 4n+2); lam is a per-agent list since inequality
    counts differ across agents; nu is (n, 4).
    """

    z: np.ndarray
    zeta: np.ndarray
    lam: list[np.ndarray]
    nu: np.ndarray

    @classmethod
    def initial(
        cls, problems: list[LocalProblem], topology: NetworkTopology, mode: str = "zeros"
    ) -> "SolverState":
        """Start state: everything zero, or state copies seeded from measurements.

        "zeros" zeroes every estimate. "measurements" puts each agent's own
        position in its m block and its measured (q_i, xi_i) in its own
        pinned blocks, which removes the initial equality-error transient.
        """
        n = topology.n
        dim = 4 * n + 2
        z = np.zeros((n, dim))
        if mode == "measurements":
            for i, p in enumerate(problems):
                z[i, :2] = p.q_i
                z[i, 2 + 2 * i : 2 + 2 * i + 2] = p.q_i
                z[i, 2 + 2 * n + 2 * i : 2 + 2 * n + 2 * i + 2] = p.xi_i
        elif mode != "zeros":
            raise ValueError(f"unknown initialization mode {mode!r}")
        return cls(
            z=z,
            zeta=np.zeros((n, dim)),
            lam=[np.zeros(p.inequality_count) for p in problems],
            nu=np.zeros((n, 4)),
        )

    def copy(self) -> "SolverState":
        return SolverState(
            z=self.z.copy(),
            zeta=self.zeta.copy(),
            lam=[l.copy() for l in self.lam],
            nu=self.nu.copy(),
        )

    @property
    def n(self) -> int:
        return self.z.shape[0]

    def m_estimates(self) -> np.ndarray:
        """(n, 2) matrix of per-agent governed-reference estimates."""
        return self.z[:, :2].copy()


class FlowEngine:
    """Batched implementation of the flow step shared by all run loops.

    Stacks every agent's constraint data once so one step costs a handful
    of whole-network array operations instead of per-agent Python work.
    Geometry (constraint rows, leader set) is fixed for the engine's
    lifetime; the pinned measurements and the operator reference may be
    refreshed between steps, which is exactly what the closed loop needs.
    """

    def __init__(
        self,
        problems: list[LocalProblem],
        topology: NetworkTopology,
        params: SolverParams,
    ):
        n = topology.n
        self.n = n
        self.dim = 4 * n + 2
        self.params = params
        self.laplacian = build_laplacian(topology).entries
        # Objective ownership comes from the problems, not the topology, so
        # synthetic all-follower problem sets behave like the reference path.
        self.leaders = np.array(
            [i for i, p in enumerate(problems) if p.is_leader], dtype=int
        )
        self.row_counts = [p.constraint_set.rows for p in problems]
        self.row_agent = np.repeat(np.arange(n), self.row_counts)
        sets = [p.constraint_set for p in problems]
        self.C = (
            np.vstack([s._C for s in sets if s.rows]) if self.row_agent.size else np.zeros((0, 2))
        )
        self.c0 = np.concatenate([s._c0 for s in sets]) if self.row_agent.size else np.zeros(0)
        self.scale = (
            np.concatenate([s._scale for s in sets]) if self.row_agent.size else np.zeros(0)
        )
        self.offsets = np.vstack([s.center_offset for s in sets])
        starts = np.concatenate([[0], np.cumsum(self.row_counts)])
        self.row_slices = [slice(starts[i], starts[i + 1]) for i in range(n)]
        cols = np.arange(n) * 2
        self.own_q_cols = np.column_stack([2 + cols, 3 + cols])
        self.own_xi_cols = np.column_stack([2 + 2 * n + cols, 3 + 2 * n + cols])
        self.agent_rows = np.repeat(np.arange(n)[:, None], 2, axis=1)
        self.leader_mask = np.zeros(n, dtype=np.int8)
        self.leader_mask[self.leaders] = 1
        self.row_agent = self.row_agent.astype(np.int64)
        self.update_problems(problems)

    def update_problems(self, problems: list[LocalProblem]) -> None:
        """Refresh pins and reference; the constraint geometry must be unchanged."""
        if [p.constraint_set.rows for p in problems] != self.row_counts:
            raise ValueError("engine geometry does not match the given problems")
        self.update_pins(
            np.concatenate([p.q_i for p in problems]),
            np.concatenate([p.xi_i for p in problems]),
            problems[self.leaders[0]].r if self.leaders.size else np.zeros(2),
        )

    def update_pins(self, q: np.ndarray, xi: np.ndarray, r: np.ndarray) -> None:
        """Refresh the pinned measurements (stacked 2n vectors) and the reference."""
        self.pin_q = np.asarray(q, dtype=float).reshape(self.n, 2)
        self.pin_xi = np.asarray(xi, dtype=float).reshape(self.n, 2)
        self.r = np.asarray(r, dtype=float).reshape(2)

    # -- stacked evaluations -------------------------------------------------

    def _split_lam(self, lam: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
        if not self.row_agent.size:
            return np.zeros(0), np.zeros(0)
        lam_c = np.concatenate([lam[i][0::2] for i in range(self.n) if self.row_counts[i]])
        lam_b = np.concatenate([lam[i][1::2] for i in range(self.n) if self.row_counts[i]])
        return lam_c, lam_b

    def _join_lam(self, lam_c: np.ndarray, lam_b: np.ndarray) -> list[np.ndarray]:
        out = []
        for i in range(self.n):
            sl = self.row_slices[i]
            entries = np.empty(2 * self.row_counts[i])
            entries[0::2] = lam_c[sl]
            entries[1::2] = lam_b[sl]
            out.append(entries)
        return out

    def _ball_terms(self, m_rows: np.ndarray, z_q: np.ndarray, z_xi: np.ndarray):
        """Per-agent ball vectors and radii for per-agent evaluation points.

        m_rows is (n, 2); z_q, z_xi are (n, 2n) rows of state copies.
        """
        v_q = np.tile(m_rows, (1, self.n)) + self.offsets - z_q
        w_sq = (v_q * v_q).sum(axis=1) + (z_xi * z_xi).sum(axis=1)
        w = np.sqrt(w_sq)
        w_eps = np.sqrt(w_sq + NORM_SMOOTHING_SQ)
        return v_q, w, w_eps

    def _g_stacked(self, m_rows, z_q, z_xi):
        v_q, w, w_eps = self._ball_terms(m_rows, z_q, z_xi)
        center = (self.C * m_rows[self.row_agent]).sum(axis=1) + self.c0
        ball = w[self.row_agent] + self.scale * center
        return center, ball, v_q, w_eps

    def step(self, state: SolverState, t: float = 0.0) -> SolverState:
        """One Euler step with the multiplier projection; see solver_step."""
        return self.run_steps(state, 1, t)

    def run_steps(self, state: SolverState, steps: int, t: float = 0.0) -> SolverState:
        """Advance `steps` Euler steps with frozen pins and reference.

        Uses the compiled kernel when numba is available; both paths apply
        identical update rules (float summation order may differ).
        """
        if steps < 1:
            return state.copy()
        if HAVE_NUMBA:
            z = state.z.copy()
            zeta = state.zeta.copy()
            nu = state.nu.copy()
            lam_c, lam_b = self._split_lam(state.lam)
            ok = _step_kernel(
                z, zeta, nu, lam_c, lam_b, steps,
                self.laplacian, self.C, self.c0, self.scale, self.offsets,
                self.pin_q, self.pin_xi, self.r, self.leader_mask, self.row_agent,
                self.params.alpha, self.params.dt_solver, NORM_SMOOTHING_SQ,
            )
            if not ok:
                raise FlowDivergenceError(t + steps * self.params.dt_solver)
            return SolverState(z=z, zeta=zeta, lam=self._join_lam(lam_c, lam_b), nu=nu)
        for i in range(steps):
            state = self._step_numpy(state, t + i * self.params.dt_solver)
        return state

    def _step_numpy(self, state: SolverState, t: float = 0.0) -> SolverState:
        n = self.n
        params = self.params
        z, zeta, nu = state.z, state.zeta, state.nu
        m_rows = z[:, :2]
        z_q = z[:, 2 : 2 + 2 * n]
        z_xi = z[:, 2 + 2 * n :]

        force = np.zeros_like(z)
        if self.leaders.size:
            force[self.leaders, :2] += 2.0 * (m_rows[self.leaders] - self.r)
        force[self.agent_rows, self.own_q_cols] += nu[:, 0:2]
        force[self.agent_rows, self.own_xi_cols] += nu[:, 2:4]

        if self.row_agent.size:
            center, ball, v_q, w_eps = self._g_stacked(m_rows, z_q, z_xi)
            lam_c, lam_b = self._split_lam(state.lam)
            coef = lam_c + lam_b * self.scale
            np.add.at(force[:, :2], self.row_agent, coef[:, None] * self.C)
            lamb_sum = np.zeros(n)
            np.add.at(lamb_sum, self.row_agent, lam_b)
            dw_dm = v_q.reshape(n, n, 2).sum(axis=1) / w_eps[:, None]
            force[:, :2] += lamb_sum[:, None] * dw_dm
            force[:, 2 : 2 + 2 * n] += lamb_sum[:, None] * (-v_q / w_eps[:, None])
            force[:, 2 + 2 * n :] += lamb_sum[:, None] * (z_xi / w_eps[:, None])
            eta_c = center.copy()
            eta_c[(lam_c == 0.0) & (center < 0.0)] = 0.0
            eta_b = ball.copy()
            eta_b[(lam_b == 0.0) & (ball < 0.0)] = 0.0
            lam_c_new = np.maximum(lam_c + params.dt_solver * eta_c, 0.0)
            lam_b_new = np.maximum(lam_b + params.dt_solver * eta_b, 0.0)
            lam_new = self._join_lam(lam_c_new, lam_b_new)
        else:
            lam_new = [l.copy() for l in state.lam]

        lz = self.laplacian @ z
        dz = -lz + self.laplacian @ zeta - params.alpha * force
        h = np.concatenate(
            [z[self.agent_rows, self.own_q_cols] - self.pin_q,
             z[self.agent_rows, self.own_xi_cols] - self.pin_xi],
            axis=1,
        )
        dt = params.dt_solver
        z_new = z + dt * dz
        zeta_new = zeta - dt * lz
        nu_new = nu + dt * h
        if not (
            np.all(np.isfinite(z_new))
            and np.all(np.isfinite(nu_new))
            and all(np.all(np.isfinite(l)) for l in lam_new)
        ):
            raise FlowDivergenceError(t + dt)
        return SolverState(z=z_new, zeta=zeta_new, lam=lam_new, nu=nu_new)

    def kkt_residual(self, state: SolverState) -> float:
        """Stacked equivalent of kkt_residual (same mean-estimate evaluation)."""
        n = self.n
        z_bar = state.z.mean(axis=0)
        m_bar = z_bar[:2]
        zq_bar = z_bar[2 : 2 + 2 * n]
        zxi_bar = z_bar[2 + 2 * n :]
        stationarity = np.zeros(self.dim)
        stationarity[:2] = 2.0 * self.leaders.size * (m_bar - self.r)
        stationarity[self.own_q_cols.ravel()] += state.nu[:, 0:2].ravel()
        stationarity[self.own_xi_cols.ravel()] += state.nu[:, 2:4].ravel()
        primal = comp = dual = 0.0
        if self.row_agent.size:
            m_rows = np.tile(m_bar, (n, 1))
            z_q = np.tile(zq_bar, (n, 1))
            z_xi = np.tile(zxi_bar, (n, 1))
            center, ball, v_q, w_eps = self._g_stacked(m_rows, z_q, z_xi)
            lam_c, lam_b = self._split_lam(state.lam)
            coef = lam_c + lam_b * self.scale
            stationarity[:2] += (coef[:, None] * self.C).sum(axis=0)
            lamb_sum = np.zeros(n)
            np.add.at(lamb_sum, self.row_agent, lam_b)
            dw_dm = v_q.reshape(n, n, 2).sum(axis=1) / w_eps[:, None]
            stationarity[:2] += (lamb_sum[:, None] * dw_dm).sum(axis=0)
            stationarity[2 : 2 + 2 * n] += (lamb_sum[:, None] * (-v_q / w_eps[:, None])).sum(axis=0)
            stationarity[2 + 2 * n :] += (lamb_sum[:, None] * (z_xi / w_eps[:, None])).sum(axis=0)
            primal = float(np.maximum(center.max(), ball.max()))
            comp = float(np.maximum(np.abs(lam_c * center).max(), np.abs(lam_b * ball).max()))
            dual = float(max(np.maximum(-lam_c, 0.0).max(), np.maximum(-lam_b, 0.0).max()))
        h_q = z_bar[self.own_q_cols] - self.pin_q
        h_xi = z_bar[self.own_xi_cols] - self.pin_xi
        equality = float(np.sqrt(((h_q * h_q).sum(axis=1) + (h_xi * h_xi).sum(axis=1)).max()))
        return max(float(np.linalg.norm(stationarity)), max(primal, 0.0), comp, dual, equality)

    def margins(self, m: np.ndarray, q: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """Per-agent worst-entry margins of the governor inequalities.

        Evaluates each agent's entries at (m, state copies pinned to the
        measurement) and returns -max entry per agent; +inf for agents
        without constraints.
        """
        n = self.n
        m_rows = np.tile(np.asarray(m, dtype=float), (n, 1))
        z_q = np.tile(np.asarray(q, dtype=float), (n, 1))
        z_xi = np.tile(np.asarray(xi, dtype=float), (n, 1))
        out = np.full(n, np.inf)
        if not self.row_agent.size:
            return out
        center, ball, _, _ = self._g_stacked(m_rows, z_q, z_xi)
        worst = np.maximum(center, ball)
        for i in range(n):
            sl = self.row_slices[i]
            if sl.stop > sl.start:
                out[i] = -float(worst[sl].max())
        return out


def _forcing(state: SolverState, problems: list[LocalProblem]) -> np.ndarray:
    """Per-agent gradient forcing: objective + multiplier-weighted constraint gradients."""
    n = state.n
    out = np.zeros_like(state.z)
    for i, p in enumerate(problems):
        zi = state.z[i]
        _, grad_f = eval_f(p, zi)
        out[i] = grad_f
        if p.inequality_count:
            out[i] += eval_g_gradient(p, zi).T @ state.lam[i]
        nu_i = state.nu[i]
        out[i, 2 + 2 * i : 2 + 2 * i + 2] += nu_i[0:2]
        out[i, 2 + 2 * n + 2 * i : 2 + 2 * n + 2 * i + 2] += nu_i[2:4]
    return out


def solver_derivative(
    state: SolverState,
    problems: list[LocalProblem],
    topology: NetworkTopology,
    params: SolverParams,
) -> tuple[np.ndarray, np.ndarray]:
    """Time derivative (dz, dzeta) of the estimate flow.

    dz    = -L z + L zeta - alpha * forcing
    dzeta = -L z

    with L acting blockwise on the per-agent estimate rows.
    """
    if len(problems) != topology.n or state.n != topology.n:
        raise ValueError("state, problems, and topology disagree on the agent count")
    laplacian = build_laplacian(topology).entries
    lz = laplacian @ state.z
    dz = -lz + laplacian @ state.zeta - params.alpha * _forcing(state, problems)
    dzeta = -lz
    return dz, dzeta


def lambda_derivative(state: SolverState, problems: list[LocalProblem]) -> list[np.ndarray]:
    """Switched dual ascent on the inequality multipliers.

    Each component follows its constraint value except when it sits at zero
    with a strictly negative constraint, where it stays put. Together with
    nonnegative initialization this keeps multipliers nonnegative.
    """
    out = []
    for i, p in enumerate(problems):
        if p.inequality_count == 0:
            out.append(np.zeros(0))
            continue
        g = eval_g(p, state.z[i])
        eta = g.copy()
        eta[(state.lam[i] == 0.0) & (g < 0.0)] = 0.0
        out.append(eta)
    return out


def nu_derivative(state: SolverState, problems: list[LocalProblem]) -> np.ndarray:
    """Dual ascent on the equality multipliers: the equality values themselves."""
    return np.array([eval_h(p, state.z[i]) for i, p in enumerate(problems)])


def solver_step(
    state: SolverState,
    problems: list[LocalProblem],
    topology: NetworkTopology,
    params: SolverParams,
    t: float = 0.0,
    engine: FlowEngine | None = None,
) -> SolverState:
    """One explicit Euler step of the full flow, then project lam onto >= 0.

    Euler rather than a higher-order scheme because the switch rule makes
    the right-hand side discontinuous; the projection keeps the
    discretization from stepping multipliers below zero. Loops should pass
    a prebuilt FlowEngine; one is constructed on the fly otherwise.
    """
    if engine is None:
        engine = FlowEngine(problems, topology, params)
    return engine.step(state, t)


def consensus_disagreement(state: SolverState, topology: NetworkTopology) -> float:
    """Largest neighbor-to-neighbor estimate distance over the graph edges."""
    worst = 0.0
    for i, j in topology.edges():
        worst = max(worst, float(np.linalg.norm(state.z[i] - state.z[j])))
    return worst


def governed_reference(state: SolverState, topology: NetworkTopology) -> np.ndarray:
    """Reference handed to the plant: mean of the leaders' m blocks."""
    rows = list(topology.leaders)
    return state.z[rows, :2].mean(axis=0)


def kkt_residual(state: SolverState, problems: list[LocalProblem]) -> float:
    """Worst violation of the KKT system at the mean estimate.

    Takes the max of the stationarity norm, positive inequality values,
    complementary-slackness products, negative multiplier parts, and
    equality norms. Zero exactly at a primal-dual optimum.
    """
    z_bar = state.z.mean(axis=0)
    n = state.n
    stationarity = np.zeros(z_bar.shape)
    primal = 0.0
    comp = 0.0
    dual = 0.0
    equality = 0.0
    for i, p in enumerate(problems):
        _, grad_f = eval_f(p, z_bar)
        stationarity += grad_f
        if p.inequality_count:
            g = eval_g(p, z_bar)
            stationarity += eval_g_gradient(p, z_bar).T @ state.lam[i]
            primal = max(primal, float(g.max()))
            comp = max(comp, float(np.abs(state.lam[i] * g).max()))
            dual = max(dual, float(np.maximum(-state.lam[i], 0.0).max()))
        h = eval_h(p, z_bar)
        stationarity += eval_h_gradient(p).T @ state.nu[i]
        equality = max(equality, float(np.linalg.norm(h)))
    return max(float(np.linalg.norm(stationarity)), max(primal, 0.0), comp, dual, equality)


@dataclass
class StaticSolveResult:
    """Outcome of a frozen-measurement solve."""

    m: np.ndarray
    state: SolverState
    converged: bool
    reason: str
    sim_time: float
    steps: int
    consensus_residual: float
    kkt_residual: float


def static_solve(
    initial: SolverState,
    problems: list[LocalProblem],
    topology: NetworkTopology,
    params: SolverParams,
    observer=None,
) -> StaticSolveResult:
    """Run the flow with frozen measurements until the network agrees on a KKT point.

    Terminates when the consensus gap and the KKT residual both drop below
    their thresholds, when the time budget runs out, or when multipliers
    blow past the divergence bound (the infeasibility heuristic). observer,
    if given, is called as observer(t, state) before every step.
    """
    if any(np.any(l < 0) for l in initial.lam):
        raise ValueError("inequality multipliers must start nonnegative")
    dt = params.dt_solver
    engine = FlowEngine(problems, topology, params)
    state = initial.copy()
    total_steps = int(np.ceil(params.max_time / dt))
    t = 0.0
    done = 0
    converged = False
    reason = "timeout"
    while done < total_steps:
        burst = min(params.check_every, total_steps - done)
        if observer is not None:
            for i in range(burst):
                observer(t + i * dt, state)
                state = engine.step(state, t + i * dt)
        else:
            state = engine.run_steps(state, burst, t)
        done += burst
        t = done * dt
        lam_norm = max((float(np.abs(l).max()) if l.size else 0.0) for l in state.lam)
        if lam_norm > params.multiplier_bound:
            reason = "multiplier_bound"
            break
        if (
            consensus_disagreement(state, topology) < params.tol_consensus
            and engine.kkt_residual(state) < params.tol_kkt
        ):
            converged = True
            reason = "converged"
            break
    return StaticSolveResult(
        m=governed_reference(state, topology),
        state=state,
        converged=converged,
        reason=reason,
        sim_time=t,
        steps=done,
        consensus_residual=consensus_disagreement(state, topology),
        kkt_residual=kkt_residual(state, problems),
    )


@dataclass(eq=False)
class ReferenceOptimum:
    """A known optimum (from the oracle) in the flow's coordinates.

    zeta_star is the minimum-norm solution of the integrator balance
    equation, which shares the trajectory's conserved column sums when the
    flow starts from zeta = 0.
    """

    z_star: np.ndarray
    zeta_star: np.ndarray
    lam_star: list[np.ndarray]
    nu_star: np.ndarray
    balance_residual: float


def make_reference_optimum(
    oracle_result: OracleResult,
    problems: list[LocalProblem],
    topology: NetworkTopology,
    params: SolverParams,
) -> ReferenceOptimum:
    """Lift an oracle solution to a flow equilibrium (z*, zeta*, lam*, nu*)."""
    if oracle_result.multipliers is None:
        recover_multipliers(oracle_result, problems)
    lam_star, nu_star = oracle_result.multipliers
    n = topology.n
    q = np.concatenate([p.q_i for p in problems])
    xi = np.concatenate([p.xi_i for p in problems])
    z_star = np.concatenate([oracle_result.m_star, q, xi])
    forcing = np.zeros((n, z_star.size))
    for i, p in enumerate(problems):
        _, grad_f = eval_f(p, z_star)
        forcing[i] = grad_f
        if p.inequality_count:
            forcing[i] += eval_g_gradient(p, z_star).T @ lam_star[i]
        forcing[i] += eval_h_gradient(p).T @ nu_star[i]
    laplacian = build_laplacian(topology).entries
    zeta_star, residual, _, _ = np.linalg.lstsq(laplacian, params.alpha * forcing, rcond=None)
    balance = float(np.linalg.norm(laplacian @ zeta_star - params.alpha * forcing))
    return ReferenceOptimum(
        z_star=z_star,
        zeta_star=zeta_star,
        lam_star=[l.copy() for l in lam_star],
        nu_star=np.asarray(nu_star, dtype=float).copy(),
        balance_residual=balance,
    )


@dataclass
class DualDiagnostics:
    """Passivity bookkeeping of one flow state against a reference optimum.

    storage_estimator is the squared-error energy of the estimate/integrator
    half; storage_dual the squared multiplier error. supply_dual is the
    inner product of the shifted constraint-gradient outputs with the
    shifted estimates (the bound on the dual storage rate); supply_estimator
    is the matching estimator-side supply with the feedback sign and gain.
    """

    storage_estimator: float
    storage_dual: float
    mu: np.ndarray
    omega: np.ndarray
    mu_shifted: np.ndarray
    omega_shifted: np.ndarray
    supply_dual: float
    supply_estimator: float

    @property
    def total_storage(self) -> float:
        return self.storage_estimator + self.storage_dual


def dual_diagnostics(
    state: SolverState,
    reference_optimum: ReferenceOptimum,
    problems: list[LocalProblem],
    params: SolverParams,
) -> DualDiagnostics:
    """Storage values and supply rates for Lyapunov/passivity monitoring."""
    ref = reference_optimum
    n = state.n
    z_c = state.z - ref.z_star[None, :]
    zeta_t = state.zeta - ref.zeta_star
    storage_estimator = 0.5 * float((z_c * z_c).sum() + (zeta_t * zeta_t).sum())
    storage_dual = 0.5 * sum(
        float(np.sum((l - ls) ** 2)) for l, ls in zip(state.lam, ref.lam_star)
    ) + 0.5 * float(np.sum((state.nu - ref.nu_star) ** 2))
    mu = np.zeros_like(state.z)
    mu_star = np.zeros_like(state.z)
    omega = np.zeros_like(state.z)
    omega_star = np.zeros_like(state.z)
    for i, p in enumerate(problems):
        if p.inequality_count:
            mu[i] = eval_g_gradient(p, state.z[i]).T @ state.lam[i]
            mu_star[i] = eval_g_gradient(p, ref.z_star).T @ ref.lam_star[i]
        h_grad_t = eval_h_gradient(p).T
        omega[i] = h_grad_t @ state.nu[i]
        omega_star[i] = h_grad_t @ ref.nu_star[i]
    mu_shifted = mu - mu_star
    omega_shifted = omega - omega_star
    supply_dual = float(((mu_shifted + omega_shifted) * z_c).sum())
    return DualDiagnostics(
        storage_estimator=storage_estimator,
        storage_dual=storage_dual,
        mu=mu,
        omega=omega,
        mu_shifted=mu_shifted,
        omega_shifted=omega_shifted,
        supply_dual=supply_dual,
        supply_estimator=-params.alpha * supply_dual,
    )
