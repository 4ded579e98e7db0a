"""Per-agent constraint sets and the governor's problem functions.

Each agent assembles a polyhedral set over the stacked plant state [q; xi]
from the half-spaces it senses (one row per half-space per robot, so a
detected boundary protects the whole network) and from its input polytope
mapped through the pre-stabilized input expression. The governor then asks,
for a candidate reference m, whether the invariant ball of the plant around
the all-robots-at-m point stays inside the set. That question produces two
inequality entries per constraint row:

- a center entry: the ball center itself satisfies the row,
- a ball entry: the ball radius fits within the row's margin, measured in
  the row's normal direction (a second-order-cone inequality).

The decision variable of the distributed problem is z = (m, z_q, z_xi) of
dimension 4n+2, where z_q, z_xi are the network's copies of the plant state
that each agent pins to its own measurement through equality constraints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from govnet.graph import NetworkTopology, build_laplacian

# Smoothing width for the ball-entry gradient at zero radius. Values use the
# exact norm; only gradients are smoothed, so feasibility is unaffected.
NORM_SMOOTHING = 1e-9


@dataclass(frozen=True, eq=False)
class HalfSpace:
    """Closed half-space {p in R^2 : normal . p <= offset}."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=float)
        if normal.shape != (2,):
            raise ValueError(f"normal must be a 2-vector, got shape {normal.shape}")
        if not np.any(normal != 0):
            raise ValueError("normal must be nonzero")
        normal.setflags(write=False)
        object.__setattr__(self, "normal", normal)
        object.__setattr__(self, "offset", float(self.offset))

    def margin(self, p: np.ndarray) -> float:
        """offset - normal . p; nonnegative iff p is inside."""
        return self.offset - float(self.normal @ np.asarray(p, dtype=float))

    def foot(self) -> np.ndarray:
        """Perpendicular foot of the boundary line from the origin."""
        return self.normal * (self.offset / float(self.normal @ self.normal))


@dataclass(frozen=True, eq=False)
class InputPolytope:
    """Velocity-input polytope {u in R^2 : A_u u <= b_u}; gamma = 0 means unconstrained."""

    a_u: np.ndarray
    b_u: np.ndarray

    def __post_init__(self):
        a_u = np.asarray(self.a_u, dtype=float).reshape(-1, 2)
        b_u = np.asarray(self.b_u, dtype=float).reshape(-1)
        if a_u.shape[0] != b_u.shape[0]:
            raise ValueError(f"row mismatch: A_u has {a_u.shape[0]} rows, b_u has {b_u.shape[0]}")
        a_u.setflags(write=False)
        b_u.setflags(write=False)
        object.__setattr__(self, "a_u", a_u)
        object.__setattr__(self, "b_u", b_u)

    @property
    def gamma(self) -> int:
        return self.a_u.shape[0]


def build_obstacle_constraints(halfspaces: list[HalfSpace], n: int) -> tuple[np.ndarray, np.ndarray]:
    """Rows forcing every robot's position into every sensed half-space.

    Returns (A, b) with A of shape (len(halfspaces) * n, 4n); the xi columns
    are zero. No half-spaces means zero rows (the free space is the whole
    state space).
    """
    rows = len(halfspaces) * n
    a = np.zeros((rows, 4 * n))
    b = np.zeros(rows)
    for k, hs in enumerate(halfspaces):
        for j in range(n):
            row = k * n + j
            a[row, 2 * j : 2 * j + 2] = hs.normal
            b[row] = hs.offset
    return a, b


def build_input_constraints(
    polytope: InputPolytope,
    agent: int,
    topology: NetworkTopology,
    alpha_r: float,
    formation_bias: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map an input polytope to rows over [q; xi] plus a reference coefficient.

    The robot's velocity input is affine in (q, xi, r); substituting it into
    A_u u <= b_u gives rows A [q; xi] <= b + B r. Followers inject no
    reference, so their B is zero.
    """
    n = topology.n
    gamma = polytope.gamma
    if gamma == 0:
        return np.zeros((0, 4 * n)), np.zeros(0), np.zeros((0, 2))
    bias = np.zeros(2 * n) if formation_bias is None else np.asarray(formation_bias, dtype=float)
    laplacian = build_laplacian(topology).entries
    delta_i = float(topology.delta[agent])
    # u_i = m_q q + m_xi xi + delta_i alpha_r r + const, with the consensus
    # coupling acting on bias-shifted positions.
    sel = np.zeros((2, 2 * n))
    sel[:, 2 * agent : 2 * agent + 2] = np.eye(2)
    lbar_rows = np.kron(laplacian[agent : agent + 1], np.eye(2))  # (2, 2n)
    m_q = -lbar_rows - delta_i * alpha_r * sel
    m_xi = lbar_rows.copy()
    const = lbar_rows @ bias + delta_i * alpha_r * bias[2 * agent : 2 * agent + 2]
    a = np.hstack([polytope.a_u @ m_q, polytope.a_u @ m_xi])
    b = polytope.b_u - polytope.a_u @ const
    b_ref = -delta_i * alpha_r * polytope.a_u
    return a, b, b_ref


@dataclass(frozen=True, eq=False)
class LocalConstraintSet:
    """One agent's stacked constraint data A [q; xi] <= b + B r.

    Obstacle rows come first and carry a zero B block; input rows follow.
    center_offset shifts the certified steady-state position of each robot
    away from the shared reference point (used when the governor should
    account for formation offsets); it defaults to zero.
    """

    A: np.ndarray
    b: np.ndarray
    B: np.ndarray
    obstacle_rows: tuple[int, ...]
    input_rows: tuple[int, ...]
    n: int
    center_offset: np.ndarray = None

    def __post_init__(self):
        n = self.n
        a = np.asarray(self.A, dtype=float).reshape(-1, 4 * n)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        bb = np.asarray(self.B, dtype=float).reshape(-1, 2)
        if not (a.shape[0] == b.shape[0] == bb.shape[0]):
            raise ValueError("A, b, B row counts differ")
        offset = self.center_offset
        offset = np.zeros(2 * n) if offset is None else np.asarray(offset, dtype=float)
        if offset.shape != (2 * n,):
            raise ValueError(f"center_offset must have shape ({2 * n},)")
        for arr in (a, b, bb, offset):
            arr.setflags(write=False)
        object.__setattr__(self, "A", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "B", bb)
        object.__setattr__(self, "center_offset", offset)
        # Precomputed pieces of the two constraint entries per row:
        #   center value = C m + c0, ball value = ||v|| + scale * center value
        a_q = a[:, : 2 * n]
        blocks = a_q.reshape(-1, n, 2).sum(axis=1)  # row-wise sum over robot blocks
        c_m = blocks - bb
        c_0 = a_q @ offset - b
        norms = np.linalg.norm(a, axis=1)
        scale = np.divide(1.0, norms, out=np.zeros_like(norms), where=norms > 0)
        for arr in (a_q, c_m, c_0, scale):
            arr.setflags(write=False)
        object.__setattr__(self, "_A_q", a_q)
        object.__setattr__(self, "_C", c_m)
        object.__setattr__(self, "_c0", c_0)
        object.__setattr__(self, "_scale", scale)

    @property
    def rows(self) -> int:
        return self.A.shape[0]

    @classmethod
    def assemble(
        cls,
        halfspaces: list[HalfSpace],
        polytope: InputPolytope | None,
        agent: int,
        topology: NetworkTopology,
        alpha_r: float,
        formation_bias: np.ndarray | None = None,
        center_offset: np.ndarray | None = None,
    ) -> "LocalConstraintSet":
        n = topology.n
        a_q, b_q = build_obstacle_constraints(halfspaces, n)
        if polytope is not None and polytope.gamma > 0:
            a_u, b_u, b_ref = build_input_constraints(polytope, agent, topology, alpha_r, formation_bias)
        else:
            a_u, b_u, b_ref = np.zeros((0, 4 * n)), np.zeros(0), np.zeros((0, 2))
        a = np.vstack([a_q, a_u])
        b = np.concatenate([b_q, b_u])
        bb = np.vstack([np.zeros((a_q.shape[0], 2)), b_ref])
        return cls(
            A=a,
            b=b,
            B=bb,
            obstacle_rows=tuple(range(a_q.shape[0])),
            input_rows=tuple(range(a_q.shape[0], a.shape[0])),
            n=n,
            center_offset=center_offset,
        )


@dataclass(frozen=True, eq=False)
class LocalProblem:
    """One agent's share of the governor problem at a given measurement.

    Objective: squared distance of m to the operator reference for leaders,
    zero for followers. Inequalities: two entries per constraint row (center
    and ball, interleaved). Equalities: the agent pins its own blocks of
    z_q, z_xi to its measured position and integral state.
    """

    agent: int
    is_leader: bool
    r: np.ndarray
    constraint_set: LocalConstraintSet
    q_i: np.ndarray
    xi_i: np.ndarray
    n: int

    def __post_init__(self):
        r = np.asarray(self.r, dtype=float)
        q_i = np.asarray(self.q_i, dtype=float)
        xi_i = np.asarray(self.xi_i, dtype=float)
        if r.shape != (2,) or q_i.shape != (2,) or xi_i.shape != (2,):
            raise ValueError("r, q_i, xi_i must be 2-vectors")
        if self.constraint_set.n != self.n:
            raise ValueError("constraint set built for a different network size")
        for arr in (r, q_i, xi_i):
            arr.setflags(write=False)
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "q_i", q_i)
        object.__setattr__(self, "xi_i", xi_i)

    @property
    def dim(self) -> int:
        """Decision-variable dimension 4n + 2."""
        return 4 * self.n + 2

    @property
    def inequality_count(self) -> int:
        return 2 * self.constraint_set.rows

    @property
    def equality_count(self) -> int:
        return 4


def split_z(z: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split z into (m, z_q, z_xi)."""
    return z[:2], z[2 : 2 + 2 * n], z[2 + 2 * n :]


def _ball_vector(cset: LocalConstraintSet, m, z_q, z_xi, n: int):
    """v = [tile(m) + offset - z_q; -z_xi], the center-to-copied-state vector."""
    v_q = np.tile(m, n) + cset.center_offset - z_q
    return v_q, -z_xi


def eval_g(problem: LocalProblem, z: np.ndarray) -> np.ndarray:
    """Inequality values, interleaved [center_0, ball_0, center_1, ball_1, ...].

    Feasible iff every entry is <= 0. Center entries are affine in m; ball
    entries add the exact distance from the steady-state center to the
    copied state (z_q, z_xi), scaled against the row margin.
    """
    cset = problem.constraint_set
    n = problem.n
    if z.shape != (problem.dim,):
        raise ValueError(f"z must have shape ({problem.dim},), got {z.shape}")
    if cset.rows == 0:
        return np.zeros(0)
    m, z_q, z_xi = split_z(z, n)
    center = cset._C @ m + cset._c0
    v_q, v_xi = _ball_vector(cset, m, z_q, z_xi, n)
    w = np.sqrt(v_q @ v_q + v_xi @ v_xi)
    ball = w + cset._scale * center
    out = np.empty(2 * cset.rows)
    out[0::2] = center
    out[1::2] = ball
    return out


def eval_g_gradient(problem: LocalProblem, z: np.ndarray) -> np.ndarray:
    """Row-wise gradients of eval_g with respect to z = (m, z_q, z_xi).

    At zero ball radius the norm term is nondifferentiable; its gradient is
    smoothed (NORM_SMOOTHING), which sends the norm part to zero there and
    leaves the affine part exact.
    """
    cset = problem.constraint_set
    n = problem.n
    if cset.rows == 0:
        return np.zeros((0, problem.dim))
    m, z_q, z_xi = split_z(z, n)
    v_q, v_xi = _ball_vector(cset, m, z_q, z_xi, n)
    w_eps = np.sqrt(v_q @ v_q + v_xi @ v_xi + NORM_SMOOTHING**2)
    dw_dm = v_q.reshape(n, 2).sum(axis=0) / w_eps
    dw_dzq = -v_q / w_eps
    dw_dzxi = -v_xi / w_eps
    out = np.zeros((2 * cset.rows, problem.dim))
    out[0::2, :2] = cset._C
    out[1::2, :2] = dw_dm[None, :] + cset._scale[:, None] * cset._C
    out[1::2, 2 : 2 + 2 * n] = dw_dzq[None, :]
    out[1::2, 2 + 2 * n :] = dw_dzxi[None, :]
    return out


def eval_h(problem: LocalProblem, z: np.ndarray) -> np.ndarray:
    """Equality values: the agent's own blocks of (z_q, z_xi) minus its measurement."""
    n = problem.n
    i = problem.agent
    _, z_q, z_xi = split_z(z, n)
    return np.concatenate(
        [z_q[2 * i : 2 * i + 2] - problem.q_i, z_xi[2 * i : 2 * i + 2] - problem.xi_i]
    )


def eval_h_gradient(problem: LocalProblem, z: np.ndarray | None = None) -> np.ndarray:
    """Constant selector Jacobian of eval_h, shape (4, 4n+2)."""
    n = problem.n
    i = problem.agent
    out = np.zeros((4, problem.dim))
    out[0, 2 + 2 * i] = 1.0
    out[1, 2 + 2 * i + 1] = 1.0
    out[2, 2 + 2 * n + 2 * i] = 1.0
    out[3, 2 + 2 * n + 2 * i + 1] = 1.0
    return out


def eval_f(problem: LocalProblem, z: np.ndarray) -> tuple[float, np.ndarray]:
    """Objective value and gradient: ||r - m||^2 for leaders, 0 for followers."""
    grad = np.zeros(problem.dim)
    if not problem.is_leader:
        return 0.0, grad
    m = z[:2]
    diff = m - problem.r
    grad[:2] = 2.0 * diff
    return float(diff @ diff), grad


def build_local_problems(
    q: np.ndarray,
    xi: np.ndarray,
    r: np.ndarray,
    topology: NetworkTopology,
    constraint_sets: list[LocalConstraintSet],
) -> list[LocalProblem]:
    """Assemble every agent's problem for the current measurements and reference."""
    n = topology.n
    return [
        LocalProblem(
            agent=i,
            is_leader=topology.is_leader(i),
            r=r,
            constraint_set=constraint_sets[i],
            q_i=q[2 * i : 2 * i + 2],
            xi_i=xi[2 * i : 2 * i + 2],
            n=n,
        )
        for i in range(n)
    ]
