"""Centralized brute-force projection of the operator reference.

Ground truth for the distributed solver: after the equality constraints pin
the state copies to the measurements, the only free variable is the planar
reference m, so an exhaustive 2-D grid search plus local refinement solves
the governor problem to high accuracy with none of the flow machinery. Used
by tests and the `oracle` CLI subcommand, never by the live loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from govnet.constraints import (
    LocalConstraintSet,
    LocalProblem,
    build_local_problems,
    eval_f,
    eval_g,
    eval_g_gradient,
)
from govnet.graph import NetworkTopology
from govnet.plant import PlantState

# Exhaustive-phase resolutions; each later level shrinks the search box
# tenfold around the incumbent.
LADDER = (0.05, 1e-3, 1e-5)
# Grid feasibility slack, in multiples of the level resolution. Lattice
# points generally miss a degenerate (lower-dimensional) feasible set, so a
# small slack keeps them visible; the final polish removes the slack again.
SLACK_FACTOR = 3.0
# A point counts as feasible in the strict sense when every inequality
# entry is below this.
FEASIBLE_TOL = 1e-9


@dataclass
class OracleResult:
    """Outcome of the centralized projection.

    active_rows lists (agent, inequality-entry index) pairs that are tight
    at the optimum. multipliers is filled by recover_multipliers. When
    feasible is False, m_star is the best slack-feasible point found (NaN
    if the grid saw nothing at all).
    """

    m_star: np.ndarray
    objective: float
    feasible: bool
    active_rows: tuple[tuple[int, int], ...] = ()
    multipliers: tuple[list[np.ndarray], np.ndarray] | None = None
    degenerate: bool = False
    level_objectives: tuple[float, ...] = ()
    message: str = ""


def _bounding_box(r, q, constraint_sets):
    """Box spanning the reference, robot positions, obstacle feet; +2 m."""
    pts = [np.asarray(r, dtype=float)]
    n = len(constraint_sets)
    for j in range(n):
        pts.append(q[2 * j : 2 * j + 2])
    for cset in constraint_sets:
        offs = cset.center_offset
        for j in range(n):
            pts.append(q[2 * j : 2 * j + 2] - offs[2 * j : 2 * j + 2])
        for row in cset.obstacle_rows:
            a_row = cset.A[row, : 2 * cset.n]
            blocks = a_row.reshape(-1, 2)
            nz = np.flatnonzero(np.any(blocks != 0, axis=1))
            for j in nz:
                normal = blocks[j]
                pts.append(normal * (cset.b[row] / float(normal @ normal)))
    pts = np.array(pts)
    return pts.min(axis=0) - 2.0, pts.max(axis=0) + 2.0


def _batch_inequalities(constraint_sets, q, xi, points):
    """Worst inequality entry per candidate m, vectorized over points.

    Matches eval_g with (z_q, z_xi) pinned to the measurements: center
    entries are affine in m and ball entries add the distance from the
    candidate steady state to the measured state. Rows that collapse to
    the same (coefficient, offset, scale) triple in reference space (one
    half-space seen against every robot does) are deduplicated.
    """
    worst = np.full(points.shape[0], -np.inf)
    xi_sq = float(xi @ xi)
    for cset in constraint_sets:
        if cset.rows == 0:
            continue
        n = cset.n
        anchors = (q - cset.center_offset).reshape(n, 2)
        s_lin = anchors.sum(axis=0)
        t_const = float((anchors * anchors).sum()) + xi_sq
        w = np.sqrt(
            np.maximum(n * (points * points).sum(axis=1) - 2.0 * points @ s_lin + t_const, 0.0)
        )
        rows = np.unique(
            np.column_stack([cset._C, cset._c0, cset._scale]), axis=0
        )
        center = points @ rows[:, :2].T + rows[:, 2]
        ball = w[:, None] + center * rows[:, 3][None, :]
        worst = np.maximum(worst, np.maximum(center.max(axis=1), ball.max(axis=1)))
    return worst


def _pick_best(points, obj, mask, current):
    """Best (key, point) among masked candidates, merged with `current`.

    Keys are (objective, m_x, m_y) so ties break toward the
    lexicographically smallest point.
    """
    if not np.any(mask):
        return current
    pts, vals = points[mask], obj[mask]
    order = np.lexsort((pts[:, 1], pts[:, 0], vals))
    cand = pts[order[0]]
    key = (float(vals[order[0]]), float(cand[0]), float(cand[1]))
    if current is None or key < current[0]:
        return (key, cand)
    return current


def _grid_level(r, q, xi, constraint_sets, lo, hi, res, n_leaders, strict, seed=None):
    """Exhaustive scan of one grid level.

    Returns (best_slack, best_strict): the level's best point within the
    level's feasibility slack, and the best strictly feasible point seen so
    far (carried in as `strict`). Candidates are pruned by the objectives of
    the level's own running best and of the best strictly feasible point;
    a slack incumbent from a coarser level is only used as `seed` (if it
    still passes this level's slack), never as a pruning bound, since it
    may undercut every truly feasible point.
    """
    xs = lo[0] + res * np.arange(int(np.floor((hi[0] - lo[0]) / res)) + 1)
    ys = lo[1] + res * np.arange(int(np.floor((hi[1] - lo[1]) / res)) + 1)
    slack = SLACK_FACTOR * res
    r = np.asarray(r, dtype=float)
    best = None
    if seed is not None:
        seed = np.asarray(seed, dtype=float)
        if _batch_inequalities(constraint_sets, q, xi, seed[None, :])[0] <= slack:
            obj = n_leaders * float((seed - r) @ (seed - r))
            best = ((obj, float(seed[0]), float(seed[1])), seed)
    chunk = max(64, int(4_000_000 // max(len(ys), 1)))
    starts = np.arange(0, len(xs), chunk)
    # Scan chunks nearest the expected optimum first so the running best
    # tightens the pruning window before the bulk of the box is touched.
    anchor = seed[0] if seed is not None else r[0]
    starts = starts[np.argsort(np.abs(xs[np.minimum(starts + chunk // 2, len(xs) - 1)] - anchor), kind="stable")]
    for start in starts:
        xc = xs[start : start + chunk]
        bounds = [cand[0][0] for cand in (best, strict) if cand is not None]
        ys_c = ys
        if bounds:
            # The objective is separable, so the pruning bound confines
            # candidates to a disk around r; materialize only its y-window.
            rad_sq = min(bounds) / n_leaders + 1e-12
            dx_sq = 0.0 if xc[0] <= r[0] <= xc[-1] else float(((xc - r[0]) ** 2).min())
            if dx_sq > rad_sq:
                continue
            dy = np.sqrt(rad_sq - dx_sq)
            i_lo = np.searchsorted(ys, r[1] - dy - 1e-12)
            i_hi = np.searchsorted(ys, r[1] + dy + 1e-12, side="right")
            ys_c = ys[i_lo:i_hi]
            if ys_c.size == 0:
                continue
        mx, my = np.meshgrid(xc, ys_c, indexing="ij")
        points = np.column_stack([mx.ravel(), my.ravel()])
        obj = n_leaders * ((points - r) ** 2).sum(axis=1)
        if bounds:
            keep = obj <= min(bounds) + 1e-12
            points, obj = points[keep], obj[keep]
            if points.shape[0] == 0:
                continue
        worst = _batch_inequalities(constraint_sets, q, xi, points)
        best = _pick_best(points, obj, worst <= slack, best)
        strict = _pick_best(points, obj, worst <= 0.0, strict)
    return best, strict


def _polish(m, r, n_leaders, problems, res):
    """Newton refinement of the grid incumbent on its active set.

    Solves the stationarity system of the reduced problem (objective plus
    tight inequality entries treated as equalities) and prunes rows whose
    multiplier comes out negative. Falls back to the grid point when the
    iteration leaves the feasible set or degrades the objective.
    """
    n = problems[0].n
    q = np.concatenate([p.q_i for p in problems])
    xi = np.concatenate([p.xi_i for p in problems])

    def g_all(point):
        z = np.concatenate([point, q, xi])
        return [eval_g(p, z) for p in problems]

    def grad_m(point):
        z = np.concatenate([point, q, xi])
        return [eval_g_gradient(p, z)[:, :2] for p in problems]

    def residual(point, mu, rows):
        gi = g_all(point)
        g_act = np.array([gi[i][k] for i, k in rows])
        j_act = np.array([grad_m(point)[i][k] for i, k in rows])
        grad_f = 2.0 * n_leaders * (point - r)
        return np.concatenate([grad_f + j_act.T @ mu, g_act]), j_act

    tol_active = max(30.0 * res, 1e-7)
    active = [
        (i, k)
        for i, gi in enumerate(g_all(m))
        for k in np.flatnonzero(gi >= -tol_active)
    ]
    if not active:
        return m, ()
    point = m.astype(float).copy()
    for _ in range(6):
        rows = active
        mu = np.zeros(len(rows))
        for _ in range(60):
            resid, j_act = residual(point, mu, rows)
            rnorm = np.linalg.norm(resid)
            if rnorm < 1e-12:
                break
            kkt = np.zeros((2 + len(rows), 2 + len(rows)))
            kkt[:2, :2] = 2.0 * n_leaders * np.eye(2)
            kkt[:2, 2:] = j_act.T
            kkt[2:, :2] = j_act
            step = np.linalg.lstsq(kkt, -resid, rcond=None)[0]
            # Damped update: the ball entries are conic, so a full Newton
            # step can cycle across the vertex; backtrack on the residual.
            accepted = False
            for factor in (1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625):
                cand_point = point + factor * step[:2]
                cand_mu = mu + factor * step[2:]
                if np.linalg.norm(cand_point - m) > 0.1:
                    continue
                cand_resid, _ = residual(cand_point, cand_mu, rows)
                if np.linalg.norm(cand_resid) < rnorm * (1.0 - 1e-4 * factor):
                    point, mu = cand_point, cand_mu
                    accepted = True
                    break
            if not accepted:
                break
        neg = np.flatnonzero(mu < -1e-8)
        if neg.size == 0:
            break
        drop = neg[np.argmin(mu[neg])]
        active = [row for idx, row in enumerate(rows) if idx != drop]
        if not active:
            return m, tuple()
    worst = max((gi.max() if gi.size else -np.inf) for gi in g_all(point))
    obj_new = n_leaders * float((point - r) @ (point - r))
    obj_old = n_leaders * float((m - r) @ (m - r))
    if worst > FEASIBLE_TOL or obj_new > obj_old + 10.0 * res * (1.0 + np.sqrt(obj_old)):
        return m, tuple()
    final_active = tuple(
        (problems[i].agent, int(k))
        for i, gi in enumerate(g_all(point))
        for k in np.flatnonzero(gi >= -1e-6)
    )
    return point, final_active


def grid_project(
    r: np.ndarray,
    plant_state: PlantState,
    constraint_sets: list[LocalConstraintSet],
    topology: NetworkTopology,
    resolution: float = 1e-5,
    bounds: tuple[np.ndarray, np.ndarray] | None = None,
) -> OracleResult:
    """Exhaustively project the reference onto the governed feasible set.

    Minimizes the leaders' squared distance to r over all m whose
    inequality entries (with state copies pinned to the measurements) are
    nonpositive. A coarse-to-fine ladder of exhaustive grids shrinks the
    box tenfold per level, then a Newton polish lands on the active set to
    machine accuracy. Deterministic, including tie-breaks.
    """
    r = np.asarray(r, dtype=float)
    q, xi = plant_state.q, plant_state.xi
    n_leaders = len(topology.leaders)
    problems = build_local_problems(q, xi, r, topology, constraint_sets)

    worst_at_r = _batch_inequalities(constraint_sets, q, xi, r[None, :])[0]
    if worst_at_r <= 0.0:
        return OracleResult(
            m_star=r.copy(),
            objective=0.0,
            feasible=True,
            active_rows=tuple(
                (p.agent, int(k))
                for p in problems
                for k in np.flatnonzero(eval_g(p, np.concatenate([r, q, xi])) >= -1e-6)
            ),
            level_objectives=(0.0,),
            message="reference already admissible",
        )

    lo, hi = bounds if bounds is not None else _bounding_box(r, q, constraint_sets)
    ladder = [res for res in LADDER if res >= resolution] or [resolution]
    if ladder[-1] > resolution:
        ladder.append(resolution)

    incumbent = None
    strict = None
    level_objectives = []
    for level, res in enumerate(ladder):
        seed = None
        if level > 0:
            width = (hi - lo) / 10.0
            center = incumbent[1]
            lo, hi = center - width / 2.0, center + width / 2.0
            seed = center
        best, strict = _grid_level(
            r, q, xi, constraint_sets, lo, hi, res, n_leaders, strict, seed=seed
        )
        found = best if best is not None else strict
        if found is None:
            if incumbent is None:
                return OracleResult(
                    m_star=np.full(2, np.nan),
                    objective=np.inf,
                    feasible=False,
                    message=f"no feasible grid point at resolution {res}",
                )
            break
        incumbent = found
        level_objectives.append(strict[0][0] if strict is not None else found[0][0])

    m_grid = incumbent[1]
    m_star, active = _polish(m_grid, r, n_leaders, problems, ladder[-1])
    z_star = np.concatenate([m_star, q, xi])
    worst = max(
        (eval_g(p, z_star).max() if p.inequality_count else -np.inf) for p in problems
    )
    feasible = bool(worst <= FEASIBLE_TOL)
    if not active:
        active = tuple(
            (p.agent, int(k))
            for p in problems
            for k in np.flatnonzero(eval_g(p, z_star) >= -1e-6)
        )
    return OracleResult(
        m_star=m_star,
        objective=n_leaders * float((m_star - r) @ (m_star - r)),
        feasible=feasible,
        active_rows=active,
        level_objectives=tuple(level_objectives),
        message="" if feasible else f"worst inequality entry {worst:.3e} after polish",
    )


def recover_multipliers(
    result: OracleResult, problems: list[LocalProblem]
) -> tuple[list[np.ndarray], np.ndarray]:
    """Best-effort KKT multipliers at the oracle optimum.

    Inequality multipliers solve the m-block stationarity equation by
    nonnegative least squares over the active entries (inactive entries get
    zero, enforcing complementary slackness); equality multipliers then
    cancel the remaining state-copy blocks exactly. Also stores the result
    on result.multipliers and flags rank-deficient active sets as
    degenerate.
    """
    if not result.feasible:
        raise ValueError("cannot recover multipliers for an infeasible result")
    n = problems[0].n
    q = np.concatenate([p.q_i for p in problems])
    xi = np.concatenate([p.xi_i for p in problems])
    z_star = np.concatenate([result.m_star, q, xi])
    grads = [eval_g_gradient(p, z_star) for p in problems]
    lam = [np.zeros(p.inequality_count) for p in problems]

    active = list(result.active_rows)
    if active:
        j_cols = np.column_stack([grads[i][k, :2] for i, k in active])
        grad_f = sum(eval_f(p, z_star)[1][:2] for p in problems)
        coeffs, resid = nnls(j_cols, -grad_f)
        for (i, k), c in zip(active, coeffs):
            lam[i][k] = c
        # Dependent active gradients leave the multipliers non-unique.
        degenerate = np.linalg.matrix_rank(j_cols) < j_cols.shape[1]
    else:
        degenerate = False

    total = np.zeros(4 * n + 2)
    for gi, li in zip(grads, lam):
        if li.size:
            total += gi.T @ li
    nu = np.zeros((n, 4))
    for j in range(n):
        nu[j, 0:2] = -total[2 + 2 * j : 2 + 2 * j + 2]
        nu[j, 2:4] = -total[2 + 2 * n + 2 * j : 2 + 2 * n + 2 * j + 2]
    result.multipliers = (lam, nu)
    result.degenerate = bool(degenerate)
    return lam, nu
