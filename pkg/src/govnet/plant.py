"""Pre-stabilized robot network dynamics.

Single-integrator robots on the plane under a PI consensus coupling plus a
proportional pull of the leaders toward the commanded reference. Formation
offsets enter by shifting the consensus coordinates: the coupling acts on
q - bias, so the network settles with each robot at reference + bias_i
while the zero-bias system keeps its plain consensus form.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass

import numpy as np

from govnet.graph import NetworkTopology, build_laplacian

_LAPLACIAN_CACHE: "weakref.WeakKeyDictionary[NetworkTopology, np.ndarray]" = (
    weakref.WeakKeyDictionary()
)


def _laplacian_of(topology: NetworkTopology) -> np.ndarray:
    entries = _LAPLACIAN_CACHE.get(topology)
    if entries is None:
        entries = build_laplacian(topology).entries
        _LAPLACIAN_CACHE[topology] = entries
    return entries


class IntegrationBlowupError(RuntimeError):
    """Integration produced a non-finite state."""

    def __init__(self, t: float):
        self.t = t
        super().__init__(f"plant state became non-finite at t={t:.6g}s")


@dataclass(frozen=True, eq=False)
class PlantState:
    """Stacked planar positions q and integral states xi, each of length 2n."""

    q: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        xi = np.asarray(self.xi, dtype=float)
        if q.ndim != 1 or xi.shape != q.shape or q.size % 2 != 0:
            raise ValueError(f"q and xi must be equal-length 2n vectors, got {q.shape}, {xi.shape}")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(xi))):
            raise ValueError("plant state entries must be finite")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "xi", xi)

    @property
    def n(self) -> int:
        return self.q.size // 2

    def position(self, i: int) -> np.ndarray:
        return self.q[2 * i : 2 * i + 2]


@dataclass(frozen=True, eq=False)
class PlantParams:
    """Gains and step size of the pre-stabilized network.

    alpha_r: proportional gain of the leader feedback (1/s, > 0).
    formation_bias: per-robot offset from the leader reference, stacked 2n.
    dt: integration step (s, > 0).
    """

    alpha_r: float
    formation_bias: np.ndarray
    dt: float = 1e-3

    def __post_init__(self):
        if self.alpha_r <= 0:
            raise ValueError(f"alpha_r must be positive, got {self.alpha_r}")
        if self.dt <= 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        bias = np.asarray(self.formation_bias, dtype=float)
        if bias.ndim != 1 or bias.size % 2 != 0:
            raise ValueError(f"formation_bias must be a stacked 2n vector, got shape {bias.shape}")
        bias.setflags(write=False)
        object.__setattr__(self, "formation_bias", bias)


def plant_derivative(
    state: PlantState,
    reference: np.ndarray,
    topology: NetworkTopology,
    params: PlantParams,
) -> tuple[np.ndarray, np.ndarray]:
    """Time derivative (dq, dxi) of the pre-stabilized network.

    dq  = -Lbar (q - bias) + Lbar xi + alpha_r * D (ref + bias - q)
    dxi = -Lbar (q - bias)

    where Lbar is the Laplacian lifted to the plane and D selects leaders.
    """
    n = topology.n
    if state.n != n:
        raise ValueError(f"state has {state.n} robots, topology has {n}")
    if params.formation_bias.size != 2 * n:
        raise ValueError(
            f"formation_bias has size {params.formation_bias.size}, expected {2 * n}"
        )
    return _derivative_raw(state.q, state.xi, np.asarray(reference, dtype=float), topology, params)


def _derivative_raw(q, xi, r, topology, params):
    n = topology.n
    laplacian = _laplacian_of(topology)
    lq = (laplacian @ (q - params.formation_bias).reshape(n, 2)).reshape(-1)
    lxi = (laplacian @ xi.reshape(n, 2)).reshape(-1)
    pull = np.repeat(topology.delta, 2) * params.alpha_r * (np.tile(r, n) + params.formation_bias - q)
    dq = -lq + lxi + pull
    dxi = -lq
    return dq, dxi


def plant_input(
    state: PlantState,
    reference: np.ndarray,
    agent: int,
    topology: NetworkTopology,
    params: PlantParams,
) -> np.ndarray:
    """Velocity input of one robot. Equals its block of dq (single integrators)."""
    dq, _ = plant_derivative(state, reference, topology, params)
    return dq[2 * agent : 2 * agent + 2]


def integrate_step(
    state: PlantState,
    reference: np.ndarray,
    topology: NetworkTopology,
    params: PlantParams,
    t: float = 0.0,
) -> PlantState:
    """One classical Runge-Kutta step of length params.dt, reference held constant."""
    dt = params.dt
    r = np.asarray(reference, dtype=float)

    def f(q, xi):
        return _derivative_raw(q, xi, r, topology, params)

    k1q, k1x = f(state.q, state.xi)
    k2q, k2x = f(state.q + 0.5 * dt * k1q, state.xi + 0.5 * dt * k1x)
    k3q, k3x = f(state.q + 0.5 * dt * k2q, state.xi + 0.5 * dt * k2x)
    k4q, k4x = f(state.q + dt * k3q, state.xi + dt * k3x)
    q = state.q + (dt / 6.0) * (k1q + 2 * k2q + 2 * k3q + k4q)
    xi = state.xi + (dt / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(xi))):
        raise IntegrationBlowupError(t + dt)
    return PlantState(q, xi)


def tracking_energy(state: PlantState, reference: np.ndarray, params: PlantParams) -> float:
    """0.5 ||q - bias - 1 (x) r||^2 + 0.5 ||xi||^2.

    Non-increasing along trajectories for a constant reference; the level
    sets of this function are the invariant balls the governor certifies.
    """
    n = state.n
    q_err = state.q - params.formation_bias - np.tile(np.asarray(reference, dtype=float), n)
    return 0.5 * float(q_err @ q_err) + 0.5 * float(state.xi @ state.xi)
