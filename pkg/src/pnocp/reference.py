"""Tight-tolerance reference integration and ground-truth cost."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import solve_ivp

from .ocp import OCPSpec, quadrature_terms


class StiffnessError(RuntimeError):
    def __init__(self, t, msg=""):
        super().__init__(f"reference integrator step size underflow at t={t:.17g}. {msg}".strip())
        self.t = t


@dataclass
class ReferenceSolution:
    """Piecewise dense solution, one interpolant per control interval."""

    t: np.ndarray
    x: np.ndarray
    breaks: np.ndarray
    pieces: list
    node_states: np.ndarray
    order: int
    rtol: float
    atol: float

    def __call__(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        k = np.clip(np.searchsorted(self.breaks, t, side="right") - 1, 0, len(self.pieces) - 1)
        out = np.empty((t.size, self.x.shape[1]))
        for j, (tj, kj) in enumerate(zip(t, k)):
            out[j] = self.pieces[kj](tj)
        return out


def solve_reference(ivp, policy, rtol=1e-10, atol=1e-12, T=None) -> ReferenceSolution:
    """Integrate with an 8th-order embedded Runge-Kutta pair.

    Every control node is a step endpoint, so piecewise-constant inputs are
    never stepped across.  ``T`` (a control node) stops the integration
    early; by default the whole policy range is covered.
    """
    if not (rtol > 0 and atol > 0):
        raise ValueError("tolerances must be positive")
    grid = policy.grid
    T = grid[-1] if T is None else float(T)
    if T not in grid[1:]:
        raise ValueError("end time must be a control node after t=0")
    x = np.array(ivp.x0, dtype=float)
    ts, xs, pieces, nodes = [0.0], [x.copy()], [], [x.copy()]
    for k in range(int(np.searchsorted(grid, T))):
        a, b = grid[k], grid[k + 1]
        if policy.kind == "pwc":
            uk = policy.theta[k * policy.n_u : (k + 1) * policy.n_u].copy()
            rhs = lambda t, y, uk=uk: ivp.f(t, y, uk)
        else:
            rhs = lambda t, y: ivp.f(t, y, policy(min(max(t, 0.0), policy.T)))
        sol = solve_ivp(rhs, (a, b), x, method="DOP853", rtol=rtol, atol=atol, dense_output=True)
        if sol.status != 0:
            raise StiffnessError(float(sol.t[-1]), sol.message)
        if not np.all(np.isfinite(sol.y)):
            raise StiffnessError(float(sol.t[-1]), "non-finite state")
        x = sol.y[:, -1].copy()
        ts.extend(sol.t[1:])
        xs.extend(sol.y[:, 1:].T)
        pieces.append(sol.sol)
        nodes.append(x.copy())
    return ReferenceSolution(np.array(ts), np.array(xs), grid[: len(pieces) + 1].copy(), pieces, np.array(nodes), 8, rtol, atol)


def ground_truth_terms(spec: OCPSpec, ivp, theta, rtol=1e-10, atol=1e-12):
    """Per-node ``(state, input, 0)`` cost terms on the reference trajectory.

    Only nodes ``0..N-1`` enter the sum, so integration stops at ``t_{N-1}``
    (one interval is always integrated).
    """
    policy = spec.policy(theta)
    tc = spec.grids.control[:-1]
    ref = solve_reference(ivp, policy, rtol=rtol, atol=atol, T=spec.grids.control[max(len(tc) - 1, 1)])
    x = ref.node_states[: len(tc)]
    u = np.array([policy(t) for t in tc])
    return quadrature_terms(np.diff(spec.grids.control), spec.Q_cost, spec.R_cost, x, u), ref


def ground_truth_cost(spec: OCPSpec, ivp, theta, rtol=1e-10, atol=1e-12) -> float:
    terms, _ = ground_truth_terms(spec, ivp, theta, rtol, atol)
    return float(terms.sum())
