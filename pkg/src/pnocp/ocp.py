"""Expected-cost single-shooting OCP and its certainty-equivalent baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .odefilter import DivergenceError, ode_filter_smoother
from .prior import IWPModel
from .problem import Grids, InputPolicy

log = logging.getLogger(__name__)

MODES = ("proposed", "classical")


@dataclass
class OCPSpec:
    Q_cost: np.ndarray
    R_cost: np.ndarray
    grids: Grids
    model: IWPModel
    mode: str = "proposed"
    smoother_mode: str = "eks"
    bounds: tuple | None = (-10.0, 10.0)
    policy_kind: str = "hermite"
    n_u: int = 1
    memory: int = 10
    gtol: float = 1e-6
    ftol: float = 1e-9
    max_iter: int = 500

    def __post_init__(self):
        self.Q_cost = np.atleast_2d(np.asarray(self.Q_cost, dtype=float))
        self.R_cost = np.atleast_2d(np.asarray(self.R_cost, dtype=float))
        for name, M in (("Q_cost", self.Q_cost), ("R_cost", self.R_cost)):
            if not np.allclose(M, M.T):
                raise ValueError(f"{name} must be symmetric")
            try:
                np.linalg.cholesky(M)
            except np.linalg.LinAlgError:
                raise ValueError(f"{name} must be positive definite") from None
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.R_cost.shape != (self.n_u, self.n_u):
            raise ValueError("R_cost does not match the input dimension")
        if self.bounds is not None:
            lo, hi = (np.asarray(b, dtype=float) for b in self.bounds)
            if np.any(lo > hi):
                raise ValueError("inconsistent bounds: lower above upper")

    def policy(self, theta=None) -> InputPolicy:
        return InputPolicy(self.grids.control, theta, self.policy_kind, self.n_u)

    @property
    def n_params(self) -> int:
        return self.policy().n_params

    def with_mode(self, mode) -> "OCPSpec":
        return OCPSpec(**{**self.__dict__, "mode": mode})

    def box(self):
        """Per-parameter bounds as a list of pairs, or None."""
        if self.bounds is None:
            return None
        n = self.n_params
        lo = np.broadcast_to(np.asarray(self.bounds[0], dtype=float), (n,))
        hi = np.broadcast_to(np.asarray(self.bounds[1], dtype=float), (n,))
        return list(zip(lo, hi))


@dataclass
class CostReport:
    """Total cost and its per-node summands ``(mean_state, input, trace)``."""

    total: float
    per_node: np.ndarray
    kappa_hat: float
    posterior: object = None

    @property
    def cumulative(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.per_node.sum(axis=1))])


def quadrature_terms(dt, Q, R, states, inputs, traces=None, kappa=0.0):
    """Riemann sums ``dt/2 * (x'Qx, u'Ru, kappa tr(Q Lambda_xx))`` per node.

    ``traces`` holds ``tr(Q Lambda_xx)`` per node; None means zero.
    """
    dt = np.asarray(dt, dtype=float)
    states = np.atleast_2d(states)
    inputs = np.atleast_2d(inputs)
    xq = np.einsum("ki,ij,kj->k", states, Q, states)
    uq = np.einsum("ki,ij,kj->k", inputs, R, inputs)
    tr = np.zeros_like(xq) if traces is None else kappa * np.asarray(traces, dtype=float)
    return 0.5 * dt[:, None] * np.stack([xq, uq, tr], axis=1)


def _solve(spec: OCPSpec, ivp, theta, sensitivities=False):
    policy = spec.policy(theta)
    try:
        return policy, ode_filter_smoother(
            ivp, policy, spec.grids, spec.model, mode=spec.smoother_mode, sensitivities=sensitivities
        )
    except (DivergenceError, np.linalg.LinAlgError) as exc:
        raise DivergenceError(getattr(exc, "step", -1), f"solver failed for theta={np.array2string(np.asarray(theta), precision=6)}") from exc


def _control_pieces(spec, policy, post):
    idx = spec.grids.control_index[:-1]
    tc = spec.grids.control[:-1]
    dt = np.diff(spec.grids.control)
    x = post.state_means[idx]
    u = np.array([policy(t) for t in tc])
    return idx, tc, dt, x, u


def expected_cost(spec: OCPSpec, ivp, theta) -> CostReport:
    """Expected Riemann cost over the control nodes ``0..N-1``.

    Classical mode drops the covariance trace; the mean trajectory is the
    same in both modes.
    """
    policy, post = _solve(spec, ivp, theta)
    idx, _, dt, x, u = _control_pieces(spec, policy, post)
    traces = None
    if spec.mode == "proposed":
        Sx = post.cov_sqrt[idx][:, :, : spec.model.d]
        traces = np.einsum("kai,ij,kaj->k", Sx, spec.Q_cost, Sx)
    terms = quadrature_terms(dt, spec.Q_cost, spec.R_cost, x, u, traces, post.kappa_hat)
    total = float(terms.sum())
    if not np.isfinite(total):
        raise DivergenceError(-1, f"non-finite cost for theta={theta}")
    return CostReport(total, terms, post.kappa_hat, post)


def finite_difference_gradient(fun, theta, rel_step=1e-6):
    theta = np.asarray(theta, dtype=float)
    g = np.empty_like(theta)
    for i in range(theta.size):
        h = rel_step * (1.0 + abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (fun(tp) - fun(tm)) / (2 * h)
    return g


def cost_and_gradient(spec: OCPSpec, ivp, theta):
    """``(CostReport, gradient)``; EKS uses forward sensitivities, IEKS differences."""
    theta = np.asarray(theta, dtype=float)
    if spec.smoother_mode != "eks":
        report = expected_cost(spec, ivp, theta)
        g = finite_difference_gradient(lambda th: expected_cost(spec, ivp, th).total, theta)
        return report, g
    policy, (post, sens) = _solve(spec, ivp, theta, sensitivities=True)
    d = spec.model.d
    Q, R = spec.Q_cost, spec.R_cost
    idx, tc, dt, x, u = _control_pieces(spec, policy, post)
    traces = None
    if spec.mode == "proposed":
        Sx = post.cov_sqrt[idx][:, :, :d]
        traces = np.einsum("kai,ij,kaj->k", Sx, Q, Sx)
    terms = quadrature_terms(dt, Q, R, x, u, traces, post.kappa_hat)
    dx = sens.means[idx][:, :, :d]  # (N, m, d)
    du = np.array([policy.basis(t) for t in tc])  # (N, n_u, m)
    g = np.einsum("k,ki,ij,kmj->m", dt, x, Q, dx)
    g += np.einsum("k,ki,ij,kjm->m", dt, u, R, du)
    if spec.mode == "proposed":
        dLxx = sens.covs[idx][:, :, :d, :d]
        g += 0.5 * sens.kappa_hat * float(dt @ traces)
        g += 0.5 * post.kappa_hat * np.einsum("k,ij,kmji->m", dt, Q, dLxx)
    total = float(terms.sum())
    if not (np.isfinite(total) and np.all(np.isfinite(g))):
        raise DivergenceError(-1, f"non-finite cost for theta={theta}")
    return CostReport(total, terms, post.kappa_hat, post), g


def gradient(spec: OCPSpec, ivp, theta) -> np.ndarray:
    return cost_and_gradient(spec, ivp, theta)[1]


@dataclass
class SolveResult:
    theta: np.ndarray
    report: CostReport
    trace: list = field(default_factory=list)
    converged: bool = False
    message: str = ""
    nit: int = 0


_PENALTY = 1e30


def _projected_grad_norm(theta, g, box):
    if box is None:
        return float(np.max(np.abs(g)))
    lo, hi = np.array(box).T
    return float(np.max(np.abs(np.clip(theta - g, lo, hi) - theta)))


def solve_ocp(spec: OCPSpec, ivp, theta0=None) -> SolveResult:
    """Minimize the expected cost with bounded L-BFGS.

    The trace lists one ``{"iter", "cost", "pgnorm"}`` record per accepted
    iterate, starting with ``theta0``.
    """
    theta0 = np.zeros(spec.n_params) if theta0 is None else np.asarray(theta0, dtype=float).copy()
    if theta0.shape != (spec.n_params,) or not np.all(np.isfinite(theta0)):
        raise ValueError("initial parameters must be finite with one entry per policy parameter")
    box = spec.box()
    cache = {}

    def objective(theta):
        key = theta.tobytes()
        if key not in cache:
            try:
                rep, g = cost_and_gradient(spec, ivp, theta)
                cache[key] = (rep.total, g)
            except (DivergenceError, np.linalg.LinAlgError, FloatingPointError) as exc:
                log.debug("penalizing failed evaluation: %s", exc)
                cache[key] = (_PENALTY, np.zeros_like(theta))
        return cache[key]

    f0, g0 = objective(theta0)
    if f0 >= _PENALTY:
        raise DivergenceError(0, f"cost is not finite at the initial parameters {theta0}")
    trace = [{"iter": 0, "cost": f0, "pgnorm": _projected_grad_norm(theta0, g0, box)}]

    def callback(intermediate_result):
        x = intermediate_result.x
        f, g = objective(x)
        trace.append({"iter": len(trace), "cost": f, "pgnorm": _projected_grad_norm(x, g, box)})

    res = minimize(
        objective,
        theta0,
        jac=True,
        method="L-BFGS-B",
        bounds=box,
        callback=callback,
        options={"maxcor": spec.memory, "gtol": spec.gtol, "ftol": spec.ftol, "maxiter": spec.max_iter},
    )
    theta = res.x
    report = expected_cost(spec, ivp, theta)
    converged = bool(res.success)
    if not converged:
        log.warning("optimizer stopped without convergence: %s", res.message)
    return SolveResult(theta, report, trace, converged, str(res.message), int(res.nit))
