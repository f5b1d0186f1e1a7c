"""Controlled initial value problems, input policies and time grids."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

Field = Callable[[float, np.ndarray, np.ndarray], np.ndarray]

POLICY_KINDS = ("pwc", "hermite")


def _fd_step(v):
    return 1e-6 * (1.0 + np.abs(v))


@dataclass(frozen=True)
class ControlledIVP:
    """Vector field ``f(t, x, u)`` with its state Jacobian and initial state.

    Only ``f`` and ``jac_x`` are required.  The optional derivatives are
    used by the exact initialization and by the gradient recursions; when
    absent they are replaced by central finite differences.

    Attributes
    ----------
    f : callable
        ``f(t, x, u) -> (d,)``.
    jac_x : callable
        ``jac_x(t, x, u) -> (d, d)``, the Jacobian of ``f`` in ``x``.
    x0 : ndarray
        Initial state.
    T : float
        Horizon.
    n_u : int
        Input dimension.
    jac_u : callable, optional
        ``jac_u(t, x, u) -> (d, n_u)``.
    df_dt : callable, optional
        ``df_dt(t, x, u) -> (d,)``, explicit time derivative.
    djac : callable, optional
        ``djac(t, x, u, dx, du) -> (d, d)``, directional derivative of
        ``jac_x`` along ``(dx, du)``.
    taylor : callable, optional
        ``taylor(x0, u_derivs, order) -> list`` of the exact solution
        derivatives ``x, x', ..., x^(order)`` at ``t = 0``, given the input
        derivatives ``u(0), ..., u^(order-1)(0)``.  Only consulted for priors
        of order above 2.
    """

    f: Field
    jac_x: Callable[[float, np.ndarray, np.ndarray], np.ndarray]
    x0: np.ndarray
    T: float
    n_u: int = 1
    jac_u: Optional[Callable] = None
    df_dt: Optional[Callable] = None
    djac: Optional[Callable] = None
    taylor: Optional[Callable] = None
    name: str = "ivp"

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        object.__setattr__(self, "x0", x0)
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got {self.T}")

    @property
    def d(self) -> int:
        return self.x0.shape[0]

    def fu(self, t, x, u):
        """Jacobian of ``f`` with respect to the input."""
        if self.jac_u is not None:
            return np.asarray(self.jac_u(t, x, u), dtype=float).reshape(self.d, self.n_u)
        u = np.asarray(u, dtype=float)
        out = np.empty((self.d, self.n_u))
        for j in range(self.n_u):
            e = np.zeros(self.n_u)
            e[j] = _fd_step(u[j])
            out[:, j] = (self.f(t, x, u + e) - self.f(t, x, u - e)) / (2 * e[j])
        return out

    def ft(self, t, x, u):
        """Explicit partial time derivative of ``f``."""
        if self.df_dt is not None:
            return np.asarray(self.df_dt(t, x, u), dtype=float)
        h = _fd_step(t)
        return (np.asarray(self.f(t + h, x, u)) - np.asarray(self.f(t - h, x, u))) / (2 * h)

    def jac_direction(self, t, x, u, dx, du):
        """Directional derivative of ``jac_x`` along ``(dx, du)``."""
        if self.djac is not None:
            return np.asarray(self.djac(t, x, u, dx, du), dtype=float)
        scale = max(np.max(np.abs(dx), initial=0.0), np.max(np.abs(du), initial=0.0))
        if scale == 0.0:
            return np.zeros((self.d, self.d))
        eps = 1e-6 * (1.0 + max(np.max(np.abs(x)), np.max(np.abs(u), initial=0.0))) / scale
        jp = np.asarray(self.jac_x(t, x + eps * dx, u + eps * du))
        jm = np.asarray(self.jac_x(t, x - eps * dx, u - eps * du))
        return (jp - jm) / (2 * eps)

    def check_jacobian(self, rng=None, n_probe=5, scale=1.0) -> float:
        """Largest relative deviation of ``jac_x`` from central differences.

        Probes random points around ``x0``; user-supplied problems should
        stay below ``1e-5``.
        """
        rng = np.random.default_rng(0) if rng is None else rng
        worst = 0.0
        for _ in range(n_probe):
            t = rng.uniform(0, self.T)
            x = self.x0 + scale * rng.standard_normal(self.d)
            u = scale * rng.standard_normal(self.n_u)
            J = np.asarray(self.jac_x(t, x, u))
            Jfd = np.empty_like(J)
            for k in range(self.d):
                e = np.zeros(self.d)
                e[k] = _fd_step(x[k])
                Jfd[:, k] = (self.f(t, x + e, u) - self.f(t, x - e, u)) / (2 * e[k])
            err = np.max(np.abs(J - Jfd)) / (1.0 + np.max(np.abs(Jfd)))
            worst = max(worst, err)
        return worst


class InputPolicy:
    """Input trajectory ``u(t)`` parameterized linearly by ``theta``.

    ``kind="pwc"`` holds one ``n_u`` block per control interval (left-closed,
    the final node reuses the last interval).  ``kind="hermite"`` holds one
    block per control node and interpolates with a C1 cubic whose node
    slopes are finite differences of neighbouring node values.
    """

    def __init__(self, grid, theta=None, kind="hermite", n_u=1):
        grid = np.asarray(grid, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise ValueError("control grid must be strictly increasing with >= 2 nodes")
        if kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {kind!r}")
        self.grid = grid
        self.kind = kind
        self.n_u = n_u
        self.n_blocks = grid.size - 1 if kind == "pwc" else grid.size
        if theta is None:
            theta = np.zeros(self.n_params)
        self.theta = self._check_theta(theta)
        if kind == "hermite":
            self._slope_op = _fd_slope_operator(grid)

    @property
    def N(self) -> int:
        return self.grid.size - 1

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    @property
    def n_params(self) -> int:
        return self.n_blocks * self.n_u

    def _check_theta(self, theta):
        theta = np.asarray(theta, dtype=float).ravel()
        if theta.size != self.n_params:
            raise ValueError(
                f"{self.kind} policy on {self.N} intervals expects {self.n_params} parameters, got {theta.size}"
            )
        return theta

    def with_theta(self, theta) -> "InputPolicy":
        new = object.__new__(InputPolicy)
        new.__dict__.update(self.__dict__)
        new.theta = self._check_theta(theta)
        return new

    def _locate(self, t, left=False):
        t = float(t)
        if t < self.grid[0] or t > self.grid[-1]:
            raise ValueError(f"time {t} outside policy range [{self.grid[0]}, {self.grid[-1]}]")
        k = int(np.searchsorted(self.grid, t, side="left" if left else "right")) - 1
        return min(max(k, 0), self.N - 1)

    def weights(self, t, derivative=0, left=False) -> np.ndarray:
        """Row ``w`` with ``u(t) = w @ theta_blocks``, shape ``(n_blocks,)``.

        ``derivative=k`` gives the weights of the k-th time derivative,
        taken inside the interval containing ``t``.  Intervals are
        left-closed; ``left=True`` takes the left limit at interior nodes
        instead (the value that drove the trajectory up to ``t``).
        """
        if derivative < 0:
            raise ValueError("derivative order must be nonnegative")
        k = self._locate(t, left)
        w = np.zeros(self.n_blocks)
        if self.kind == "pwc":
            if derivative == 0:
                w[k] = 1.0
            return w
        if derivative > 3:
            return w
        t0, t1 = self.grid[k], self.grid[k + 1]
        h = t1 - t0
        s = (t - t0) / h
        # Hermite basis (h00, h10, h01, h11) as cubic coefficients in s
        coef = np.array([[1, 0, -3, 2], [0, 1, -2, 1], [0, 0, 3, -2], [0, 0, -1, 1]], dtype=float)
        for _ in range(derivative):
            coef = np.hstack([coef[:, 1:] * np.arange(1, coef.shape[1]), np.zeros((4, 1))])
        h00, h10, h01, h11 = coef @ s ** np.arange(4) / h**derivative
        w[k] += h00
        w[k + 1] += h01
        w += h * (h10 * self._slope_op[k] + h11 * self._slope_op[k + 1])
        return w

    def basis(self, t, derivative=0, left=False) -> np.ndarray:
        """Sensitivity ``du(t)/dtheta``, shape ``(n_u, n_params)``."""
        return np.kron(self.weights(t, derivative, left), np.eye(self.n_u))

    def __call__(self, t, derivative=0, left=False) -> np.ndarray:
        return self.basis(t, derivative, left) @ self.theta

    def node_basis(self, t) -> np.ndarray:
        """Basis of the mean of the one-sided limits at ``t``.

        Equal to ``basis(t)`` wherever the input is continuous.  At a jump
        of a stepped input, a solver node that stores one derivative value
        serves the steps on both sides; the mean keeps a trapezoid-type
        rule exact for inputs entering the field affinely.
        """
        return 0.5 * (self.basis(t, left=True) + self.basis(t))

    def node_value(self, t) -> np.ndarray:
        return self.node_basis(t) @ self.theta


def _fd_slope_operator(grid):
    """Matrix mapping node values to finite-difference node slopes."""
    n = grid.size
    D = np.zeros((n, n))
    D[0, 0], D[0, 1] = -1.0 / (grid[1] - grid[0]), 1.0 / (grid[1] - grid[0])
    D[-1, -2], D[-1, -1] = -1.0 / (grid[-1] - grid[-2]), 1.0 / (grid[-1] - grid[-2])
    for k in range(1, n - 1):
        w = grid[k + 1] - grid[k - 1]
        D[k, k - 1], D[k, k + 1] = -1.0 / w, 1.0 / w
    return D


def eval_policy(policy: InputPolicy, t) -> np.ndarray:
    return policy(t)


@dataclass(frozen=True)
class Grids:
    """Control grid and its uniform refinement used for integration."""

    control: np.ndarray
    integration: np.ndarray
    steps_per_interval: int

    @classmethod
    def uniform(cls, T, N, N_int=None) -> "Grids":
        N_int = N if N_int is None else N_int
        if N < 1 or N_int < 1 or N_int % N:
            raise ValueError(f"N_int={N_int} must be a positive multiple of N={N}")
        integration = np.linspace(0.0, float(T), N_int + 1)
        m = N_int // N
        return cls(integration[::m].copy(), integration, m)

    @classmethod
    def refine(cls, control, m) -> "Grids":
        control = np.asarray(control, dtype=float)
        if control.ndim != 1 or control.size < 2 or np.any(np.diff(control) <= 0):
            raise ValueError("control grid must be strictly increasing")
        if control[0] != 0.0:
            raise ValueError("control grid must start at 0")
        if m < 1:
            raise ValueError("need at least one integration step per interval")
        frac = np.arange(m) / m
        inner = control[:-1, None] + np.diff(control)[:, None] * frac[None, :]
        return cls(control, np.append(inner.ravel(), control[-1]), m)

    @property
    def N(self) -> int:
        return self.control.size - 1

    @property
    def N_int(self) -> int:
        return self.integration.size - 1

    @property
    def control_index(self) -> np.ndarray:
        """Positions of the control nodes inside the integration grid."""
        return np.arange(self.N + 1) * self.steps_per_interval


# --- named problems -------------------------------------------------------


def logistic_field(t, x, u):
    x1, x2 = x
    return np.array([(1 - x2) ** 2 * x1 - x2 + u[0], x1])


def logistic_jac(t, x, u):
    x1, x2 = x
    return np.array([[(1 - x2) ** 2, -2 * (1 - x2) * x1 - 1], [1.0, 0.0]])


def _logistic_djac(t, x, u, dx, du):
    x1, x2 = x
    d1, d2 = dx
    return np.array(
        [[-2 * (1 - x2) * d2, -2 * (1 - x2) * d1 + 2 * x1 * d2], [0.0, 0.0]]
    )


def logistic_taylor(x0, u_derivs, order):
    """Exact ``x, x', ..., x^(order)`` at ``t = 0`` by power-series recursion.

    With ``x(t) = sum a_k t^k`` the field is polynomial, so each coefficient
    follows from Cauchy products of the lower ones.
    """
    a = np.zeros((order + 1, 2))
    a[0] = x0
    uc = np.zeros(order)
    for k, uk in enumerate(u_derivs[:order]):
        uc[k] = np.asarray(uk).ravel()[0] / math.factorial(k)
    w = np.zeros(order + 1)  # 1 - x2
    for k in range(order):
        w[k] = (1.0 if k == 0 else 0.0) - a[k, 1]
        w2 = np.array([np.dot(w[: j + 1], w[j::-1]) for j in range(k + 1)])
        a[k + 1, 0] = (np.dot(w2, a[k::-1, 0]) - a[k, 1] + uc[k]) / (k + 1)
        a[k + 1, 1] = a[k, 0] / (k + 1)
    return [math.factorial(k) * a[k] for k in range(order + 1)]


@dataclass
class OCPDefaults:
    """Cost weights and discretization defaults attached to a named problem."""

    Q_cost: np.ndarray
    R_cost: np.ndarray
    N: int
    N_int: int = 40
    policy_kind: str = "hermite"
    bounds: Optional[tuple] = (-10.0, 10.0)
    extra: dict = field(default_factory=dict)  # "solution": exact x(t) for zero input, if known
    warm_start: Optional[Callable] = None  # (ivp, grid, kind) -> initial theta


def logistic_example():
    """Two-state logistic oscillator with additive input on the first state.

    Returns the problem ``x1' = (1 - x2)^2 x1 - x2 + u, x2' = x1`` from
    ``x0 = (3, 1)`` on ``[0, 5]`` together with ``Q = 50 I``, ``R = 1`` and
    20 control intervals.
    """
    ivp = ControlledIVP(
        f=logistic_field,
        jac_x=logistic_jac,
        x0=np.array([3.0, 1.0]),
        T=5.0,
        n_u=1,
        jac_u=lambda t, x, u: np.array([[1.0], [0.0]]),
        df_dt=lambda t, x, u: np.zeros(2),
        djac=_logistic_djac,
        taylor=logistic_taylor,
        name="logistic",
    )
    defaults = OCPDefaults(Q_cost=50.0 * np.eye(2), R_cost=np.eye(1), N=20, warm_start=logistic_warm_start)
    return ivp, defaults


def logistic_feedback(x, gains=(2.0, 3.0)):
    """Feedback-linearizing law giving ``x2'' = -a x2 - b x2'`` in closed loop."""
    x1, x2 = x
    a, b = gains
    return -((1 - x2) ** 2) * x1 + x2 - a * x2 - b * x1


def logistic_warm_start(ivp, grid, kind, bounds=(-10.0, 10.0)):
    """Initial parameters from the stabilizing feedback sampled along its closed loop.

    Without input the oscillator escapes in finite time, so a zero initial
    guess leaves the optimizer in a region where no solver is accurate.
    Hermite nodes take the feedback at the nodes, stepped inputs at the
    interval midpoints.
    """
    from scipy.integrate import solve_ivp

    grid = np.asarray(grid, dtype=float)
    rhs = lambda t, x: ivp.f(t, x, np.array([logistic_feedback(x)]))
    sol = solve_ivp(rhs, (grid[0], grid[-1]), ivp.x0, rtol=1e-10, atol=1e-12, dense_output=True)
    ts = grid if kind == "hermite" else 0.5 * (grid[1:] + grid[:-1])
    theta = np.array([logistic_feedback(sol.sol(t)) for t in ts])
    return np.clip(theta, *bounds) if bounds is not None else theta


def scalar_logistic(x0=0.1, T=5.0):
    """Uncontrolled ``x' = x (1 - x)``, closed form ``1 / (1 + (1/x0 - 1) e^-t)``."""
    ivp = ControlledIVP(
        f=lambda t, x, u: x * (1 - x),
        jac_x=lambda t, x, u: np.atleast_2d(1 - 2 * x),
        x0=np.array([x0]),
        T=T,
        jac_u=lambda t, x, u: np.zeros((1, 1)),
        df_dt=lambda t, x, u: np.zeros(1),
        djac=lambda t, x, u, dx, du: np.atleast_2d(-2 * dx),
        name="logistic1d",
    )
    exact = lambda t: scalar_logistic_solution(t, x0)[..., None]
    return ivp, OCPDefaults(Q_cost=np.eye(1), R_cost=np.eye(1), N=5, N_int=40, extra={"solution": exact})


def scalar_logistic_solution(t, x0=0.1):
    return 1.0 / (1.0 + (1.0 / x0 - 1.0) * np.exp(-np.asarray(t)))


def linear_example(a=-1.0, x0=1.0, T=3.0):
    """``x' = a x + u``."""
    ivp = ControlledIVP(
        f=lambda t, x, u: a * x + u,
        jac_x=lambda t, x, u: np.array([[a]]),
        x0=np.array([x0]),
        T=T,
        jac_u=lambda t, x, u: np.eye(1),
        df_dt=lambda t, x, u: np.zeros(1),
        djac=lambda t, x, u, dx, du: np.zeros((1, 1)),
        name="linear",
    )
    exact = lambda t: x0 * np.exp(a * np.asarray(t, dtype=float))[..., None]  # for u = 0
    return ivp, OCPDefaults(Q_cost=np.eye(1), R_cost=np.eye(1), N=3, N_int=30, extra={"solution": exact})


def zero_example(d=2, T=1.0):
    """``x' = 0`` from the origin."""
    ivp = ControlledIVP(
        f=lambda t, x, u: np.zeros(d),
        jac_x=lambda t, x, u: np.zeros((d, d)),
        x0=np.zeros(d),
        T=T,
        jac_u=lambda t, x, u: np.zeros((d, 1)),
        df_dt=lambda t, x, u: np.zeros(d),
        djac=lambda t, x, u, dx, du: np.zeros((d, d)),
        name="zero",
    )
    exact = lambda t: np.zeros(np.shape(t) + (d,))
    return ivp, OCPDefaults(Q_cost=np.eye(d), R_cost=np.eye(1), N=1, N_int=4, extra={"solution": exact})


PROBLEMS = {
    "logistic": logistic_example,
    "logistic1d": scalar_logistic,
    "linear": linear_example,
    "zero": zero_example,
}


def load_problem(source):
    """Build ``(ivp, defaults)`` from a problem name or a JSON config.

    The JSON object names a registered problem and may override
    ``x0, T, N, N_int, Q_diag, R_diag, policy_kind, bounds``.
    """
    if isinstance(source, (str, Path)) and str(source) in PROBLEMS:
        return PROBLEMS[str(source)]()
    if isinstance(source, dict):
        cfg = source
    else:
        cfg = json.loads(Path(source).read_text())
    name = cfg.get("name", "logistic")
    if name not in PROBLEMS:
        raise ValueError(f"unknown problem {name!r}; known: {sorted(PROBLEMS)}")
    ivp, defaults = PROBLEMS[name]()
    updates = {}
    if "x0" in cfg:
        updates["x0"] = np.asarray(cfg["x0"], dtype=float)
    if "T" in cfg:
        updates["T"] = float(cfg["T"])
    if updates:
        ivp = ControlledIVP(**{**ivp.__dict__, **updates})
    if "x0" in cfg:
        defaults.extra.pop("solution", None)  # closed forms are tied to the built-in x0
    if "N" in cfg:
        defaults.N = int(cfg["N"])
    if "N_int" in cfg:
        defaults.N_int = int(cfg["N_int"])
    if "Q_diag" in cfg:
        defaults.Q_cost = np.diag(np.asarray(cfg["Q_diag"], dtype=float))
    if "R_diag" in cfg:
        defaults.R_cost = np.diag(np.asarray(cfg["R_diag"], dtype=float))
    if "policy_kind" in cfg:
        defaults.policy_kind = cfg["policy_kind"]
    if "bounds" in cfg:
        b = cfg["bounds"]
        defaults.bounds = None if b is None else (float(b[0]), float(b[1]))
    return ivp, defaults
