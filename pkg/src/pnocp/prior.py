"""Integrated Wiener process prior.

The extended state stacks the solution and its first ``p`` derivatives in
derivative-major blocks, ``X = (x, x', ..., x^(p))``, each block of length
``d``.  Dimensions are independent, so every matrix below is the Kronecker
product of a ``(p+1) x (p+1)`` scalar matrix with ``I_d``.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np


@dataclass(frozen=True)
class IWPModel:
    p: int
    d: int

    def __post_init__(self):
        if self.p < 1 or self.d < 1:
            raise ValueError(f"need p >= 1 and d >= 1, got p={self.p}, d={self.d}")

    @property
    def n(self) -> int:
        return (self.p + 1) * self.d

    def selectors(self) -> "Selectors":
        return selectors(self)


@dataclass(frozen=True)
class Selectors:
    E0: np.ndarray
    E1: np.ndarray


def selectors(model: IWPModel) -> Selectors:
    eye = np.eye(model.n)
    d = model.d
    return Selectors(eye[:d].copy(), eye[d : 2 * d].copy())


@dataclass(frozen=True)
class TransitionPair:
    """Transition ``A`` and unit-diffusion process noise ``Qn`` over one step.

    ``scale``, ``A_pc`` and ``Qn_pc_sqrt`` describe the same pair in
    step-size normalized coordinates ``X = diag(scale) Y``, where the
    transition no longer depends on ``dt`` and the noise factor is well
    conditioned.  ``scale`` is None for ``dt = 0``.
    """

    A: np.ndarray
    Qn: np.ndarray
    dt: float
    scale: np.ndarray | None = None
    A_pc: np.ndarray | None = None
    Qn_pc_sqrt: np.ndarray | None = None  # upper factor, R^T R = Qn_pc


def _scalar_transition(p, dt):
    A = np.zeros((p + 1, p + 1))
    Q = np.zeros((p + 1, p + 1))
    for a in range(p + 1):
        for b in range(p + 1):
            if b >= a:
                A[a, b] = dt ** (b - a) / factorial(b - a)
            e = 2 * p + 1 - a - b
            Q[a, b] = dt**e / (e * factorial(p - a) * factorial(p - b))
    return A, Q


def _normalized_scalar(p):
    """Step-independent transition and noise after rescaling by ``dt`` powers."""
    A = np.zeros((p + 1, p + 1))
    Q = np.zeros((p + 1, p + 1))
    for a in range(p + 1):
        for b in range(p + 1):
            if b >= a:
                A[a, b] = factorial(p - a) / (factorial(b - a) * factorial(p - b))
            Q[a, b] = 1.0 / (2 * p + 1 - a - b)
    return A, Q


_PC_CACHE: dict = {}


def _normalized(model: IWPModel):
    key = (model.p, model.d)
    if key not in _PC_CACHE:
        A, Q = _normalized_scalar(model.p)
        L = np.linalg.cholesky(Q)
        eye = np.eye(model.d)
        _PC_CACHE[key] = (np.kron(A, eye), np.kron(L.T, eye))
    return _PC_CACHE[key]


def transition_matrices(model: IWPModel, dt: float) -> TransitionPair:
    """Exact discretization of the ``p``-times integrated Wiener process.

    Parameters
    ----------
    model : IWPModel
    dt : float
        Non-negative step size.

    Returns
    -------
    TransitionPair
        ``A[i, j] = dt^(j-i) / (j-i)!`` for ``j >= i`` and
        ``Qn[i, j] = dt^(2p+1-i-j) / ((2p+1-i-j) (p-i)! (p-j)!)``, extended
        blockwise to ``d`` dimensions.
    """
    dt = float(dt)
    if not dt >= 0:
        raise ValueError(f"step size must be non-negative, got {dt}")
    p, d = model.p, model.d
    A1, Q1 = _scalar_transition(p, dt)
    eye = np.eye(d)
    A, Qn = np.kron(A1, eye), np.kron(Q1, eye)
    if dt == 0.0:
        return TransitionPair(A, Qn, dt)
    k = np.arange(p + 1)
    s1 = np.sqrt(dt) * dt ** (p - k) / np.array([factorial(p - a) for a in k], dtype=float)
    A_pc, Qs_pc = _normalized(model)
    return TransitionPair(A, Qn, dt, np.repeat(s1, d), A_pc, Qs_pc)


def taylor_coefficients(ivp, u_derivs, model: IWPModel):
    """Exact initial derivatives of the solution.

    Parameters
    ----------
    ivp : ControlledIVP
    u_derivs : sequence of ndarray
        ``(u(0), u'(0), ..., u^(p-1)(0))``; at least the first two.
    model : IWPModel

    Returns
    -------
    mean : ndarray, shape ``((p+1) d,)``
    n_exact : int
        Number of leading derivative blocks that are exact.  The remaining
        blocks are zero and must be given prior uncertainty.
    """
    x0 = ivp.x0
    u_derivs = [np.asarray(v, dtype=float) for v in u_derivs]
    u0, du0 = u_derivs[0], u_derivs[1]
    p, d = model.p, model.d
    blocks = [x0]
    f0 = np.asarray(ivp.f(0.0, x0, u0), dtype=float)
    blocks.append(f0)
    if p >= 2:
        J = np.asarray(ivp.jac_x(0.0, x0, u0), dtype=float)
        blocks.append(ivp.ft(0.0, x0, u0) + J @ f0 + ivp.fu(0.0, x0, u0) @ du0)
    n_exact = len(blocks)
    if p >= 3:
        if ivp.taylor is not None:
            derivs = ivp.taylor(x0, u_derivs, p)
            blocks = [np.asarray(v, dtype=float) for v in derivs[: p + 1]]
            n_exact = p + 1
        else:
            blocks.extend(np.zeros(d) for _ in range(p + 1 - len(blocks)))
    return np.concatenate(blocks[: p + 1]), min(n_exact, p + 1)


def input_derivatives(policy, model: IWPModel) -> list:
    """``u(0), u'(0), ..., u^(max(p, 2) - 1)(0)``."""
    return [policy(0.0, derivative=k) for k in range(max(model.p, 2))]


def taylor_init(ivp, policy, model: IWPModel) -> np.ndarray:
    """Initial extended state matching the initial value problem at ``t = 0``."""
    mean, _ = taylor_coefficients(ivp, input_derivatives(policy, model), model)
    return mean


def initial_cov_sqrt(model: IWPModel, n_exact: int) -> np.ndarray:
    """Upper factor of the initial covariance: zero on exact blocks, unit elsewhere."""
    diag = np.zeros(model.n)
    diag[n_exact * model.d :] = 1.0
    return np.diag(diag)
