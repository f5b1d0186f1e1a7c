"""Gaussian ODE filtering and smoothing in square-root form.

Covariances are carried as upper-triangular factors ``R`` with
``R.T @ R = Sigma`` and are always *unscaled*: the filter runs with unit
diffusion and the calibrated scale multiplies the covariances afterwards.

Each step works in the step-size normalized coordinates of its
:class:`~pnocp.prior.TransitionPair` so that the triangularizations do not
see the ``dt^(2p+1)`` spread of the raw process noise.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .prior import (
    IWPModel,
    Selectors,
    TransitionPair,
    initial_cov_sqrt,
    input_derivatives,
    taylor_coefficients,
    transition_matrices,
)

log = logging.getLogger(__name__)

REG_COND = 1e12
REG_EPS = 1e-12


class SingularInnovationError(np.linalg.LinAlgError):
    pass


class DivergenceError(FloatingPointError):
    def __init__(self, step, msg="non-finite state"):
        super().__init__(f"{msg} at integration step {step}")
        self.step = step


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov_sqrt: np.ndarray

    @property
    def cov(self) -> np.ndarray:
        return self.cov_sqrt.T @ self.cov_sqrt


@dataclass(frozen=True)
class Linearization:
    C: np.ndarray
    b: np.ndarray


@dataclass
class FilterStats:
    """Innovations ``r_i = b_i - C_i mu_i^-`` and upper factors of ``S_i``."""

    innovations: list = field(default_factory=list)
    S_factors: list = field(default_factory=list)


@dataclass
class PosteriorTrajectory:
    """Smoothed marginals on the integration grid.

    ``cov_sqrt`` holds unscaled factors; multiply ``cov`` by ``kappa_hat``
    (or by ``prior_scale`` when one was supplied) for calibrated marginals.
    """

    t: np.ndarray
    means: np.ndarray
    cov_sqrt: np.ndarray
    kappa_hat: float
    d: int
    filtered_means: np.ndarray
    filtered_cov_sqrt: np.ndarray
    stats: FilterStats
    iterations: int = 1
    converged: bool = True
    mean_change: float = 0.0
    prior_scale: float | None = None

    @property
    def cov(self) -> np.ndarray:
        return np.einsum("kji,kjl->kil", self.cov_sqrt, self.cov_sqrt)

    @property
    def scale(self) -> float:
        return self.kappa_hat if self.prior_scale is None else self.prior_scale

    def scaled_cov(self) -> np.ndarray:
        return self.scale * self.cov

    @property
    def state_means(self) -> np.ndarray:
        return self.means[:, : self.d]

    def state_var(self) -> np.ndarray:
        """Unscaled marginal variances of the solution components."""
        S = self.cov_sqrt[:, :, : self.d]
        return np.einsum("kji,kji->ki", S, S)

    def state_sd(self) -> np.ndarray:
        return np.sqrt(self.scale * self.state_var())


# --- square-root primitives -----------------------------------------------


def tria(M: np.ndarray, n: int | None = None) -> np.ndarray:
    """Upper factor ``R`` (n x n, non-negative diagonal) with ``R.T R = M.T M``."""
    n = M.shape[1] if n is None else n
    R = np.linalg.qr(M, mode="r")
    if R.shape[0] < n:
        R = np.vstack([R, np.zeros((n - R.shape[0], n))])
    R = R[:n]
    signs = np.where(np.diag(R) < 0, -1.0, 1.0)
    return R * signs[:, None]


def _psd_sqrt_rows(Q):
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))).T


def _normalized_pair(tp: TransitionPair):
    """``(scale, A, noise rows)`` for the step, unscaled when ``scale`` is None."""
    if tp.scale is not None:
        return tp.scale, tp.A_pc, tp.Qn_pc_sqrt
    return np.ones(tp.A.shape[0]), tp.A, _psd_sqrt_rows(tp.Qn)


# --- operations --------------------------------------------------------------


def predict(belief: GaussianBelief, tp: TransitionPair) -> GaussianBelief:
    """Propagate through ``X' = A X + w``, ``w ~ N(0, Qn)``."""
    n = tp.A.shape[0]
    if belief.mean.shape != (n,) or belief.cov_sqrt.shape != (n, n):
        raise ValueError(f"belief of dimension {belief.mean.shape} does not match transition of size {n}")
    s, A, L = _normalized_pair(tp)
    mean = tp.A @ belief.mean
    R = tria(np.vstack([(belief.cov_sqrt / s) @ A.T, L]), n)
    return GaussianBelief(mean, R * s)


def linearize(ivp, sel: Selectors, t, x_lin, u) -> Linearization:
    """First-order expansion of ``E1 X - f(t, E0 X, u)`` around ``E0 X = x_lin``."""
    J = np.asarray(ivp.jac_x(t, x_lin, u), dtype=float)
    fx = np.asarray(ivp.f(t, x_lin, u), dtype=float)
    return Linearization(sel.E1 - J @ sel.E0, fx - J @ x_lin)


def _condition_estimate(R11):
    dg = np.abs(np.diag(R11))
    if dg.size == 0:
        return 1.0
    lo = dg.min()
    return np.inf if lo == 0 else (dg.max() / lo) ** 2


def update(pred: GaussianBelief, lin: Linearization, scale=None):
    """Condition on the noise-free observation ``C X = b``.

    Returns
    -------
    belief : GaussianBelief
    innovation : ndarray
        ``b - C mean^-``.
    S_factor : ndarray
        Upper factor of the innovation covariance ``C Sigma^- C.T`` (after
        regularization, if it was needed).
    """
    C, b = lin.C, lin.b
    n = pred.mean.shape[0]
    d = C.shape[0]
    if d == 0:
        return pred, np.zeros(0), np.zeros((0, 0))
    s = np.ones(n) if scale is None else scale
    Rbar = pred.cov_sqrt / s
    RCt = pred.cov_sqrt @ C.T
    r = b - C @ pred.mean
    Rf = tria(np.hstack([RCt, Rbar]), d + n)
    R11 = Rf[:d, :d]
    if _condition_estimate(R11) > REG_COND:
        diagS = np.sum(R11**2, axis=0)
        eps = REG_EPS * diagS.max()
        if not eps > 0:
            raise SingularInnovationError("innovation covariance is zero")
        M = np.vstack([np.hstack([RCt, Rbar]), np.hstack([np.sqrt(eps) * np.eye(d), np.zeros((d, n))])])
        Rf = tria(M, d + n)
        R11 = Rf[:d, :d]
        if _condition_estimate(R11) > 1e16:
            raise SingularInnovationError("innovation covariance singular after regularization")
    R12 = Rf[:d, d:]
    R22 = Rf[d:, d:]
    z = solve_triangular(R11, r, trans="T")
    mean = pred.mean + s * (R12.T @ z)
    return GaussianBelief(mean, R22 * s), r, R11


def _smoothing_gain(filt: GaussianBelief, pred_next: GaussianBelief, tp: TransitionPair):
    """Gain in normalized coordinates, ``Gbar = Sig Abar^T (Sig^-)^-1``."""
    s, A, L = _normalized_pair(tp)
    Rf = filt.cov_sqrt / s
    Rp = pred_next.cov_sqrt / s
    SAt = Rf.T @ (Rf @ A.T)
    dg = np.abs(np.diag(Rp))
    if not np.all(np.isfinite(Rp)):
        raise np.linalg.LinAlgError("non-finite predicted covariance factor")
    if dg.min() > 1e-14 * max(dg.max(), 1e-300):
        Gt = cho_solve((Rp, False), SAt.T)
        return s, A, L, Gt.T
    Gbar = SAt @ np.linalg.pinv(Rp.T @ Rp, hermitian=True)
    return s, A, L, Gbar


def rts_pass(filtered, predicted, transitions):
    """Backward smoothing recursion.

    ``predicted[i]`` is the one-step prediction into node ``i`` (entry 0 is
    ignored) and ``transitions[i]`` carries node ``i`` to ``i + 1``.
    """
    K = len(filtered) - 1
    if len(predicted) != K + 1 or len(transitions) != K:
        raise ValueError("filtered, predicted and transitions are misaligned")
    out = [None] * (K + 1)
    out[K] = filtered[K]
    for i in range(K - 1, -1, -1):
        fi, pn, nxt = filtered[i], predicted[i + 1], out[i + 1]
        s, A, L, Gbar = _smoothing_gain(fi, pn, transitions[i])
        mean = fi.mean + s * (Gbar @ ((nxt.mean - pn.mean) / s))
        n = mean.shape[0]
        Rs = nxt.cov_sqrt / s
        Rf = fi.cov_sqrt / s
        I_GA = np.eye(n) - Gbar @ A
        R = tria(np.vstack([Rs @ Gbar.T, Rf @ I_GA.T, L @ Gbar.T]), n)
        out[i] = GaussianBelief(mean, R * s)
    return out


def calibrate(stats: FilterStats, N: int, d: int) -> float:
    """Quasi maximum-likelihood diffusion scale from filter innovations."""
    if N < 1:
        raise ValueError("need at least one observed step")
    total = 0.0
    for r, R in zip(stats.innovations, stats.S_factors):
        if r.size:
            z = solve_triangular(R, r, trans="T")
            total += float(z @ z)
    return total / (N * d)


# --- driver -------------------------------------------------------------------


def step_transitions(model: IWPModel, t: np.ndarray):
    cache = {}
    out = []
    for dt in np.diff(t):
        key = float(dt)
        if key not in cache:
            cache[key] = transition_matrices(model, key)
        out.append(cache[key])
    return out


def _forward(ivp, policy, t, model, sel, transitions, lin_points=None, sens=None):
    """One filter pass. ``lin_points[i]`` overrides the EKS linearization state."""
    u_derivs = input_derivatives(policy, model)
    m0, n_exact = taylor_coefficients(ivp, u_derivs, model)
    b0 = GaussianBelief(m0, initial_cov_sqrt(model, n_exact))
    filtered, predicted = [b0], [b0]
    stats = FilterStats()
    if sens is not None:
        sens.start(ivp, policy, model, u_derivs, b0)
    for i, tp in enumerate(transitions):
        ti = t[i + 1]
        pred = predict(filtered[-1], tp)
        u = policy.node_value(ti)
        x_lin = sel.E0 @ pred.mean if lin_points is None else lin_points[i + 1]
        lin = linearize(ivp, sel, ti, x_lin, u)
        if not (np.all(np.isfinite(lin.C)) and np.all(np.isfinite(lin.b))):
            raise DivergenceError(i + 1, "vector field returned non-finite values")
        post, r, SR = update(pred, lin, tp.scale)
        if not (np.all(np.isfinite(post.mean)) and np.all(np.isfinite(post.cov_sqrt))):
            raise DivergenceError(i + 1)
        if sens is not None:
            sens.filter_step(ivp, policy, ti, tp, pred, lin, x_lin, u, r, SR)
        predicted.append(pred)
        filtered.append(post)
        stats.innovations.append(r)
        stats.S_factors.append(SR)
    return filtered, predicted, stats


def ode_filter_smoother(
    ivp,
    policy,
    grids,
    model: IWPModel,
    mode: str = "eks",
    max_iter: int = 20,
    tol: float = 1e-8,
    kappa: float | None = None,
    sensitivities: bool = False,
):
    """Probabilistic solution of the controlled IVP on ``grids.integration``.

    Parameters
    ----------
    mode : {"eks", "ieks"}
        ``"eks"`` linearizes at the predictive means; ``"ieks"`` then
        re-linearizes at the previous smoothing means until the largest
        change of the smoothed means drops below ``tol`` or ``max_iter``
        passes were made.
    kappa : float, optional
        External prior scale.  It never enters the recursions; it only
        replaces ``kappa_hat`` as the post-multiplier of the covariances.
    sensitivities : bool
        Also return derivatives of means, covariances and ``kappa_hat``
        with respect to ``policy.theta`` (EKS only).

    Returns
    -------
    PosteriorTrajectory, or ``(PosteriorTrajectory, Sensitivities)``.
    """
    mode = mode.lower()
    if mode not in ("eks", "ieks"):
        raise ValueError(f"unknown smoother mode {mode!r}")
    if sensitivities and mode != "eks":
        raise NotImplementedError("forward sensitivities are only available for the EKS")
    if model.d != ivp.d:
        raise ValueError(f"prior dimension {model.d} does not match state dimension {ivp.d}")
    t = np.asarray(grids.integration if hasattr(grids, "integration") else grids, dtype=float)
    sel = model.selectors()
    transitions = step_transitions(model, t)
    N = len(transitions)
    sens = _Sensitivities(policy.n_params, model) if sensitivities else None

    filtered, predicted, stats = _forward(ivp, policy, t, model, sel, transitions, sens=sens)
    smoothed = rts_pass(filtered, predicted, transitions)
    iterations, change, converged = 1, 0.0, True
    if mode == "ieks":
        converged = False
        for iterations in range(2, max_iter + 1):
            points = [sel.E0 @ b.mean for b in smoothed]
            filtered, predicted, stats = _forward(ivp, policy, t, model, sel, transitions, lin_points=points)
            new = rts_pass(filtered, predicted, transitions)
            change = max(float(np.max(np.abs(a.mean - b.mean))) for a, b in zip(new, smoothed))
            smoothed = new
            if change < tol:
                converged = True
                break
        if not converged:
            log.warning("IEKS stopped after %d passes, last mean change %.3e", iterations, change)
    kappa_hat = calibrate(stats, N, model.d)
    post = PosteriorTrajectory(
        t=t,
        means=np.array([b.mean for b in smoothed]),
        cov_sqrt=np.array([b.cov_sqrt for b in smoothed]),
        kappa_hat=kappa_hat,
        d=model.d,
        filtered_means=np.array([b.mean for b in filtered]),
        filtered_cov_sqrt=np.array([b.cov_sqrt for b in filtered]),
        stats=stats,
        iterations=iterations,
        converged=converged,
        mean_change=change,
        prior_scale=kappa,
    )
    if sens is None:
        return post
    sens.smooth(filtered, predicted, smoothed, transitions)
    sens.finish(N, model.d)
    return post, sens


class _Sensitivities:
    """Forward-mode derivatives of the EKS outputs with respect to theta.

    Tangents are propagated in covariance form alongside the square-root
    primal pass.  Attributes after a run: ``means`` (K+1, m, n), ``covs``
    (K+1, m, n, n) for the smoothed marginals and ``kappa_hat`` (m,).
    """

    def __init__(self, m, model: IWPModel):
        self.m = m
        self.model = model
        self.d = model.d

    def start(self, ivp, policy, model, u_derivs, b0):
        m, n, d = self.m, model.n, model.d
        B0 = policy.basis(0.0)
        dmu = np.zeros((m, n))
        if model.p == 1:
            dmu[:, d : 2 * d] = (ivp.fu(0.0, ivp.x0, u_derivs[0]) @ B0).T
        else:
            # the initial mean depends on theta only through u(0), u'(0), ...;
            # differentiate that map numerically
            z0 = np.concatenate(u_derivs)
            nu = u_derivs[0].size
            split = lambda z: [z[j * nu : (j + 1) * nu] for j in range(len(u_derivs))]
            jac = np.zeros((n, z0.size))
            for k in range(z0.size):
                h = 1e-6 * (1.0 + abs(z0[k]))
                zp, zm = z0.copy(), z0.copy()
                zp[k] += h
                zm[k] -= h
                fp, _ = taylor_coefficients(ivp, split(zp), model)
                fm, _ = taylor_coefficients(ivp, split(zm), model)
                jac[:, k] = (fp - fm) / (2 * h)
            dmu = (jac @ np.vstack([policy.basis(0.0, derivative=j) for j in range(len(u_derivs))])).T
        self.dmu_f = [dmu]
        self.dSig_f = [np.zeros((m, n, n))]
        self.dmu_p = [dmu]
        self.dSig_p = [np.zeros((m, n, n))]
        self.dq = np.zeros(m)

    def filter_step(self, ivp, policy, t, tp, pred, lin, x_lin, u, r, SR):
        d = self.d
        A = tp.A
        dmu_p = self.dmu_f[-1] @ A.T
        dSig_p = np.einsum("ij,mjk,lk->mil", A, self.dSig_f[-1], A)
        du = policy.node_basis(t)  # (n_u, m)
        dx = dmu_p[:, :d]
        dJ = np.array([ivp.jac_direction(t, x_lin, u, dx[j], du[:, j]) for j in range(self.m)])
        C = lin.C
        Ju = ivp.fu(t, x_lin, u)
        n = C.shape[1]
        dC = np.zeros((self.m, d, n))
        dC[:, :, :d] = -dJ
        dr = (Ju @ du).T - dmu_p @ C.T
        Sig_p = pred.cov
        W = Sig_p @ C.T
        S = SR.T @ SR
        dW = np.einsum("mij,kj->mik", dSig_p, C) + np.einsum("ij,mkj->mik", Sig_p, dC)
        dS = np.einsum("ij,mjk->mik", C, dW) + np.einsum("mij,jk->mik", dC, W)
        Sinv = cho_solve((SR, False), np.eye(d))
        K = W @ Sinv
        dK = np.einsum("mij,jk->mik", dW - np.einsum("ij,mjk->mik", K, dS), Sinv)
        dmu = dmu_p + dK @ r + dr @ K.T
        dSig = dSig_p - np.einsum("mij,kj->mik", dK, W) - np.einsum("ij,mkj->mik", K, dW)
        v = Sinv @ r
        self.dq += 2 * dr @ v - np.einsum("i,mij,j->m", v, dS, v)
        self.dmu_p.append(dmu_p)
        self.dSig_p.append(dSig_p)
        self.dmu_f.append(dmu)
        self.dSig_f.append(0.5 * (dSig + np.swapaxes(dSig, 1, 2)))

    def smooth(self, filtered, predicted, smoothed, transitions):
        K = len(filtered) - 1
        dxi = [None] * (K + 1)
        dLam = [None] * (K + 1)
        dxi[K], dLam[K] = self.dmu_f[K], self.dSig_f[K]
        for i in range(K - 1, -1, -1):
            fi, pn, sn = filtered[i], predicted[i + 1], smoothed[i + 1]
            tp = transitions[i]
            s, Abar, _, Gbar = _smoothing_gain(fi, pn, tp)
            G = s[:, None] * Gbar / s[None, :]
            A = tp.A
            Rp = pn.cov_sqrt / s
            # dG = (dSig_i A^T - G dSig^-_{i+1}) (Sig^-_{i+1})^-1, solved in normalized coordinates
            Y = np.einsum("mij,kj->mik", self.dSig_f[i], A) - np.einsum("ij,mjk->mik", G, self.dSig_p[i + 1])
            Z = Y / s[None, None, :]
            m, n = Z.shape[0], Z.shape[1]
            if np.abs(np.diag(Rp)).min() > 1e-14 * np.abs(np.diag(Rp)).max():
                sol = cho_solve((Rp, False), Z.transpose(2, 0, 1).reshape(n, m * n))
                ZS = sol.reshape(n, m, n).transpose(1, 2, 0)
            else:
                ZS = Z @ np.linalg.pinv(Rp.T @ Rp, hermitian=True)
            dG = ZS / s[None, None, :]
            diff = sn.mean - pn.mean
            dxi[i] = self.dmu_f[i] + dG @ diff + (dxi[i + 1] - self.dmu_p[i + 1]) @ G.T
            D = sn.cov - pn.cov
            dD = dLam[i + 1] - self.dSig_p[i + 1]
            GD = G @ D
            term = np.einsum("mij,jk->mik", dG, GD.T)
            dl = self.dSig_f[i] + term + np.swapaxes(term, 1, 2) + np.einsum("ij,mjk,lk->mil", G, dD, G)
            dLam[i] = 0.5 * (dl + np.swapaxes(dl, 1, 2))
        self.means = np.array(dxi)
        self.covs = np.array(dLam)

    def finish(self, N, d):
        self.kappa_hat = self.dq / (N * d)
