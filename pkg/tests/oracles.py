"""Independent reference computations used by the tests.

Everything here works on plain covariance matrices with textbook formulas
and shares no code with the square-root implementation.
"""

import numpy as np
from scipy.integrate import quad_vec
from scipy.linalg import expm


def iwp_drift(p, d):
    F = np.diag(np.ones(p), k=1)
    L = np.zeros((p + 1, 1))
    L[-1, 0] = 1.0
    return np.kron(F, np.eye(d)), np.kron(L, np.eye(d))


def iwp_quadrature(p, d, dt):
    """Transition ``expm(F dt)`` and noise ``int_0^dt e^{Fs} L L^T e^{F^T s} ds``."""
    F, L = iwp_drift(p, d)
    A = expm(F * dt)

    def integrand(s):
        E = expm(F * s)
        return E @ L @ L.T @ E.T

    Q, _ = quad_vec(integrand, 0.0, dt, epsabs=1e-15, epsrel=1e-13)
    return A, Q


def dense_kalman_smoother(A_list, Q_list, m0, P0, obs):
    """Covariance-form Kalman filter and RTS smoother with exact observations.

    ``obs[i]`` is ``(C, b)`` for node ``i + 1`` (noise-free) or None.
    Returns filtered and smoothed means/covariances and the innovation
    pairs ``(r, S)``.
    """
    ms, Ps, mps, Pps, innov = [m0], [P0], [m0], [P0], []
    for A, Q, ob in zip(A_list, Q_list, obs):
        mp = A @ ms[-1]
        Pp = A @ Ps[-1] @ A.T + Q
        mps.append(mp)
        Pps.append(Pp)
        if ob is None:
            ms.append(mp)
            Ps.append(Pp)
            continue
        C, b = ob
        S = C @ Pp @ C.T
        K = Pp @ C.T @ np.linalg.inv(S)
        r = b - C @ mp
        innov.append((r, S))
        ms.append(mp + K @ r)
        P = Pp - K @ S @ K.T
        Ps.append(0.5 * (P + P.T))
    xs, Ls = [None] * len(ms), [None] * len(ms)
    xs[-1], Ls[-1] = ms[-1], Ps[-1]
    for i in range(len(ms) - 2, -1, -1):
        A = A_list[i]
        G = Ps[i] @ A.T @ np.linalg.inv(Pps[i + 1])
        xs[i] = ms[i] + G @ (xs[i + 1] - mps[i + 1])
        L = Ps[i] + G @ (Ls[i + 1] - Pps[i + 1]) @ G.T
        Ls[i] = 0.5 * (L + L.T)
    return np.array(ms), np.array(Ps), np.array(xs), np.array(Ls), innov


def joint_gaussian_posterior(A_list, Q_list, m0, P0, obs):
    """Marginals of the joint Gaussian over all nodes conditioned at once."""
    n = m0.size
    K = len(A_list) + 1
    # prior joint mean/cov via the state recursion
    means = [m0]
    for A in A_list:
        means.append(A @ means[-1])
    mu = np.concatenate(means)
    Phi = [[None] * K for _ in range(K)]
    for i in range(K):
        Phi[i][i] = np.eye(n)
        for j in range(i + 1, K):
            Phi[j][i] = A_list[j - 1] @ Phi[j - 1][i]
    marg = [P0]
    for A, Q in zip(A_list, Q_list):
        marg.append(A @ marg[-1] @ A.T + Q)
    Sig = np.zeros((K * n, K * n))
    for i in range(K):
        for j in range(i, K):
            block = Phi[j][i] @ marg[i]
            Sig[j * n : (j + 1) * n, i * n : (i + 1) * n] = block
            Sig[i * n : (i + 1) * n, j * n : (j + 1) * n] = block.T
    H, y = [], []
    for i, ob in enumerate(obs):
        if ob is None:
            continue
        C, b = ob
        row = np.zeros((C.shape[0], K * n))
        row[:, (i + 1) * n : (i + 2) * n] = C
        H.append(row)
        y.append(b)
    H = np.vstack(H)
    y = np.concatenate(y)
    S = H @ Sig @ H.T
    gain = np.linalg.solve(S, H @ Sig).T
    post_mu = mu + gain @ (y - H @ mu)
    post_Sig = Sig - gain @ H @ Sig
    return post_mu.reshape(K, n), np.array([post_Sig[i * n : (i + 1) * n, i * n : (i + 1) * n] for i in range(K)])


def affine_observations(model_p, d, t, fx_affine, u_fn):
    """Exact observation pairs for ``x' = F x + g(t)`` given as ``(F, g)``."""
    n = (model_p + 1) * d
    E0 = np.eye(n)[:d]
    E1 = np.eye(n)[d : 2 * d]
    obs = []
    for ti in t[1:]:
        F, g = fx_affine(ti, u_fn(ti))
        obs.append((E1 - F @ E0, g))
    return obs


def dense_ekf_calibration(f, jac, t, X0, P0, A_list, Q_list, u_fn, d):
    """Quasi-MLE diffusion scale from a plain covariance-form EKF.

    Linearizes at each predicted mean and accumulates ``r^T S^{-1} r``
    over all updates, normalized by ``(number of updates) * d``.
    """
    n = X0.size
    E0 = np.eye(n)[:d]
    E1 = np.eye(n)[d : 2 * d]
    m, P = X0, P0
    total = 0.0
    for ti, A, Q in zip(t[1:], A_list, Q_list):
        m = A @ m
        P = A @ P @ A.T + Q
        x = E0 @ m
        u = u_fn(ti)
        C = E1 - jac(ti, x, u) @ E0
        r = f(ti, x, u) - E1 @ m
        S = C @ P @ C.T
        total += float(r @ np.linalg.solve(S, r))
        K = np.linalg.solve(S, C @ P).T
        m = m + K @ r
        P = P - K @ S @ K.T
        P = 0.5 * (P + P.T)
    return total / ((len(t) - 1) * d)
