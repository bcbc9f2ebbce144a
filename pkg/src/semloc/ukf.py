"""Unscented Kalman filter primitives with optional angular state components."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from .geometry import wrap_angle


@dataclass(frozen=True)
class UnscentedParams:
    alpha: float = 1e-1
    beta: float = 2.0
    kappa: float = 0.0

    def weights(self, n: int):
        lam = self.alpha**2 * (n + self.kappa) - n
        wm = np.full(2 * n + 1, 0.5 / (n + lam))
        wc = wm.copy()
        wm[0] = lam / (n + lam)
        wc[0] = wm[0] + (1.0 - self.alpha**2 + self.beta)
        return lam, wm, wc


def make_pd(P, floor=1e-12):
    """Symmetrize and clip eigenvalues from below."""
    P = 0.5 * (P + P.T)
    w, V = np.linalg.eigh(P)
    if w.min() >= floor:
        return P
    w = np.maximum(w, floor)
    P = (V * w) @ V.T
    return 0.5 * (P + P.T)


def sigma_points(mean, cov, params: UnscentedParams):
    n = len(mean)
    lam, wm, wc = params.weights(n)
    try:
        L = np.linalg.cholesky((n + lam) * cov)
    except np.linalg.LinAlgError:
        L = np.linalg.cholesky((n + lam) * make_pd(cov, 1e-12 * max(np.trace(cov), 1.0)))
    X = np.empty((2 * n + 1, n))
    X[0] = mean
    X[1:n + 1] = mean + L.T
    X[n + 1:] = mean - L.T
    return X, wm, wc


def residual(a, b, angle_dims=()):
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    if len(angle_dims):
        idx = list(angle_dims)
        d[..., idx] = wrap_angle(d[..., idx])
    return d


def weighted_mean(X, wm, angle_dims=()):
    m = wm @ X
    for i in angle_dims:
        m[i] = np.arctan2(wm @ np.sin(X[:, i]), wm @ np.cos(X[:, i]))
    return m


def unscented_transform(mean, cov, fn, params: UnscentedParams, in_angles=(), out_angles=()):
    """Propagate a Gaussian through ``fn``; returns ``(mean, cov, cross_cov, Y)``."""
    X, wm, wc = sigma_points(mean, cov, params)
    Y = np.array([fn(x) for x in X])
    y_mean = weighted_mean(Y, wm, out_angles)
    dY = residual(Y, y_mean, out_angles)
    dX = residual(X, mean, in_angles)
    P_yy = (dY * wc[:, None]).T @ dY
    P_xy = (dX * wc[:, None]).T @ dY
    return y_mean, P_yy, P_xy, Y


def ukf_predict(mean, cov, f, Q, params=UnscentedParams(), angle_dims=()):
    m, P, _, _ = unscented_transform(mean, cov, f, params, angle_dims, angle_dims)
    return m, make_pd(P + Q)


@dataclass
class UpdateResult:
    mean: np.ndarray
    cov: np.ndarray
    accepted: bool
    nis: float


def ukf_update(mean, cov, z, h, R, params=UnscentedParams(), angle_dims=(), gate_prob=None) -> UpdateResult:
    """Unscented measurement update.

    ``h`` maps a state to a flat measurement vector. When ``gate_prob`` is
    given, updates whose normalized innovation squared exceeds the chi-square
    quantile are rejected and the prior returned unchanged.
    """
    z = np.asarray(z, dtype=float).ravel()
    z_pred, P_zz, P_xz, _ = unscented_transform(mean, cov, h, params, angle_dims, ())
    S = P_zz + np.asarray(R, dtype=float)
    S = 0.5 * (S + S.T)
    y = z - z_pred
    cho = np.linalg.cholesky(S)
    sol = np.linalg.solve(cho, y)
    nis = float(sol @ sol)
    if gate_prob is not None and nis > chi2.ppf(gate_prob, z.size):
        return UpdateResult(np.array(mean, dtype=float), np.array(cov, dtype=float), False, nis)
    K = np.linalg.solve(S, P_xz.T).T
    new_mean = np.asarray(mean, dtype=float) + K @ y
    for i in angle_dims:
        new_mean[i] = wrap_angle(new_mean[i])
    new_cov = make_pd(cov - K @ S @ K.T)
    return UpdateResult(new_mean, new_cov, True, nis)
