"""Independent reference implementations used by several test files.

These are deliberately naive (scalar loops, dense matrices) so they share no
code path with the package.
"""
import math

import numpy as np


def central_differences(f, params: dict, eps: float = 1e-5) -> dict:
    """Entry-by-entry central differences of scalar ``f(params)``; ``params`` is restored."""
    out = {}
    for name, arr in params.items():
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for k in range(flat.size):
            keep = flat[k]
            flat[k] = keep + eps
            up = f(params)
            flat[k] = keep - eps
            down = f(params)
            flat[k] = keep
            gflat[k] = (up - down) / (2 * eps)
        out[name] = g
    return out


def worst_relative_error(analytic: dict, numeric: dict, floor: float = 1e-6) -> tuple[float, str]:
    """Largest ``|a - n| / max(|a|, |n|, floor)`` over every entry, and where it occurs.

    The floor keeps entries whose true gradient is zero from being judged on
    pure round-off.
    """
    worst, where = 0.0, ""
    for name in numeric:
        a, n = np.asarray(analytic[name]), np.asarray(numeric[name])
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if rel.size and rel.max() > worst:
            worst, where = float(rel.max()), name
    return worst, where


def weighted_rmse_loops(pred, obs, lat):
    n_lat, n_lon = len(pred), len(pred[0])
    mean_cos = sum(math.cos(t) for t in lat) / n_lat
    total = 0.0
    for i in range(n_lat):
        for j in range(n_lon):
            total += math.cos(lat[i]) / mean_cos * (pred[i][j] - obs[i][j]) ** 2
    return math.sqrt(total / (n_lat * n_lon))


def acc_loops(pred, obs, clim, lat):
    n_lat, n_lon = len(pred), len(pred[0])
    mean_cos = sum(math.cos(t) for t in lat) / n_lat
    n = n_lat * n_lon
    mp = sum(pred[i][j] - clim[i][j] for i in range(n_lat) for j in range(n_lon)) / n
    mo = sum(obs[i][j] - clim[i][j] for i in range(n_lat) for j in range(n_lon)) / n
    sxy = sxx = syy = 0.0
    for i in range(n_lat):
        w = math.cos(lat[i]) / mean_cos
        for j in range(n_lon):
            p = pred[i][j] - clim[i][j] - mp
            o = obs[i][j] - clim[i][j] - mo
            sxy += w * p * o
            sxx += w * p * p
            syy += w * o * o
    return sxy / math.sqrt(sxx * syy)


def adamw_scalar(theta, grads, lrs, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.05):
    """Scalar AdamW moment recurrence; returns the parameter after each step."""
    m = v = 0.0
    path = []
    for t, (g, lr) in enumerate(zip(grads, lrs), start=1):
        theta = theta - lr * weight_decay * theta
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        theta = theta - lr * m_hat / (math.sqrt(v_hat) + eps)
        path.append(theta)
    return path


def loop_derivatives(f, d_theta, d_phi):
    """Meridional (one-sided at the edge rows) and periodic zonal differences."""
    n_lat, n_lon = f.shape
    dt = np.zeros_like(f)
    dp = np.zeros_like(f)
    for i in range(n_lat):
        for j in range(n_lon):
            if i == 0:
                dt[i, j] = (f[1, j] - f[0, j]) / d_theta
            elif i == n_lat - 1:
                dt[i, j] = (f[i, j] - f[i - 1, j]) / d_theta
            else:
                dt[i, j] = (f[i + 1, j] - f[i - 1, j]) / (2 * d_theta)
            dp[i, j] = (f[i, (j + 1) % n_lon] - f[i, (j - 1) % n_lon]) / (2 * d_phi)
    return dt, dp


TERM_NAMES = ("advection_theta", "advection_phi", "curvature", "pressure", "coriolis", "friction")


def momentum_terms_loops(vt, vp, z, lat, d_theta, d_phi, omega, mu):
    """Every left-hand-side momentum term, one grid point at a time.

    Returns two dicts (meridional, zonal equation) keyed by ``TERM_NAMES``.
    """
    dvt_th, dvt_ph = loop_derivatives(vt, d_theta, d_phi)
    dvp_th, dvp_ph = loop_derivatives(vp, d_theta, d_phi)
    dz_th, dz_ph = loop_derivatives(z, d_theta, d_phi)
    th = {k: np.empty(vt.shape) for k in TERM_NAMES}
    ph = {k: np.empty(vt.shape) for k in TERM_NAMES}
    for i in range(vt.shape[0]):
        c, s, tn = math.cos(lat[i]), math.sin(lat[i]), math.tan(lat[i])
        for j in range(vt.shape[1]):
            a, b = vt[i, j], vp[i, j]
            th["advection_theta"][i, j] = a * dvt_th[i, j]
            th["advection_phi"][i, j] = b / c * dvt_ph[i, j]
            th["curvature"][i, j] = b * b * tn
            th["pressure"][i, j] = dz_th[i, j]
            th["coriolis"][i, j] = 2 * omega * b * s
            th["friction"][i, j] = mu * a / (c * c)
            ph["advection_theta"][i, j] = a * dvp_th[i, j]
            ph["advection_phi"][i, j] = b / c * dvp_ph[i, j]
            ph["curvature"][i, j] = -b * a * tn
            ph["pressure"][i, j] = dz_ph[i, j] / c
            ph["coriolis"][i, j] = -2 * omega * a * s
            ph["friction"][i, j] = mu * b / (c * c)
    return th, ph
