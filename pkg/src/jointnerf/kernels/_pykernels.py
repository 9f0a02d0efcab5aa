"""Numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_ckernels`` module; used when
the extension is not built or ``JOINTNERF_KERNELS=python`` is set.
"""
import numpy as np


def _deltas(ts, cap):
    d = np.empty_like(ts)
    d[:, :-1] = ts[:, 1:] - ts[:, :-1]
    d[:, -1] = cap
    return d


def composite_forward(sigma, rgb, ts, cap):
    """Alpha-composite ``R`` rays of ``S`` samples.

    Returns ``(out, weights, trans)`` with ``out[:, :3]`` the color,
    ``out[:, 3]`` the expected depth and ``out[:, 4]`` the opacity.
    ``trans[:, i]`` is the transmittance reaching sample ``i``.
    """
    sigma = np.ascontiguousarray(sigma, dtype=np.float64)
    ts = np.ascontiguousarray(ts, dtype=np.float64)
    tau = sigma * _deltas(ts, cap)
    acc = np.cumsum(tau, axis=1)
    trans = np.exp(-(acc - tau))
    weights = trans * -np.expm1(-tau)
    out = np.empty((ts.shape[0], 5))
    out[:, :3] = np.einsum("rs,rsc->rc", weights, rgb)
    out[:, 3] = np.sum(weights * ts, axis=1)
    out[:, 4] = np.sum(weights, axis=1)
    return out, weights, trans


def composite_backward(g, sigma, rgb, ts, cap, weights, trans):
    """Vector-Jacobian product of :func:`composite_forward`.

    Returns ``(d_sigma, d_rgb, d_ts)``.
    """
    deltas = _deltas(ts, cap)
    tau = sigma * deltas
    q = np.einsum("rc,rsc->rs", g[:, :3], rgb) + g[:, 3:4] * ts + g[:, 4:5]
    qw = q * weights
    # sum over k > i of q_k * w_k
    tail = np.cumsum(qw[:, ::-1], axis=1)[:, ::-1] - qw
    d_tau = q * trans * np.exp(-tau) - tail
    d_sigma = d_tau * deltas
    d_delta = d_tau * sigma
    d_ts = g[:, 3:4] * weights
    d_ts[:, 1:] += d_delta[:, :-1]
    d_ts[:, :-1] -= d_delta[:, :-1]
    d_rgb = g[:, None, :3] * weights[:, :, None]
    return d_sigma, d_rgb, d_ts


def nearest_neighbors(query, ref, chunk=256):
    """Exact nearest neighbor of every query row in ``ref``.

    Returns ``(index, squared_distance)``; ties go to the smallest index.
    """
    query = np.ascontiguousarray(query, dtype=np.float64)
    ref = np.ascontiguousarray(ref, dtype=np.float64)
    idx = np.empty(len(query), dtype=np.int64)
    d2 = np.empty(len(query))
    for s in range(0, len(query), chunk):
        diff = query[s:s + chunk, None, :] - ref[None, :, :]
        dd = np.einsum("mnc,mnc->mn", diff, diff)
        j = np.argmin(dd, axis=1)
        idx[s:s + chunk] = j
        d2[s:s + chunk] = dd[np.arange(len(j)), j]
    return idx, d2
