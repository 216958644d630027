"""Brute-force oracles used by the estimator and acceptance tests.

Everything here is deliberately independent of the library's search code:
the bisquare loss is re-derived inline and the scale equation is solved
by fixed-iteration bisection on a fixed bracket, with no bracket
heuristics shared with the implementation.
"""

import numpy as np


def brute_rho(t, k):
    u2 = np.minimum((t / k) ** 2, 1.0)
    return 1.0 - (1.0 - u2) ** 3


def brute_mscale(R, k, delta, lo=1e-9, hi=1e4, iters=48):
    """Row-wise bisection for mean rho(r/sigma) = delta on a fixed bracket.

    R has shape (..., n); returns sigma of shape (...,). Rows whose
    objective never reaches delta (exact fits) come back near ``lo``.
    """
    R = np.abs(np.asarray(R, dtype=float))
    lo_arr = np.full(R.shape[:-1], lo)
    hi_arr = np.full(R.shape[:-1], hi)
    for _ in range(iters):
        mid = 0.5 * (lo_arr + hi_arr)
        obj = brute_rho(R / mid[..., None], k).mean(axis=-1)
        above = obj >= delta
        lo_arr = np.where(above, mid, lo_arr)
        hi_arr = np.where(above, hi_arr, mid)
    return 0.5 * (lo_arr + hi_arr)


def _grid_2d(b_lo, b_hi, a_lo, a_hi, step):
    b_ax = np.arange(b_lo, b_hi + 0.5 * step, step)
    a_ax = np.arange(a_lo, a_hi + 0.5 * step, step)
    B, A = np.meshgrid(b_ax, a_ax, indexing="ij")
    return B.ravel(), A.ravel()


def grid_s_oracle(x, y, k0, delta, lo=-3.0, hi=3.0, coarse=0.0125,
                  fine=0.001, pad=0.0625):
    """Exhaustive two-stage grid search for the minimum-scale parameters
    of a p = 1 linear fit: a coarse scan of the full box, then a fine
    exhaustive scan of a neighborhood of the coarse argmin.

    Returns ((beta, alpha), sigma) at the fine-grid minimizer.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)

    def scan(b_lo, b_hi, a_lo, a_hi, step):
        B, A = _grid_2d(b_lo, b_hi, a_lo, a_hi, step)
        # split into chunks to bound memory
        best_sig = np.inf
        best = (np.nan, np.nan)
        chunk = 250_000
        for s in range(0, B.size, chunk):
            Bc, Ac = B[s:s + chunk], A[s:s + chunk]
            R = y[None, :] - Bc[:, None] * x[None, :] - Ac[:, None]
            sig = brute_mscale(R, k0, delta)
            j = int(np.argmin(sig))
            if sig[j] < best_sig:
                best_sig = float(sig[j])
                best = (float(Bc[j]), float(Ac[j]))
        return best, best_sig

    (b_c, a_c), _ = scan(lo, hi, lo, hi, coarse)
    (b_f, a_f), sig_f = scan(b_c - pad, b_c + pad, a_c - pad, a_c + pad, fine)
    return (b_f, a_f), sig_f


def grid_mm_oracle(x, y, sigma, k1, lo=-3.0, hi=3.0, coarse=0.0125,
                   fine=0.001, pad=0.0625):
    """Same two-stage exhaustive scan for the fixed-scale bounded-loss
    objective mean rho1((y - b x - a)/sigma)."""
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)

    def scan(b_lo, b_hi, a_lo, a_hi, step):
        B, A = _grid_2d(b_lo, b_hi, a_lo, a_hi, step)
        best_obj = np.inf
        best = (np.nan, np.nan)
        chunk = 250_000
        for s in range(0, B.size, chunk):
            Bc, Ac = B[s:s + chunk], A[s:s + chunk]
            R = y[None, :] - Bc[:, None] * x[None, :] - Ac[:, None]
            obj = brute_rho(R / sigma, k1).mean(axis=1)
            j = int(np.argmin(obj))
            if obj[j] < best_obj:
                best_obj = float(obj[j])
                best = (float(Bc[j]), float(Ac[j]))
        return best, best_obj

    (b_c, a_c), _ = scan(lo, hi, lo, hi, coarse)
    (b_f, a_f), obj_f = scan(b_c - pad, b_c + pad, a_c - pad, a_c + pad, fine)
    return (b_f, a_f), obj_f


def grid_location_oracle(y, sigma, k1, lo, hi, step=1e-5):
    """1-d scan of mean rho1((y - t)/sigma) over t."""
    y = np.asarray(y, dtype=float).reshape(-1)
    ts = np.arange(lo, hi + 0.5 * step, step)
    obj = brute_rho((y[None, :] - ts[:, None]) / sigma, k1).mean(axis=1)
    j = int(np.argmin(obj))
    return float(ts[j]), float(obj[j])
