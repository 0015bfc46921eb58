"""The logarithmic mean and its derivatives.

Everything is expressed through the symmetric variables

    m = (s + t) / 2,    z = (s - t) / (s + t),

in which ``theta(s, t) = m * h(z)`` with ``h(z) = z / atanh(z)``.  ``h`` is
even and analytic on (-1, 1), so near ``s == t`` the mean and its derivatives
are evaluated from the power series of ``h`` instead of from quotients that
cancel catastrophically.

All functions accept scalars or numpy arrays and broadcast.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import optimize

from .errors import NegativeInput, NonpositiveInput

# theta itself only needs a few series terms below this |z|.
THETA_SERIES_CUTOFF = 1e-4
# The derivative closed forms lose ~eps/z**2 (h') and ~eps/z**4 (h''), so the
# series is used on a wider band where it is still fast to converge.
DERIV_SERIES_CUTOFF = 0.5
_N_TERMS = 48


def _series_coefficients(n_terms: int) -> np.ndarray:
    # atanh(z)/z = sum_k w**k / (2k + 1) with w = z**2; invert the series.
    a = np.array([1.0 / (2 * k + 1) for k in range(n_terms)])
    b = np.zeros(n_terms)
    b[0] = 1.0
    for k in range(1, n_terms):
        b[k] = -np.dot(a[1 : k + 1], b[k - 1 :: -1][:k])
    return b


_H = _series_coefficients(_N_TERMS)
_K = np.arange(_N_TERMS)
# columns: h, h'(z)/z and h''(z) as power series in w = z**2
_SERIES = np.zeros((_N_TERMS, 3))
_SERIES[:, 0] = _H
_SERIES[:-1, 1] = 2 * _K[1:] * _H[1:]
_SERIES[:-1, 2] = 2 * _K[1:] * (2 * _K[1:] - 1) * _H[1:]


def _h_series(z):
    w = z * z
    # one matrix product instead of three Horner loops; the terms decay
    # geometrically for |z| < DERIV_SERIES_CUTOFF so summation order is harmless
    vals = np.power(w[..., None], _K) @ _SERIES
    return vals[..., 0], z * vals[..., 1], vals[..., 2]


def _as_float_array(x):
    return np.asarray(x, dtype=float)


def _unwrap(x, *inputs):
    if all(np.ndim(v) == 0 for v in inputs):
        return float(x)
    return x


def theta(r, s):
    """Logarithmic mean ``(r - s) / (log r - log s)``, extended by continuity.

    ``theta(a, a) == a`` and ``theta(a, 0) == 0``.
    """
    r_, s_ = np.broadcast_arrays(_as_float_array(r), _as_float_array(s))
    if np.any(r_ < 0) or np.any(s_ < 0):
        raise NegativeInput("logarithmic mean needs nonnegative arguments")
    out = np.zeros(r_.shape)
    pos = (r_ > 0) & (s_ > 0)
    if np.any(pos):
        rp, sp = r_[pos], s_[pos]
        tot = rp + sp
        z = (rp - sp) / tot
        az = np.abs(z)
        val = np.empty_like(rp)
        small = az < THETA_SERIES_CUTOFF
        mid = ~small & (az < 0.5)
        big = ~small & ~mid
        w = z[small] ** 2
        # h(z) = 1 - w/3 - 4w^2/45 - 44w^3/945 + ...
        val[small] = 0.5 * tot[small] * (1.0 - w * (1.0 / 3 + w * (4.0 / 45 + w * 44.0 / 945)))
        val[mid] = 0.5 * tot[mid] * z[mid] / np.arctanh(z[mid])
        val[big] = (rp[big] - sp[big]) / (np.log(rp[big]) - np.log(sp[big]))
        out[pos] = val
    return _unwrap(out, r, s)


def _derivative_parts(s, t):
    """Return (m, h, h', h'', 1 - z, 1 + z) on strictly positive inputs."""
    s_, t_ = np.broadcast_arrays(_as_float_array(s), _as_float_array(t))
    if np.any(s_ <= 0) or np.any(t_ <= 0):
        raise NonpositiveInput("log-mean derivatives need strictly positive arguments")
    tot = s_ + t_
    m = 0.5 * tot
    z = (s_ - t_) / tot
    one_minus = 2.0 * t_ / tot
    one_plus = 2.0 * s_ / tot
    h = np.empty(z.shape)
    dh = np.empty(z.shape)
    d2h = np.empty(z.shape)
    near = np.abs(z) < DERIV_SERIES_CUTOFF
    if np.any(near):
        h[near], dh[near], d2h[near] = _h_series(z[near])
    far = ~near
    if np.any(far):
        zf = z[far]
        a = 0.5 * (np.log(s_[far]) - np.log(t_[far]))  # atanh(z)
        p = 1.0 / (one_minus[far] * one_plus[far])  # 1 / (1 - z^2)
        h[far] = zf / a
        dh[far] = 1.0 / a - zf * p / a**2
        d2h[far] = -2.0 * p / a**2 - 2.0 * zf**2 * p**2 / a**2 + 2.0 * zf * p**2 / a**3
    return m, h, dh, d2h, one_minus, one_plus


def theta1(s, t):
    """Partial derivative of ``theta`` in its first argument."""
    _, h, dh, _, one_minus, _ = _derivative_parts(s, t)
    return _unwrap(0.5 * (h + one_minus * dh), s, t)


def theta2(s, t):
    """Partial derivative of ``theta`` in its second argument."""
    _, h, dh, _, _, one_plus = _derivative_parts(s, t)
    return _unwrap(0.5 * (h - one_plus * dh), s, t)


def theta_grad(s, t):
    """``(theta1, theta2)`` in one pass."""
    _, h, dh, _, one_minus, one_plus = _derivative_parts(s, t)
    return _unwrap(0.5 * (h + one_minus * dh), s, t), _unwrap(0.5 * (h - one_plus * dh), s, t)


def theta_hessian(s, t):
    """Second partials ``(theta_11, theta_12, theta_22)``.

    Since ``theta1`` depends on ``z`` only, all three are ``h''(z) / (4m)``
    times a polynomial in ``1 -+ z``.
    """
    m, _, _, d2h, one_minus, one_plus = _derivative_parts(s, t)
    base = d2h / (4.0 * m)
    return (
        _unwrap(one_minus**2 * base, s, t),
        _unwrap(-one_minus * one_plus * base, s, t),
        _unwrap(one_plus**2 * base, s, t),
    )


def _theta_objective(log_s: float, alpha: float, beta: float) -> float:
    s = math.exp(log_s)
    return theta(s, 1.0) * (alpha / s + beta)


def capital_theta(alpha: float, beta: float, return_argmin: bool = False):
    """``inf_{s,t>0} theta(s, t) * (alpha/s + beta/t)``.

    The objective is 0-homogeneous in ``(s, t)``, so ``t = 1`` and the search
    runs over ``log s``: a coarse grid followed by golden-section refinement.
    If either weight vanishes the infimum is 0; it is approached as ``s -> 0``
    (``alpha == 0``) or ``s -> inf`` (``beta == 0``) and not attained.

    With ``return_argmin`` the pair ``(s, t)`` found is returned as well
    (``None`` when the infimum is not attained).
    """
    if alpha < 0 or beta < 0:
        raise NegativeInput("Theta needs nonnegative arguments")
    if alpha == 0 or beta == 0:
        return (0.0, None) if return_argmin else 0.0
    # the minimiser sits near s = alpha/beta up to log factors
    centre = math.log(alpha / beta)
    grid = centre + np.linspace(-40.0, 40.0, 801)
    vals = np.array([_theta_objective(g, alpha, beta) for g in grid])
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = optimize.minimize_scalar(
        _theta_objective,
        bracket=(lo, grid[i], hi) if 0 < i < len(grid) - 1 else None,
        args=(alpha, beta),
        method="golden",
        tol=1e-12,
    )
    best, arg = min((float(res.fun), float(res.x)), (float(vals[i]), float(grid[i])))
    if return_argmin:
        return best, (math.exp(arg), 1.0)
    return best
