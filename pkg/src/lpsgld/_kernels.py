"""Compiled elementwise rounding kernels.

All kernels work on flat float64 arrays. The format is passed as a ``(3, m)``
parameter array holding gap, lower bound and upper bound, with a stride that is
0 when one column is shared by every element (fixed point) and 1 for one column
per element (block and plain floating point). Uniform variates are drawn by the
caller so the kernels stay pure. Rounding kernels return the number of
non-finite inputs they met; callers treat any as a domain error.
"""

import math

from numba import njit

# Probabilities may drift outside [0, 1] by floating-point roundoff only.
PROB_TOL = 1e-12


@njit(cache=True)
def _nearest(x, d):
    # halves away from zero
    q = math.floor(abs(x) / d + 0.5) * d
    return -q if x < 0.0 else q


@njit(cache=True)
def _clip(q, prm, j):
    return min(max(q + 0.0, prm[1, j]), prm[2, j])


@njit(cache=True)
def round_nearest(x, prm, ps, out):
    bad = 0
    for i in range(x.size):
        if not math.isfinite(x[i]):
            bad += 1
            continue
        j = i * ps
        out[i] = _clip(_nearest(x[i], prm[0, j]), prm, j)
    return bad


@njit(cache=True)
def round_stochastic(x, prm, ps, u, out):
    bad = 0
    for i in range(x.size):
        if not math.isfinite(x[i]):
            bad += 1
            continue
        j = i * ps
        d = prm[0, j]
        s = x[i] / d
        f = math.floor(s)
        if u[i] < s - f:
            f += 1.0
        out[i] = _clip(f * d, prm, j)
    return bad


@njit(cache=True)
def _cat_draw(mu, v, d, u):
    # Categorical over {d, -d, 0} with mean mu and variance v; probabilities
    # clamped into [0, 1] and renormalised when their sum exceeds 1.
    d2 = 2.0 * d * d
    p_plus = (v + mu * mu + mu * d) / d2
    p_minus = (v + mu * mu - mu * d) / d2
    p_plus = min(max(p_plus, 0.0), 1.0)
    p_minus = min(max(p_minus, 0.0), 1.0)
    total = p_plus + p_minus
    if total > 1.0:
        p_plus /= total
        p_minus /= total
    if u < p_plus:
        return d
    if u < p_plus + p_minus:
        return -d
    return 0.0


@njit(cache=True)
def categorical(mu, v, vs, gap, gs, u, out):
    for i in range(mu.size):
        out[i] = _cat_draw(mu[i], v[i * vs], gap[i * gs], u[i])
    return out


@njit(cache=True)
def vc_noise_branch(x, prm, ps, u, out):
    """Round ``x`` to nearest, then restore its mean and add variance gap**2/4.

    ``x`` already carries the Gaussian part of the target variance. The rounding
    used for the residual is unclipped so that |r| <= gap/2 always holds; the
    result is clipped at the end.
    """
    bad = 0
    for i in range(x.size):
        if not math.isfinite(x[i]):
            bad += 1
            continue
        j = i * ps
        d = prm[0, j]
        q = _nearest(x[i], d)
        r = x[i] - q
        c = _cat_draw(abs(r), 0.25 * d * d, d, u[i])
        # sign(0) taken as +1: Cat(0, v0) is symmetric, so the mean is unchanged
        # and the variance budget is kept.
        if r < 0.0:
            c = -c
        out[i] = _clip(q + c, prm, j)
    return bad


@njit(cache=True)
def vc_discrete_branch(mu, v, prm, ps, u_round, u_cat, out):
    """Stochastic rounding plus a zero-mean categorical top-up of variance.

    Returns ``(n_fallback, excess, n_bad)``: the number of elements where the
    rounding variance already reached ``v`` (no top-up possible), the summed
    variance excess over those elements, and the count of non-finite inputs.
    """
    n_fallback = 0
    excess = 0.0
    bad = 0
    for i in range(mu.size):
        if not math.isfinite(mu[i]):
            bad += 1
            continue
        j = i * ps
        d = prm[0, j]
        s = mu[i] / d
        f = math.floor(s)
        if u_round[i] < s - f:
            f += 1.0
        q = f * d
        r = mu[i] - q
        a = abs(r) / d
        sr = 0.0
        if r > 0.0:
            sr = d
        elif r < 0.0:
            sr = -d
        vs = (1.0 - a) * r * r + a * (sr - r) * (sr - r)
        if v > vs:
            q += _cat_draw(0.0, v - vs, d, u_cat[i])
        else:
            n_fallback += 1
            excess += vs - v
        out[i] = _clip(q, prm, j)
    return n_fallback, excess, bad


@njit(cache=True)
def max_abs(x):
    """Largest magnitude; NaN if any entry is NaN."""
    m = 0.0
    for i in range(x.size):
        a = abs(x[i])
        if a != a:
            return a
        if a > m:
            m = a
    return m
