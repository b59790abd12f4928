"""
Numba kernels for coefficient evaluation and Euler stepping.

A ``CoefficientField`` is packed into a tuple of flat arrays (see
``CoefficientField.packed``) so the kernels can evaluate b and sigma without
touching Python objects. All kernels release the GIL.
"""
import math

import numpy as np

try:
    import numba as nb
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

if HAVE_NUMBA:
    njit = nb.njit
    JIT_OPTIONS = dict(nogil=True, cache=True)
else:  # pragma: no cover
    def njit(*args, **kwargs):
        def wrapper(f):
            return f
        return wrapper
    JIT_OPTIONS = {}


# FuncSpec kinds
SPEC_CONSTANT = 0
SPEC_AFFINE = 1
SPEC_TABLE = 2

# columns of the packed coefficient arrays
COL_B = 0
COL_SIGMA = 1

# driver modes
MODE_RAW = 0
MODE_SYMMETRIZED = 1
MODE_FOLDED = 2
MODE_PROJECTED_HALF = 3
MODE_PROJECTED_INTERVAL = 4


@njit(**JIT_OPTIONS)
def spec_value(kind, c0, c1, tx, tv, start, stop, x):
    if kind == SPEC_CONSTANT:
        return c0
    if kind == SPEC_AFFINE:
        return c0 + c1 * x
    return np.interp(x, tx[start:stop], tv[start:stop])


@njit(**JIT_OPTIONS)
def locate(lowers, x):
    """右連続: 区間の下端ちょうどの点はその区間に属する"""
    i = np.searchsorted(lowers, x, 'right') - 1
    if i < 0:
        i = 0
    return i


@njit(**JIT_OPTIONS)
def field_value(packed, col, x):
    lowers, kinds, c0s, c1s, starts, stops, tx, tv = packed
    i = locate(lowers, x)
    return spec_value(kinds[i, col], c0s[i, col], c1s[i, col], tx, tv,
                      starts[i, col], stops[i, col], x)


@njit(**JIT_OPTIONS)
def evaluate(packed, col, xs):
    out = np.empty(xs.shape[0])
    for k in range(xs.shape[0]):
        out[k] = field_value(packed, col, xs[k])
    return out


@njit(**JIT_OPTIONS)
def sgn(x):
    # sgn(0) = 0
    if x > 0.0:
        return 1.0
    if x < 0.0:
        return -1.0
    return 0.0


@njit(**JIT_OPTIONS)
def tent(a, x):
    if x < 0.0 or x > 2.0 * a:
        return 0.0
    if x <= a:
        return x
    return 2.0 * a - x


@njit(**JIT_OPTIONS)
def reflected_state(mode, a, x):
    if mode == MODE_SYMMETRIZED:
        return abs(x)
    if mode == MODE_FOLDED:
        return tent(a, x)
    return x


@njit(**JIT_OPTIONS)
def driver_coefficients(packed, mode, a, x):
    """
    Drift and deviation of the full-line driver at raw state x.

    Returns (z, drift, vol) where z is the reflected state the base
    coefficients are evaluated at.
    """
    if mode == MODE_SYMMETRIZED:
        z = abs(x)
        return z, sgn(x) * field_value(packed, COL_B, z), field_value(packed, COL_SIGMA, z)
    if mode == MODE_FOLDED:
        if x < 0.0:
            return 0.0, 1.0, 1.0
        if x > 2.0 * a:
            return 0.0, -1.0, 1.0
        z = tent(a, x)
        return z, sgn(a - x) * field_value(packed, COL_B, z), field_value(packed, COL_SIGMA, z)
    return x, field_value(packed, COL_B, x), field_value(packed, COL_SIGMA, x)


@njit(**JIT_OPTIONS)
def extended_coefficients(packed, mode, a, xs):
    drift = np.empty(xs.shape[0])
    vol = np.empty(xs.shape[0])
    for k in range(xs.shape[0]):
        _, drift[k], vol[k] = driver_coefficients(packed, mode, a, xs[k])
    return drift, vol


@njit(**JIT_OPTIONS)
def euler_path(packed, mode, a, x0, dt, xi, bound):
    """
    Euler–Maruyama path of the driver with frozen coefficients per step.

    Returns (x_raw, z, dw, push, exploded). ``push`` is the clamp-accumulated
    regulator of the projected modes (zero otherwise). After an explosion the
    arrays end at the first state with |x| >= bound.
    """
    n = xi.shape[0]
    x_raw = np.empty(n + 1)
    z = np.empty(n + 1)
    dw = np.empty(n)
    push = np.zeros(n + 1)
    sq = math.sqrt(dt)
    period = 2.0 * a

    x_raw[0] = x0
    z[0] = reflected_state(mode, a, x0)
    done = n
    exploded = False
    for k in range(n):
        x = x_raw[k]
        _, drift, vol = driver_coefficients(packed, mode, a, x)
        inc = sq * xi[k]
        dw[k] = inc
        xn = x + drift * dt + vol * inc
        if abs(xn) >= bound:
            x_raw[k + 1] = xn
            z[k + 1] = reflected_state(mode, a, xn)
            push[k + 1] = push[k]
            done = k + 1
            exploded = True
            break
        if mode == MODE_FOLDED:
            # X̂ は [0, 2a) の円周上に保つ
            xn = xn - period * math.floor(xn / period)
            if xn >= period:
                xn -= period
            push[k + 1] = push[k]
        elif mode == MODE_PROJECTED_HALF:
            p0 = -xn if xn < 0.0 else 0.0
            xn += p0
            push[k + 1] = push[k] + p0
        elif mode == MODE_PROJECTED_INTERVAL:
            p0 = -xn if xn < 0.0 else 0.0
            pa = xn - a if xn > a else 0.0
            xn = xn + p0 - pa
            push[k + 1] = push[k] + p0 - pa
        else:
            push[k + 1] = push[k]
        x_raw[k + 1] = xn
        z[k + 1] = reflected_state(mode, a, xn)
    return x_raw[:done + 1], z[:done + 1], dw[:done], push[:done + 1], exploded


@njit(**JIT_OPTIONS)
def first_exit(packed, mode, a, x0, c, d, dt, xi):
    """
    Advance the driver from x0 until it leaves (c, d) or the noise runs out.

    Returns (x, steps, side): side is -1 for an exit through c, +1 through d,
    0 if still inside.
    """
    sq = math.sqrt(dt)
    x = x0
    for k in range(xi.shape[0]):
        _, drift, vol = driver_coefficients(packed, mode, a, x)
        x = x + drift * dt + vol * sq * xi[k]
        if x <= c:
            return x, k + 1, -1
        if x >= d:
            return x, k + 1, 1
    return x, xi.shape[0], 0


@njit(**JIT_OPTIONS)
def occupation(z, dqv, level, eps, start):
    """Σ_{k >= start} 1(|z_k - level| < eps) · dqv_k (left-point sums)"""
    total = 0.0
    for k in range(start, dqv.shape[0]):
        if abs(z[k] - level) < eps:
            total += dqv[k]
    return total


@njit(**JIT_OPTIONS)
def tanaka_increment(x, level):
    """|x_n - a| - |x_0 - a| - Σ sgn(x_k - a)(x_{k+1} - x_k) with sgn(0) = -1"""
    n = x.shape[0] - 1
    total = abs(x[n] - level) - abs(x[0] - level)
    for k in range(n):
        s = 1.0 if x[k] - level > 0.0 else -1.0
        total -= s * (x[k + 1] - x[k])
    return total
