"""Counter-based random numbers: Philox4x32-10 and an inverse-CDF normal.

Every draw is a pure function of ``(seed, stream, counter)``.  One counter
value yields one Philox block of four 32-bit words, which is turned into two
53-bit uniforms on the open interval (0, 1).
"""

import math

import numba as nb
import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)

_TWO26 = 67108864.0
_TWO_M53 = 1.0 / 9007199254740992.0


@nb.njit(inline="always", nogil=True, cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten rounds of Philox4x32 on 32-bit words carried in uint64."""
    for r in range(10):
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0 = p0 >> _S32
        lo0 = p0 & _MASK
        hi1 = p1 >> _S32
        lo1 = p1 & _MASK
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        if r < 9:
            k0 = (k0 + _W0) & _MASK
            k1 = (k1 + _W1) & _MASK
    return c0, c1, c2, c3


@nb.njit(inline="always", nogil=True, cache=True)
def uniform_pair(seed, stream, counter):
    s = np.uint64(seed)
    q = np.uint64(stream)
    c = np.uint64(counter)
    x0, x1, x2, x3 = philox4x32(c & _MASK, c >> _S32, q & _MASK, q >> _S32,
                                s & _MASK, s >> _S32)
    a = float(x0 >> np.uint64(5)) * _TWO26 + float(x1 >> np.uint64(6))
    b = float(x2 >> np.uint64(5)) * _TWO26 + float(x3 >> np.uint64(6))
    return (a + 0.5) * _TWO_M53, (b + 0.5) * _TWO_M53


# Wichura, algorithm AS 241 (PPND16); relative accuracy about 1e-16.
_A = (3.387132872796366608, 1.3314166789178437745e2, 1.9715909503065514427e3,
      1.3731693765509461125e4, 4.5921953931549871457e4, 6.7265770927008700853e4,
      3.3430575583588128105e4, 2.5090809287301226727e3)
_B = (1.0, 4.2313330701600911252e1, 6.8718700749205790830e2,
      5.3941960214247511077e3, 2.1213794301586595867e4, 3.9307895800092710610e4,
      2.8729085735721942674e4, 5.2264952788528545610e3)
_C = (1.42343711074968357734, 4.63033784615654529590, 5.76949722146069140550,
      3.64784832476320460504, 1.27045825245236838258, 2.41780725177450611770e-1,
      2.27238449892691845833e-2, 7.74545014278341407640e-4)
_D = (1.0, 2.05319162663775882187, 1.67638483018380384940,
      6.89767334985100004550e-1, 1.48103976427480074590e-1,
      1.51986665636164571966e-2, 5.47593808499534494600e-4,
      1.05075007164441684324e-9)
_E = (6.65790464350110377720, 5.46378491116411436990, 1.78482653991729133580,
      2.96560571828504891230e-1, 2.65321895265761230930e-2,
      1.24266094738807843860e-3, 2.71155556874348757815e-5,
      2.01033439929228813265e-7)
_F = (1.0, 5.99832206555887937690e-1, 1.36929880922735805310e-1,
      1.48753612908506148525e-2, 7.86869131145613259100e-4,
      1.84631831751005468180e-5, 1.42151175831644588870e-7,
      2.04426310338993978564e-15)


@nb.njit(inline="always", nogil=True, cache=True)
def _poly(c, x):
    return (((((((c[7] * x + c[6]) * x + c[5]) * x + c[4]) * x + c[3]) * x
              + c[2]) * x + c[1]) * x + c[0])


@nb.njit(nogil=True, cache=True)
def ndtri(p):
    """Standard normal quantile for p in (0, 1)."""
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_A, r) / _poly(_B, r)
    r = p if q < 0.0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        val = _poly(_C, r) / _poly(_D, r)
    else:
        r -= 5.0
        val = _poly(_E, r) / _poly(_F, r)
    return -val if q < 0.0 else val


@nb.njit(nogil=True, cache=True)
def fill_uniforms(seed, streams, counter0, out):
    """out[i, j] = j-th uniform of stream ``streams[i]`` from ``counter0`` on."""
    n, m = out.shape
    for i in range(n):
        q = streams[i]
        for j in range(0, m, 2):
            u0, u1 = uniform_pair(seed, q, counter0 + j // 2)
            out[i, j] = u0
            if j + 1 < m:
                out[i, j + 1] = u1


@nb.njit(nogil=True, cache=True)
def fill_normals(seed, streams, counter0, out):
    n, m = out.shape
    for i in range(n):
        q = streams[i]
        for j in range(0, m, 2):
            u0, u1 = uniform_pair(seed, q, counter0 + j // 2)
            out[i, j] = ndtri(u0)
            if j + 1 < m:
                out[i, j + 1] = ndtri(u1)


@nb.njit(nogil=True, cache=True)
def ndtri_1d(p, out):
    for i in range(p.size):
        out[i] = ndtri(p[i])
