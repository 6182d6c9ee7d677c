"""Compiled inner loops for pooling and the convolution input gradient.

All arrays are channels-last (N, H, W, C) and C-contiguous.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def pool_forward(x, k, stride, ho, wo, out, arg):
    n_, h, w, c_ = x.shape
    for n in range(n_):
        for oh in range(ho):
            r0 = oh * stride
            for ow in range(wo):
                q0 = ow * stride
                for c in range(c_):
                    best = -np.inf
                    where = 0
                    for i in range(k):
                        r = r0 + i
                        if r >= h:
                            break
                        for j in range(k):
                            q = q0 + j
                            if q >= w:
                                break
                            v = x[n, r, q, c]
                            # strict comparison keeps the first maximum in scan order
                            if v > best:
                                best = v
                                where = i * k + j
                    out[n, oh, ow, c] = best
                    arg[n, oh, ow, c] = where


@njit(cache=True, nogil=True)
def pool_backward(g, arg, k, stride, gx):
    n_, ho, wo, c_ = g.shape
    for n in range(n_):
        for oh in range(ho):
            for ow in range(wo):
                for c in range(c_):
                    a = arg[n, oh, ow, c]
                    gx[n, oh * stride + a // k, ow * stride + a % k, c] += g[n, oh, ow, c]


@njit(cache=True, nogil=True)
def col2im_add(gcols, stride, gxp, n0):
    """Scatter-add (n, Ho, Wo, kh, kw, C) column gradients into padded input."""
    n_, ho, wo, kh, kw, c_ = gcols.shape
    for n in range(n_):
        for oh in range(ho):
            for ow in range(wo):
                for i in range(kh):
                    r = oh * stride + i
                    for j in range(kw):
                        q = ow * stride + j
                        for c in range(c_):
                            gxp[n0 + n, r, q, c] += gcols[n, oh, ow, i, j, c]
