"""Compiled inner loops for pooling; everything else goes through BLAS."""
import numpy as np
from numba import njit

NO_GRAD = 255


@njit(cache=True)
def pool_forward(z, s, relu):
    # idx holds the row-major offset of the first maximum in each window;
    # with relu=True windows whose max is <= 0 get NO_GRAD and output 0.
    # Channels are the innermost loop so the comparisons vectorise.
    n, h, w, c = z.shape
    oh, ow = h // s, w // s
    out = np.empty((n, oh, ow, c), z.dtype)
    idx = np.empty((n, oh, ow, c), np.uint8)
    best = np.empty(c, z.dtype)
    arg = np.empty(c, np.uint8)
    for b in range(n):
        for y in range(oh):
            for x in range(ow):
                for ch in range(c):
                    best[ch] = z[b, y * s, x * s, ch]
                    arg[ch] = 0
                for i in range(s):
                    for j in range(s):
                        if i == 0 and j == 0:
                            continue
                        k = i * s + j
                        for ch in range(c):
                            v = z[b, y * s + i, x * s + j, ch]
                            if v > best[ch]:
                                best[ch] = v
                                arg[ch] = k
                for ch in range(c):
                    if relu and best[ch] <= 0:
                        out[b, y, x, ch] = 0
                        idx[b, y, x, ch] = NO_GRAD
                    else:
                        out[b, y, x, ch] = best[ch]
                        idx[b, y, x, ch] = arg[ch]
    return out, idx


@njit(cache=True)
def pool_backward(g, idx, s, h, w):
    n, oh, ow, c = g.shape
    dx = np.zeros((n, h, w, c), g.dtype)
    for b in range(n):
        for y in range(oh):
            for x in range(ow):
                for ch in range(c):
                    k = idx[b, y, x, ch]
                    if k != NO_GRAD:
                        dx[b, y * s + k // s, x * s + k % s, ch] = g[b, y, x, ch]
    return dx
