"""Compiled depthwise-convolution kernels (channels-last layout).

Elementwise numpy is memory bound on the small feature maps used here, so
the depthwise forward and backward passes are fused loops compiled with
numba. Both expect a pre-padded, C-contiguous input.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def depthwise_forward(xp, w, stride, dilation, h_out, w_out):
    n_batch, _, _, channels = xp.shape
    k = w.shape[0]
    out = np.zeros((n_batch, h_out, w_out, channels), dtype=xp.dtype)
    for n in range(n_batch):
        for h in range(h_out):
            for q in range(w_out):
                for i in range(k):
                    hi = h * stride + i * dilation
                    for j in range(k):
                        wi = q * stride + j * dilation
                        for c in range(channels):
                            out[n, h, q, c] += w[i, j, c] * xp[n, hi, wi, c]
    return out


@njit(cache=True, fastmath=True)
def depthwise_backward(xp, w, dout, stride, dilation):
    n_batch, h_out, w_out, channels = dout.shape
    k = w.shape[0]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for n in range(n_batch):
        for h in range(h_out):
            for q in range(w_out):
                for i in range(k):
                    hi = h * stride + i * dilation
                    for j in range(k):
                        wi = q * stride + j * dilation
                        for c in range(channels):
                            g = dout[n, h, q, c]
                            dxp[n, hi, wi, c] += w[i, j, c] * g
                            dw[i, j, c] += xp[n, hi, wi, c] * g
    return dxp, dw
