"""Direct-definition oracles the conv engine is validated against.

Everything here is written as plainly as possible -- scalar nested loops,
float64 accumulation, no vectorization -- and deliberately shares no code
with the package's convolution implementation.
"""

import numpy as np


def conv2d_forward_loop(x, w, stride=1, padding=0, groups=1, bias=None):
    """Grouped 2D cross-correlation, straight from the definition.

    x: (n, c_in, h, w), w: (c_out, c_in/groups, k, k). Returns float64.
    """
    n, c_in, h, wid = x.shape
    c_out, cpg, kh, kw = w.shape
    assert kh == kw, "square kernels only"
    k = kh
    assert c_in % groups == 0 and c_out % groups == 0
    assert cpg == c_in // groups
    cpg_out = c_out // groups
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (wid + 2 * padding - k) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out), dtype=np.float64)
    for b in range(n):
        for oc in range(c_out):
            g = oc // cpg_out
            for i in range(h_out):
                for j in range(w_out):
                    acc = 0.0
                    for ic in range(cpg):
                        for u in range(k):
                            for v in range(k):
                                r = i * stride + u - padding
                                c = j * stride + v - padding
                                if 0 <= r < h and 0 <= c < wid:
                                    acc += float(x[b, g * cpg + ic, r, c]) * float(w[oc, ic, u, v])
                    if bias is not None:
                        acc += float(bias[oc])
                    out[b, oc, i, j] = acc
    return out


def conv2d_backward_loop(x, w, grad_out, stride=1, padding=0, groups=1):
    """Gradients of conv2d_forward_loop by accumulating the product rule
    contribution of every single multiply. Returns (gx, gw, gb) in float64.
    """
    n, c_in, h, wid = x.shape
    c_out, cpg, k, _ = w.shape
    cpg_out = c_out // groups
    _, _, h_out, w_out = grad_out.shape
    gx = np.zeros((n, c_in, h, wid), dtype=np.float64)
    gw = np.zeros(w.shape, dtype=np.float64)
    gb = np.zeros(c_out, dtype=np.float64)
    for b in range(n):
        for oc in range(c_out):
            g = oc // cpg_out
            for i in range(h_out):
                for j in range(w_out):
                    go = float(grad_out[b, oc, i, j])
                    gb[oc] += go
                    for ic in range(cpg):
                        for u in range(k):
                            for v in range(k):
                                r = i * stride + u - padding
                                c = j * stride + v - padding
                                if 0 <= r < h and 0 <= c < wid:
                                    gw[oc, ic, u, v] += go * float(x[b, g * cpg + ic, r, c])
                                    gx[b, g * cpg + ic, r, c] += go * float(w[oc, ic, u, v])
    return gx, gw, gb


def count_conv_ops(c_in, c_out, k, groups, h, w, stride=1, padding=None):
    """Enumerate the loop oracle without data: returns (macs, weight_slots).

    macs counts every multiply of the nominal definition, including taps that
    land in the zero padding (the convention of closed-form MAC formulas).
    weight_slots is the number of distinct kernel parameters touched.
    """
    if padding is None:
        padding = k // 2
    cpg = c_in // groups
    cpg_out = c_out // groups
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1
    macs = 0
    slots = set()
    for oc in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                for ic in range(cpg):
                    for u in range(k):
                        for v in range(k):
                            macs += 1
                            slots.add((oc, ic, u, v))
    return macs, len(slots)
