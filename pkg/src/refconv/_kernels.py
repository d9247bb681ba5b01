"""Numba hot loops for the memory-bound layers (depthwise conv, batchnorm,
relu backward, padding).

Pure-numpy fallbacks live next to the call sites; everything here is an
optional speedup with identical op semantics (accumulation order differs,
within the engine's stated cross-path tolerances). fastmath is restricted to
reassociation/contraction so NaN and Inf still propagate faithfully. Inner
loops run over the contiguous last axis in the arrays' native dtype.
"""

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap

_FM = {"reassoc", "contract", "arcp"}

@njit(cache=True, fastmath=_FM)
def pad2d(xp, x, p):
    """xp[:, :, p:p+h, p:p+w] = x with zero margins, written in memory order."""
    n, c, h, w = x.shape
    hp, wp = xp.shape[2], xp.shape[3]
    zero = x[0, 0, 0, 0] - x[0, 0, 0, 0]
    for b in range(n):
        for ch in range(c):
            xv = x[b, ch]
            pv = xp[b, ch]
            for i in range(p):
                row = pv[i]
                for j in range(wp):
                    row[j] = zero
            for i in range(h):
                prow = pv[p + i]
                xrow = xv[i]
                for j in range(p):
                    prow[j] = zero
                for j in range(w):
                    prow[p + j] = xrow[j]
                for j in range(p):
                    prow[p + w + j] = zero
            for i in range(p):
                row = pv[p + h + i]
                for j in range(wp):
                    row[j] = zero


@njit(cache=True, fastmath=_FM)
def crop2d(xp, x, p):
    """x = xp[:, :, p:p+h, p:p+w]: inverse of pad2d."""
    n, c, h, w = x.shape
    for b in range(n):
        for ch in range(c):
            xv = x[b, ch]
            pv = xp[b, ch]
            for i in range(h):
                prow = pv[p + i]
                xrow = xv[i]
                for j in range(w):
                    xrow[j] = prow[p + j]


@njit(cache=True, fastmath=_FM)
def fill_dilated(buf, go, off, s):
    """Zero buf, then buf[off + i*s, off + j*s] = go[i, j] (per n, c)."""
    n, c = go.shape[0], go.shape[1]
    ho, wo = go.shape[2], go.shape[3]
    zero = go[0, 0, 0, 0] - go[0, 0, 0, 0]
    flat = buf.reshape(buf.size)
    for i in range(buf.size):
        flat[i] = zero
    for b in range(n):
        for ch in range(c):
            bv = buf[b, ch]
            gv = go[b, ch]
            for i in range(ho):
                brow = bv[off + i * s]
                grow = gv[i]
                if s == 1:
                    for j in range(wo):
                        brow[off + j] = grow[j]
                else:
                    for j in range(wo):
                        brow[off + j * s] = grow[j]


@njit(cache=True, fastmath=_FM)
def dw_forward_k3(xp, w, s, out):
    """3x3 depthwise conv on a pre-padded input; weights held in registers."""
    n, c = xp.shape[0], xp.shape[1]
    ho, wo = out.shape[2], out.shape[3]
    for b in range(n):
        for ch in range(c):
            xv = xp[b, ch]
            ov = out[b, ch]
            w0 = w[ch, 0, 0]; w1 = w[ch, 0, 1]; w2 = w[ch, 0, 2]
            w3 = w[ch, 1, 0]; w4 = w[ch, 1, 1]; w5 = w[ch, 1, 2]
            w6 = w[ch, 2, 0]; w7 = w[ch, 2, 1]; w8 = w[ch, 2, 2]
            for i in range(ho):
                ri = i * s
                r0 = xv[ri]; r1 = xv[ri + 1]; r2 = xv[ri + 2]
                orow = ov[i]
                if s == 1:
                    for j in range(wo):
                        orow[j] = (r0[j] * w0 + r0[j + 1] * w1 + r0[j + 2] * w2
                                   + r1[j] * w3 + r1[j + 1] * w4 + r1[j + 2] * w5
                                   + r2[j] * w6 + r2[j + 1] * w7 + r2[j + 2] * w8)
                else:
                    for j in range(wo):
                        rj = j * s
                        orow[j] = (r0[rj] * w0 + r0[rj + 1] * w1 + r0[rj + 2] * w2
                                   + r1[rj] * w3 + r1[rj + 1] * w4 + r1[rj + 2] * w5
                                   + r2[rj] * w6 + r2[rj + 1] * w7 + r2[rj + 2] * w8)


@njit(cache=True, fastmath=_FM)
def dw_forward_any(xp, w, s, out):
    """Depthwise conv for arbitrary odd k (tap loop, one store per output)."""
    n, c = xp.shape[0], xp.shape[1]
    k = w.shape[1]
    ho, wo = out.shape[2], out.shape[3]
    zero = w[0, 0, 0] - w[0, 0, 0]  # typed zero from an input, never from out
    for b in range(n):
        for ch in range(c):
            xv = xp[b, ch]
            ov = out[b, ch]
            wv = w[ch]
            for i in range(ho):
                ri = i * s
                orow = ov[i]
                for j in range(wo):
                    rj = j * s
                    acc = zero
                    for u in range(k):
                        xrow = xv[ri + u]
                        for v in range(k):
                            acc += xrow[rj + v] * wv[u, v]
                    orow[j] = acc


@njit(cache=True, fastmath=_FM)
def dw_grad_w_k3(xp, go, s, gw):
    """Per-channel 3x3 weight gradient as nine running reductions."""
    n, c = xp.shape[0], xp.shape[1]
    ho, wo = go.shape[2], go.shape[3]
    for ch in range(c):
        z = go[0, 0, 0, 0] - go[0, 0, 0, 0]
        a0 = z; a1 = z; a2 = z; a3 = z; a4 = z; a5 = z; a6 = z; a7 = z; a8 = z
        for b in range(n):
            xv = xp[b, ch]
            gv = go[b, ch]
            for i in range(ho):
                ri = i * s
                r0 = xv[ri]; r1 = xv[ri + 1]; r2 = xv[ri + 2]
                grow = gv[i]
                if s == 1:
                    for j in range(wo):
                        g = grow[j]
                        a0 += g * r0[j]; a1 += g * r0[j + 1]; a2 += g * r0[j + 2]
                        a3 += g * r1[j]; a4 += g * r1[j + 1]; a5 += g * r1[j + 2]
                        a6 += g * r2[j]; a7 += g * r2[j + 1]; a8 += g * r2[j + 2]
                else:
                    for j in range(wo):
                        rj = j * s
                        g = grow[j]
                        a0 += g * r0[rj]; a1 += g * r0[rj + 1]; a2 += g * r0[rj + 2]
                        a3 += g * r1[rj]; a4 += g * r1[rj + 1]; a5 += g * r1[rj + 2]
                        a6 += g * r2[rj]; a7 += g * r2[rj + 1]; a8 += g * r2[rj + 2]
        gw[ch, 0, 0] = a0; gw[ch, 0, 1] = a1; gw[ch, 0, 2] = a2
        gw[ch, 1, 0] = a3; gw[ch, 1, 1] = a4; gw[ch, 1, 2] = a5
        gw[ch, 2, 0] = a6; gw[ch, 2, 1] = a7; gw[ch, 2, 2] = a8


@njit(cache=True, fastmath=_FM)
def dw_grad_w_any(xp, go, s, gw):
    n, c = xp.shape[0], xp.shape[1]
    k = gw.shape[1]
    ho, wo = go.shape[2], go.shape[3]
    for ch in range(c):
        for u in range(k):
            for v in range(k):
                acc = go[0, 0, 0, 0] - go[0, 0, 0, 0]
                for b in range(n):
                    xv = xp[b, ch]
                    gv = go[b, ch]
                    for i in range(ho):
                        xrow = xv[i * s + u]
                        grow = gv[i]
                        for j in range(wo):
                            acc += grow[j] * xrow[j * s + v]
                gw[ch, u, v] = acc


@njit(cache=True, fastmath=_FM)
def im2col_t(xp, cols, k, s, ho, wo, g):
    """Pack patches transposed: cols[q, cc*k*k + u*k + v, (b*ho+i)*wo+j].

    For stride 1 both the read and the write stream along the last axis.
    """
    n, c = xp.shape[0], xp.shape[1]
    cpg = c // g
    kk = k * k
    for q in range(g):
        for cc in range(cpg):
            for u in range(k):
                for v in range(k):
                    crow = cols[q, cc * kk + u * k + v]
                    for b in range(n):
                        ch = q * cpg + cc
                        xv = xp[b, ch]
                        for i in range(ho):
                            xrow = xv[i * s + u]
                            base = (b * ho + i) * wo
                            if s == 1:
                                for j in range(wo):
                                    crow[base + j] = xrow[j + v]
                            else:
                                for j in range(wo):
                                    crow[base + j] = xrow[j * s + v]


@njit(cache=True, fastmath=_FM)
def col2im_t_add(gcols, gxp, k, s, ho, wo, g):
    """Scatter-add the transposed patch gradients back: inverse of im2col_t."""
    n, c = gxp.shape[0], gxp.shape[1]
    cpg = c // g
    kk = k * k
    for q in range(g):
        for cc in range(cpg):
            for u in range(k):
                for v in range(k):
                    crow = gcols[q, cc * kk + u * k + v]
                    for b in range(n):
                        ch = q * cpg + cc
                        xv = gxp[b, ch]
                        for i in range(ho):
                            xrow = xv[i * s + u]
                            base = (b * ho + i) * wo
                            if s == 1:
                                for j in range(wo):
                                    xrow[j + v] += crow[base + j]
                            else:
                                for j in range(wo):
                                    xrow[j * s + v] += crow[base + j]


@njit(cache=True, fastmath=_FM)
def rows_t_to_nchw(prod, out, g):
    """(g, cpg_out, n*ho*wo) -> (n, g*cpg_out, ho, wo), streaming."""
    n, c_out = out.shape[0], out.shape[1]
    ho, wo = out.shape[2], out.shape[3]
    cpg_out = c_out // g
    for q in range(g):
        for oc in range(cpg_out):
            pv = prod[q, oc]
            for b in range(n):
                ov = out[b, q * cpg_out + oc]
                for i in range(ho):
                    row = ov[i]
                    base = (b * ho + i) * wo
                    for j in range(wo):
                        row[j] = pv[base + j]


@njit(cache=True, fastmath=_FM)
def nchw_to_rows_t(x, rows, g):
    """(n, g*cpg, ho, wo) -> (g, cpg, n*ho*wo), streaming."""
    n, c = x.shape[0], x.shape[1]
    ho, wo = x.shape[2], x.shape[3]
    cpg = c // g
    for q in range(g):
        for oc in range(cpg):
            rv = rows[q, oc]
            for b in range(n):
                xv = x[b, q * cpg + oc]
                for i in range(ho):
                    row = xv[i]
                    base = (b * ho + i) * wo
                    for j in range(wo):
                        rv[base + j] = row[j]


@njit(cache=True, fastmath=_FM)
def relu_backward_inplace(x, go):
    """go *= (x > 0), elementwise in place on flat contiguous arrays."""
    xf = x.reshape(x.size)
    gf = go.reshape(go.size)
    zero = gf[0] - gf[0]
    for i in range(xf.size):
        if xf[i] <= zero:
            gf[i] = zero


@njit(cache=True, fastmath=_FM)
def bn_forward_train(x, gamma, beta, out, xhat, mean, var, inv_std, eps):
    """One stats pass + one normalize pass, both streaming in memory order.

    Per-channel sums accumulate in float64; the normalize pass stays in the
    arrays' native dtype.
    """
    n, c, h, w = x.shape
    hw = h * w
    m = n * hw
    x3 = x.reshape(n, c, hw)
    s = np.zeros(c, dtype=np.float64)
    s2 = np.zeros(c, dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            row = x3[b, ch]
            rs = row[0] - row[0]
            rs2 = rs
            for j in range(hw):
                val = row[j]
                rs += val
                rs2 += val * val
            s[ch] += rs
            s2[ch] += rs2
    for ch in range(c):
        mu = s[ch] / m
        vr = s2[ch] / m - mu * mu
        if vr < 0.0:
            vr = 0.0
        mean[ch] = mu
        var[ch] = vr
        inv_std[ch] = 1.0 / (vr + eps) ** 0.5
    o3 = out.reshape(n, c, hw)
    h3 = xhat.reshape(n, c, hw)
    for b in range(n):
        for ch in range(c):
            mu_t = mean[ch]      # native dtype so the pass is SIMD
            istd_t = inv_std[ch]
            ga = gamma[ch]
            be = beta[ch]
            xrow = x3[b, ch]
            hrow = h3[b, ch]
            orow = o3[b, ch]
            for j in range(hw):
                v2 = (xrow[j] - mu_t) * istd_t
                hrow[j] = v2
                orow[j] = ga * v2 + be


@njit(cache=True, fastmath=_FM)
def bn_backward(xhat, gamma, inv_std, go, gx, ggamma, gbeta, m_native):
    """dx = (gamma*inv_std/m) * (m*go - sum(go) - xhat*sum(go*xhat))."""
    n, c, h, w = xhat.shape
    hw = h * w
    h3 = xhat.reshape(n, c, hw)
    g3 = go.reshape(n, c, hw)
    x3 = gx.reshape(n, c, hw)
    sg = np.zeros(c, dtype=np.float64)
    sgx = np.zeros(c, dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            grow = g3[b, ch]
            hrow = h3[b, ch]
            rg = grow[0] - grow[0]
            rgx = rg
            for j in range(hw):
                g = grow[j]
                rg += g
                rgx += g * hrow[j]
            sg[ch] += rg
            sgx[ch] += rgx
    for ch in range(c):
        ggamma[ch] = sgx[ch]
        gbeta[ch] = sg[ch]
    for b in range(n):
        for ch in range(c):
            sg_t = gbeta[ch]
            sgx_t = ggamma[ch]
            coef = gamma[ch] * inv_std[ch] / m_native
            grow = g3[b, ch]
            hrow = h3[b, ch]
            orow = x3[b, ch]
            for j in range(hw):
                orow[j] = coef * (m_native * grow[j] - sg_t - hrow[j] * sgx_t)
