"""Independent oracles for the test suite: plain-loop implementations that
never share code with the package."""

import numpy as np


def naive_conv2d(x, w, b=None, stride=1, padding=0, dilation=1):
    """Direct-summation convolution over every output location and tap."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    oh = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    ow = (wd + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    y = np.zeros((n, cout, oh, ow), dtype=np.float64)
    for ni in range(n):
        for oc in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ic in range(cin):
                        for a in range(kh):
                            for bb in range(kw):
                                r = i * stride - padding + dilation * a
                                c = j * stride - padding + dilation * bb
                                if 0 <= r < h and 0 <= c < wd:
                                    acc += float(x[ni, ic, r, c]) * float(w[oc, ic, a, bb])
                    y[ni, oc, i, j] = acc + (float(b[oc]) if b is not None else 0.0)
    return y


def naive_bilinear(plane, row, col):
    """Hand bilinear formula with zero value outside the plane."""
    h, w = plane.shape
    r0, c0 = int(np.floor(row)), int(np.floor(col))
    tr, tc = row - r0, col - c0

    def at(r, c):
        return float(plane[r, c]) if 0 <= r < h and 0 <= c < w else 0.0

    return ((1 - tr) * (1 - tc) * at(r0, c0) + (1 - tr) * tc * at(r0, c0 + 1)
            + tr * (1 - tc) * at(r0 + 1, c0) + tr * tc * at(r0 + 1, c0 + 1))


def naive_deform_conv(x, w, offsets, modulation=None, padding=0, dilation=1):
    """Loop deformable convolution using naive_bilinear at each displaced tap."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    k = kh * kw
    oh = h + 2 * padding - dilation * (kh - 1)
    ow = wd + 2 * padding - dilation * (kw - 1)
    y = np.zeros((n, cout, oh, ow), dtype=np.float64)
    for ni in range(n):
        for oc in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ki in range(k):
                        a, bb = divmod(ki, kw)
                        r = i - padding + dilation * a + float(offsets[ni, 2 * ki, i, j])
                        c = j - padding + dilation * bb + float(offsets[ni, 2 * ki + 1, i, j])
                        m = float(modulation[ni, ki, i, j]) if modulation is not None else 1.0
                        for ic in range(cin):
                            acc += naive_bilinear(x[ni, ic], r, c) * float(w[oc, ic, a, bb]) * m
                    y[ni, oc, i, j] = acc
    return y


def inflate_kernel(w, rate):
    """Zero-inflate a kernel so taps sit `rate` pixels apart."""
    cout, cin, kh, kw = w.shape
    ih, iw = rate * (kh - 1) + 1, rate * (kw - 1) + 1
    out = np.zeros((cout, cin, ih, iw), dtype=w.dtype)
    out[:, :, ::rate, ::rate] = w
    return out


def numeric_gradient(f, x, eps=1e-6):
    """Central finite differences of scalar-valued f at array x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g
