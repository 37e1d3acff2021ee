"""Brute-force reference implementations used to cross-check the fast paths.

Everything here is written as directly as possible (nested loops, per-pixel
arithmetic) and stays independent of the package's vectorized kernels.
"""

import math

import numpy as np


def conv2d_oracle(x, w, b=None, stride=(1, 1), padding=(0, 0), dilation=(1, 1)):
    """Direct-sum cross-correlation, O(N*Cout*Cin*Ho*Wo*Kh*Kw)."""
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
    wo = (wd + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    out = np.zeros((n, cout, ho, wo), dtype=np.float64)
    for b_i in range(n):
        for co in range(cout):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for ky in range(kh):
                            for kx in range(kw):
                                iy = oy * sh - ph + ky * dh
                                ix = ox * sw - pw + kx * dw
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += x[b_i, ci, iy, ix] * w[co, ci, ky, kx]
                    out[b_i, co, oy, ox] = acc
            if b is not None:
                out[b_i, co] += b[co]
    return out


def max_pool_oracle(x, window=(2, 2)):
    n, c, h, wd = x.shape
    wh, ww = window
    ho, wo = h // wh, wd // ww
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for b_i in range(n):
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    patch = x[b_i, ci, oy * wh:(oy + 1) * wh, ox * ww:(ox + 1) * ww]
                    out[b_i, ci, oy, ox] = patch.max()
    return out


def avg_pool_oracle(x, window=(2, 2)):
    n, c, h, wd = x.shape
    wh, ww = window
    ho, wo = h // wh, wd // ww
    out = np.zeros((n, c, ho, wo), dtype=np.float64)
    for b_i in range(n):
        for ci in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    patch = x[b_i, ci, oy * wh:(oy + 1) * wh, ox * ww:(ox + 1) * ww]
                    out[b_i, ci, oy, ox] = patch.mean()
    return out


def cross_entropy_oracle(logits, labels, weights, ignore_index=255):
    """Per-pixel softmax + weighted NLL, averaged over non-ignored pixels."""
    n, k, h, wd = logits.shape
    total = 0.0
    count = 0
    for b_i in range(n):
        for y in range(h):
            for x in range(wd):
                lab = int(labels[b_i, y, x])
                if lab == ignore_index:
                    continue
                z = logits[b_i, :, y, x].astype(np.float64)
                z = z - z.max()
                p = math.exp(z[lab]) / np.exp(z).sum()
                total += weights[lab] * (-math.log(p))
                count += 1
    return total / count


def miou_oracle(pred, gt, num_classes, ignore_index=255):
    """Per-class IoU via explicit pixel-set counting; absent classes excluded."""
    ious = []
    for k in range(num_classes):
        inter = 0
        union = 0
        flat_p = pred.reshape(-1)
        flat_g = gt.reshape(-1)
        for p, g in zip(flat_p, flat_g):
            if g == ignore_index:
                continue
            in_p = p == k
            in_g = g == k
            if in_p and in_g:
                inter += 1
            if in_p or in_g:
                union += 1
        if union == 0:
            ious.append(None)
        else:
            ious.append(inter / union)
    present = [v for v in ious if v is not None]
    return ious, sum(present) / len(present)
