"""Slow scalar-loop reference implementations used as test oracles."""
import math

import numpy as np


def _sig(a):
    return 1.0 / (1.0 + math.exp(-a))


def naive_fc(x, W, b):
    out = []
    for j in range(W.shape[1]):
        s = b[j]
        for i in range(W.shape[0]):
            s += x[i] * W[i, j]
        out.append(s)
    return np.array(out)


def naive_lstm(x, h, c, Wx, Wh, b):
    n = h.size
    a = [b[k] + sum(x[i] * Wx[i, k] for i in range(x.size)) + sum(h[i] * Wh[i, k] for i in range(n))
         for k in range(4 * n)]
    hn, cn = np.zeros(n), np.zeros(n)
    for j in range(n):
        ig, fg, g, og = _sig(a[j]), _sig(a[n + j]), math.tanh(a[2 * n + j]), _sig(a[3 * n + j])
        cn[j] = fg * c[j] + ig * g
        hn[j] = og * math.tanh(cn[j])
    return hn, cn


def naive_gru(x, h, Wx, Wh, b):
    n = h.size
    ax = [b[k] + sum(x[i] * Wx[i, k] for i in range(x.size)) for k in range(3 * n)]
    z = [_sig(ax[j] + sum(h[i] * Wh[i, j] for i in range(n))) for j in range(n)]
    r = [_sig(ax[n + j] + sum(h[i] * Wh[i, n + j] for i in range(n))) for j in range(n)]
    cand = [math.tanh(ax[2 * n + j] + sum(r[i] * h[i] * Wh[i, 2 * n + j] for i in range(n))) for j in range(n)]
    return np.array([(1 - z[j]) * h[j] + z[j] * cand[j] for j in range(n)])


def naive_conv(x, K, bias, stride=2):
    """x (T, F, Cin); causal in time, zero-padded by kf//2 in frequency."""
    T, F, Cin = x.shape
    kt, kf, _, Cout = K.shape
    pf = kf // 2
    F_out = (F + 2 * pf - kf) // stride + 1
    y = np.zeros((T, F_out, Cout))
    for t in range(T):
        for f in range(F_out):
            for o in range(Cout):
                s = bias[o]
                for i in range(kt):
                    ti = t - (kt - 1) + i
                    if ti < 0:
                        continue
                    for j in range(kf):
                        fi = f * stride - pf + j
                        if 0 <= fi < F:
                            s += sum(x[ti, fi, c] * K[i, j, c, o] for c in range(Cin))
                y[t, f, o] = s
    return y


def naive_softmax(e):
    m = max(e)
    ex = [math.exp(v - m) for v in e]
    s = sum(ex)
    return np.array([v / s for v in ex])


def brute_trailing_mean(p, w):
    T = p.shape[0]
    return np.array([p[max(0, j - w + 1):j + 1].mean(axis=0) for j in range(T)])


def brute_confidence(ps, w_max):
    T, K = ps.shape
    out = np.zeros(T)
    for j in range(T):
        lo = max(0, j - w_max + 1)
        prod = 1.0
        for i in range(1, K):
            prod *= max(ps[k, i] for k in range(lo, j + 1))
        out[j] = prod ** (1.0 / (K - 1))
    return out


def brute_roc(pos, neg, neg_hours):
    """(threshold, frr, fa/h) for every candidate threshold, by direct counting."""
    cands = sorted(set(pos) | set(neg) | {0.0, 1.0})
    return [(t, sum(1 for s in pos if s < t) / len(pos), sum(1 for s in neg if s >= t) / neg_hours) for t in cands]

