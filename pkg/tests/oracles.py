"""Independent pure-Python reference computations used by the test suite.

Nothing here imports the package under test; every function works on
nested lists or flat sequences with explicit loops.
"""

import math


def flat(a):
    """Row-major flatten of nested sequences (or numpy arrays) into python floats."""
    if hasattr(a, "tolist"):
        a = a.tolist()
    if isinstance(a, (list, tuple)):
        out = []
        for v in a:
            out.extend(flat(v))
        return out
    return [float(a)]


def conv2d(x, w, b, stride=1, pad=None):
    """Direct nested-loop cross-correlation.  ``x``: (N, C, H, W), ``w``: (O, C, k, k)."""
    n_, c_, h, wd = len(x), len(x[0]), len(x[0][0]), len(x[0][0][0])
    o_, k = len(w), len(w[0][0])
    p = k // 2 if pad is None else pad
    ho = (h + 2 * p - k) // stride + 1
    wo = (wd + 2 * p - k) // stride + 1
    out = [[[[0.0] * wo for _ in range(ho)] for _ in range(o_)] for _ in range(n_)]
    for n in range(n_):
        for o in range(o_):
            for i in range(ho):
                for j in range(wo):
                    acc = b[o]
                    for c in range(c_):
                        for di in range(k):
                            for dj in range(k):
                                r, q = i * stride + di - p, j * stride + dj - p
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += w[o][c][di][dj] * x[n][c][r][q]
                    out[n][o][i][j] = acc
    return out


def leaky_relu(x, slope=0.01):
    if isinstance(x, list):
        return [leaky_relu(v, slope) for v in x]
    return x if x > 0 else slope * x


def mae(s, y):
    s, y = flat(s), flat(y)
    return sum(abs(a - b) for a, b in zip(s, y)) / len(s)


def f_measure(s, y, beta_sq=0.3):
    """Mean over thresholds k/255 (k = 0..255) of F_beta with foreground ``s > t``."""
    s, y = flat(s), flat(y)
    gt = [v > 0.5 for v in y]
    n_gt = sum(gt)
    total = 0.0
    for k in range(256):
        t = k / 255
        tp = npos = 0
        for sv, g in zip(s, gt):
            if sv > t:
                npos += 1
                tp += g
        prec = tp / npos if npos else 0.0
        rec = tp / n_gt
        den = beta_sq * prec + rec
        total += (1 + beta_sq) * prec * rec / den if den > 0 else 0.0
    return total / 256


def ece_bin(v):
    """Bin 0 is exactly 0, bin 11 exactly 1, bins 1..10 are (0.1(m-1), 0.1m]."""
    if v <= 0:
        return 0
    if v >= 1:
        return 11
    for m in range(1, 11):
        if v <= m / 10:
            return m
    return 10


def ece_dense(s, y):
    """Dense ECE: per bin, mean over 256 midpoint thresholds of pixel accuracy vs mean confidence."""
    s, y = flat(s), flat(y)
    n = len(s)
    thresholds = [(k + 0.5) / 256 for k in range(256)]
    members = [[] for _ in range(12)]
    for i, v in enumerate(s):
        members[ece_bin(v)].append(i)
    gaps = []
    for m in range(12):
        idx = members[m]
        if not idx:
            continue
        accs = []
        for t in thresholds:
            hits = 0
            for i in idx:
                hits += (s[i] > t) == (y[i] > 0.5)
            accs.append(hits / len(idx))
        macc = math.fsum(accs) / 256
        conf = math.fsum(max(s[i], 1 - s[i]) for i in idx) / len(idx)
        gaps.append(len(idx) / n * abs(macc - conf))
    return math.fsum(gaps)


def pavpu_bins(s, y, u, g=4):
    """Per-threshold (n_ac, n_au, n_ic, n_iu) and PAvPU for t_k = k/10, k = 1..10.

    ``s``, ``y``, ``u`` are 2-D nested lists whose sides are multiples of ``g``.
    """
    h, w = len(s), len(s[0])
    acc, unc = [], []
    for pi in range(0, h, g):
        for pj in range(0, w, g):
            hits, us = 0, []
            for i in range(pi, pi + g):
                for j in range(pj, pj + g):
                    hits += (s[i][j] > 0.5) == (y[i][j] > 0.5)
                    us.append(u[i][j])
            acc.append(hits / (g * g))
            unc.append(math.fsum(us) / (g * g))
    rows = []
    for k in range(1, 11):
        t = k / 10
        ac = au = ic = iu = 0
        for a, v in zip(acc, unc):
            good, unsure = a >= t, v >= t
            ac += good and not unsure
            au += good and unsure
            ic += (not good) and not unsure
            iu += (not good) and unsure
        rows.append((ac, au, ic, iu, (ac + iu) / (ac + au + ic + iu)))
    return rows


def pavpu(s, y, u, g=4):
    return math.fsum(r[4] for r in pavpu_bins(s, y, u, g)) / 10


def binary_entropy_bits(p):
    if p <= 0 or p >= 1:
        return 0.0
    return -(p * math.log2(p) + (1 - p) * math.log2(1 - p))


def gaussian_kl(mp, lp, mq, lq):
    """KL(N(mp, e^lp) || N(mq, e^lq)) for scalars."""
    return 0.5 * ((math.exp(lp) + (mp - mq) ** 2) / math.exp(lq) - 1 + lq - lp)
