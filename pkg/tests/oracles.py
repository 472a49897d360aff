"""Independent brute-force reference implementations.

Everything here is written as plain per-definition loops, deliberately
ignoring vectorization, so the library implementations have something honest
to be compared against.
"""

import math

import numpy as np


def invariance(z1, z2):
    n, d = z1.shape
    acc = 0.0
    for i in range(n):
        for k in range(d):
            acc += (z1[i, k] - z2[i, k]) ** 2
    return acc / n


def variance(z, gamma, epsilon):
    n, d = z.shape
    acc = 0.0
    for j in range(d):
        mean = sum(z[i, j] for i in range(n)) / n
        var = sum((z[i, j] - mean) ** 2 for i in range(n)) / (n - 1)
        acc += max(0.0, gamma - math.sqrt(var + epsilon))
    return acc / d


def covariance(z):
    n, d = z.shape
    mean = [sum(z[i, j] for i in range(n)) / n for j in range(d)]
    cov = [[sum((z[i, a] - mean[a]) * (z[i, b] - mean[b])
                for i in range(n)) / (n - 1)
            for b in range(d)] for a in range(d)]
    acc = 0.0
    for a in range(d):
        for b in range(d):
            if a != b:
                acc += cov[a][b] ** 2
    return acc / d


def tinc(z1, z2, dv, squared=False):
    n, d = z1.shape
    acc = 0.0
    for i in range(n):
        dist = sum((z1[i, k] - z2[i, k]) ** 2 for k in range(d))
        hinge = max(0.0, dist - dv[i])
        acc += hinge * hinge if squared else hinge
    return acc / n


def vicreg_total(z1, z2, dv, cfg):
    if cfg.similarity_variant == "mse":
        sim = invariance(z1, z2)
    else:
        sim = tinc(z1, z2, dv, squared=cfg.similarity_variant == "tinc_squared")
    var = variance(z1, cfg.gamma, cfg.epsilon) + \
        variance(z2, cfg.gamma, cfg.epsilon)
    cov = covariance(z1) + covariance(z2)
    return cfg.lambda_inv * sim + cfg.mu_var * var + cfg.nu_cov * cov


def barlow_twins(z1, z2, lambda_bt, epsilon):
    n, d = z1.shape

    def norm(z):
        out = np.empty_like(z, dtype=float)
        for j in range(d):
            mean = sum(z[i, j] for i in range(n)) / n
            std = math.sqrt(sum((z[i, j] - mean) ** 2 for i in range(n)) / n)
            for i in range(n):
                out[i, j] = (z[i, j] - mean) / (std + epsilon)
        return out

    a, b = norm(z1), norm(z2)
    c = [[sum(a[i, p] * b[i, q] for i in range(n)) / n for q in range(d)]
         for p in range(d)]
    loss = 0.0
    for p in range(d):
        for q in range(d):
            if p == q:
                loss += (1.0 - c[p][q]) ** 2
            else:
                loss += lambda_bt * c[p][q] ** 2
    return loss


def time_head(pred, target):
    return sum((p - t) ** 2 for p, t in zip(pred, target)) / len(pred)


def auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def prauc(scores, labels):
    """Step integration of the PR curve over descending unique thresholds."""
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    s = [scores[i] for i in order]
    y = [labels[i] for i in order]
    n_pos = sum(1 for v in y if v)
    area = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[j + 1] == s[i]:
            j += 1
        tp += sum(1 for k in range(i, j + 1) if y[k])
        fp += sum(1 for k in range(i, j + 1) if not y[k])
        recall = tp / n_pos
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j + 1
    return area


def spearman(a, b):
    def ranks(v):
        order = sorted(range(len(v)), key=lambda i: v[i])
        out = [0.0] * len(v)
        i = 0
        while i < len(v):
            j = i
            while j + 1 < len(v) and v[order[j + 1]] == v[order[i]]:
                j += 1
            for k in range(i, j + 1):
                out[order[k]] = (i + j) / 2.0 + 1.0
            i = j + 1
        return out

    ra, rb = ranks(list(a)), ranks(list(b))
    ma = sum(ra) / len(ra)
    mb = sum(rb) / len(rb)
    num = sum((x - ma) * (y - mb) for x, y in zip(ra, rb))
    da = math.sqrt(sum((x - ma) ** 2 for x in ra))
    db = math.sqrt(sum((y - mb) ** 2 for y in rb))
    if da == 0.0 or db == 0.0:
        return 0.0
    return num / (da * db)


def conv2d(x, w, stride, pad):
    """Direct-loop convolution oracle for the kernel backends."""
    n, ci, h, wi = x.shape
    co, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wi + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for b in range(n):
        for o in range(co):
            for yo in range(ho):
                for xo in range(wo):
                    acc = 0.0
                    for c in range(ci):
                        for ky in range(kh):
                            for kx in range(kw):
                                yy = yo * stride + ky - pad
                                xx = xo * stride + kx - pad
                                if 0 <= yy < h and 0 <= xx < wi:
                                    acc += x[b, c, yy, xx] * w[o, c, ky, kx]
                    out[b, o, yo, xo] = acc
    return out
