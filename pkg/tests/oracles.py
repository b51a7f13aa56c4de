"""Independent brute-force oracles: plain Python loops in double precision.

These deliberately avoid the vectorized production code paths; every oracle
recomputes its quantity from first principles so unit and acceptance tests
check the pipeline against an implementation that shares nothing with it.
"""

import cmath
import math


def iq_power_per_prb(iq_list):
    """Triple-loop mean power per PRB over a nested-list [A][S][P][SC][2] tensor."""
    n_a = len(iq_list)
    n_s = len(iq_list[0])
    n_p = len(iq_list[0][0])
    n_sc = len(iq_list[0][0][0])
    out = []
    for p in range(n_p):
        acc = 0.0
        for a in range(n_a):
            plane = iq_list[a]
            for s in range(n_s):
                row = plane[s][p]
                for sc in range(n_sc):
                    i, q = row[sc]
                    acc += i * i + q * q
        out.append(acc / (n_a * n_s * n_sc))
    return out


def validity_filter(samples, a, k, s, tau):
    out = []
    for i, smp in enumerate(samples):
        if abs(complex(smp[a, k, s])) > tau:
            out.append(i)
    return out


def masked_mean_template(samples, tau):
    """Per-cell complex mean over the validity set; zero where empty."""
    n_a, n_k, n_s = samples[0].shape
    values = [[[0j] * n_s for _ in range(n_k)] for _ in range(n_a)]
    counts = [[[0] * n_s for _ in range(n_k)] for _ in range(n_a)]
    for a in range(n_a):
        for k in range(n_k):
            for s in range(n_s):
                acc = 0j
                n = 0
                for smp in samples:
                    v = complex(smp[a, k, s])
                    if abs(v) > tau:
                        acc += v
                        n += 1
                if n:
                    values[a][k][s] = acc / n
                counts[a][k][s] = n
    return values, counts


def window_scan(timestamps, t, delta_t):
    return [i for i, ti in enumerate(timestamps) if t - delta_t <= ti <= t]


def subtract_reduce(avg, template, valid_cols):
    """(|avg| - |template|) then mean over symbols, on the valid columns."""
    n_a, n_k, n_s = avg.shape
    out = []
    for a in range(n_a):
        row = []
        for k in range(n_k):
            if not valid_cols[k]:
                continue
            acc = 0.0
            for s in range(n_s):
                acc += abs(complex(avg[a, k, s])) - abs(complex(template[a, k, s]))
            row.append(acc / n_s)
        out.append(row)
    return out


def zscore_loop(features, mu, sigma, eps):
    return [[(float(v) - mu) / (sigma + eps) for v in row] for row in features]


def kl_terms(p_y, p_x, floor=1e-12):
    acc = 0.0
    for ty, tx in zip(p_y.ravel(), p_x.ravel()):
        if ty > 0:
            acc += ty * math.log(ty / max(tx, floor))
    return acc


def conv1d_loop(x, w, b, stride, pad):
    """Naive [C_in, L] x [C_out, C_in, k] convolution in float."""
    c_in = len(x)
    length = len(x[0])
    c_out = len(w)
    k = len(w[0][0])
    l_out = (length + 2 * pad - k) // stride + 1
    out = []
    for co in range(c_out):
        row = []
        for j in range(l_out):
            acc = float(b[co])
            start = j * stride - pad
            for ci in range(c_in):
                for t in range(k):
                    src = start + t
                    if 0 <= src < length:
                        acc += float(x[ci][src]) * float(w[co][ci][t])
            row.append(acc)
        out.append(row)
    return out


def maxpool1d_loop(x, k, stride):
    out = []
    for row in x:
        pooled = []
        j = 0
        while j + k <= len(row):
            pooled.append(max(float(v) for v in row[j:j + k]))
            j += stride
        out.append(pooled)
    return out


def batchnorm_loop(x, gamma, beta, mean, var, eps=1e-5):
    out = []
    for c, row in enumerate(x):
        g, b, m, v = float(gamma[c]), float(beta[c]), float(mean[c]), float(var[c])
        out.append([g * (float(t) - m) / math.sqrt(v + eps) + b for t in row])
    return out


def linear_loop(x, w, b):
    return [sum(float(wi) * float(xi) for wi, xi in zip(row, x)) + float(bi)
            for row, bi in zip(w, b)]


def softmax_loop(v):
    m = max(float(t) for t in v)
    exps = [math.exp(float(t) - m) for t in v]
    total = sum(exps)
    return [e / total for e in exps]


def avgpool_all_loop(x):
    return [sum(float(v) for v in row) / len(row) for row in x]


def argmax_scan(grid):
    best = None
    best_v = -math.inf
    for i, row in enumerate(grid):
        for j, v in enumerate(row):
            if float(v) > best_v:
                best_v = float(v)
                best = (i, j)
    return best


def homography_apply(h, u, v):
    w = h[2][0] * u + h[2][1] * v + h[2][2]
    return ((h[0][0] * u + h[0][1] * v + h[0][2]) / w,
            (h[1][0] * u + h[1][1] * v + h[1][2]) / w)


def nearest_frame(frame_times, t):
    best_i = None
    best_d = None
    for i, ft in enumerate(frame_times):
        d = abs(ft - t)
        if best_d is None or d < best_d:
            best_d = d
            best_i = i
    return best_i, best_d


def error_stats(errors_cm):
    n = len(errors_cm)
    mean = sum(errors_cm) / n
    srt = sorted(errors_cm)
    median = (srt[n // 2] if n % 2 else (srt[n // 2 - 1] + srt[n // 2]) / 2)
    var = sum((e - mean) ** 2 for e in errors_cm) / n
    rmse = math.sqrt(sum(e * e for e in errors_cm) / n)
    return mean, median, math.sqrt(var), rmse


def complex_from_polar(r, phi):
    return r * cmath.exp(1j * phi)
