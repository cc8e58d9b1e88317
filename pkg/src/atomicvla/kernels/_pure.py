"""Pure-Python twins of the compiled segmenter kernels (same semantics, bit-for-bit)."""
import math

import numpy as np


def _wrap(a):
    r = math.pi - math.fmod(math.pi - a, 2.0 * math.pi)
    if r <= -math.pi:
        r += 2.0 * math.pi
    elif r > math.pi:
        r -= 2.0 * math.pi
    return r


def classify_windows(arr, window, trans, rot, grip):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    n = arr.shape[0]
    m = n - window + 1
    if m < 1:
        return np.zeros(0, dtype=np.int8)
    out = np.zeros(m, dtype=np.int8)
    rows = arr.tolist()
    for i in range(m):
        a, b = rows[i], rows[i + window - 1]
        dg = b[4] - a[4]
        if dg <= -grip:
            out[i] = 9
            continue
        if dg >= grip:
            out[i] = 10
            continue
        d = (b[0] - a[0], b[1] - a[1], b[2] - a[2])
        axis, best = 0, abs(d[0])
        if abs(d[1]) > best:
            axis, best = 1, abs(d[1])
        if abs(d[2]) > best:
            axis, best = 2, abs(d[2])
        if best >= trans:
            out[i] = 1 + 2 * axis + (0 if d[axis] > 0 else 1)
            continue
        dyaw = _wrap(b[3] - a[3])
        if abs(dyaw) >= rot:
            out[i] = 7 if dyaw > 0 else 8
    return out


def runs(codes):
    codes = np.asarray(codes, dtype=np.int8)
    n = len(codes)
    if n == 0:
        z = np.zeros(0, dtype=np.int64)
        return z, z.copy(), np.zeros(0, dtype=np.int8)
    cut = np.flatnonzero(codes[1:] != codes[:-1]) + 1
    starts = np.concatenate([[0], cut]).astype(np.int64)
    ends = np.concatenate([cut, [n]]).astype(np.int64)
    return starts, ends, codes[starts].astype(np.int8)


def merge_short_runs(starts, ends, codes, min_len):
    s = [int(v) for v in starts]
    e = [int(v) for v in ends]
    c = [int(v) for v in codes]
    while len(s) > 1:
        lengths = [b - a for a, b in zip(s, e)]
        best_i, best_len = -1, min_len
        for i, length in enumerate(lengths):
            if length < best_len:
                best_i, best_len = i, length
        if best_i < 0:
            break
        i = best_i
        left = lengths[i - 1] if i > 0 else -1
        right = lengths[i + 1] if i + 1 < len(s) else -1
        if left >= right:
            e[i - 1] = e[i]
        else:
            s[i + 1] = s[i]
        del s[i], e[i], c[i]
        i = 1
        while i < len(s):
            if c[i] == c[i - 1]:
                e[i - 1] = e[i]
                del s[i], e[i], c[i]
            else:
                i += 1
    return np.array(s, dtype=np.int64), np.array(e, dtype=np.int64), np.array(c, dtype=np.int8)
