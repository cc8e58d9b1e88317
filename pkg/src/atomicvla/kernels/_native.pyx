# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled window classification and run merging for the segmenter."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, fmod, M_PI

cnp.import_array()


cdef inline double _wrap(double a) nogil:
    cdef double r = M_PI - fmod(M_PI - a, 2.0 * M_PI)
    if r <= -M_PI:
        r += 2.0 * M_PI
    elif r > M_PI:
        r -= 2.0 * M_PI
    return r


def classify_windows(double[:, ::1] arr, int window, double trans, double rot, double grip):
    cdef Py_ssize_t n = arr.shape[0]
    cdef Py_ssize_t m = n - window + 1
    cdef Py_ssize_t i, j
    cdef double dx, dy, dz, dyaw, dg, ax, ay, az, best
    cdef int axis
    if m < 1:
        return np.zeros(0, dtype=np.int8)
    out_arr = np.zeros(m, dtype=np.int8)
    cdef cnp.int8_t[::1] out = out_arr
    with nogil:
        for i in range(m):
            j = i + window - 1
            dg = arr[j, 4] - arr[i, 4]
            if dg <= -grip:
                out[i] = 9
                continue
            if dg >= grip:
                out[i] = 10
                continue
            dx = arr[j, 0] - arr[i, 0]
            dy = arr[j, 1] - arr[i, 1]
            dz = arr[j, 2] - arr[i, 2]
            ax = fabs(dx)
            ay = fabs(dy)
            az = fabs(dz)
            axis = 0
            best = ax
            if ay > best:
                axis = 1
                best = ay
            if az > best:
                axis = 2
                best = az
            if best >= trans:
                if axis == 0:
                    out[i] = 1 if dx > 0 else 2
                elif axis == 1:
                    out[i] = 3 if dy > 0 else 4
                else:
                    out[i] = 5 if dz > 0 else 6
                continue
            dyaw = _wrap(arr[j, 3] - arr[i, 3])
            if fabs(dyaw) >= rot:
                out[i] = 7 if dyaw > 0 else 8
            else:
                out[i] = 0
    return out_arr


def runs(cnp.int8_t[::1] codes):
    """Maximal constant runs as (starts, ends, codes); ends are exclusive."""
    cdef Py_ssize_t n = codes.shape[0]
    cdef Py_ssize_t i, k = 0
    s_arr = np.zeros(n, dtype=np.int64)
    e_arr = np.zeros(n, dtype=np.int64)
    c_arr = np.zeros(n, dtype=np.int8)
    cdef cnp.int64_t[::1] s = s_arr
    cdef cnp.int64_t[::1] e = e_arr
    cdef cnp.int8_t[::1] c = c_arr
    if n == 0:
        return s_arr[:0], e_arr[:0], c_arr[:0]
    s[0] = 0
    c[0] = codes[0]
    for i in range(1, n):
        if codes[i] != codes[i - 1]:
            e[k] = i
            k += 1
            s[k] = i
            c[k] = codes[i]
    e[k] = n
    k += 1
    return s_arr[:k].copy(), e_arr[:k].copy(), c_arr[:k].copy()


def merge_short_runs(starts, ends, codes, int min_len):
    """Repeatedly fold the shortest run below min_len into its longer neighbour.

    Ties between neighbours go left; ties between equally short runs go to the
    earliest. Adjacent runs that end up with equal codes are fused.
    """
    cdef list s = [int(v) for v in starts]
    cdef list e = [int(v) for v in ends]
    cdef list c = [int(v) for v in codes]
    cdef Py_ssize_t i, best_i, n
    cdef long length, best_len, left, right
    while True:
        n = len(s)
        if n <= 1:
            break
        best_i = -1
        best_len = min_len
        for i in range(n):
            length = e[i] - s[i]
            if length < best_len:
                best_len = length
                best_i = i
        if best_i < 0:
            break
        i = best_i
        left = e[i - 1] - s[i - 1] if i > 0 else -1
        right = e[i + 1] - s[i + 1] if i + 1 < n else -1
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
    return (np.array(s, dtype=np.int64), np.array(e, dtype=np.int64), np.array(c, dtype=np.int8))
