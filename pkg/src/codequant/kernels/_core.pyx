# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: order-pinned matmul and the clustered GEMM pair.

Float semantics are pinned to match the numpy fallback bit-for-bit: every
multiply and add rounds once in the operand precision (the extension is built
with -ffp-contract=off, so no FMA contraction), and every output element
accumulates its contraction terms with the inner index ascending.
"""

from libc.stdlib cimport free, malloc


def matmul_f64(const double[:, ::1] a, const double[:, ::1] b, double[:, ::1] out):
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t kdim = a.shape[1]
    cdef Py_ssize_t n = b.shape[1]
    cdef Py_ssize_t i, k, j
    cdef double aik
    with nogil:
        for i in range(m):
            for k in range(kdim):
                aik = a[i, k]
                for j in range(n):
                    out[i, j] = out[i, j] + aik * b[k, j]


def matmul_f32(const float[:, ::1] a, const float[:, ::1] b, float[:, ::1] out):
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t kdim = a.shape[1]
    cdef Py_ssize_t n = b.shape[1]
    cdef Py_ssize_t i, k, j
    cdef float aik
    with nogil:
        for i in range(m):
            for k in range(kdim):
                aik = a[i, k]
                for j in range(n):
                    out[i, j] = out[i, j] + aik * b[k, j]


def lut_gemm_f32(const signed char[:, ::1] q, const float[::1] scales,
                 const unsigned char[:, ::1] ids_packed,
                 const float[:, :, ::1] centroids,
                 Py_ssize_t g, Py_ssize_t block_tokens,
                 float[:, ::1] out, Py_ssize_t t0, Py_ssize_t t1):
    """Clustered GEMM over tokens [t0, t1) via per-(row, group) lookup tables.

    Tables are rebuilt once per (token block, output row) and hold
    centroid * (code - 8) for all 16x16 (centroid id, activation code) pairs.
    Per token block the biased activation codes are materialized once and
    shared by every output row; per row, each column's table base (group and
    centroid id) is hoisted so the token loop does one lookup and one add per
    element. Accumulation per output element: f32, groups ascending, columns
    ascending.
    """
    cdef Py_ssize_t d_in = q.shape[1]
    cdef Py_ssize_t d_out = centroids.shape[0]
    cdef Py_ssize_t n_groups = centroids.shape[1]
    cdef Py_ssize_t half = d_in >> 1
    cdef Py_ssize_t blen = block_tokens
    cdef Py_ssize_t bs, be, i, grp, c, code, t, j, jj, trow
    cdef int lo, hi
    cdef float cent, acc, acc2
    cdef unsigned char byte
    cdef float *tables = <float *> malloc(n_groups * 256 * sizeof(float))
    cdef int *col_base = <int *> malloc((d_in if d_in > 0 else 1) * sizeof(int))
    cdef unsigned char *ids_row = <unsigned char *> malloc(d_in if d_in > 0 else 1)
    if t1 - t0 < blen:
        blen = t1 - t0
    cdef unsigned char *codes_p8 = <unsigned char *> malloc(
        blen * d_in if blen * d_in > 0 else 1)
    if tables == NULL or ids_row == NULL or col_base == NULL or codes_p8 == NULL:
        free(tables)
        free(ids_row)
        free(col_base)
        free(codes_p8)
        raise MemoryError()
    try:
        with nogil:
            bs = t0
            while bs < t1:
                be = bs + block_tokens
                if be > t1:
                    be = t1
                for t in range(bs, be):
                    trow = (t - bs) * d_in
                    for j in range(d_in):
                        codes_p8[trow + j] = <unsigned char> (<int> q[t, j] + 8)
                for i in range(d_out):
                    for grp in range(n_groups):
                        for c in range(16):
                            cent = centroids[i, grp, c]
                            for code in range(16):
                                tables[grp * 256 + c * 16 + code] = cent * <float> (code - 8)
                    if g & 1:
                        # generic path: a packed byte may straddle groups
                        for jj in range(half):
                            byte = ids_packed[i, jj]
                            ids_row[2 * jj] = byte & 15
                            ids_row[2 * jj + 1] = byte >> 4
                        if d_in & 1:
                            ids_row[d_in - 1] = ids_packed[i, half] & 15
                        for j in range(d_in):
                            col_base[j] = <int> ((j // g) << 8) + (ids_row[j] << 4)
                        for t in range(bs, be):
                            acc = 0.0
                            trow = (t - bs) * d_in
                            for j in range(d_in):
                                acc = acc + tables[col_base[j] + codes_p8[trow + j]]
                            out[t, i] = scales[t] * acc
                    else:
                        # even g: each byte's low/high nibbles stay in one
                        # group, so the id shift is two masks on the raw byte.
                        # Tokens go two at a time; each keeps its own
                        # accumulation chain in its own order.
                        t = bs
                        while t + 1 < be:
                            acc = 0.0
                            acc2 = 0.0
                            trow = (t - bs) * d_in
                            for grp in range(n_groups):
                                for jj in range(g >> 1):
                                    byte = ids_packed[i, ((grp * g) >> 1) + jj]
                                    j = grp * g + 2 * jj
                                    lo = (grp << 8) + ((byte << 4) & 0xF0)
                                    hi = (grp << 8) + (byte & 0xF0)
                                    acc = acc + tables[lo + codes_p8[trow + j]]
                                    acc = acc + tables[hi + codes_p8[trow + j + 1]]
                                    acc2 = acc2 + tables[lo + codes_p8[trow + d_in + j]]
                                    acc2 = acc2 + tables[hi + codes_p8[trow + d_in + j + 1]]
                            out[t, i] = scales[t] * acc
                            out[t + 1, i] = scales[t + 1] * acc2
                            t += 2
                        if t < be:
                            acc = 0.0
                            trow = (t - bs) * d_in
                            for grp in range(n_groups):
                                for jj in range(g >> 1):
                                    byte = ids_packed[i, ((grp * g) >> 1) + jj]
                                    j = grp * g + 2 * jj
                                    acc = acc + tables[(grp << 8) + ((byte << 4) & 0xF0)
                                                       + codes_p8[trow + j]]
                                    acc = acc + tables[(grp << 8) + (byte & 0xF0)
                                                       + codes_p8[trow + j + 1]]
                            out[t, i] = scales[t] * acc
                bs = be
    finally:
        free(tables)
        free(ids_row)
        free(col_base)
        free(codes_p8)


def reference_gemm_f32(const signed char[:, ::1] q, const float[::1] scales,
                       const unsigned char[:, ::1] ids_packed,
                       const float[:, :, ::1] centroids,
                       Py_ssize_t g, Py_ssize_t block_tokens,
                       float[:, ::1] out, Py_ssize_t t0, Py_ssize_t t1):
    """Per-element dequant reference: centroid lookup times int value, no tables.

    Identical accumulation order and rounding as lut_gemm_f32, so outputs are
    bitwise equal.
    """
    cdef Py_ssize_t d_in = q.shape[1]
    cdef Py_ssize_t d_out = centroids.shape[0]
    cdef Py_ssize_t n_groups = centroids.shape[1]
    cdef Py_ssize_t half = d_in >> 1
    cdef Py_ssize_t bs, be, i, grp, t, j, jj
    cdef float acc, acc2, cent
    cdef unsigned char byte
    cdef unsigned char *ids_row = <unsigned char *> malloc(d_in if d_in > 0 else 1)
    if ids_row == NULL:
        raise MemoryError()
    try:
        with nogil:
            bs = t0
            while bs < t1:
                be = bs + block_tokens
                if be > t1:
                    be = t1
                for i in range(d_out):
                    for jj in range(half):
                        byte = ids_packed[i, jj]
                        ids_row[2 * jj] = byte & 15
                        ids_row[2 * jj + 1] = byte >> 4
                    if d_in & 1:
                        ids_row[d_in - 1] = ids_packed[i, half] & 15
                    # tokens two at a time, one accumulation chain each
                    t = bs
                    while t + 1 < be:
                        acc = 0.0
                        acc2 = 0.0
                        for grp in range(n_groups):
                            for jj in range(g):
                                j = grp * g + jj
                                cent = centroids[i, grp, ids_row[j]]
                                acc = acc + cent * <float> q[t, j]
                                acc2 = acc2 + cent * <float> q[t + 1, j]
                        out[t, i] = scales[t] * acc
                        out[t + 1, i] = scales[t + 1] * acc2
                        t += 2
                    if t < be:
                        acc = 0.0
                        for grp in range(n_groups):
                            for jj in range(g):
                                j = grp * g + jj
                                acc = acc + centroids[i, grp, ids_row[j]] * <float> q[t, j]
                        out[t, i] = scales[t] * acc
                bs = be
    finally:
        free(ids_row)
