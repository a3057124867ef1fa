# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled metric kernels; same signatures and results as ``_kernels_py``."""

from libc.stdlib cimport free, malloc


cdef int* _to_c(seq, Py_ssize_t n) except NULL:
    cdef int* buf = <int*> malloc((n + 1) * sizeof(int))
    cdef Py_ssize_t i
    if buf == NULL:
        raise MemoryError()
    for i in range(n):
        buf[i] = seq[i]
    return buf


def lcs_length(a, b):
    cdef Py_ssize_t na = len(a), nb = len(b), i, j
    if na < nb:
        a, b = b, a
        na, nb = nb, na
    if nb == 0:
        return 0
    cdef int* x = _to_c(a, na)
    cdef int* y = _to_c(b, nb)
    cdef int* prev = <int*> malloc((nb + 1) * sizeof(int))
    cdef int* cur = <int*> malloc((nb + 1) * sizeof(int))
    cdef int* tmp
    cdef int result
    for j in range(nb + 1):
        prev[j] = 0
    cur[0] = 0
    for i in range(na):
        for j in range(nb):
            if x[i] == y[j]:
                cur[j + 1] = prev[j] + 1
            elif cur[j] > prev[j + 1]:
                cur[j + 1] = cur[j]
            else:
                cur[j + 1] = prev[j + 1]
        tmp = prev
        prev = cur
        cur = tmp
    result = prev[nb]
    free(x); free(y); free(prev); free(cur)
    return result


def meteor_align(cand, ref, cand_stem, ref_stem):
    cdef Py_ssize_t m = len(cand), n = len(ref), i, j, stage
    cdef int* c0 = _to_c(cand, m)
    cdef int* r0 = _to_c(ref, n)
    cdef int* c1 = _to_c(cand_stem, m)
    cdef int* r1 = _to_c(ref_stem, n)
    cdef int* link = <int*> malloc((m + 1) * sizeof(int))
    cdef char* used = <char*> malloc(n + 1)
    cdef int* ck
    cdef int* rk
    cdef int key, pick, matches = 0, chunks = 0, prev_i = -2, prev_j = -2
    for i in range(m):
        link[i] = -1
    for j in range(n):
        used[j] = 0
    for stage in range(2):
        ck = c0 if stage == 0 else c1
        rk = r0 if stage == 0 else r1
        for i in range(m):
            if link[i] >= 0:
                continue
            key = ck[i]
            pick = -1
            if i > 0 and link[i - 1] >= 0:
                j = link[i - 1] + 1
                if j < n and not used[j] and rk[j] == key:
                    pick = j
            if pick < 0:
                for j in range(n):
                    if not used[j] and rk[j] == key:
                        pick = j
                        break
            if pick >= 0:
                link[i] = pick
                used[pick] = 1
    for i in range(m):
        j = link[i]
        if j < 0:
            continue
        matches += 1
        if not (i == prev_i + 1 and j == prev_j + 1):
            chunks += 1
        prev_i = i
        prev_j = j
    free(c0); free(r0); free(c1); free(r1); free(link); free(used)
    return matches, chunks
