"""Pure-Python metric kernels; reference semantics for the compiled twin in ``_kernels.pyx``."""


def lcs_length(a, b):
    """Length of the longest common subsequence of two int sequences."""
    if len(a) < len(b):
        a, b = b, a
    n = len(b)
    if n == 0:
        return 0
    prev = [0] * (n + 1)
    for x in a:
        cur = [0] * (n + 1)
        for j in range(n):
            if x == b[j]:
                cur[j + 1] = prev[j] + 1
            else:
                cur[j + 1] = cur[j] if cur[j] > prev[j + 1] else prev[j + 1]
        prev = cur
    return prev[n]


def meteor_align(cand, ref, cand_stem, ref_stem):
    """Two-stage unigram alignment (exact ids, then stem ids).

    Candidate positions are scanned left to right; each takes the reference
    position continuing the previous match when possible, else the leftmost
    free one.  Returns ``(matches, chunks)``.
    """
    m, n = len(cand), len(ref)
    link = [-1] * m
    used = [False] * n
    for ckeys, rkeys in ((cand, ref), (cand_stem, ref_stem)):
        for i in range(m):
            if link[i] >= 0:
                continue
            key = ckeys[i]
            pick = -1
            if i > 0 and link[i - 1] >= 0:
                j = link[i - 1] + 1
                if j < n and not used[j] and rkeys[j] == key:
                    pick = j
            if pick < 0:
                for j in range(n):
                    if not used[j] and rkeys[j] == key:
                        pick = j
                        break
            if pick >= 0:
                link[i] = pick
                used[pick] = True
    matches = 0
    chunks = 0
    prev_i = -2
    prev_j = -2
    for i in range(m):
        j = link[i]
        if j < 0:
            continue
        matches += 1
        if not (i == prev_i + 1 and j == prev_j + 1):
            chunks += 1
        prev_i, prev_j = i, j
    return matches, chunks
