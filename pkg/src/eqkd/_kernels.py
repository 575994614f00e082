"""Compiled inner loops shared by the simulator and the coincidence engine."""
import numpy as np
from numba import njit


@njit(cache=True)
def dead_time_mask(times, detectors, last, dead_ps):
    """Non-paralyzable dead time per physical detector.

    ``last`` holds the previous registered time of every detector and is
    updated in place so the state carries across chunks.
    """
    keep = np.zeros(len(times), dtype=np.bool_)
    for i in range(len(times)):
        d = detectors[i]
        if times[i] - last[d] >= dead_ps:
            keep[i] = True
            last[d] = times[i]
    return keep


@njit(cache=True)
def histogram_sweep(ta, tb, lo, bw, nbins):
    """Counts of tb - ta in [lo, lo + nbins*bw), two-pointer sweep."""
    counts = np.zeros(nbins, dtype=np.int64)
    hi = lo + nbins * bw
    nb = len(tb)
    start = 0
    for i in range(len(ta)):
        a = ta[i]
        while start < nb and tb[start] - a < lo:
            start += 1
        j = start
        while j < nb:
            d = tb[j] - a
            if d >= hi:
                break
            k = int((d - lo) // bw)
            if k >= nbins:
                k = nbins - 1
            counts[k] += 1
            j += 1
    return counts


@njit(cache=True)
def greedy_match(ta, tb, offset, half):
    """Sequential nearest-neighbour matching.

    Bob tags are visited in order; each takes the closest unused Alice tag
    with |tb - offset - ta| <= half (equidistant candidates: earlier Alice tag).
    Returns (alice index, bob index, residual) arrays.
    """
    na = len(ta)
    nb = len(tb)
    used = np.zeros(na, dtype=np.bool_)
    out_a = np.empty(min(na, nb), dtype=np.int64)
    out_b = np.empty(min(na, nb), dtype=np.int64)
    out_d = np.empty(min(na, nb), dtype=np.int64)
    n = 0
    j0 = 0
    for ib in range(nb):
        t = tb[ib] - offset
        while j0 < na and ta[j0] < t - half:
            j0 += 1
        best = -1
        bestd = half + 1
        j = j0
        while j < na and ta[j] <= t + half:
            if not used[j]:
                d = t - ta[j]
                ad = d if d >= 0 else -d
                if ad < bestd:
                    bestd = ad
                    best = j
            j += 1
        if best >= 0:
            used[best] = True
            out_a[n] = best
            out_b[n] = ib
            out_d[n] = t - ta[best]
            n += 1
    return out_a[:n], out_b[:n], out_d[:n]


@njit(cache=True)
def route_pairs(t_emit, ids, u, cdf, a_code, a_delay, b_code, b_delay, a_det, b_det):
    """Draw each pair's joint category from ``cdf`` and split it into the two
    sides' events: time before jitter and packed code (pair id << 4 | category code)."""
    n = len(t_emit)
    ta = np.empty(n, np.float64)
    ca = np.empty(n, np.int64)
    tb = np.empty(n, np.float64)
    cb = np.empty(n, np.int64)
    na = 0
    nb = 0
    last = len(cdf) - 1
    for i in range(n):
        lo = 0
        hi = last
        x = u[i]
        while lo < hi:
            mid = (lo + hi) >> 1
            if cdf[mid] > x:
                hi = mid
            else:
                lo = mid + 1
        c = lo
        tag = ids[i] << 4
        if a_det[c] >= 0:
            ta[na] = t_emit[i] + a_delay[c]
            ca[na] = tag | a_code[c]
            na += 1
        if b_det[c] >= 0:
            tb[nb] = t_emit[i] + b_delay[c]
            cb[nb] = tag | b_code[c]
            nb += 1
    return ta[:na], ca[:na], tb[:nb], cb[:nb]
