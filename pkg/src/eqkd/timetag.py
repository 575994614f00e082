"""Coincidence analysis and clock synchronization between the two tag streams.

Offsets follow one convention everywhere: ``offset = t_bob - t_alice`` for
the same pair, so a Bob tag maps to Alice's frame as ``t_bob - offset``.
Synchronization runs in three stages of increasing precision: first-tag
difference, a 1 ns histogram over a wide range, and a 16 ps histogram over
+-40 ns. Once locked, a fixed-gain alpha-beta filter tracks offset and skew
from one measurement per second.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._kernels import greedy_match, histogram_sweep

PS_PER_S = 1_000_000_000_000

STAGE2_HALF_RANGE_PS = 500_000
STAGE2_BIN_PS = 1000
STAGE3_HALF_RANGE_PS = 40_000
STAGE3_BIN_PS = 16
TRACK_HALF_RANGE_PS = 5000
SIGNIFICANCE_MIN = 5.0
CENTROID_HALF_BINS = 3


class EmptyBlock(ValueError):
    pass


class NoPeak(RuntimeError):
    """No histogram bin stands 5 background sigma above the floor."""

    def __init__(self, msg, significance=0.0):
        super().__init__(msg)
        self.significance = significance


class LostLock(RuntimeError):
    pass


@dataclass
class CorrelationHistogram:
    bin_width_ps: int
    center_ps: int
    counts: np.ndarray
    total: int

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    @property
    def lo_ps(self) -> int:
        """Left edge of bin 0; bins are half-open [lo + k*w, lo + (k+1)*w)."""
        return self.center_ps - (self.n_bins // 2) * self.bin_width_ps - self.bin_width_ps // 2

    @property
    def bin_centers(self) -> np.ndarray:
        return self.lo_ps + self.bin_width_ps * (np.arange(self.n_bins) + 0.5)

    def to_csv(self) -> str:
        rows = ["bin_center_ps,count"]
        rows += [f"{c:.1f},{n}" for c, n in zip(self.bin_centers, self.counts)]
        return "\n".join(rows) + "\n"


def correlation_histogram(tags_a, tags_b, center_ps: int, half_range_ps: int,
                          bin_width_ps: int) -> CorrelationHistogram:
    """Histogram of all pairwise delays tb - ta around ``center_ps``.

    The bin count is odd with the middle bin centred on ``center_ps``; the
    bins jointly cover at least [center - half_range, center + half_range].
    """
    bw = int(bin_width_ps)
    if bw <= 0:
        raise ValueError("bin_width_ps must be positive")
    half_bins = int(math.ceil(half_range_ps / bw - 0.5))
    nbins = 2 * max(half_bins, 0) + 1
    h = CorrelationHistogram(bw, int(center_ps), np.zeros(nbins, np.int64), 0)
    ta = np.ascontiguousarray(tags_a, dtype=np.int64)
    tb = np.ascontiguousarray(tags_b, dtype=np.int64)
    h.counts = histogram_sweep(ta, tb, np.int64(h.lo_ps), np.int64(bw), nbins)
    h.total = int(h.counts.sum())
    return h


def _background(counts: np.ndarray, peak: int) -> float:
    if len(counts) >= 10:
        return float(np.median(counts))
    mask = np.ones(len(counts), bool)
    mask[max(0, peak - CENTROID_HALF_BINS): peak + CENTROID_HALF_BINS + 1] = False
    return float(counts[mask].mean()) if mask.any() else 0.0


def locate_peak(hist: CorrelationHistogram, min_significance: float = SIGNIFICANCE_MIN):
    """Background-subtracted centroid around the argmax bin.

    Returns (offset_ps, significance, n_signal, spread_ps) where spread is
    the second moment inside the centroid window. Raises NoPeak below the
    significance threshold.
    """
    counts = hist.counts.astype(np.float64)
    if counts.size == 0 or counts.max() <= 0:
        raise NoPeak("empty histogram", 0.0)
    k = int(np.argmax(counts))
    bg = _background(counts, k)
    sigma = math.sqrt(max(bg, 1.0))
    significance = (counts[k] - bg) / sigma
    if significance < min_significance:
        raise NoPeak(f"peak significance {significance:.2f} below {min_significance}", significance)
    x_all = hist.bin_centers
    bw = hist.bin_width_ps
    excess = np.clip(counts - bg, 0.0, None)
    # Start on the argmax bin, then re-centre a +-3.5 bin window (fractional
    # edge bins) on the running centroid; a window fixed on the argmax bin is
    # biased by up to a bin when the peak straddles two bins.
    centre = float(x_all[k])
    for _ in range(8):
        j = int(round((centre - x_all[0]) / bw))
        lo = max(0, j - CENTROID_HALF_BINS - 1)
        hi = min(len(counts), j + CENTROID_HALF_BINS + 2)
        x = x_all[lo:hi]
        half = (CENTROID_HALF_BINS + 0.5) * bw
        overlap = np.clip(np.minimum(x + bw / 2, centre + half) - np.maximum(x - bw / 2, centre - half), 0.0, bw) / bw
        w = excess[lo:hi] * overlap
        n = w.sum()
        if n <= 0:
            break
        new = float((w * x).sum() / n)
        if abs(new - centre) < 1e-3:
            centre = new
            break
        centre = new
    spread = float(math.sqrt(max((w * (x - centre) ** 2).sum() / max(n, 1e-12), bw**2 / 12.0)))
    return centre, float(significance), float(n), spread


def coarse_offset(tags_a, tags_b) -> int:
    """Stage 1: difference of the first tags."""
    if len(tags_a) == 0 or len(tags_b) == 0:
        raise EmptyBlock("coarse offset needs tags on both sides")
    return int(tags_b[0]) - int(tags_a[0])


def acquire_offset(tags_a, tags_b, coarse_ps: int, max_half_range_ps: int = 200_000_000):
    """Stage 2: 1 ns histogram around the coarse estimate, widened until a peak
    shows up. The starting range is the larger of +-500 ns and 20 mean tag
    spacings, since the first-tag difference is only good to about one spacing.
    """
    span = max(int(tags_a[-1]) - int(tags_a[0]), 1)
    spacing = span / max(min(len(tags_a), len(tags_b)), 1)
    half = int(max(STAGE2_HALF_RANGE_PS, 20 * spacing))
    while True:
        hist = correlation_histogram(tags_a, tags_b, coarse_ps, half, STAGE2_BIN_PS)
        try:
            centre, sig, _, _ = locate_peak(hist)
            return centre, sig
        except NoPeak:
            if half >= max_half_range_ps:
                raise
            half = min(half * 4, max_half_range_ps)


@dataclass
class ClockEstimate:
    offset_ps: float
    skew_ps_per_s: float = 0.0
    offset_uncertainty_ps: float = math.inf
    last_update_time: float = 0.0  # Alice time, seconds

    def offset_at(self, t_s) -> float:
        return self.offset_ps + self.skew_ps_per_s * (np.asarray(t_s) - self.last_update_time)

    def to_alice(self, tb) -> np.ndarray:
        """Map Bob tags to Alice's frame."""
        tb = np.asarray(tb, dtype=np.int64)
        if tb.size == 0:
            return tb.copy()
        off = self.offset_at(tb / PS_PER_S)
        return tb - np.rint(off).astype(np.int64)


def refine_offset(tags_a, tags_b, coarse_ps: float, t_s: float = 0.0) -> ClockEstimate:
    """Stage 3: 16 ps histogram over +-40 ns around a ~1 ns estimate."""
    hist = correlation_histogram(tags_a, tags_b, int(round(coarse_ps)), STAGE3_HALF_RANGE_PS, STAGE3_BIN_PS)
    centre, _, n, spread = locate_peak(hist)
    return ClockEstimate(centre, 0.0, spread / math.sqrt(max(n, 1.0)), t_s)


def measure_offset(tags_a, tags_b, predicted_ps: float, half_range_ps: int = TRACK_HALF_RANGE_PS,
                   min_significance: float = SIGNIFICANCE_MIN):
    """Offset of one batch near a prediction: (offset, sigma, significance)."""
    hist = correlation_histogram(tags_a, tags_b, int(round(predicted_ps)), half_range_ps, STAGE3_BIN_PS)
    centre, sig, n, spread = locate_peak(hist, min_significance)
    return centre, spread / math.sqrt(max(n, 1.0)), sig


class ClockTracker:
    """Fixed-gain alpha-beta filter on (offset, skew), one update per second.

    A residual beyond ``reseat_ps`` (an offset step) re-seats the offset at
    the measurement while keeping the skew. Three consecutive measurements
    without a significant peak raise LostLock.
    """

    def __init__(self, estimate: ClockEstimate, alpha: float = 0.3, beta: float = 0.1,
                 reseat_ps: float = 128.0, max_misses: int = 3):
        self.estimate = estimate
        self.alpha, self.beta = alpha, beta
        self.reseat_ps = reseat_ps
        self.max_misses = max_misses
        self.misses = 0
        self.reseats = 0

    def predict(self, t_s: float) -> float:
        return float(self.estimate.offset_at(t_s))

    def update(self, t_s: float, measured_ps: float | None, sigma_ps: float = 1.0):
        """Feed one measurement (None = no significant peak).

        Returns (new ClockEstimate, steering command in ps/s).
        """
        est = self.estimate
        if measured_ps is None:
            self.misses += 1
            if self.misses >= self.max_misses:
                raise LostLock(f"no coincidence peak for {self.misses} consecutive updates")
            return est, -est.skew_ps_per_s
        self.misses = 0
        dt = t_s - est.last_update_time
        pred = est.offset_ps + est.skew_ps_per_s * dt
        r = measured_ps - pred
        if abs(r) > self.reseat_ps:
            self.reseats += 1
            new = ClockEstimate(measured_ps, est.skew_ps_per_s, max(sigma_ps, est.offset_uncertainty_ps), t_s)
        else:
            offset = pred + self.alpha * r
            skew = est.skew_ps_per_s + (self.beta * r / dt if dt > 0 else 0.0)
            u = est.offset_uncertainty_ps
            u_new = math.sqrt((1 - self.alpha) * u * u + self.alpha * sigma_ps * sigma_ps) if math.isfinite(u) else sigma_ps
            new = ClockEstimate(offset, skew, min(u, u_new), t_s)
        self.estimate = new
        return new, -new.skew_ps_per_s

    def track(self, t_s: float, tags_a, tags_b):
        """Measure the batch around the prediction and update."""
        try:
            z, s, _ = measure_offset(tags_a, tags_b, self.predict(t_s))
        except NoPeak:
            return self.update(t_s, None)
        return self.update(t_s, z, s)


@dataclass
class CoincidencePairs:
    """Matched pairs as parallel arrays (see :func:`match_coincidences`)."""

    alice_index: np.ndarray
    bob_index: np.ndarray
    residual_ps: np.ndarray
    alice_channel: np.ndarray | None = None
    bob_channel: np.ndarray | None = None

    def __len__(self):
        return len(self.alice_index)


def match_coincidences(tags_a, tags_b, offset_ps: int = 0, window_ps: int = 128,
                       channels_a=None, channels_b=None) -> CoincidencePairs:
    """Greedy nearest-neighbour pairing with |tb - offset - ta| <= window/2.

    Bob tags are processed in time order and each takes its closest unused
    Alice tag, so an earlier Bob tag wins a contested Alice tag; between two
    equidistant Alice tags the earlier one is taken.
    """
    ta = np.ascontiguousarray(tags_a, dtype=np.int64)
    tb = np.ascontiguousarray(tags_b, dtype=np.int64)
    ia, ib, d = greedy_match(ta, tb, np.int64(round(offset_ps)), np.int64(window_ps // 2))
    return CoincidencePairs(
        ia, ib, d,
        None if channels_a is None else np.asarray(channels_a)[ia],
        None if channels_b is None else np.asarray(channels_b)[ib],
    )
