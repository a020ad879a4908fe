"""Separation quality metrics and statistical comparison.

SDR/SIR/SAR follow the filter-based decomposition: the estimate is split
into a target part (least-squares projection onto delayed true vocals),
an interference part (projection onto delays of both sources minus the
target), and an artifact remainder. Energy ratios are reported in dB with
a +inf sentinel for vanishing denominators.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

INF = float("inf")
SILENT_FLOOR_DB = -100.0
EXACT_TEST_LIMIT = 25


@dataclass
class SegmentScores:
    song_id: str
    segment_index: int
    sdr: float | None
    sir: float | None
    sar: float | None
    pes_frames: list[float] = field(default_factory=list)
    vad_correct: float | None = None
    is_silent: bool = False
    ref_active_fraction: float | None = None  # VAD activity of reference vocals


@dataclass
class MetricReport:
    song_wise: dict[str, float]
    segment_median: dict[str, float]
    segment_mean: dict[str, float]
    pes_mean: float | None
    vad_percent: float | None
    n_segments: int
    n_silent: int
    n_inf: dict[str, int]
    per_segment: list[SegmentScores]


@dataclass
class SignificanceResult:
    test: str
    statistic: float
    p_value: float
    n_effective: int
    method: str  # exact | approximate | degenerate


# ---------------------------------------------------------------------------
# BSS-eval decomposition

def _correlations(a: np.ndarray, b: np.ndarray, max_lag: int, nfft: int) -> np.ndarray:
    """r(k) = sum_u a[u] * b[u+k] for k = -(max_lag-1) .. max_lag-1."""
    fa = np.fft.rfft(a, nfft)
    fb = np.fft.rfft(b, nfft)
    c = np.fft.irfft(np.conj(fa) * fb, nfft)
    pos = c[:max_lag]                 # k = 0 .. max_lag-1
    neg = c[-(max_lag - 1):] if max_lag > 1 else np.empty(0)
    return np.concatenate([neg, pos])  # index k + (max_lag-1)


def _toeplitz_from_lags(r: np.ndarray, flen: int) -> np.ndarray:
    """Block[tau, tau'] = r[(tau - tau') + flen - 1], i.e. r_ij(tau - tau')."""
    idx = np.arange(flen)
    return r[(idx[:, None] - idx[None, :]) + flen - 1]


def bss_decompose(ref_sources: np.ndarray, estimate: np.ndarray, filter_len: int,
                  ridge: float = 1e-10):
    """Split `estimate` into (s_target, e_interf, e_artif), each of length T+filter_len-1.

    ref_sources is (n_sources, T) with the target (vocals) first. The
    projections solve regularized normal equations over all 0..filter_len-1
    sample delays of the references.
    """
    refs = np.asarray(ref_sources, dtype=np.float64)
    est = np.asarray(estimate, dtype=np.float64)
    if refs.ndim != 2 or est.ndim != 1 or refs.shape[1] != est.shape[0]:
        raise ValueError(f"need (n, T) references and (T,) estimate, got "
                         f"{refs.shape} and {est.shape}")
    if filter_len < 1:
        raise ValueError("filter_len must be >= 1")
    n_src, t = refs.shape
    flen = filter_len
    length = t + flen - 1
    nfft = 1 << int(math.ceil(math.log2(t + flen)))

    # Gram matrix over delayed references and cross terms with the estimate
    g = np.empty((n_src * flen, n_src * flen))
    d = np.empty(n_src * flen)
    for i in range(n_src):
        for j in range(i, n_src):
            lags = _correlations(refs[i], refs[j], flen, nfft)
            block = _toeplitz_from_lags(lags, flen)
            g[i * flen:(i + 1) * flen, j * flen:(j + 1) * flen] = block
            if j != i:
                g[j * flen:(j + 1) * flen, i * flen:(i + 1) * flen] = block.T
        d[i * flen:(i + 1) * flen] = _correlations(refs[i], est, flen, nfft)[flen - 1:]

    def _solve(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        diag_mean = float(np.trace(gram)) / gram.shape[0]
        reg = ridge * max(diag_mean, np.finfo(np.float64).tiny)
        try:
            return np.linalg.solve(gram + reg * np.eye(gram.shape[0]), rhs)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(gram, rhs, rcond=None)[0]

    coef_target = _solve(g[:flen, :flen], d[:flen])
    coef_all = _solve(g, d)

    s_target = np.convolve(refs[0], coef_target)
    p_all = np.zeros(length)
    for j in range(n_src):
        p_all += np.convolve(refs[j], coef_all[j * flen:(j + 1) * flen])
    est_pad = np.concatenate([est, np.zeros(flen - 1)])
    e_interf = p_all - s_target
    e_artif = est_pad - p_all
    return s_target, e_interf, e_artif


def _energy_ratio_db(num: float, den: float, target_energy: float) -> float:
    if den < 1e-12 * target_energy:
        return INF
    if num == 0.0:
        return -INF
    return 10.0 * math.log10(num / den)


def bss_eval(ref_sources: np.ndarray, estimate: np.ndarray, filter_len: int = 512,
             ridge: float = 1e-10):
    """(sdr, sir, sar) in dB, or (None, None, None) for a silent target reference."""
    refs = np.asarray(ref_sources, dtype=np.float64)
    if not np.any(refs[0]):
        return None, None, None
    s_target, e_interf, e_artif = bss_decompose(refs, estimate, filter_len, ridge)
    et = float(s_target @ s_target)
    ei = float(e_interf @ e_interf)
    ea = float(e_artif @ e_artif)
    eia = float((e_interf + e_artif) @ (e_interf + e_artif))
    eti = float((s_target + e_interf) @ (s_target + e_interf))
    sdr = _energy_ratio_db(et, eia, et)
    sir = _energy_ratio_db(et, ei, et)
    sar = _energy_ratio_db(eti, ea, et)
    return sdr, sir, sar


# ---------------------------------------------------------------------------
# frame energies

def _mean_square_db(x: np.ndarray) -> float:
    ms = float(np.mean(np.square(x, dtype=np.float64)))
    if ms <= 0.0:
        return -INF
    return 10.0 * math.log10(ms)


def pes(estimate: np.ndarray, ref_vocals: np.ndarray, frame_len: int = 4096,
        floor_db: float = SILENT_FLOOR_DB):
    """Predicted energy at silence.

    Frames (non-overlapping, tail dropped) where the reference mean-square
    energy falls below `floor_db` are silent; each contributes
    max(10*log10(mean(est^2) + 1e-12), floor_db). Returns (mean, values);
    mean is None when no frame is silent.
    """
    est = np.asarray(estimate, dtype=np.float64)
    ref = np.asarray(ref_vocals, dtype=np.float64)
    if est.shape != ref.shape:
        raise ValueError("estimate and reference lengths differ")
    values = []
    for start in range(0, est.size - frame_len + 1, frame_len):
        ref_db = _mean_square_db(ref[start:start + frame_len])
        if ref_db < floor_db:
            e = float(np.mean(np.square(est[start:start + frame_len]))) + 1e-12
            values.append(max(10.0 * math.log10(e), floor_db))
    if not values:
        return None, []
    return float(np.mean(values)), values


def vad_labels(signal: np.ndarray, sample_rate: int, frame_ms: float = 20.0,
               threshold_db: float = -60.0) -> np.ndarray:
    """Boolean activity per frame: RMS in dBFS >= threshold."""
    x = np.asarray(signal, dtype=np.float64)
    frame = int(round(sample_rate * frame_ms / 1000.0))
    if frame < 1:
        raise ValueError("frame shorter than one sample")
    n = x.size // frame
    if n == 0:
        return np.zeros(0, dtype=bool)
    frames = x[:n * frame].reshape(n, frame)
    rms = np.sqrt(np.mean(frames * frames, axis=1))
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(rms)
    return db >= threshold_db


def vad_accuracy(est_labels: np.ndarray, ref_labels: np.ndarray) -> float:
    est = np.asarray(est_labels, dtype=bool)
    ref = np.asarray(ref_labels, dtype=bool)
    if est.shape != ref.shape:
        raise ValueError("label sequences differ in length")
    if est.size == 0:
        raise ValueError("empty label sequences")
    return float(np.mean(est == ref) * 100.0)


# ---------------------------------------------------------------------------
# segment pipeline

def segment_metrics(ref_vocals: np.ndarray, ref_accomp: np.ndarray,
                    estimate: np.ndarray, sample_rate: int, *,
                    seg_len: float = 1.0, filter_len: int = 512,
                    song_id: str = "", silent_floor_db: float = SILENT_FLOOR_DB,
                    pes_frame_len: int = 4096, vad_frame_ms: float = 20.0,
                    vad_threshold_db: float = -60.0) -> list[SegmentScores]:
    """Score non-overlapping segments of seg_len seconds (tail dropped)."""
    rv = np.asarray(ref_vocals, dtype=np.float64)
    ra = np.asarray(ref_accomp, dtype=np.float64)
    es = np.asarray(estimate, dtype=np.float64)
    if not (rv.shape == ra.shape == es.shape):
        raise ValueError("signals must share one length")
    seg = int(round(seg_len * sample_rate))
    if rv.size < seg:
        raise ValueError(f"signals ({rv.size} samples) shorter than one "
                         f"{seg}-sample segment")
    out = []
    for k in range(rv.size // seg):
        sl = slice(k * seg, (k + 1) * seg)
        v, a, e = rv[sl], ra[sl], es[sl]
        silent = _mean_square_db(v) < silent_floor_db
        if silent:
            sdr = sir = sar = None
        else:
            sdr, sir, sar = bss_eval(np.stack([v, a]), e, filter_len)
        _, pes_vals = pes(e, v, pes_frame_len, silent_floor_db)
        ref_act = vad_labels(v, sample_rate, vad_frame_ms, vad_threshold_db)
        est_act = vad_labels(e, sample_rate, vad_frame_ms, vad_threshold_db)
        vad_ok = vad_accuracy(est_act, ref_act) if ref_act.size else None
        out.append(SegmentScores(
            song_id=song_id, segment_index=k, sdr=sdr, sir=sir, sar=sar,
            pes_frames=pes_vals, vad_correct=vad_ok, is_silent=silent,
            ref_active_fraction=float(np.mean(ref_act)) if ref_act.size else None))
    return out


def _defined(values):
    return [v for v in values if v is not None]


def _finite(values):
    return [v for v in values if v is not None and math.isfinite(v)]


def aggregate(per_segment: list[SegmentScores]) -> MetricReport:
    """Song-wise medians (median over songs of per-song segment medians) and
    pooled segment-wise median/mean. Silent segments are excluded from the
    SDR/SIR/SAR pools; +inf sentinels stay in medians but leave means."""
    if not per_segment:
        raise ValueError("no segments to aggregate")
    metrics = ("sdr", "sir", "sar")
    defined = {m: _defined(getattr(s, m) for s in per_segment) for m in metrics}
    if all(not defined[m] for m in metrics) and not any(s.pes_frames for s in per_segment):
        raise ValueError("all segments undefined")
    by_song: dict[str, list[SegmentScores]] = {}
    for s in per_segment:
        by_song.setdefault(s.song_id, []).append(s)

    song_wise = {}
    for m in metrics:
        song_medians = []
        for segs in by_song.values():
            vals = _defined(getattr(s, m) for s in segs)
            if vals:
                song_medians.append(float(np.median(vals)))
        song_wise[m] = float(np.median(song_medians)) if song_medians else None

    segment_median = {m: (float(np.median(defined[m])) if defined[m] else None)
                      for m in metrics}
    segment_mean = {}
    n_inf = {}
    for m in metrics:
        finite = _finite(defined[m])
        segment_mean[m] = float(np.mean(finite)) if finite else None
        n_inf[m] = sum(1 for v in defined[m] if math.isinf(v))

    pes_all = [v for s in per_segment for v in s.pes_frames]
    vad_all = _defined(s.vad_correct for s in per_segment)
    return MetricReport(
        song_wise=song_wise, segment_median=segment_median,
        segment_mean=segment_mean,
        pes_mean=float(np.mean(pes_all)) if pes_all else None,
        vad_percent=float(np.mean(vad_all)) if vad_all else None,
        n_segments=len(per_segment),
        n_silent=sum(1 for s in per_segment if s.is_silent),
        n_inf=n_inf, per_segment=per_segment)


# ---------------------------------------------------------------------------
# significance tests

def _norm_cdf(z: float) -> float:
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def wilcoxon_signed_rank(a, b) -> SignificanceResult:
    """Paired two-sided test on the signed ranks of the differences.

    Zero differences are discarded; ties get midranks. The exact null
    distribution is enumerated (via subset-sum counting over the doubled
    ranks) up to 25 effective pairs, beyond that a tie-corrected normal
    approximation with continuity correction applies.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size < 1:
        raise ValueError("need equal-length 1-d samples")
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return SignificanceResult("wilcoxon", 0.0, 1.0, 0, "degenerate")
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks.sum()) - w_plus
    w = min(w_plus, w_minus)
    if n <= EXACT_TEST_LIMIT:
        doubled = np.rint(2.0 * ranks).astype(np.int64)  # midranks are halves
        total = int(doubled.sum())
        counts = np.zeros(total + 1)
        counts[0] = 1.0
        for r in doubled:
            counts[r:] += counts[:-r].copy()
        threshold = int(round(2.0 * w))
        p = min(1.0, 2.0 * counts[:threshold + 1].sum() / 2.0 ** n)
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var -= float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
        z = (w - mean + 0.5) / math.sqrt(var)
        p = min(1.0, max(0.0, 2.0 * _norm_cdf(z)))
        method = "approximate"
    return SignificanceResult("wilcoxon", w, p, int(n), method)


def mcnemar(paired_binary) -> SignificanceResult:
    """Paired test on binary outcomes via the discordant counts.

    Exact two-sided binomial p for b+c <= 25, chi-square with continuity
    correction above.
    """
    pairs = list(paired_binary)
    if not pairs:
        raise ValueError("no pairs")
    b = sum(1 for x, y in pairs if x and not y)
    c = sum(1 for x, y in pairs if y and not x)
    n = b + c
    if n == 0:
        return SignificanceResult("mcnemar", 0.0, 1.0, 0, "degenerate")
    if n <= EXACT_TEST_LIMIT:
        k = min(b, c)
        tail = sum(math.comb(n, j) for j in range(k + 1)) / 2.0 ** n
        p = min(1.0, 2.0 * tail)
        return SignificanceResult("mcnemar", float(k), p, n, "exact")
    chi2 = (abs(b - c) - 1.0) ** 2 / n
    p = math.erfc(math.sqrt(chi2 / 2.0))
    return SignificanceResult("mcnemar", chi2, p, n, "approximate")


# ---------------------------------------------------------------------------
# density export

def _scott_bandwidth(values: np.ndarray) -> float:
    sigma = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    if sigma == 0.0:
        return 1e-3 * abs(float(np.mean(values))) + 1e-6
    return sigma * values.size ** (-1.0 / 5.0)


def _gaussian_kde(values: np.ndarray, grid: np.ndarray, bandwidth: float) -> np.ndarray:
    z = (grid[:, None] - values[None, :]) / bandwidth
    dens = np.exp(-0.5 * z * z).sum(axis=1) / (bandwidth * math.sqrt(2 * math.pi) * values.size)
    area = np.trapezoid(dens, grid)
    return dens / area if area > 0 else dens


def kde_export(values, split_labels=None, bandwidth="auto", grid: int = 256):
    """Gaussian KDE over `values`, plus per-subpopulation densities.

    Returns a dict of columns (x, overall, silent, nonsilent) where each
    density is normalized to unit area over the grid; subpopulation columns
    are None when that subset is empty. `split_labels` entries are truthy
    for silent segments. Scott's rule drives the automatic bandwidth; a
    zero-variance sample falls back to a delta-like narrow kernel and is
    flagged in the returned meta.
    """
    vals = np.asarray(values, dtype=np.float64)
    if vals.size < 2:
        raise ValueError("need at least two values")
    degenerate = float(np.std(vals, ddof=1)) == 0.0
    h_all = _scott_bandwidth(vals) if bandwidth == "auto" else float(bandwidth)
    lo = float(vals.min()) - 3.0 * h_all
    hi = float(vals.max()) + 3.0 * h_all
    x = np.linspace(lo, hi, grid)
    out = {"x": x, "overall": _gaussian_kde(vals, x, h_all),
           "silent": None, "nonsilent": None}
    meta = {"bandwidth": h_all, "degenerate": degenerate}
    if split_labels is not None:
        labels = np.asarray(list(split_labels), dtype=bool)
        if labels.shape != vals.shape:
            raise ValueError("split labels length mismatch")
        for name, subset in (("silent", vals[labels]), ("nonsilent", vals[~labels])):
            if subset.size >= 1:
                h = _scott_bandwidth(subset) if bandwidth == "auto" else float(bandwidth)
                meta[f"bandwidth_{name}"] = h
                out[name] = _gaussian_kde(subset, x, h)
    return out, meta
