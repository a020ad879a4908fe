import math
from itertools import product

import numpy as np
import pytest

from voxsep.metrics import (SegmentScores, aggregate, bss_decompose, bss_eval,
                            kde_export, mcnemar, pes, segment_metrics, vad_accuracy,
                            vad_labels, wilcoxon_signed_rank)


def delayed_matrix(refs, flen):
    n, t = refs.shape
    a = np.zeros((t + flen - 1, n * flen))
    for i in range(n):
        for tau in range(flen):
            a[tau:tau + t, i * flen + tau] = refs[i]
    return a


def oracle_bss(refs, est, flen):
    """Dense normal-equations reference implementation."""
    a = delayed_matrix(refs, flen)
    ep = np.concatenate([est, np.zeros(flen - 1)])
    c_all, *_ = np.linalg.lstsq(a, ep, rcond=None)
    c_v, *_ = np.linalg.lstsq(a[:, :flen], ep, rcond=None)
    s_t = a[:, :flen] @ c_v
    p = a @ c_all
    e_i, e_a = p - s_t, ep - p
    return (10 * math.log10((s_t @ s_t) / ((e_i + e_a) @ (e_i + e_a))),
            10 * math.log10((s_t @ s_t) / (e_i @ e_i)),
            10 * math.log10(((s_t + e_i) @ (s_t + e_i)) / (e_a @ e_a)))


# ---------------------------------------------------------------------------
# bss_eval

def test_bss_eval_matches_dense_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        t = int(rng.integers(48, 257))
        flen = int(rng.integers(1, 9))
        refs = rng.standard_normal((2, t))
        est = 0.8 * refs[0] + 0.3 * refs[1] + 0.05 * rng.standard_normal(t)
        got = bss_eval(refs, est, flen)
        want = oracle_bss(refs, est, flen)
        assert max(abs(g - w) for g, w in zip(got, want)) < 1e-6


def test_bss_eval_perfect_estimate_gives_inf():
    rng = np.random.default_rng(1)
    refs = rng.standard_normal((2, 200))
    sdr, sir, sar = bss_eval(refs, refs[0].copy(), 1)
    assert sdr == math.inf and sir == math.inf and sar == math.inf


@pytest.mark.parametrize("alpha", [0.5, 2.0, 10.0])
def test_bss_eval_scale_invariance(alpha):
    rng = np.random.default_rng(2)
    refs = rng.standard_normal((2, 150))
    est = refs[0] + 0.4 * refs[1] + 0.1 * rng.standard_normal(150)
    base = bss_eval(refs, est, 4)
    scaled = bss_eval(refs, alpha * est, 4)
    assert max(abs(a - b) for a, b in zip(base, scaled)) <= 1e-9


def test_bss_eval_silent_reference_undefined():
    rng = np.random.default_rng(3)
    refs = np.stack([np.zeros(100), rng.standard_normal(100)])
    assert bss_eval(refs, rng.standard_normal(100), 4) == (None, None, None)


def test_bss_decompose_identity_and_orthogonality():
    rng = np.random.default_rng(4)
    refs = rng.standard_normal((2, 128))
    est = rng.standard_normal(128)
    flen = 6
    s_t, e_i, e_a = bss_decompose(refs, est, flen)
    ep = np.concatenate([est, np.zeros(flen - 1)])
    assert np.max(np.abs(ep - (s_t + e_i + e_a))) <= 1e-10

    a = delayed_matrix(refs, flen)
    norm = np.linalg.norm
    assert np.max(np.abs(a[:, :flen].T @ e_i)) <= 1e-8 * max(norm(e_i), 1) * norm(a)
    assert np.max(np.abs(a.T @ e_a)) <= 1e-8 * max(norm(e_a), 1) * norm(a)


def test_bss_eval_rank_deficient_references_still_finite():
    rng = np.random.default_rng(5)
    v = rng.standard_normal(100)
    refs = np.stack([v, 2.0 * v])  # accompaniment is a scaled copy
    est = v + 0.01 * rng.standard_normal(100)
    sdr, sir, sar = bss_eval(refs, est, 4)
    assert all(x is not None for x in (sdr, sir, sar))


# ---------------------------------------------------------------------------
# pes / vad

def test_pes_floor_clamp_exact():
    ref = np.zeros(8192)
    mean, values = pes(np.zeros(8192), ref)
    assert mean == -100.0
    assert values == [-100.0, -100.0]


def test_pes_unit_estimate_zero_db():
    mean, values = pes(np.ones(4096), np.zeros(4096))
    assert len(values) == 1
    assert mean == pytest.approx(0.0, abs=1e-9)


def test_pes_mixed_frames_mean():
    est = np.concatenate([np.zeros(4096), np.ones(4096)])
    ref = np.zeros(8192)
    mean, values = pes(est, ref)
    assert values[0] == -100.0
    assert values[1] == pytest.approx(0.0, abs=1e-9)
    assert mean == pytest.approx(-50.0, abs=1e-9)


def test_pes_no_silent_frames_undefined():
    loud = np.ones(8192) * 0.5
    mean, values = pes(np.zeros(8192), loud)
    assert mean is None and values == []


def test_pes_monotone_in_estimate_scale():
    rng = np.random.default_rng(6)
    ref = np.zeros(4096 * 3)
    est = rng.standard_normal(4096 * 3) * 1e-4
    base, _ = pes(est, ref)
    for alpha in (2.0, 10.0, 100.0):
        scaled, _ = pes(alpha * est, ref)
        assert scaled >= base


def test_vad_labels_rules():
    sr = 22050
    frame = 441
    zero = np.zeros(frame * 2)
    assert not vad_labels(zero, sr).any()
    full = np.ones(frame)
    assert vad_labels(full, sr).all()
    t = np.arange(frame * 4)
    sine = 10 ** (-50 / 20) * np.sin(2 * np.pi * 440 * t / sr)
    labels = vad_labels(sine, sr)
    assert labels.all()  # RMS ~ -53 dBFS, above the -60 threshold


def test_vad_accuracy_values():
    a = np.array([True, False, True, True])
    assert vad_accuracy(a, a) == 100.0
    assert vad_accuracy(a, ~a) == 0.0
    b = a.copy()
    b[1] = True
    assert vad_accuracy(a, b) == 75.0
    with pytest.raises(ValueError):
        vad_accuracy(a, a[:2])


# ---------------------------------------------------------------------------
# segments

def _tone(n, freq, sr, amp=0.5):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / sr)


def test_segment_metrics_counts_and_silence():
    sr = 8000
    n = int(3.5 * sr)
    vocals = _tone(n, 220, sr)
    vocals[sr:2 * sr] = 0.0  # second segment silent
    accomp = _tone(n, 80, sr, 0.3)
    est = vocals + 0.1 * accomp
    segs = segment_metrics(vocals, accomp, est, sr, filter_len=4)
    assert len(segs) == 3  # tail dropped
    assert [s.is_silent for s in segs] == [False, True, False]
    assert segs[1].sdr is None
    assert segs[0].sdr is not None and math.isfinite(segs[0].sdr)


def test_segment_metrics_match_independent_per_segment_calls():
    rng = np.random.default_rng(7)
    sr = 4000
    vocals = rng.standard_normal(3 * sr)
    accomp = rng.standard_normal(3 * sr)
    est = vocals + 0.3 * accomp + 0.05 * rng.standard_normal(3 * sr)
    segs = segment_metrics(vocals, accomp, est, sr, filter_len=3)
    for k, s in enumerate(segs):
        sl = slice(k * sr, (k + 1) * sr)
        want = bss_eval(np.stack([vocals[sl], accomp[sl]]), est[sl], 3)
        assert s.sdr == pytest.approx(want[0], abs=1e-12)
        assert s.sir == pytest.approx(want[1], abs=1e-12)
        assert s.sar == pytest.approx(want[2], abs=1e-12)


def test_segment_metrics_too_short():
    with pytest.raises(ValueError, match="shorter"):
        segment_metrics(np.zeros(10), np.zeros(10), np.zeros(10), 22050)


# ---------------------------------------------------------------------------
# aggregation

def _seg(song, idx, sdr, silent=False, vad=None, pes_frames=()):
    return SegmentScores(song_id=song, segment_index=idx, sdr=sdr, sir=sdr, sar=sdr,
                         pes_frames=list(pes_frames), vad_correct=vad,
                         is_silent=silent)


def test_aggregate_medians_and_means():
    segs = [_seg("a", 0, 1.0), _seg("a", 1, 3.0), _seg("a", 2, 100.0)]
    rep = aggregate(segs)
    assert rep.song_wise["sdr"] == 3.0
    assert rep.segment_median["sdr"] == 3.0
    assert rep.segment_mean["sdr"] == pytest.approx(104.0 / 3.0)

    two = [_seg("a", 0, 2.0), _seg("b", 0, 6.0)]
    rep2 = aggregate(two)
    assert rep2.song_wise["sdr"] == 4.0


def test_aggregate_inf_and_silent_handling():
    segs = [_seg("a", 0, 1.0), _seg("a", 1, math.inf), _seg("a", 2, None, silent=True),
            _seg("a", 3, 5.0)]
    rep = aggregate(segs)
    assert rep.n_silent == 1
    assert rep.n_inf["sdr"] == 1
    assert rep.segment_mean["sdr"] == pytest.approx(3.0)  # inf excluded
    assert rep.segment_median["sdr"] == 5.0               # inf kept as supremum
    assert rep.n_segments == 4


def test_aggregate_pools_pes_and_vad():
    segs = [_seg("a", 0, 1.0, vad=90.0, pes_frames=[-100.0]),
            _seg("a", 1, 2.0, vad=70.0, pes_frames=[-60.0, -80.0])]
    rep = aggregate(segs)
    assert rep.pes_mean == pytest.approx(-80.0)
    assert rep.vad_percent == pytest.approx(80.0)


def test_aggregate_empty_and_all_undefined():
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ValueError):
        aggregate([_seg("a", 0, None, silent=True)])


# ---------------------------------------------------------------------------
# significance

def enum_wilcoxon(a, b):
    d = a - b
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    from voxsep.metrics import _midranks
    r = _midranks(np.abs(d))
    w_obs = min(r[d > 0].sum(), r.sum() - r[d > 0].sum())
    count = sum(1 for signs in product((0, 1), repeat=n)
                if sum(ri for ri, s in zip(r, signs) if s) <= w_obs)
    return min(1.0, 2 * count / 2 ** n)


def test_wilcoxon_identical_degenerate():
    a = np.arange(5.0)
    r = wilcoxon_signed_rank(a, a.copy())
    assert r.p_value == 1.0 and r.method == "degenerate"


def test_wilcoxon_matches_enumeration():
    rng = np.random.default_rng(8)
    for _ in range(60):
        n = int(rng.integers(1, 13))
        a = rng.integers(0, 5, n).astype(float)
        b = rng.integers(0, 5, n).astype(float)
        got = wilcoxon_signed_rank(a, b)
        assert got.p_value == pytest.approx(enum_wilcoxon(a, b), abs=1e-12)
        if np.any(a - b):
            assert got.method == "exact"


def test_wilcoxon_six_positive():
    a = np.arange(1.0, 7.0) + 10
    b = np.arange(1.0, 7.0)
    r = wilcoxon_signed_rank(a, b)
    assert r.p_value == pytest.approx(2 / 64)


def test_wilcoxon_large_sample_approximation():
    rng = np.random.default_rng(9)
    a = rng.standard_normal(200)
    r = wilcoxon_signed_rank(a + 0.5, a)
    assert r.method == "approximate"
    assert r.p_value < 1e-6
    same_scale = wilcoxon_signed_rank(a + 1e-3 * rng.standard_normal(200), a)
    assert 0.0 <= same_scale.p_value <= 1.0


def test_mcnemar_cases():
    assert mcnemar([(True, False)] * 5 + [(False, True)] * 5).p_value == 1.0
    r = mcnemar([(True, True), (False, False)])
    assert r.p_value == 1.0 and r.method == "degenerate"
    r10 = mcnemar([(True, False)] * 10)
    assert r10.p_value == pytest.approx(2 * 0.5 ** 10)


def test_mcnemar_binomial_oracle_sweep():
    for b in range(0, 13):
        for c in range(0, 13):
            if b + c == 0 or b + c > 25:
                continue
            pairs = [(True, False)] * b + [(False, True)] * c + [(True, True)] * 3
            got = mcnemar(pairs)
            n, k = b + c, min(b, c)
            want = min(1.0, 2 * sum(math.comb(n, j) for j in range(k + 1)) / 2 ** n)
            assert got.p_value == pytest.approx(want, abs=1e-15)
            assert got.method == "exact"


def test_mcnemar_large_sample_chi_square():
    r = mcnemar([(True, False)] * 40 + [(False, True)] * 10)
    assert r.method == "approximate"
    assert 0.0 <= r.p_value < 0.01


# ---------------------------------------------------------------------------
# kde

def test_kde_degenerate_constant_values():
    table, meta = kde_export([5.0] * 10)
    assert meta["degenerate"]
    peak = table["x"][np.argmax(table["overall"])]
    assert abs(peak - 5.0) < 1e-3


def test_kde_peak_near_cluster():
    vals = 5.0 + np.linspace(-1e-4, 1e-4, 200)  # symmetric cluster at 5 dB
    table, _ = kde_export(vals, grid=513)
    peak = table["x"][np.argmax(table["overall"])]
    step = table["x"][1] - table["x"][0]
    assert abs(peak - 5.0) <= step


def test_kde_subpopulations_integrate_to_one():
    rng = np.random.default_rng(11)
    lo = rng.normal(-20, 2, 150)
    hi = rng.normal(5, 1, 250)
    vals = np.concatenate([lo, hi])
    labels = [True] * 150 + [False] * 250
    table, _ = kde_export(vals, labels, grid=1024)
    for key in ("overall", "silent", "nonsilent"):
        area = np.trapezoid(table[key], table["x"])
        assert area == pytest.approx(1.0, abs=1e-3)


def test_kde_needs_two_values():
    with pytest.raises(ValueError):
        kde_export([1.0])
