"""Signal core: loading, resampling, normalization, window slicing."""

import numpy as np
import pytest

from kinesis.signals import (
    CANONICAL_RATE_HZ,
    NonMonotoneTimestampError,
    NormStats,
    SignalError,
    SignalParseError,
    SignalSequence,
    WindowConfig,
    apply_norm,
    fit_norm_stats,
    invert_norm,
    load_signal,
    resample,
    save_signal,
    sequence_from_values,
    slice_windows,
    window_coverage,
)


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def interp_oracle(t, ts, vs):
    """Scalar linear interpolation at time t over knots (ts, vs)."""
    if t <= ts[0]:
        return vs[0]
    if t >= ts[-1]:
        return vs[-1]
    for i in range(len(ts) - 1):
        if ts[i] <= t <= ts[i + 1]:
            w = (t - ts[i]) / (ts[i + 1] - ts[i])
            return vs[i] * (1 - w) + vs[i + 1] * w
    raise AssertionError("unreachable")


def coverage_oracle(n, length, step):
    """Brute-force per-frame coverage from interval membership."""
    starts = []
    s = 0
    while s + length <= n:
        starts.append(s)
        s += step
    if not starts or starts[-1] + length < n:
        starts.append(max(0, n - length))
    counts = [0] * n
    for s in starts:
        for f in range(n):
            if s <= f < min(s + length, n):
                counts[f] += 1
    return counts


def make_seq(values, rate=CANONICAL_RATE_HZ):
    return sequence_from_values(np.asarray(values, dtype=float), rate=rate)


def random_seq(rng, n, rate=CANONICAL_RATE_HZ):
    return sequence_from_values(rng.normal(size=(n, 6)), rate=rate)


# ---------------------------------------------------------------------------
# SignalSequence invariants
# ---------------------------------------------------------------------------

def test_sequence_rejects_non_monotone_times():
    times = np.array([0.0, 0.1, 0.05])
    values = np.zeros((3, 6))
    with pytest.raises(NonMonotoneTimestampError) as exc:
        SignalSequence(rate=10.0, times=times, values=values)
    assert exc.value.index == 2


def test_sequence_rejects_non_finite():
    values = np.zeros((2, 6))
    values[1, 3] = np.nan
    with pytest.raises(SignalError):
        SignalSequence(rate=10.0, times=np.array([0.0, 0.1]), values=values)


def test_sequence_is_immutable():
    seq = make_seq(np.ones((4, 6)))
    with pytest.raises(ValueError):
        seq.values[0, 0] = 5.0


def test_sample_accessor_splits_accel_gyro():
    vals = np.arange(6, dtype=float).reshape(1, 6)
    seq = make_seq(vals, rate=2.0)
    s = seq.sample(0)
    assert s.t == 0.0
    assert np.array_equal(s.accel, [0.0, 1.0, 2.0])
    assert np.array_equal(s.gyro, [3.0, 4.0, 5.0])


# ---------------------------------------------------------------------------
# load_signal
# ---------------------------------------------------------------------------

def write_csv(path, rows, header="t,ax,ay,az,gx,gy,gz"):
    lines = [header] + [",".join(str(x) for x in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def test_load_signal_three_rows(tmp_path):
    p = tmp_path / "sig.csv"
    write_csv(p, [[0.0, 1, 2, 3, 4, 5, 6], [0.02, 1, 2, 3, 4, 5, 6], [0.04, 0, 0, 0, 0, 0, 0]])
    (tmp_path / "sig.csv.meta.json").write_text('{"rate": 50, "subject_id": "s01"}')
    seq = load_signal(p)
    assert len(seq) == 3
    assert seq.rate == 50
    assert seq.subject_id == "s01"


def test_load_signal_empty_file(tmp_path):
    p = tmp_path / "empty.csv"
    write_csv(p, [])
    seq = load_signal(p)
    assert len(seq) == 0
    assert seq.rate == CANONICAL_RATE_HZ


def test_load_signal_decreasing_t_names_index(tmp_path):
    p = tmp_path / "bad.csv"
    write_csv(p, [[0.0] + [0] * 6, [0.1] + [0] * 6, [0.05] + [0] * 6])
    with pytest.raises(NonMonotoneTimestampError) as exc:
        load_signal(p)
    assert exc.value.index == 2


def test_load_signal_parse_error_names_line(tmp_path):
    p = tmp_path / "bad.csv"
    write_csv(p, [[0.0] + [0] * 6, ["oops"] + [0] * 6])
    with pytest.raises(SignalParseError) as exc:
        load_signal(p)
    assert exc.value.line_no == 3


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    seq = random_seq(rng, 17)
    p = tmp_path / "rt.csv"
    save_signal(seq, p)
    back = load_signal(p)
    assert np.allclose(back.values, seq.values)
    assert back.rate == seq.rate


# ---------------------------------------------------------------------------
# resample
# ---------------------------------------------------------------------------

def test_resample_identity_at_same_rate():
    rng = np.random.default_rng(1)
    seq = random_seq(rng, 20, rate=50.0)
    out = resample(seq, 50.0)
    assert len(out) == len(seq)
    assert np.allclose(out.values, seq.values, atol=1e-9)


def test_resample_two_points_linear():
    values = np.zeros((2, 6))
    values[1, :] = 1.0
    seq = SignalSequence(rate=1.0, times=np.array([0.0, 1.0]), values=values)
    out = resample(seq, 5.0)
    assert len(out) == 6
    assert np.allclose(out.values[:, 0], [0.0, 0.2, 0.4, 0.6, 0.8, 1.0], atol=1e-12)


def test_resample_matches_interp_oracle():
    rng = np.random.default_rng(2)
    # Non-uniform source timestamps.
    ts = np.sort(rng.uniform(0, 2, size=10))
    ts[0], ts[-1] = 0.0, 2.0
    vals = rng.normal(size=(10, 6))
    seq = SignalSequence(rate=5.0, times=ts, values=vals)
    out = resample(seq, 7.0)
    for i, t in enumerate(out.times):
        for c in range(6):
            expected = interp_oracle(t, ts, vals[:, c])
            assert out.values[i, c] == pytest.approx(expected, abs=1e-12)


def test_resample_idempotent():
    rng = np.random.default_rng(3)
    ts = np.sort(rng.uniform(0, 3, size=30))
    seq = SignalSequence(rate=10.0, times=ts, values=rng.normal(size=(30, 6)))
    once = resample(seq, 25.0)
    twice = resample(once, 25.0)
    assert np.allclose(once.values, twice.values, atol=1e-9)
    assert np.allclose(np.diff(once.times), 1 / 25.0, atol=1e-9)


def test_resample_too_short():
    seq = make_seq(np.zeros((1, 6)))
    with pytest.raises(SignalError):
        resample(seq, 10.0)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

def test_fit_norm_two_point_channel():
    values = np.zeros((2, 6))
    values[:, 0] = [1.0, 3.0]
    seq = make_seq(values)
    stats = fit_norm_stats([seq])
    assert stats.mean[0] == pytest.approx(2.0)
    assert stats.std[0] == pytest.approx(1.0)
    normed = apply_norm(seq, stats)
    assert np.allclose(normed.values[:, 0], [-1.0, 1.0])


def test_fit_norm_constant_channel_clamped():
    values = np.full((10, 6), 7.0)
    stats = fit_norm_stats([make_seq(values)])
    assert np.all(stats.std > 0)
    normed = apply_norm(make_seq(values), stats)
    assert np.allclose(normed.values, 0.0, atol=1e-6)


def test_norm_moments_match_oracle():
    rng = np.random.default_rng(4)
    seqs = [random_seq(rng, n) for n in (40, 35, 25)]
    stats = fit_norm_stats(seqs)
    normed = np.concatenate([apply_norm(s, stats).values for s in seqs], axis=0)
    # Recompute moments directly from the normalized corpus.
    assert np.allclose(normed.mean(axis=0), 0.0, atol=1e-6)
    assert np.allclose(normed.std(axis=0), 1.0, atol=1e-6)


def test_norm_invertible():
    rng = np.random.default_rng(5)
    seqs = [random_seq(rng, 30)]
    stats = fit_norm_stats(seqs)
    back = invert_norm(apply_norm(seqs[0], stats), stats)
    assert np.allclose(back.values, seqs[0].values, atol=1e-6)


def test_fit_norm_empty_corpus():
    with pytest.raises(SignalError):
        fit_norm_stats([])
    with pytest.raises(SignalError):
        fit_norm_stats([make_seq(np.zeros((0, 6)))])


def test_norm_stats_rejects_zero_std():
    with pytest.raises(SignalError):
        NormStats(mean=np.zeros(6), std=np.zeros(6))


# ---------------------------------------------------------------------------
# slice_windows
# ---------------------------------------------------------------------------

def test_slice_windows_example_grid():
    seq = make_seq(np.arange(60, dtype=float).reshape(10, 6))
    wins = slice_windows(seq, WindowConfig(4, 2))
    assert [s for s, _ in wins] == [0, 2, 4, 6]
    covering_4 = [s for s, w in wins if s <= 4 < s + len(w)]
    assert covering_4 == [2, 4]


def test_slice_windows_single_window():
    seq = make_seq(np.zeros((8, 6)))
    wins = slice_windows(seq, WindowConfig(8, 4))
    assert len(wins) == 1
    assert wins[0][0] == 0
    assert wins[0][1].shape == (8, 6)


def test_slice_windows_quarter_step_interior_coverage():
    seq = make_seq(np.zeros((16, 6)))
    cfg = WindowConfig(8, 2)
    counts = window_coverage(16, cfg)
    assert all(counts[f] == 4 for f in range(6, 10))
    oracle = coverage_oracle(16, 8, 2)
    assert list(counts) == oracle


def test_slice_windows_tail_anchor():
    seq = make_seq(np.zeros((11, 6)))
    wins = slice_windows(seq, WindowConfig(4, 2))
    assert [s for s, _ in wins] == [0, 2, 4, 6, 7]


def test_slice_windows_short_sequence_single_short_window():
    seq = make_seq(np.ones((3, 6)))
    wins = slice_windows(seq, WindowConfig(8, 2))
    assert len(wins) == 1
    assert wins[0][0] == 0
    assert wins[0][1].shape == (3, 6)


def test_coverage_matches_bruteforce_grid():
    # Full sweep is acceptance criterion 1; spot-check a lattice here.
    for n in (1, 5, 16, 33):
        for length in (1, 4, 8, 16):
            for step in (1, 2, length // 2 or 1, length):
                if not (0 < step <= length):
                    continue
                counts = window_coverage(n, WindowConfig(length, step))
                assert list(counts) == coverage_oracle(n, length, step), (n, length, step)
                assert counts.min() >= 1


def test_window_union_covers_everything():
    rng = np.random.default_rng(6)
    for _ in range(25):
        n = int(rng.integers(1, 64))
        length = int(rng.integers(1, 17))
        step = int(rng.integers(1, length + 1))
        seq = make_seq(np.zeros((n, 6)))
        covered = np.zeros(n, dtype=bool)
        for s, w in slice_windows(seq, WindowConfig(length, step)):
            covered[s : s + len(w)] = True
        assert covered.all()


def test_window_config_validation():
    with pytest.raises(SignalError):
        WindowConfig(0, 1)
    with pytest.raises(SignalError):
        WindowConfig(4, 5)
    with pytest.raises(SignalError):
        WindowConfig(4, 0)
