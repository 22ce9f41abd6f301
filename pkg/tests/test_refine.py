import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sendal.refine import (CsvParseError, RawSeries, RefinedSeries, SensorPairDataset, align_pair,
                           hp_filter, load_csv, load_refined_csv, make_windows, refine_pair,
                           resample_linear, save_raw_csv, save_refined_csv, sma_filter)


def raw(ts, vs):
    return RawSeries(np.asarray(ts, dtype=np.int64), np.asarray(vs, dtype=float))


def dense_hp(y, lam):
    """Independent oracle: build D explicitly and solve the full system."""
    n = len(y)
    d = np.zeros((n - 2, n))
    for r in range(n - 2):
        d[r, r:r + 3] = [1.0, -2.0, 1.0]
    return np.linalg.solve(np.eye(n) + lam * d.T @ d, y)


def brute_sma(v, k):
    return np.array([np.mean(v[max(0, i - k + 1):i + 1]) for i in range(len(v))])


finite = st.floats(-1e3, 1e3, allow_nan=False)


class TestSma:
    def test_identity(self):
        out = sma_filter(raw([0, 1, 2, 3], [1, 2, 3, 4]), 1)
        assert out.values.tolist() == [1, 2, 3, 4]

    def test_trailing_means(self):
        out = sma_filter(raw([0, 1, 2, 3], [1, 2, 3, 4]), 3)
        np.testing.assert_allclose(out.values, [1, 1.5, 2, 3], rtol=0, atol=1e-15)

    @given(c=finite, k=st.integers(1, 6))
    def test_constant_fixed_point(self, c, k):
        out = sma_filter(raw(range(6), [c] * 6), k)
        np.testing.assert_allclose(out.values, c, rtol=1e-12, atol=1e-9)

    @given(v=arrays(float, st.integers(1, 40), elements=finite), k=st.integers(1, 8))
    def test_against_loop(self, v, k):
        k = min(k, len(v))
        out = sma_filter(raw(range(len(v)), v), k)
        np.testing.assert_allclose(out.values, brute_sma(v, k), rtol=1e-9, atol=1e-8)

    def test_bad_k(self):
        with pytest.raises(ValueError):
            sma_filter(raw([0, 1], [1, 2]), 0)
        with pytest.raises(ValueError):
            sma_filter(raw([0, 1], [1, 2]), 3)


class TestHodrickPrescott:
    @pytest.mark.parametrize("n", [3, 4, 7, 50, 200])
    def test_dense_oracle(self, n):
        y = np.random.default_rng(n).normal(10, 3, n)
        got = hp_filter(RefinedSeries(0, 15.0, y), 1600.0).values
        ref = dense_hp(y, 1600.0)
        assert np.linalg.norm(got - ref) / np.linalg.norm(ref) < 1e-8

    def test_constant_and_affine(self):
        t = np.arange(150, dtype=float)
        for y in (np.full(150, 4.2), 3.0 - 0.7 * t):
            got = hp_filter(RefinedSeries(0, 15.0, y), 1600.0).values
            assert np.max(np.abs(got - y)) / np.max(np.abs(y)) < 1e-9

    @settings(max_examples=30, deadline=None)
    @given(y=arrays(float, st.integers(3, 120), elements=st.floats(-100, 100)),
           lam=st.floats(0.1, 1e5))
    def test_mean_preserved(self, y, lam):
        got = hp_filter(RefinedSeries(0, 15.0, y), lam).values
        scale = max(1.0, float(np.max(np.abs(y))))
        assert abs(got.mean() - y.mean()) <= 1e-9 * scale * max(1.0, lam / 100)

    def test_short_series_rejected(self):
        with pytest.raises(ValueError):
            hp_filter(RefinedSeries(0, 15.0, np.array([1.0, 2.0])), 1600.0)


class TestResample:
    def test_midpoint(self):
        out = resample_linear(raw([0, 30_000], [0, 30]), 15.0)
        assert out.values.tolist() == [0, 15, 30]

    def test_knots_copied(self):
        vs = [3.0, -1.25, 7.5, 2.0]
        out = resample_linear(raw([0, 15_000, 30_000, 45_000], vs), 15.0)
        assert out.values.tolist() == vs

    def test_constant_segment(self):
        out = resample_linear(raw([0, 60_000], [10, 10]), 15.0)
        assert out.values.tolist() == [10] * 5

    @settings(max_examples=50, deadline=None)
    @given(gaps=st.lists(st.integers(1, 40_000), min_size=2, max_size=30),
           vals=st.lists(finite, min_size=31, max_size=31))
    def test_bounded_by_neighbours(self, gaps, vals):
        ts = np.concatenate(([0], np.cumsum(gaps)))
        if ts[-1] < 15_000:
            return
        vs = np.array(vals[:len(ts)])
        out = resample_linear(raw(ts, vs), 15.0)
        for t, v in zip(out.times, out.values):
            j = np.searchsorted(ts, t, side="right")
            lo, hi = vs[max(j - 1, 0)], vs[min(j, len(ts) - 1)]
            assert min(lo, hi) - 1e-9 <= v <= max(lo, hi) + 1e-9
        assert out.start_time >= ts[0] and out.times[-1] <= ts[-1]

    def test_too_short(self):
        with pytest.raises(ValueError):
            resample_linear(raw([0], [1]), 15.0)
        with pytest.raises(ValueError):
            resample_linear(raw([0, 10_000], [1, 2]), 15.0)


class TestAlign:
    def test_identical(self):
        a = RefinedSeries(0, 15.0, np.arange(5.0))
        ds = align_pair(a, a)
        assert ds.x.values.tolist() == a.values.tolist() and ds.x.start_time == 0

    def test_overlap(self):
        # x on [0, 100] s, y on [30, 130] s, 15 s grid anchored at 30 s
        x = resample_linear(raw([0, 100_000], [0, 100]), 15.0, origin_ms=30_000)
        y = resample_linear(raw([30_000, 130_000], [30, 130]), 15.0, origin_ms=30_000)
        ds = align_pair(x, y)
        assert ds.x.start_time == 30_000 == ds.y.start_time
        assert ds.x.times[-1] == 90_000  # last common grid point inside [30, 100]
        assert len(ds) == 5
        np.testing.assert_allclose(ds.x.values, ds.y.values)

    def test_disjoint(self):
        a = RefinedSeries(0, 15.0, np.zeros(3))
        b = RefinedSeries(150_000, 15.0, np.zeros(3))
        with pytest.raises(ValueError):
            align_pair(a, b)

    def test_refine_pair_lattice(self):
        x = raw(np.arange(0, 3_000_000, 14_000), np.sin(np.arange(215)))
        y = raw(np.arange(7_000, 3_100_000, 15_000), np.cos(np.arange(207)))
        ds = refine_pair(x, y)
        assert isinstance(ds, SensorPairDataset)
        assert ds.x.start_time == 7_000 and len(ds.x) == len(ds.y)


class TestWindows:
    def ds(self, n):
        v = np.arange(float(n))
        return SensorPairDataset(RefinedSeries(0, 15.0, v), RefinedSeries(0, 15.0, v * 2))

    def test_boundary(self):
        assert len(make_windows(self.ds(20), 20)) == 1

    def test_count(self):
        w = make_windows(self.ds(25), 20)
        assert len(w) == 6 and w.target_index[-1] == 24 and w.values[-1, -1] == 24

    def test_content(self):
        w = make_windows(self.ds(10), 3)
        k = list(w.target_index).index(4)
        assert w.values[k].tolist() == [2, 3, 4] and w.targets[k] == 8

    @given(length=st.integers(1, 60), n=st.integers(1, 60))
    def test_count_property(self, length, n):
        if n > length:
            with pytest.raises(ValueError):
                make_windows(self.ds(length), n)
            return
        w = make_windows(self.ds(length), n)
        assert len(w) == length - n + 1
        for view, target in w:
            i = view.target_index
            assert view.values.tolist() == list(range(i - n + 1, i + 1)) and target == 2 * i


class TestCsv:
    def test_two_points(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("0,1.5\n15000,2.0")
        s = load_csv(p)
        assert len(s) == 2 and s.values.tolist() == [1.5, 2.0]

    def test_header_skipped(self, tmp_path):
        p = tmp_path / "a.csv"
        p.write_text("timestamp_ms,value\n0,1.5\n15000,2.0\n")
        assert len(load_csv(p)) == 2

    @pytest.mark.parametrize("text,line", [("abc,1\n", 1), ("timestamp_ms,value\nabc,1\n", 2),
                                           ("0,1\n5\n", 2), ("10,1\n5,2\n", 2)])
    def test_parse_errors(self, tmp_path, text, line):
        p = tmp_path / "bad.csv"
        p.write_text(text)
        with pytest.raises(CsvParseError) as exc:
            load_csv(p)
        assert exc.value.line == line and "bad.csv" in str(exc.value)

    def test_raw_round_trip(self, tmp_path):
        s = raw([0, 15_000, 31_000], [0.1, 1 / 3, 2.5e-7])
        save_raw_csv(s, tmp_path / "r.csv")
        back = load_csv(tmp_path / "r.csv")
        assert back.values.tolist() == s.values.tolist()
        assert back.timestamps.tolist() == s.timestamps.tolist()

    def test_refined_round_trip(self, tmp_path):
        v = np.random.default_rng(0).normal(size=30)
        ds = SensorPairDataset(RefinedSeries(810, 15.0, v), RefinedSeries(810, 15.0, v ** 2))
        save_refined_csv(ds, tmp_path / "p.csv", provenance="k=v")
        back = load_refined_csv(tmp_path / "p.csv")
        assert back.x.start_time == 810 and back.y.values.tolist() == ds.y.values.tolist()
        save_refined_csv(back, tmp_path / "q.csv", provenance="k=v")
        assert (tmp_path / "p.csv").read_bytes() == (tmp_path / "q.csv").read_bytes()
