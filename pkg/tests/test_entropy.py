import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from picocodec.entropy import (SCALE_TABLE, TOTAL, build_cdf_tables, estimate_rate_bits, histogram_cdf_tables,
                               scale_table, support_of, symbol_histogram, validate_tables)


def phi(x):
    return 0.5 * (1 + math.erf(x / math.sqrt(2)))


def freqs(row):
    return np.diff(np.asarray(row, dtype=np.int64))


class TestScaleTable:
    def test_shape_and_endpoints(self):
        assert SCALE_TABLE.shape == (64,)
        assert SCALE_TABLE[0] == 0.11 and SCALE_TABLE[-1] == 256.0
        assert np.all(np.diff(SCALE_TABLE) > 0)

    def test_log_spacing(self):
        ratios = SCALE_TABLE[1:] / SCALE_TABLE[:-1]
        np.testing.assert_allclose(ratios, (256 / 0.11) ** (1 / 63), rtol=1e-12)

    def test_rejects_bad_range(self):
        with pytest.raises(ValueError):
            scale_table(64, 1.0, 0.5)


class TestCdfTables:
    def test_default_tables_valid(self):
        t = build_cdf_tables()
        assert t.shape == (64, 67)
        validate_tables(t)
        assert support_of(t) == 32

    def test_sigma_one_center_mass(self):
        t = build_cdf_tables([1.0], support=32)
        p0 = freqs(t[0])[32] / TOTAL
        assert abs(p0 - (phi(0.5) - phi(-0.5))) < 1e-3
        assert abs(phi(0.5) - phi(-0.5) - 0.3829) < 1e-4

    def test_float_oracle_every_row(self):
        # independent float64 evaluation; rounding and the +1 floor move counts by at most 2
        t = build_cdf_tables()
        spare = TOTAL - 66
        for i, s in enumerate(SCALE_TABLE):
            f = freqs(t[i])
            p = np.array([phi((k + 0.5) / s) - phi((k - 0.5) / s) for k in range(-32, 33)])
            expect = 1 + p * spare
            assert np.max(np.abs(f[:65] - expect)) <= 2.0

    def test_wide_sigma_near_uniform(self):
        f = freqs(build_cdf_tables([256.0], support=16)[0])[:33]
        assert f.max() / f.min() < 1.2

    def test_symmetry_all_rows(self):
        f = np.diff(build_cdf_tables().astype(np.int64), axis=1)[:, :65]
        np.testing.assert_array_equal(f, f[:, ::-1])

    def test_small_support(self):
        t = build_cdf_tables(support=1)
        validate_tables(t)
        assert t.shape == (64, 5)

    def test_read_only_and_cached(self):
        t = build_cdf_tables()
        assert t is build_cdf_tables()
        with pytest.raises(ValueError):
            t[0, 0] = 1

    def test_errors(self):
        with pytest.raises(ValueError):
            build_cdf_tables(support=0)
        with pytest.raises(ValueError):
            build_cdf_tables([0.0])

    @settings(max_examples=15, deadline=None)
    @given(st.floats(0.05, 500), st.integers(1, 40))
    def test_valid_for_any_sigma(self, sigma, support):
        t = build_cdf_tables([sigma], support=support)
        validate_tables(t)
        f = freqs(t[0])[:2 * support + 1]
        np.testing.assert_array_equal(f, f[::-1])


class TestHistogramTables:
    def test_add_one_smoothing_proportions(self):
        counts = np.zeros((2, 66), np.int64)
        counts[0, 32] = 1000
        counts[1, 31] = counts[1, 33] = 500
        t = histogram_cdf_tables(counts)
        validate_tables(t)
        f = freqs(t[0])
        assert f[32] == max(f)
        assert abs(f[32] / TOTAL - 1001 / 1066) < 1e-3

    def test_symbol_histogram(self):
        sym = np.array([[0, 1, -1, 40], [2, 2, 2, -50]])
        h = symbol_histogram(sym)
        assert h[0, 32] == 1 and h[0, 33] == 1 and h[0, 31] == 1 and h[0, 65] == 1
        assert h[1, 34] == 3 and h[1, 65] == 1

    def test_shape_check(self):
        with pytest.raises(ValueError):
            histogram_cdf_tables(np.zeros((1, 10)))


class TestEstimate:
    def test_zeros_at_min_sigma_cheap(self):
        t = build_cdf_tables()
        bits = estimate_rate_bits(np.zeros(1000, np.int64), np.zeros(1000, np.int64), t)
        assert bits / 1000 < 0.01

    def test_uniform_table_exact(self):
        row = np.arange(0, TOTAL + 1, 1024)  # S = 31: 64 buckets of 1024
        t = row[None].astype(np.int32)
        sym = np.random.default_rng(0).integers(-31, 32, 500)
        assert estimate_rate_bits(sym, np.zeros(500, np.int64), t) == 500 * 6.0

    def test_escape_cost(self):
        t = build_cdf_tables()
        f_esc = freqs(t[10])[65]
        bits = estimate_rate_bits(np.array([100]), np.array([10]), t)
        assert bits == pytest.approx(16 - math.log2(f_esc) + 16)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            estimate_rate_bits(np.zeros(3), np.zeros(4), build_cdf_tables())
