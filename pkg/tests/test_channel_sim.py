"""Tests for the multipath channel simulator."""

import numpy as np
import pytest
from scipy import stats

from channel_sim import (ArrayGeometry, ChannelKind, ChannelMatrix, DatasetSpec, IndexConvention, add_awgn,
                         MultipathParams, channel_subcarrier, constrained_channel, constrained_geometry,
                         draw_multipath, expand_zero_rows, full_channel, full_resolution_rows,
                         measurement_rng, noise_like, sample_dataset, sample_rng, seconds_to_taps,
                         simulate_measurement, steering_vector, subsample_rows)


def _params(rng, L=3, tau_max=24.0):
    return MultipathParams(delays=rng.uniform(0, tau_max, L),
                           amplitudes=rng.standard_normal(L) + 1j * rng.standard_normal(L),
                           doas=rng.uniform(0, np.pi / 4, L))


class TestGeometry:
    def test_steering_vector_is_geometric_progression(self):
        v = steering_vector(np.pi / 4, 0.5, 8)
        mu = np.pi * np.sqrt(2) / 2
        np.testing.assert_allclose(np.abs(v), 1.0, atol=1e-15)
        np.testing.assert_allclose(v[1], np.exp(1j * mu), atol=1e-14)
        np.testing.assert_allclose(v[2], v[1] ** 2, atol=1e-14)
        np.testing.assert_allclose(v[1:] / v[:-1], v[1], atol=1e-13)

    def test_steering_vector_rejects_empty_array(self):
        with pytest.raises(ValueError, match="num_antennas"):
            steering_vector(0.1, 0.5, 0)

    def test_constrained_geometry_doubles_spacing(self):
        geom = constrained_geometry(ArrayGeometry(8, 0.5))
        assert geom == ArrayGeometry(4, 1.0)

    def test_constrained_geometry_needs_even_array(self):
        with pytest.raises(ValueError, match="even"):
            constrained_geometry(ArrayGeometry(7))

    @pytest.mark.parametrize("convention, rows", [(IndexConvention.FRF_ODD, [1, 3, 5, 7]),
                                                  (IndexConvention.FRF_EVEN, [0, 2, 4, 6])])
    def test_full_resolution_rows(self, convention, rows):
        assert full_resolution_rows(8, convention).tolist() == rows

    def test_seconds_to_taps_default_resolution(self):
        assert seconds_to_taps(163e-9) == pytest.approx(24.0)
        np.testing.assert_allclose(seconds_to_taps(np.array([0.0, 163e-9 / 2])), [0.0, 12.0])


class TestChannel:
    def test_full_channel_matches_per_subcarrier(self, rng):
        params = _params(rng)
        geom = ArrayGeometry(8)
        H = full_channel(params, geom, 64)
        assert H.shape == (8, 64)
        assert H.kind == ChannelKind.DESIRED
        for n in (0, 1, 17, 63):
            np.testing.assert_allclose(H.entries[:, n], channel_subcarrier(params, n, geom, 64), atol=1e-12)

    def test_full_channel_matches_term_by_term_sum(self, rng):
        params = _params(rng)
        H = full_channel(params, ArrayGeometry(8), 32).entries
        oracle = np.zeros((8, 32), dtype=complex)
        for tau, alpha, theta in params.triplets():
            for m in range(8):
                for n in range(32):
                    oracle[m, n] += alpha * np.exp(1j * np.pi * m * np.cos(theta)) * np.exp(-2j * np.pi * n * tau / 32)
        np.testing.assert_allclose(H, oracle, rtol=1e-12, atol=1e-12)

    def test_subcarrier_index_out_of_range(self, rng):
        with pytest.raises(ValueError, match="subcarrier index"):
            channel_subcarrier(_params(rng), 64, ArrayGeometry(8), 64)

    def test_params_validate_lengths(self):
        with pytest.raises(ValueError, match="equal length"):
            MultipathParams(delays=[1.0, 2.0], amplitudes=[1.0], doas=[0.1, 0.2])
        with pytest.raises(ValueError, match="at least one"):
            MultipathParams(delays=[], amplitudes=[], doas=[])

    def test_channel_matrix_rejects_bad_input(self):
        with pytest.raises(ValueError, match="2-D"):
            ChannelMatrix(np.ones(4))
        with pytest.raises(ValueError, match="non-finite"):
            ChannelMatrix(np.array([[1.0, np.nan]]))

    def test_union_concatenates_paths(self, rng):
        a, b = _params(rng, 2), _params(rng, 3)
        assert a.union(b).num_paths == 5


class TestMeasurement:
    def test_constrained_channel_even_rows_noiseless(self, rng):
        params = _params(rng)
        geom = ArrayGeometry(8)
        H = full_channel(params, geom, 48)
        H_c = constrained_channel(params, geom, 48, np.inf, rng, IndexConvention.FRF_EVEN)
        assert H_c.kind == ChannelKind.CONSTRAINED
        np.testing.assert_allclose(H_c.entries, H.entries[0::2], atol=1e-14)

    def test_expand_zero_rows_and_subsample(self, rng):
        H_c = ChannelMatrix(rng.standard_normal((4, 10)) + 1j, ChannelKind.CONSTRAINED)
        H_ce = expand_zero_rows(H_c)
        assert H_ce.shape == (8, 10)
        assert H_ce.kind == ChannelKind.EXPANDED
        np.testing.assert_array_equal(H_ce.entries[0::2], 0)
        np.testing.assert_array_equal(subsample_rows(H_ce).entries, H_c.entries)

    def test_expand_even_convention(self, rng):
        H_c = ChannelMatrix(rng.standard_normal((4, 6)), ChannelKind.CONSTRAINED)
        H_ce = expand_zero_rows(H_c, IndexConvention.FRF_EVEN)
        np.testing.assert_array_equal(H_ce.entries[1::2], 0)
        np.testing.assert_array_equal(H_ce.entries[0::2], H_c.entries)

    def test_simulate_measurement_shares_noise(self, rng):
        H = full_channel(_params(rng), ArrayGeometry(8), 40)
        Z, H_c = simulate_measurement(H, 20.0, rng)
        assert Z.shape == (8, 40)
        np.testing.assert_allclose(H_c.entries, (H.entries + Z)[1::2])

    def test_noise_power_follows_snr(self, rng):
        entries = np.ones((100, 100), dtype=complex)
        noise = noise_like(entries, 20.0, rng)
        assert np.mean(np.abs(noise) ** 2) == pytest.approx(1e-2, rel=0.05)

    def test_infinite_snr_is_noiseless(self, rng):
        assert not np.any(noise_like(np.ones((2, 3)), np.inf, rng))

    def test_add_awgn_reaches_requested_snr(self, rng):
        H = full_channel(_params(rng), ArrayGeometry(8), 1200)
        signal = np.mean(np.abs(H.entries) ** 2)
        snrs = np.array([10 * np.log10(signal / np.mean(np.abs(add_awgn(H, 20.0, rng).entries - H.entries) ** 2))
                         for _ in range(50)])
        assert np.mean(snrs) == pytest.approx(20.0, abs=0.1)
        assert np.max(np.abs(snrs - 20.0)) < 0.5

    def test_add_awgn_infinite_snr_returns_input(self, rng):
        H = full_channel(_params(rng), ArrayGeometry(8), 48)
        noisy = add_awgn(H, np.inf, rng)
        np.testing.assert_array_equal(noisy.entries, H.entries)
        assert noisy.kind == ChannelKind.DESIRED

    def test_add_awgn_is_deterministic(self, rng):
        H_ce = expand_zero_rows(ChannelMatrix(rng.standard_normal((4, 20)) + 1j, ChannelKind.CONSTRAINED))
        first = add_awgn(H_ce, 10.0, np.random.default_rng(7))
        second = add_awgn(H_ce, 10.0, np.random.default_rng(7))
        np.testing.assert_array_equal(first.entries, second.entries)
        assert first.kind == ChannelKind.NOISY_EXPANDED
        assert not np.array_equal(add_awgn(H_ce, 10.0, np.random.default_rng(8)).entries, first.entries)


class TestDataset:
    def test_draws_respect_ranges(self):
        spec = DatasetSpec(num_samples=1, num_paths=50)
        params = draw_multipath(spec, sample_rng(0, 0))
        assert params.num_paths == 50
        assert np.all((params.delays >= 0) & (params.delays < spec.tau_max_taps))
        assert np.all((params.doas >= 0) & (params.doas <= np.pi / 4))
        assert len(np.unique(params.delays)) == 50

    def test_rayleigh_magnitudes(self):
        spec = DatasetSpec(num_samples=1, num_paths=20000)
        params = draw_multipath(spec, sample_rng(5, 0))
        result = stats.kstest(np.abs(params.amplitudes), stats.rayleigh(scale=1 / np.sqrt(2)).cdf)
        assert result.pvalue > 0.01
        phases = np.mod(np.angle(params.amplitudes), 2 * np.pi)
        assert stats.kstest(phases / (2 * np.pi), "uniform").pvalue > 0.01

    def test_dataset_is_deterministic(self):
        spec = DatasetSpec(num_samples=4, num_paths=3, num_subcarriers=64, rng_seed=9)
        first = sample_dataset(spec)
        second = sample_dataset(spec, n_jobs=2)
        for (p1, H1), (p2, H2) in zip(first, second):
            np.testing.assert_array_equal(p1.delays, p2.delays)
            np.testing.assert_array_equal(H1.entries, H2.entries)

    def test_seeds_give_different_datasets(self):
        a = sample_dataset(DatasetSpec(num_samples=1, num_paths=3, num_subcarriers=32, rng_seed=1))
        b = sample_dataset(DatasetSpec(num_samples=1, num_paths=3, num_subcarriers=32, rng_seed=2))
        assert not np.allclose(a[0][1].entries, b[0][1].entries)

    def test_sample_and_measurement_streams_differ(self):
        assert sample_rng(3, 0).random() != measurement_rng(3, 0).random()

    def test_validate_lists_issues(self):
        spec = DatasetSpec(num_samples=0, num_paths=3, num_antennas=7, doa_range=(0.0, 2.0))
        issues = spec.validate()
        assert any("num_samples" in i for i in issues)
        assert any("even" in i for i in issues)
        assert any("doa_range" in i for i in issues)
        assert DatasetSpec(num_samples=1, num_paths=1).validate() == []

    def test_invalid_spec_raises(self):
        with pytest.raises(ValueError, match="invalid dataset spec"):
            sample_dataset(DatasetSpec(num_samples=1, num_paths=3, num_antennas=5))
