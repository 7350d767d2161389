"""Tests for the Unitary tensor-ESPRIT baseline."""

import numpy as np
import pandas as pd
import pytest

from channel_sim import (ArrayGeometry, ChannelMatrix, IndexConvention, MultipathParams, constrained_channel,
                         constrained_geometry, full_channel, full_resolution_rows)
from errors import DoaBranchError
from esprit import (EspritConfig, EspritEstimate, SubspaceMode, build_smoothed_tensor, estimate_parameters,
                    export_estimates, joint_pairing, left_pi_real, params_from_freqs, reconstruct_channel,
                    run_batch, shift_invariance_solve, signal_subspace, spatial_frequency, unitary_transform)
from preprocess import nse

GEOM = ArrayGeometry(8, 0.5)
N_SUB = 1200


def _separated_params(rng, L):
    """Random paths with at least one tap and 0.05 rad between neighbours"""
    while True:
        delays = np.sort(rng.uniform(0, 24, L))
        doas = rng.uniform(0, np.pi / 4, L)
        if L == 1 or (np.min(np.diff(delays)) > 1.0 and np.min(np.diff(np.sort(doas))) > 0.05):
            break
    amplitudes = rng.rayleigh(1 / np.sqrt(2), L) * np.exp(1j * rng.uniform(0, 2 * np.pi, L))
    return MultipathParams(delays=delays, amplitudes=amplitudes, doas=doas)


def _interior_params(rng, L, margin=0.05):
    """Separated paths whose DoAs stay clear of the edges of the DoA range under noise"""
    while True:
        params = _separated_params(rng, L)
        if np.all((params.doas > margin) & (params.doas < np.pi / 4 - margin)):
            return params


def _noiseless_measurement(params, convention=IndexConvention.FRF_ODD):
    return constrained_channel(params, GEOM, N_SUB, np.inf, np.random.default_rng(0), convention)


class TestUnitaryTransform:
    @pytest.mark.parametrize("n", [2, 3, 4, 7, 16])
    def test_left_pi_real(self, n):
        Q = left_pi_real(n)
        np.testing.assert_allclose(Q.conj().T @ Q, np.eye(n), atol=1e-14)
        np.testing.assert_allclose(np.flipud(np.eye(n)) @ Q.conj(), Q, atol=1e-14)

    def test_smoothed_tensor_shape(self, rng):
        H_c = rng.standard_normal((4, N_SUB)) + 1j * rng.standard_normal((4, N_SUB))
        T = build_smoothed_tensor(H_c, 16, 8)
        assert T.data.shape == (4, 16, 149)
        assert T.num_snapshots == 149
        np.testing.assert_array_equal(T.data[:, :, 2], H_c[:, 16:32])

    def test_transform_is_real_and_energy_preserving(self, rng):
        H_c = rng.standard_normal((4, 64)) + 1j * rng.standard_normal((4, 64))
        T = build_smoothed_tensor(H_c, 16, 8)
        real = unitary_transform(T)
        assert real.shape == (4, 16, 2 * T.num_snapshots)
        assert real.dtype == np.float64
        assert np.linalg.norm(real) == pytest.approx(np.linalg.norm(T.data))

    def test_smoothing_errors(self):
        with pytest.raises(ValueError, match="exceeds"):
            build_smoothed_tensor(np.ones((4, 10)), 16, 8)
        with pytest.raises(ValueError, match="stride"):
            build_smoothed_tensor(np.ones((4, 32)), 16, 0)

    def test_single_source_is_rank_one(self, rng):
        params = MultipathParams(delays=[3.3], amplitudes=[1 + 0.5j], doas=[0.4])
        real = unitary_transform(build_smoothed_tensor(_noiseless_measurement(params), 16, 8))
        M, F, S = real.shape
        for unfolding in (real.reshape(M, F * S), real.transpose(1, 0, 2).reshape(F, M * S),
                          real.reshape(M * F, S)):
            s = np.linalg.svd(unfolding, compute_uv=False)
            assert s[1] / s[0] < 1e-10


class TestExactRecovery:
    @pytest.mark.parametrize("L", [1, 2, 3])
    def test_noiseless_recovery(self, L):
        rng = np.random.default_rng(100 + L)
        for _ in range(100):
            params = _separated_params(rng, L)
            est = estimate_parameters(_noiseless_measurement(params), L, GEOM)
            assert not est.failed
            order = np.argsort(params.delays)
            np.testing.assert_allclose(est.taus, params.delays[order], atol=1e-6)
            np.testing.assert_allclose(est.thetas, params.doas[order], atol=1e-6)
            np.testing.assert_allclose(est.alphas, params.amplitudes[order], atol=1e-6)
            H = full_channel(params, GEOM, N_SUB)
            assert nse(H.entries, reconstruct_channel(est, GEOM, N_SUB).entries) < 1e-8

    @pytest.mark.parametrize("config", [EspritConfig(solver="tls"),
                                        EspritConfig(subspace=SubspaceMode.MATRIX_SVD)])
    def test_solver_variants(self, config):
        params = _separated_params(np.random.default_rng(7), 3)
        est = estimate_parameters(_noiseless_measurement(params), 3, GEOM, config=config)
        order = np.argsort(params.delays)
        np.testing.assert_allclose(est.taus, params.delays[order], atol=1e-6)
        np.testing.assert_allclose(est.thetas, params.doas[order], atol=1e-6)

    def test_even_convention(self):
        params = _separated_params(np.random.default_rng(8), 2)
        H_c = _noiseless_measurement(params, IndexConvention.FRF_EVEN)
        est = estimate_parameters(H_c, 2, GEOM, convention=IndexConvention.FRF_EVEN)
        np.testing.assert_allclose(est.alphas, params.amplitudes[np.argsort(params.delays)], atol=1e-6)

    def test_noisy_estimate_is_close(self):
        rng = np.random.default_rng(9)
        params = _separated_params(rng, 2)
        H_c = constrained_channel(params, GEOM, N_SUB, 30.0, rng)
        est = estimate_parameters(H_c, 2, GEOM)
        H = full_channel(params, GEOM, N_SUB)
        assert nse(H.entries, reconstruct_channel(est, GEOM, N_SUB).entries) < 0.05


class TestInvariances:
    @pytest.mark.parametrize("phi", [0.7, np.pi / 2, -2.5])
    def test_global_phase_only_rotates_amplitudes(self, phi):
        rng = np.random.default_rng(11)
        H_c = constrained_channel(_interior_params(rng, 3), GEOM, N_SUB, 20.0, rng)
        base = estimate_parameters(H_c, 3, GEOM)
        rotated = estimate_parameters(np.exp(1j * phi) * H_c.entries, 3, GEOM)
        np.testing.assert_allclose(rotated.taus, base.taus, atol=1e-8)
        np.testing.assert_allclose(rotated.thetas, base.thetas, atol=1e-8)
        np.testing.assert_allclose(rotated.alphas, np.exp(1j * phi) * base.alphas, atol=1e-8)

    @pytest.mark.parametrize("mode", list(SubspaceMode))
    def test_snapshot_order_does_not_matter(self, mode):
        rng = np.random.default_rng(12)
        H_c = constrained_channel(_interior_params(rng, 3), GEOM, N_SUB, 20.0, rng)
        tensor = build_smoothed_tensor(H_c, 16, 8)
        permuted = tensor.data[:, :, rng.permutation(tensor.num_snapshots)]

        def frequencies(data):
            subspace = signal_subspace(unitary_transform(data), 3, mode)
            solution = shift_invariance_solve(subspace, (4, 16))
            pairing = joint_pairing(solution.psi_spatial, solution.psi_freq)
            return pairing.mu, pairing.nu

        mu, nu = frequencies(tensor.data)
        mu_p, nu_p = frequencies(permuted)
        np.testing.assert_allclose(nu_p, nu, atol=1e-9)
        np.testing.assert_allclose(mu_p, mu, atol=1e-9)

    def test_reconstruction_beats_measurement_at_20db(self):
        rng = np.random.default_rng(13)
        rows = full_resolution_rows(GEOM.num_antennas, IndexConvention.FRF_ODD)
        recon, measured = [], []
        for _ in range(100):
            params = _interior_params(rng, 3)
            H = full_channel(params, GEOM, N_SUB).entries
            H_c = constrained_channel(params, GEOM, N_SUB, 20.0, rng)
            est = estimate_parameters(H_c, 3, GEOM)
            recon.append(nse(H, reconstruct_channel(est, GEOM, N_SUB).entries))
            measured.append(nse(H[rows], H_c.entries))
        assert np.median(measured) == pytest.approx(0.01, rel=0.1)
        assert np.median(recon) < np.median(measured)


class TestPairingAndBranches:
    def test_joint_pairing_matches_eigenvalues(self):
        T = np.array([[1.0, 0.3], [0.2, 1.0]])
        T_inv = np.linalg.inv(T)
        tan_s, tan_f = np.array([0.1, -0.4]), np.array([0.05, 0.2])
        pairing = joint_pairing(T @ np.diag(tan_s) @ T_inv, T @ np.diag(tan_f) @ T_inv)
        assert not pairing.sequential
        np.testing.assert_allclose(pairing.nu, 2 * np.arctan(tan_f), atol=1e-12)
        np.testing.assert_allclose(pairing.mu, 2 * np.arctan(tan_s), atol=1e-12)

    def test_degenerate_pairing_falls_back(self):
        psi_s = np.diag([0.3, 0.3])
        psi_f = np.diag([0.3, 0.3])
        pairing = joint_pairing(psi_s, psi_f)
        assert pairing.sequential
        np.testing.assert_allclose(pairing.mu, 2 * np.arctan(0.3))

    def test_spatial_frequency_wraps(self):
        mu = spatial_frequency(np.array([0.0, np.pi / 4]), 1.0)
        assert np.all(mu > -np.pi) and np.all(mu <= np.pi)
        assert mu[0] == pytest.approx(0.0, abs=1e-12)

    def test_branch_selection_on_constrained_array(self):
        geom = constrained_geometry(GEOM)
        thetas = np.array([0.05, 0.3, 0.7])
        found, taus = params_from_freqs(spatial_frequency(thetas, geom.spacing), [0.01, 0.02, 0.03], geom, N_SUB)
        np.testing.assert_allclose(found, thetas, atol=1e-12)
        np.testing.assert_allclose(taus, np.array([0.01, 0.02, 0.03]) * N_SUB / (2 * np.pi))

    def test_no_branch_raises(self):
        with pytest.raises(DoaBranchError) as info:
            params_from_freqs([np.pi / 2], [0.0], ArrayGeometry(4, 0.5), N_SUB)
        assert info.value.mu == pytest.approx(np.pi / 2)


class TestFailuresAndExport:
    def test_model_order_too_large(self, rng):
        real = rng.standard_normal((4, 16, 6))
        with pytest.raises(ValueError, match="too large"):
            signal_subspace(real, 7)

    def test_zero_measurement_fails_softly(self):
        estimates = run_batch([ChannelMatrix(np.zeros((4, 64)))], 2, GEOM, 64)
        assert estimates[0].failed
        assert estimates[0].warnings
        recon = reconstruct_channel(estimates[0], GEOM, 64)
        assert recon.shape == (8, 64)
        assert not np.any(recon.entries)

    def test_failure_estimate_has_exact_order(self):
        est = EspritEstimate.failure(3, "boom")
        assert len(est.triplets) == 3
        assert not np.any(est.alphas)

    def test_batch_orders_must_match(self):
        with pytest.raises(ValueError, match="model orders"):
            run_batch([np.zeros((4, 64))], [1, 2], GEOM, 64)

    def test_export_csv(self, tmp_path):
        rng = np.random.default_rng(11)
        measurements = [_noiseless_measurement(_separated_params(rng, L)) for L in (1, 2)]
        estimates = run_batch(measurements, [1, 2], GEOM, N_SUB, n_jobs=2)
        path = export_estimates(estimates, tmp_path / "esprit_estimates.csv", sample_ids=[10, 11])
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["sample_id", "i", "theta", "tau", "alpha_re", "alpha_im", "residual"]
        assert frame["sample_id"].tolist() == [10, 11, 11]
        assert frame["i"].tolist() == [0, 0, 1]
        np.testing.assert_allclose(frame.loc[0, "tau"], estimates[0].taus[0], rtol=1e-15)
