"""
2-D Unitary tensor-ESPRIT baseline

Joint DoA/delay estimation from the half-array measurement H_c: frequency
smoothing into a 3-way tensor, a left-Pi-real unitary transform to a real
tensor, HOSVD signal subspace, real-valued shift invariance equations and
automatic pairing through one complex eigendecomposition. Amplitudes follow
from least squares and the channel is rebuilt on the full array.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import linalg as sla

from channel_sim import (ArrayGeometry, ChannelKind, ChannelMatrix, IndexConvention, MultipathParams,
                         constrained_geometry, full_channel, full_resolution_rows, steering_matrix,
                         delay_matrix)
from errors import DoaBranchError, IllConditionedError, NumericalError

logger = logging.getLogger(__name__)


class SubspaceMode(Enum):
    HOSVD = "hosvd"
    MATRIX_SVD = "matrix_svd"


@dataclass
class EspritConfig:
    freq_subarray: int = 16
    stride: int = 8
    subspace: SubspaceMode = SubspaceMode.HOSVD
    solver: str = "ls"   # 'ls' or 'tls'
    doa_range: Tuple[float, float] = (0.0, float(np.pi / 4))
    branch_tol: float = 1e-6
    cond_limit: float = 1e12
    degeneracy_tol: float = 1e-9

    def __post_init__(self):
        self.subspace = SubspaceMode(self.subspace)
        self.doa_range = tuple(float(v) for v in self.doa_range)

    def validate(self) -> List[str]:
        issues = []
        if self.freq_subarray < 2:
            issues.append("esprit.freq_subarray must be >= 2")
        if self.stride < 1:
            issues.append("esprit.stride must be >= 1")
        if self.solver not in ("ls", "tls"):
            issues.append("esprit.solver must be 'ls' or 'tls'")
        low, high = self.doa_range
        if not 0.0 <= low <= high <= np.pi / 2:
            issues.append("esprit.doa_range must lie inside [0, pi/2]")
        return issues


@dataclass
class SmoothedTensor:
    """Complex [M' x N_f x N_snap] tensor; slice s holds columns [s*stride, s*stride+N_f)"""
    data: np.ndarray
    freq_subarray: int
    stride: int

    @property
    def num_snapshots(self) -> int:
        return self.data.shape[2]


@dataclass
class SignalSubspace:
    basis: np.ndarray                 # real [M' N_f x L], row index m' * N_f + f
    mode_bases: List[np.ndarray]      # spatial, frequency (HOSVD only)
    singular_values: np.ndarray

    def projector(self) -> np.ndarray:
        q, _ = np.linalg.qr(self.basis)
        return q @ q.T


@dataclass
class InvarianceSolution:
    psi_spatial: np.ndarray
    psi_freq: np.ndarray
    residual: float


@dataclass
class Pairing:
    mu: np.ndarray
    nu: np.ndarray
    residual: float = 0.0
    sequential: bool = False


@dataclass
class AmplitudeFit:
    alphas: np.ndarray
    residual: float
    condition_number: float


@dataclass
class EspritEstimate:
    """Exactly L (theta, tau, alpha) triplets; failed estimates carry zero amplitudes"""
    thetas: np.ndarray
    taus: np.ndarray
    alphas: np.ndarray
    residual: float
    pairing_residual: float = 0.0
    warnings: List[str] = field(default_factory=list)
    failed: bool = False

    @property
    def triplets(self) -> List[Tuple[float, float, complex]]:
        return list(zip(self.thetas.tolist(), self.taus.tolist(), self.alphas.tolist()))

    def to_params(self) -> MultipathParams:
        return MultipathParams(delays=self.taus, amplitudes=self.alphas, doas=self.thetas)

    @classmethod
    def failure(cls, num_paths: int, reason: str) -> "EspritEstimate":
        zeros = np.zeros(num_paths)
        return cls(zeros, zeros.copy(), zeros.astype(complex), float("inf"), warnings=[reason], failed=True)


def _entries(H_c: Union[ChannelMatrix, np.ndarray]) -> np.ndarray:
    return H_c.entries if isinstance(H_c, ChannelMatrix) else np.asarray(H_c, dtype=complex)


def build_smoothed_tensor(H_c: Union[ChannelMatrix, np.ndarray], freq_subarray: int, stride: int) -> SmoothedTensor:
    H = _entries(H_c)
    num_sub = H.shape[1]
    if freq_subarray < 2:
        raise ValueError(f"frequency subarray length must be >= 2, got {freq_subarray}")
    if freq_subarray > num_sub:
        raise ValueError(f"frequency subarray {freq_subarray} exceeds the {num_sub} available subcarriers")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    starts = np.arange(0, num_sub - freq_subarray + 1, stride)
    columns = starts[None, :] + np.arange(freq_subarray)[:, None]
    return SmoothedTensor(H[:, columns], freq_subarray, stride)


def left_pi_real(n: int) -> np.ndarray:
    """Sparse unitary Q with Pi conj(Q) = Q"""
    m, odd = divmod(n, 2)
    eye = np.eye(m)
    flip = np.fliplr(eye)
    Q = np.vstack((
        np.hstack((eye, np.zeros((m, odd)), 1j * eye)),
        np.hstack((np.zeros((odd, m)), np.sqrt(2) * np.ones((odd, odd)), np.zeros((odd, m)))),
        np.hstack((flip, np.zeros((m, odd)), -1j * flip)),
    )) / np.sqrt(2)
    return Q


def unitary_transform(T: Union[SmoothedTensor, np.ndarray]) -> np.ndarray:
    """
    Q^H on the spatial and frequency modes, then real and imaginary parts
    stacked along the snapshot mode: real [M' x N_f x 2 N_snap], energy preserved.
    """
    data = T.data if isinstance(T, SmoothedTensor) else np.asarray(T)
    qs = left_pi_real(data.shape[0]).conj().T
    qf = left_pi_real(data.shape[1]).conj().T
    Y = np.einsum("am,bf,mfs->abs", qs, qf, data)
    return np.concatenate((Y.real, Y.imag), axis=2)


def _left_singular(matrix: np.ndarray, rank: int) -> Tuple[np.ndarray, np.ndarray]:
    U, s, _ = np.linalg.svd(matrix, full_matrices=False)
    return U[:, :rank], s


def signal_subspace(real_tensor: np.ndarray, num_paths: int,
                    mode: SubspaceMode = SubspaceMode.HOSVD) -> SignalSubspace:
    M, F, snaps = real_tensor.shape
    if num_paths < 1:
        raise ValueError(f"model order must be >= 1, got {num_paths}")
    if num_paths >= M * F or num_paths > snaps:
        raise ValueError(f"model order {num_paths} too large for a {M}x{F}x{snaps} tensor")
    mode = SubspaceMode(mode)
    Us, s = _left_singular(real_tensor.reshape(M * F, snaps), num_paths)
    if mode == SubspaceMode.MATRIX_SVD:
        return SignalSubspace(Us, [], s)

    U1, _ = _left_singular(real_tensor.reshape(M, F * snaps), min(M, num_paths))
    U2, _ = _left_singular(real_tensor.transpose(1, 0, 2).reshape(F, M * snaps), min(F, num_paths))
    P1, P2 = U1 @ U1.T, U2 @ U2.T
    Es = np.einsum("ab,cd,bdl->acl", P1, P2, Us.reshape(M, F, num_paths)).reshape(M * F, num_paths)
    return SignalSubspace(Es, [U1, U2], s)


def _selection_pair(n: int, leading: bool) -> np.ndarray:
    """Q_{n-1}^H J Q_n with J selecting the last (default) or the first n-1 rows"""
    J = np.eye(n)[:-1] if leading else np.eye(n)[1:]
    return left_pi_real(n - 1).conj().T @ J @ left_pi_real(n)


def _solve(A: np.ndarray, B: np.ndarray, solver: str, cond_limit: float) -> np.ndarray:
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > cond_limit:
        raise IllConditionedError("shift invariance equations are rank deficient", float(cond))
    if solver == "ls":
        return np.linalg.lstsq(A, B, rcond=None)[0]
    if solver == "tls":
        L = A.shape[1]
        _, _, Vh = np.linalg.svd(np.hstack((A, B)))
        V = Vh.T
        V22 = V[L:, L:]
        if np.linalg.cond(V22) > cond_limit:
            raise IllConditionedError("TLS partition is singular", float(np.linalg.cond(V22)))
        return -V[:L, L:] @ np.linalg.inv(V22)
    raise ValueError(f"unknown solver {solver!r}")


def shift_invariance_solve(basis: Union[SignalSubspace, np.ndarray], mode_dims: Tuple[int, int],
                           solver: str = "ls", cond_limit: float = 1e12) -> InvarianceSolution:
    """
    Real invariance equations Re(K) Es Psi = Im(K) Es per mode. Eigenvalues of
    the spatial Psi are tan(mu/2); the frequency selection runs backwards so
    that eigenvalues are tan(nu/2) with nu = 2 pi tau / N_sub.
    """
    Es = basis.basis if isinstance(basis, SignalSubspace) else np.asarray(basis)
    M, F = mode_dims
    if Es.shape[0] != M * F:
        raise ValueError(f"basis has {Es.shape[0]} rows, expected {M}*{F}")
    if M < 2 or F < 2:
        raise ValueError(f"both modes need at least 2 elements, got {mode_dims}")
    K_spatial = np.kron(_selection_pair(M, leading=False), np.eye(F))
    K_freq = np.kron(np.eye(M), _selection_pair(F, leading=True))

    psis, residual = [], 0.0
    for K in (K_spatial, K_freq):
        A, B = K.real @ Es, K.imag @ Es
        psi = _solve(A, B, solver, cond_limit)
        if not np.all(np.isfinite(psi)):
            raise NumericalError("non-finite shift invariance solution")
        scale = max(np.linalg.norm(B), np.finfo(float).tiny)
        residual = max(residual, float(np.linalg.norm(A @ psi - B) / scale))
        psis.append(psi)
    return InvarianceSolution(psis[0], psis[1], residual)


def _min_gap(values: np.ndarray) -> float:
    if len(values) < 2:
        return np.inf
    diffs = np.abs(values[:, None] - values[None, :])
    return float(np.min(diffs[~np.eye(len(values), dtype=bool)]))


def joint_pairing(psi_spatial: np.ndarray, psi_freq: np.ndarray, degeneracy_tol: float = 1e-9) -> Pairing:
    """
    Eigenvalues of Psi_s + j Psi_f pair spatial and frequency estimates
    automatically. Near-degenerate spectra fall back to diagonalizing both
    Psi with the eigenvectors of the better separated one.
    """
    lam = np.linalg.eigvals(psi_spatial + 1j * psi_freq)
    scale = max(1.0, float(np.max(np.abs(lam))))
    if _min_gap(lam) > degeneracy_tol * scale:
        mu, nu = 2 * np.arctan(lam.real), 2 * np.arctan(lam.imag)
        order = np.argsort(nu)
        return Pairing(mu[order], nu[order])

    ev_s = np.linalg.eigvals(psi_spatial).real
    ev_f = np.linalg.eigvals(psi_freq).real
    lead, other = (psi_freq, psi_spatial) if _min_gap(ev_f) >= _min_gap(ev_s) else (psi_spatial, psi_freq)
    _, T = np.linalg.eig(lead)
    T_inv = np.linalg.pinv(T)
    d_lead = np.diag(T_inv @ lead @ T).real
    transformed = T_inv @ other @ T
    d_other = np.diag(transformed).real
    off = transformed - np.diag(np.diag(transformed))
    residual = float(np.linalg.norm(off) / max(np.linalg.norm(transformed), np.finfo(float).tiny))
    tan_s, tan_f = (d_other, d_lead) if lead is psi_freq else (d_lead, d_other)
    mu, nu = 2 * np.arctan(tan_s), 2 * np.arctan(tan_f)
    order = np.argsort(nu)
    logger.warning("Degenerate joint eigenvalues, sequential pairing used (residual %.3e)", residual)
    return Pairing(mu[order], nu[order], residual, sequential=True)


def spatial_frequency(theta, spacing: float):
    """mu = 2 pi d cos(theta), wrapped into (-pi, pi]"""
    mu = 2 * np.pi * spacing * np.cos(np.asarray(theta, dtype=float))
    return np.pi - np.mod(np.pi - mu, 2 * np.pi)


def _doa_from_mu(mu: float, spacing: float, doa_range: Tuple[float, float], tol: float) -> float:
    lo_cos, hi_cos = np.cos(doa_range[1]), np.cos(doa_range[0])
    span = int(np.ceil(spacing)) + 1
    candidates = (mu + 2 * np.pi * np.arange(-span, span + 1)) / (2 * np.pi * spacing)
    inside = candidates[(candidates >= lo_cos - tol) & (candidates <= hi_cos + tol)]
    if len(inside) == 0:
        near = candidates[np.argsort(np.abs(candidates - 0.5 * (lo_cos + hi_cos)))[:2]]
        raise DoaBranchError(mu, near)
    best = inside[np.argmin(np.abs(inside - 0.5 * (lo_cos + hi_cos)))]
    return float(np.arccos(np.clip(best, lo_cos, hi_cos)))


def params_from_freqs(mu: Sequence[float], nu: Sequence[float], geom: ArrayGeometry, num_subcarriers: int,
                      doa_range: Tuple[float, float] = (0.0, float(np.pi / 4)),
                      branch_tol: float = 1e-6) -> Tuple[np.ndarray, np.ndarray]:
    """
    Map paired spatial/frequency estimates to (theta, tau). `geom` is the
    geometry the spatial frequency was measured on; its spacing may alias,
    the branch landing in `doa_range` is taken.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    nu = np.atleast_1d(np.asarray(nu, dtype=float))
    thetas = np.array([_doa_from_mu(m, geom.spacing, doa_range, branch_tol) for m in mu])
    taus = nu * num_subcarriers / (2 * np.pi)
    return thetas, taus


def _model_matrix(thetas: np.ndarray, taus: np.ndarray, geom: ArrayGeometry, num_subcarriers: int,
                  rows: np.ndarray) -> np.ndarray:
    A = steering_matrix(thetas, geom.spacing, geom.num_antennas)[rows]
    D = delay_matrix(taus, num_subcarriers)
    # column i is vec(a_i d_i^T), row-major over (antenna, subcarrier)
    return np.einsum("ml,ln->mnl", A, D).reshape(len(rows) * num_subcarriers, len(thetas))


def amplitudes_ls(H_c: Union[ChannelMatrix, np.ndarray], thetas: Sequence[float], taus: Sequence[float],
                  geom: ArrayGeometry, num_subcarriers: Optional[int] = None,
                  convention: IndexConvention = IndexConvention.FRF_ODD,
                  cond_limit: float = 1e12) -> AmplitudeFit:
    """
    Least-squares amplitudes of the measured rows. `geom` is the full array;
    the model uses its steering entries at the full-resolution rows.
    """
    H = _entries(H_c)
    num_subcarriers = num_subcarriers or H.shape[1]
    rows = full_resolution_rows(geom.num_antennas, convention)
    if H.shape != (len(rows), num_subcarriers):
        raise ValueError(f"measurement shape {H.shape} does not match {len(rows)} rows x {num_subcarriers}")
    B = _model_matrix(np.asarray(thetas, dtype=float), np.asarray(taus, dtype=float), geom, num_subcarriers, rows)
    cond = float(np.linalg.cond(B))
    y = H.reshape(-1)
    alphas = np.linalg.lstsq(B, y, rcond=None)[0]
    residual = float(np.linalg.norm(y - B @ alphas) / max(np.linalg.norm(y), np.finfo(float).tiny))
    if cond > cond_limit:
        logger.warning("Amplitude model is ill-conditioned (condition number %.3e)", cond)
    return AmplitudeFit(alphas, residual, cond)


def reconstruct_channel(estimate: EspritEstimate, geom: ArrayGeometry, num_subcarriers: int) -> ChannelMatrix:
    if estimate.failed or not np.any(estimate.alphas):
        return ChannelMatrix(np.zeros((geom.num_antennas, num_subcarriers), dtype=complex),
                             ChannelKind.RECONSTRUCTED)
    H = full_channel(estimate.to_params(), geom, num_subcarriers)
    return ChannelMatrix(H.entries, ChannelKind.RECONSTRUCTED)


def estimate_parameters(H_c: Union[ChannelMatrix, np.ndarray], num_paths: int, geom: ArrayGeometry,
                        num_subcarriers: Optional[int] = None, config: Optional[EspritConfig] = None,
                        convention: IndexConvention = IndexConvention.FRF_ODD) -> EspritEstimate:
    """Full chain for one measurement; `geom` is the full array"""
    config = config or EspritConfig()
    H = _entries(H_c)
    num_subcarriers = num_subcarriers or H.shape[1]
    if not np.any(H):
        raise ValueError("cannot estimate paths from an all-zero measurement")

    tensor = build_smoothed_tensor(H, config.freq_subarray, config.stride)
    subspace = signal_subspace(unitary_transform(tensor), num_paths, config.subspace)
    solution = shift_invariance_solve(subspace, (H.shape[0], config.freq_subarray),
                                      config.solver, config.cond_limit)
    pairing = joint_pairing(solution.psi_spatial, solution.psi_freq, config.degeneracy_tol)
    thetas, taus = params_from_freqs(pairing.mu, pairing.nu, constrained_geometry(geom), num_subcarriers,
                                     config.doa_range, config.branch_tol)
    fit = amplitudes_ls(H, thetas, taus, geom, num_subcarriers, convention, config.cond_limit)

    warnings = []
    if pairing.sequential:
        warnings.append(f"sequential pairing (residual {pairing.residual:.3e})")
    if fit.condition_number > config.cond_limit:
        warnings.append(f"ill-conditioned amplitude fit (condition number {fit.condition_number:.3e})")
    return EspritEstimate(thetas, taus, fit.alphas, fit.residual, pairing.residual, warnings)


def _estimate_or_fail(index: int, H_c, num_paths: int, geom: ArrayGeometry, num_subcarriers: int,
                      config: EspritConfig, convention: IndexConvention) -> EspritEstimate:
    try:
        return estimate_parameters(H_c, num_paths, geom, num_subcarriers, config, convention)
    except (NumericalError, ValueError, np.linalg.LinAlgError, sla.LinAlgError) as e:
        logger.warning("ESPRIT failed on sample %d: %s", index, e)
        return EspritEstimate.failure(num_paths, str(e))


def run_batch(measurements: Sequence[Union[ChannelMatrix, np.ndarray]], num_paths: Union[int, Sequence[int]],
              geom: ArrayGeometry, num_subcarriers: int, config: Optional[EspritConfig] = None,
              convention: IndexConvention = IndexConvention.FRF_ODD, n_jobs: int = 1) -> List[EspritEstimate]:
    """Estimate every sample; per-sample failures become zero-channel estimates"""
    config = config or EspritConfig()
    orders = [num_paths] * len(measurements) if np.isscalar(num_paths) else list(num_paths)
    if len(orders) != len(measurements):
        raise ValueError(f"{len(orders)} model orders for {len(measurements)} measurements")
    args = [(i, H, L, geom, num_subcarriers, config, convention)
            for i, (H, L) in enumerate(zip(measurements, orders))]
    if n_jobs == 1:
        estimates = [_estimate_or_fail(*a) for a in args]
    else:
        estimates = Parallel(n_jobs=n_jobs)(delayed(_estimate_or_fail)(*a) for a in args)
    failed = sum(e.failed for e in estimates)
    logger.info("ESPRIT estimated %d samples (%d failed)", len(estimates), failed)
    return estimates


def estimates_frame(estimates: Sequence[EspritEstimate], sample_ids: Optional[Sequence[int]] = None) -> pd.DataFrame:
    sample_ids = list(range(len(estimates))) if sample_ids is None else list(sample_ids)
    rows = []
    for sid, est in zip(sample_ids, estimates):
        for i, (theta, tau, alpha) in enumerate(est.triplets):
            rows.append({"sample_id": sid, "i": i, "theta": theta, "tau": tau,
                         "alpha_re": alpha.real, "alpha_im": alpha.imag, "residual": est.residual})
    return pd.DataFrame(rows, columns=["sample_id", "i", "theta", "tau", "alpha_re", "alpha_im", "residual"])


def export_estimates(estimates: Sequence[EspritEstimate], path: Union[str, Path],
                     sample_ids: Optional[Sequence[int]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    estimates_frame(estimates, sample_ids).to_csv(path, index=False, float_format="%.17g")
    return path
