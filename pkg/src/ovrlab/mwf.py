"""Binaural-input multichannel Wiener filter for own-voice enhancement.

Operates on the two-channel STFT of an (outer, in-ear) microphone pair and
returns a single-channel estimate of the own-voice component as observed at
the outer microphone.  Noise statistics are tracked online with a speech
presence probability (SPP) gate, so no external voice activity detector is
needed.  All per-bin linear algebra is 2x2 and done in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigMismatchError
from .signal_core import Spectrogram, StftConfig, Waveform, istft, stft

__all__ = [
    "MwfConfig",
    "MwfOracle",
    "MwfDiagnostics",
    "enhance",
    "enhance_waveform",
    "apply_filters",
    "MwfEnhancer",
]

# Absolute floor mixed into the relative diagonal loading at init time.  Only
# matters for identically-zero input, where it keeps the recursion finite.
_ABS_FLOOR = 1e-30

# Condition-number threshold above which the 2x2 inverse gets diagonal loading.
_COND_LIMIT = 1e8
_LOAD_REL = 1e-10


@dataclass(frozen=True)
class MwfConfig:
    """Tuning parameters of the recursive MWF.

    lambda_y / lambda_v are the smoothing constants of the noisy and noise
    covariance recursions, q is the a-priori speech absence probability of the
    SPP model, mu the speech distortion weight, init_frames the number of
    leading frames treated as noise-only (SPP forced to zero), and psd_floor
    the relative eigenvalue floor applied to the speech covariance estimate.
    """

    lambda_y: float = 0.92
    lambda_v: float = 0.95
    q: float = 0.5
    mu: float = 1.0
    init_frames: int = 10
    psd_floor: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.lambda_y < 1.0:
            raise ValueError(f"lambda_y must be in (0, 1), got {self.lambda_y}")
        if not 0.0 < self.lambda_v < 1.0:
            raise ValueError(f"lambda_v must be in (0, 1), got {self.lambda_v}")
        if not 0.0 < self.q < 1.0:
            raise ValueError(f"q must be in (0, 1), got {self.q}")
        if self.mu < 0.0:
            raise ValueError(f"mu must be >= 0, got {self.mu}")
        if self.init_frames < 0:
            raise ValueError(f"init_frames must be >= 0, got {self.init_frames}")
        if self.psd_floor < 0.0:
            raise ValueError(f"psd_floor must be >= 0, got {self.psd_floor}")


@dataclass(frozen=True)
class MwfOracle:
    """Externally supplied per-bin covariances, bypassing the recursions.

    phi_vv and phi_xx have shape (num_bins, 2, 2) and are used as-is: no
    smoothing, no eigenvalue clamping, no SPP.  Intended for validating the
    filter formula against closed-form solutions.
    """

    phi_vv: np.ndarray
    phi_xx: np.ndarray

    def __post_init__(self):
        vv = np.asarray(self.phi_vv, dtype=np.complex128)
        xx = np.asarray(self.phi_xx, dtype=np.complex128)
        if vv.ndim != 3 or vv.shape[1:] != (2, 2):
            raise ValueError(f"phi_vv must have shape (K, 2, 2), got {vv.shape}")
        if xx.shape != vv.shape:
            raise ValueError(
                f"phi_xx shape {xx.shape} does not match phi_vv shape {vv.shape}"
            )
        object.__setattr__(self, "phi_vv", vv)
        object.__setattr__(self, "phi_xx", xx)


@dataclass
class MwfDiagnostics:
    """Per-frame internals recorded during enhancement.

    spp: (K, L) speech presence probability.
    filters: (K, L, 2) filter coefficients; the output of frame l is
        sum_ch conj(filters[:, l, ch]) * Y[:, l, ch], so the same array can be
        replayed against any other spectrogram pair (shadow filtering).
    noise_min_eig: (K, L) smallest eigenvalue of the tracked noise covariance
        after the frame's update, for positive-definiteness monitoring.
    """

    spp: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    filters: np.ndarray = field(
        default_factory=lambda: np.zeros((0, 0, 2), dtype=np.complex128)
    )
    noise_min_eig: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))


def _hermitize(m):
    """Average a stack of 2x2 matrices with their conjugate transposes."""
    return 0.5 * (m + np.conj(np.swapaxes(m, -1, -2)))


def _eig_bounds(m):
    """Closed-form eigenvalues of a stack of Hermitian 2x2 matrices.

    Returns (lo, hi) real arrays with lo <= hi.
    """
    a = m[..., 0, 0].real
    d = m[..., 1, 1].real
    b = m[..., 0, 1]
    mean = 0.5 * (a + d)
    r = np.sqrt((0.5 * (a - d)) ** 2 + np.abs(b) ** 2)
    return mean - r, mean + r


def _inv2(m):
    """Invert a stack of Hermitian 2x2 matrices.

    Ill-conditioned entries (cond > ~1e8, including singular ones) get
    diagonal loading of 1e-10 * trace before inversion.
    """
    a = m[..., 0, 0].real.copy()
    d = m[..., 1, 1].real.copy()
    b = m[..., 0, 1]
    lo, hi = _eig_bounds(m)
    tr = a + d
    bad = lo * _COND_LIMIT <= hi  # covers lo <= 0 as well (hi >= 0 in practice)
    delta = np.where(bad, _LOAD_REL * np.abs(tr) + _ABS_FLOOR, 0.0)
    a += delta
    d += delta
    det = a * d - np.abs(b) ** 2
    inv = np.empty(m.shape, dtype=np.complex128)
    inv[..., 0, 0] = d / det
    inv[..., 1, 1] = a / det
    inv[..., 0, 1] = -b / det
    inv[..., 1, 0] = -np.conj(b) / det
    return inv


def _clamp_psd(m, floor):
    """Clamp eigenvalues of Hermitian 2x2 stacks to at least `floor`.

    floor is a broadcastable nonnegative real array.  The eigenbasis is kept;
    only eigenvalues move.  Uses the rank-1 projector identity
    P2 = I - P1, so the result is Hermitian PSD by construction.
    """
    a = m[..., 0, 0].real
    d = m[..., 1, 1].real
    b = m[..., 0, 1]
    mean = 0.5 * (a + d)
    r = np.sqrt((0.5 * (a - d)) ** 2 + np.abs(b) ** 2)
    l1 = mean + r  # dominant
    l2 = mean - r
    c1 = np.maximum(l1, floor)
    c2 = np.maximum(l2, floor)
    # Dominant eigenvector: [b, l1 - a] when there is any off-diagonal mass
    # (then l1 > a strictly so the vector is nonzero); otherwise the matrix is
    # already diagonal and the projector picks the larger diagonal entry.
    offdiag = np.abs(b) > 0.0
    n2 = np.abs(b) ** 2 + (l1 - a) ** 2
    safe_n2 = np.where(n2 > 0.0, n2, 1.0)
    p00 = np.where(offdiag, np.abs(b) ** 2 / safe_n2, (a >= d).astype(float))
    p11 = np.where(offdiag, (l1 - a) ** 2 / safe_n2, (a < d).astype(float))
    p01 = np.where(offdiag, b * (l1 - a) / safe_n2, 0.0 + 0.0j)
    gap = c1 - c2
    out = np.empty(m.shape, dtype=np.complex128)
    out[..., 0, 0] = c2 + gap * p00
    out[..., 1, 1] = c2 + gap * p11
    out[..., 0, 1] = gap * p01
    out[..., 1, 0] = np.conj(gap * p01)
    return out


def _wiener_filter(phi_vv, phi_xx, mu):
    """w = Phi_vv^-1 Phi_xx e_outer / (mu + tr(Phi_vv^-1 Phi_xx)).

    Returns (w, xi) where w is (K, 2) and xi the (K,) a-priori SNR trace term.
    """
    inv_vv = _inv2(phi_vv)
    ratio = inv_vv @ phi_xx
    xi = np.einsum("...ii->...", ratio).real
    w = ratio[..., :, 0] / (mu + xi)[..., None]
    return w, xi


def enhance(
    outer: Spectrogram,
    inear: Spectrogram,
    config: MwfConfig = MwfConfig(),
    oracle: Optional[MwfOracle] = None,
    collect_diagnostics: bool = False,
):
    """Run the MWF over a two-channel STFT pair.

    Returns ``(enhanced, diagnostics)`` where enhanced is a Spectrogram on the
    outer channel's grid and diagnostics is an MwfDiagnostics (empty arrays
    unless collect_diagnostics is set, except for the oracle path where it is
    always cheap and therefore always filled).
    """
    outer.require_same_grid(inear)
    bins_o = outer.bins
    bins_i = inear.bins
    K, L = bins_o.shape
    out = np.zeros((K, L), dtype=np.complex128)
    diag = MwfDiagnostics()

    if oracle is not None:
        if oracle.phi_vv.shape[0] != K:
            raise ConfigMismatchError(
                f"oracle covariances have {oracle.phi_vv.shape[0]} bins, "
                f"spectrogram has {K}"
            )
        w, _ = _wiener_filter(oracle.phi_vv, oracle.phi_xx, config.mu)
        out = np.conj(w[:, 0])[:, None] * bins_o + np.conj(w[:, 1])[:, None] * bins_i
        diag.spp = np.ones((K, L))
        diag.filters = np.broadcast_to(w[:, None, :], (K, L, 2)).copy()
        lo, _ = _eig_bounds(oracle.phi_vv)
        diag.noise_min_eig = np.broadcast_to(lo[:, None], (K, L)).copy()
        return Spectrogram(out, outer.config, outer.sample_rate, outer.num_samples), diag

    if collect_diagnostics:
        diag.spp = np.zeros((K, L))
        diag.filters = np.zeros((K, L, 2), dtype=np.complex128)
        diag.noise_min_eig = np.zeros((K, L))

    eye = np.eye(2, dtype=np.complex128)
    prior = config.q / (1.0 - config.q)
    # Initial state: sample mean of the leading noise-only frames.  A rank-1
    # single-frame init would linger for seconds under the slow noise
    # recursion and dominate the residual; the short look-ahead is fine for
    # offline processing.  Relative loading keeps everything scale-equivariant.
    stack = np.stack([bins_o, bins_i], axis=1)  # (K, 2, L)
    m = max(1, min(config.init_frames, L))
    head = stack[:, :, :m]
    phi0 = np.einsum("kil,kjl->kij", head, np.conj(head)) / m
    load = _LOAD_REL * np.einsum("kii->k", phi0).real + _ABS_FLOOR
    phi0 = phi0 + load[:, None, None] * eye
    phi_yy = phi0.copy()
    phi_vv = phi0.copy()
    for l in range(L):
        y = stack[:, :, l]  # (K, 2)
        yyh = y[:, :, None] * np.conj(y[:, None, :])
        phi_yy = config.lambda_y * phi_yy + (1.0 - config.lambda_y) * yyh

        floor = config.psd_floor * np.einsum("kii->k", phi_yy).real * 0.5
        phi_xx = _clamp_psd(_hermitize(phi_yy - phi_vv), floor)

        if l < config.init_frames:
            p = np.zeros(K)
        else:
            inv_vv = _inv2(phi_vv)
            ratio = inv_vv @ phi_xx
            xi = np.einsum("kii->k", ratio).real
            t = np.einsum("kij,kj->ki", inv_vv, y)
            beta = np.einsum("ki,kij,kj->k", np.conj(t), phi_xx, t).real
            p = 1.0 / (1.0 + prior * (1.0 + xi) * np.exp(-beta / (1.0 + xi)))

        phi_vv = phi_vv + ((1.0 - p) * (1.0 - config.lambda_v))[:, None, None] * (
            yyh - phi_vv
        )

        phi_xx = _clamp_psd(_hermitize(phi_yy - phi_vv), floor)
        w, _ = _wiener_filter(phi_vv, phi_xx, config.mu)
        out[:, l] = np.einsum("ki,ki->k", np.conj(w), y)

        if collect_diagnostics:
            diag.spp[:, l] = p
            diag.filters[:, l, :] = w
            lo, _ = _eig_bounds(phi_vv)
            diag.noise_min_eig[:, l] = lo

    return Spectrogram(out, outer.config, outer.sample_rate, outer.num_samples), diag


def apply_filters(filters, outer: Spectrogram, inear: Spectrogram) -> Spectrogram:
    """Replay recorded per-frame filters against a spectrogram pair.

    filters has shape (K, L, 2) as produced in MwfDiagnostics.  Used for
    shadow filtering: applying the filters learned on a mixture separately to
    its clean and noise components to measure the SNR actually achieved.
    """
    outer.require_same_grid(inear)
    filters = np.asarray(filters, dtype=np.complex128)
    if filters.shape != outer.bins.shape + (2,):
        raise ConfigMismatchError(
            f"filters shape {filters.shape} does not match spectrogram grid "
            f"{outer.bins.shape}"
        )
    out = (
        np.conj(filters[:, :, 0]) * outer.bins + np.conj(filters[:, :, 1]) * inear.bins
    )
    return Spectrogram(out, outer.config, outer.sample_rate, outer.num_samples)


def enhance_waveform(
    outer: Waveform,
    inear: Waveform,
    config: MwfConfig = MwfConfig(),
    stft_config: StftConfig = StftConfig(),
) -> Waveform:
    """STFT -> enhance -> inverse STFT convenience wrapper.

    Both inputs must be single-channel with equal rates and lengths; the
    output has the length of the input.
    """
    if outer.sample_rate != inear.sample_rate:
        raise ConfigMismatchError(
            f"sample rates differ: {outer.sample_rate} vs {inear.sample_rate}"
        )
    if outer.num_samples != inear.num_samples:
        raise ConfigMismatchError(
            f"lengths differ: {outer.num_samples} vs {inear.num_samples}"
        )
    spec_o = stft(outer, stft_config)
    spec_i = stft(inear, stft_config)
    enhanced, _ = enhance(spec_o, spec_i, config)
    return istft(enhanced)


class MwfEnhancer(BaseEstimator):
    """Estimator-style wrapper around the recursive MWF.

    Stateless apart from configuration; fit is a no-op provided for pipeline
    compatibility.
    """

    def __init__(
        self,
        lambda_y: float = 0.92,
        lambda_v: float = 0.95,
        q: float = 0.5,
        mu: float = 1.0,
        init_frames: int = 10,
        psd_floor: float = 1e-6,
    ):
        self.lambda_y = lambda_y
        self.lambda_v = lambda_v
        self.q = q
        self.mu = mu
        self.init_frames = init_frames
        self.psd_floor = psd_floor

    def _config(self) -> MwfConfig:
        return MwfConfig(
            lambda_y=self.lambda_y,
            lambda_v=self.lambda_v,
            q=self.q,
            mu=self.mu,
            init_frames=self.init_frames,
            psd_floor=self.psd_floor,
        )

    def fit(self, X=None, y=None):
        self._config()  # validate parameters
        return self

    def transform(self, pairs, stft_config: StftConfig = StftConfig()):
        """Enhance a sequence of (outer, inear) waveform pairs."""
        cfg = self._config()
        return [
            enhance_waveform(outer, inear, cfg, stft_config) for outer, inear in pairs
        ]
