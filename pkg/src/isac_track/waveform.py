"""Received-signal synthesis for the multiuser OFDM sensing sub-block.

One frame of observations is a complex 4-way tensor indexed by
``[array element, symbol within group, subcarrier, symbol group]``.  Each
active propagation path contributes a rank-1 term: the outer product of an
array steering vector, two temporal phase ramps driven by the Doppler shift,
and a frequency ramp driven by the delay, scaled by an effective complex
gain that bundles transmit power, the per-frame symbol, blockage, and path
loss.  Reflected paths additionally pass through the surface's per-symbol
phase profile.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigMismatch, ZeroSignal
from .geometry import AnchorGeometry, PhysicalConstants, UserState, link_params

_HEADER_DTYPE = np.dtype("<u4")


@dataclass(frozen=True)
class WaveformConfig:
    """Array, subcarrier, and symbol-group layout of the sensing sub-block."""

    bs_antennas: int
    ris_elements: int
    total_subcarriers: int          # all OFDM subcarriers in the band
    isac_subcarriers: int           # subcarriers used for sensing
    subcarrier_stride: int
    subcarrier_spacing_hz: float
    group_symbols: int              # consecutive symbols per group
    num_groups: int
    group_stride: int               # symbol offset between group starts
    cyclic_prefix: int

    def __post_init__(self):
        for name in (
            "bs_antennas", "ris_elements", "total_subcarriers", "isac_subcarriers",
            "subcarrier_stride", "group_symbols", "num_groups", "group_stride",
            "cyclic_prefix",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.subcarrier_spacing_hz <= 0:
            raise ValueError("subcarrier_spacing_hz must be positive")
        if self.group_stride < self.group_symbols:
            raise ValueError(
                "group_stride must be >= group_symbols so symbol groups do not overlap"
            )
        last = 1 + (self.isac_subcarriers - 1) * self.subcarrier_stride
        if last > self.total_subcarriers:
            raise ValueError(
                f"subcarrier layout exceeds the band: 1 + (N0-1)*stride = {last} "
                f"> {self.total_subcarriers}"
            )

    # -- derived quantities ----------------------------------------------------

    @property
    def symbol_period_s(self) -> float:
        """OFDM symbol duration including cyclic prefix."""
        n = self.total_subcarriers
        return (n + self.cyclic_prefix) / (n * self.subcarrier_spacing_hz)

    @property
    def omega_spatial(self) -> float:
        """Spatial phase step per element; exactly pi at half-wavelength spacing."""
        return np.pi

    @property
    def omega_freq(self) -> float:
        """Phase step per sensing subcarrier per second of delay."""
        return 2.0 * np.pi * self.subcarrier_stride * self.subcarrier_spacing_hz

    @property
    def omega_time1(self) -> float:
        """Phase step per in-group symbol per Hz of Doppler."""
        return 2.0 * np.pi * self.symbol_period_s

    @property
    def omega_time2(self) -> float:
        """Phase step per symbol group per Hz of Doppler."""
        return 2.0 * np.pi * self.group_stride * self.symbol_period_s

    @property
    def tensor_shape(self) -> tuple[int, int, int, int]:
        return (
            self.bs_antennas,
            self.group_symbols,
            self.isac_subcarriers,
            self.num_groups,
        )

    @property
    def tensor_size(self) -> int:
        return int(np.prod(self.tensor_shape))

    @property
    def delay_period_s(self) -> float:
        """Unambiguous delay span of the frequency ramp."""
        return 2.0 * np.pi / self.omega_freq

    @property
    def doppler_period_hz(self) -> float:
        """Unambiguous Doppler span of the in-group temporal ramp."""
        return 2.0 * np.pi / self.omega_time1


@dataclass(frozen=True)
class RisLink:
    """Static surface-to-receiver channel plus the surface phase profile."""

    gain: complex                  # complex gain of the surface-BS hop
    delay_s: float                 # propagation delay of the surface-BS hop
    aoa_at_bs: float               # arrival angle of the reflected path at the BS
    aod: float                     # departure angle from the surface toward the BS
    phase_profile: np.ndarray      # [elements, group_symbols], unit modulus

    def __post_init__(self):
        profile = np.asarray(self.phase_profile, dtype=complex)
        if profile.ndim != 2:
            raise ValueError("phase_profile must be a 2D matrix")
        if np.abs(np.abs(profile) - 1.0).max() > 1e-12:
            raise ValueError("phase_profile entries must have unit modulus")
        object.__setattr__(self, "phase_profile", profile)
        object.__setattr__(self, "gain", complex(self.gain))


@dataclass(frozen=True)
class FrameTruth:
    """Ground truth driving one frame of synthesis.

    Exactly one complex symbol per user per frame: the repetition scheme
    sends the same value on every sensing subcarrier and symbol.
    """

    states: Sequence[UserState]
    symbols: np.ndarray            # (K,) complex
    bs_blockage: np.ndarray        # (K,) in {0, 1}; 1 = path present
    ris_blockage: np.ndarray       # (K, R) in {0, 1}
    bs_gains: np.ndarray           # (K,) complex path gains user->BS
    ris_gains: np.ndarray          # (K, R) effective complex gains user->surface->BS
    power: float = 1.0

    def __post_init__(self):
        k = len(self.states)
        symbols = np.asarray(self.symbols, dtype=complex)
        if symbols.shape != (k,):
            raise ValueError(
                f"symbols must have shape ({k},): one scalar per user per frame"
            )
        bs_alpha = np.asarray(self.bs_blockage, dtype=int)
        ris_alpha = np.asarray(self.ris_blockage, dtype=int)
        if bs_alpha.shape != (k,) or ris_alpha.ndim != 2 or ris_alpha.shape[0] != k:
            raise ValueError("blockage arrays must be (K,) and (K, R)")
        present = bs_alpha + ris_alpha.sum(axis=1)
        if np.any(present < 1):
            raise ValueError(
                "every user needs at least one unblocked direct or reflected path"
            )
        object.__setattr__(self, "symbols", symbols)
        object.__setattr__(self, "bs_blockage", bs_alpha)
        object.__setattr__(self, "ris_blockage", ris_alpha)
        object.__setattr__(self, "bs_gains", np.asarray(self.bs_gains, dtype=complex))
        object.__setattr__(self, "ris_gains", np.asarray(self.ris_gains, dtype=complex))

    @property
    def num_users(self) -> int:
        return len(self.states)


@dataclass(frozen=True)
class ReceivedTensor:
    """One frame of received samples, shape [M_B, Q1, N0, Q2]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=complex)
        if data.ndim != 4:
            raise ValueError(f"expected a 4-way tensor, got ndim={data.ndim}")
        if not np.all(np.isfinite(data)):
            raise ValueError("tensor entries must be finite")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass(frozen=True)
class SceneModel:
    """Static geometry and infrastructure shared by synthesis and estimation."""

    bs: AnchorGeometry
    ris_anchors: Sequence[AnchorGeometry]
    ris_links: Sequence[RisLink]
    waveform: WaveformConfig
    consts: PhysicalConstants

    def __post_init__(self):
        if self.bs.num_elements != self.waveform.bs_antennas:
            raise ConfigMismatch("BS element count disagrees with waveform config")
        if len(self.ris_anchors) != len(self.ris_links):
            raise ConfigMismatch("one RisLink required per reflecting anchor")
        expected = (self.waveform.ris_elements, self.waveform.group_symbols)
        for i, (anchor, link) in enumerate(zip(self.ris_anchors, self.ris_links)):
            if anchor.num_elements != self.waveform.ris_elements:
                raise ConfigMismatch(f"RIS {i} element count mismatch")
            if link.phase_profile.shape != expected:
                raise ConfigMismatch(
                    f"RIS {i} phase profile shape {link.phase_profile.shape} "
                    f"!= {expected}"
                )

    @property
    def num_ris(self) -> int:
        return len(self.ris_links)


# --------------------------------------------------------------------------
# Steering vectors
# --------------------------------------------------------------------------

def steering_ula(angle: float, length: int, spatial_freq: float = np.pi) -> np.ndarray:
    """ULA steering vector: entry m = exp(+j * spatial_freq * m * cos(angle))."""
    return steering_ula_cos(np.cos(angle), length, spatial_freq)


def steering_ula_cos(
    cos_angle: float, length: int, spatial_freq: float = np.pi
) -> np.ndarray:
    """ULA steering vector parameterized by cos(angle) directly."""
    if length < 1:
        raise ValueError("length must be >= 1")
    return np.exp(1j * spatial_freq * cos_angle * np.arange(length))


def steering_phase(value: float, length: int, omega: float) -> np.ndarray:
    """Geometric phase ramp: entry m = exp(-j * omega * m * value).

    Covers the frequency ramp (value = delay, omega = omega_freq) and both
    temporal ramps (value = Doppler, omega = omega_time1 / omega_time2).
    """
    if length < 1:
        raise ValueError("length must be >= 1")
    return np.exp(-1j * omega * value * np.arange(length))


def ris_profile_matrix(link: RisLink, spatial_freq: float = np.pi) -> np.ndarray:
    """[group_symbols, elements] map from element response to group response.

    Row q is the profile of symbol q scaled elementwise by the departure
    steering toward the receiver, so that the reflected group response is
    this matrix applied to the arrival steering vector.
    """
    m_i = link.phase_profile.shape[0]
    departure = steering_ula(link.aod, m_i, spatial_freq)
    return link.phase_profile.T * departure[None, :]


def ris_steering(
    aoa: float, doppler_hz: float, link: RisLink, cfg: WaveformConfig
) -> np.ndarray:
    """Per-symbol response of a reflected path within one symbol group."""
    if link.phase_profile.shape != (cfg.ris_elements, cfg.group_symbols):
        raise ConfigMismatch(
            f"phase profile shape {link.phase_profile.shape} does not match config"
        )
    arrival = steering_ula(aoa, cfg.ris_elements, cfg.omega_spatial)
    projected = ris_profile_matrix(link, cfg.omega_spatial) @ arrival
    return projected * steering_phase(doppler_hz, cfg.group_symbols, cfg.omega_time1)


def random_phase_profile(
    num_elements: int, num_symbols: int, rng: np.random.Generator | int
) -> np.ndarray:
    """Unit-modulus profile with i.i.d. phases uniform on [0, 2 pi)."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(num_elements, num_symbols))
    return np.exp(1j * phases)


# --------------------------------------------------------------------------
# Tensor synthesis
# --------------------------------------------------------------------------

def _rank1(mode1, mode2, mode3, mode4) -> np.ndarray:
    return np.einsum("m,q,n,i->mqni", mode1, mode2, mode3, mode4, optimize=True)


def synthesize_tensor(
    truth: FrameTruth,
    scene: SceneModel,
    noise_var: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> ReceivedTensor:
    """Sum of per-path rank-1 contributions plus circular Gaussian noise."""
    cfg = scene.waveform
    if truth.ris_blockage.shape[1] != scene.num_ris:
        raise ConfigMismatch(
            f"truth has {truth.ris_blockage.shape[1]} reflected links per user, "
            f"scene has {scene.num_ris}"
        )
    data = np.zeros(cfg.tensor_shape, dtype=complex)
    sqrt_p = np.sqrt(truth.power)

    for k, state in enumerate(truth.states):
        symbol = truth.symbols[k]
        if truth.bs_blockage[k]:
            delay, doppler, aoa = link_params(state, scene.bs, scene.consts)
            weight = sqrt_p * symbol * truth.bs_gains[k]
            data += weight * _rank1(
                steering_ula(aoa, cfg.bs_antennas, cfg.omega_spatial),
                steering_phase(doppler, cfg.group_symbols, cfg.omega_time1),
                steering_phase(delay, cfg.isac_subcarriers, cfg.omega_freq),
                steering_phase(doppler, cfg.num_groups, cfg.omega_time2),
            )
        for r in range(scene.num_ris):
            if not truth.ris_blockage[k, r]:
                continue
            anchor = scene.ris_anchors[r]
            link = scene.ris_links[r]
            delay, doppler, aoa = link_params(state, anchor, scene.consts)
            weight = sqrt_p * symbol * truth.ris_gains[k, r]
            data += weight * _rank1(
                steering_ula(link.aoa_at_bs, cfg.bs_antennas, cfg.omega_spatial),
                ris_steering(aoa, doppler, link, cfg),
                steering_phase(delay + link.delay_s, cfg.isac_subcarriers, cfg.omega_freq),
                steering_phase(doppler, cfg.num_groups, cfg.omega_time2),
            )

    if noise_var > 0.0:
        if rng is None:
            raise ValueError("noise_var > 0 requires an explicit rng")
        scale = np.sqrt(noise_var / 2.0)
        data = data + scale * (
            rng.standard_normal(cfg.tensor_shape)
            + 1j * rng.standard_normal(cfg.tensor_shape)
        )
    return ReceivedTensor(data=data)


def noise_power_for_snr(signal: ReceivedTensor | np.ndarray, target_snr_db: float) -> float:
    """Per-entry noise variance hitting the target signal-to-noise ratio.

    The ratio is defined on Frobenius energies, so the expected noise energy
    is the per-entry variance times the number of entries.
    """
    data = signal.data if isinstance(signal, ReceivedTensor) else np.asarray(signal)
    energy = float(np.vdot(data, data).real)
    if energy == 0.0:
        raise ZeroSignal("cannot calibrate noise against an all-zero signal")
    return energy / data.size / 10.0 ** (target_snr_db / 10.0)


def measured_snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    """Empirical Frobenius-energy SNR of one realization."""
    return 10.0 * np.log10(
        float(np.vdot(signal, signal).real) / float(np.vdot(noise, noise).real)
    )


# --------------------------------------------------------------------------
# Binary dump format
# --------------------------------------------------------------------------
#
# 16-byte header of four little-endian uint32 dimension sizes, then the
# entries in row-major order as interleaved (real, imag) float64 pairs.

def save_tensor(path, tensor: ReceivedTensor) -> None:
    data = tensor.data
    with open(path, "wb") as fh:
        fh.write(np.asarray(data.shape, dtype=_HEADER_DTYPE).tobytes())
        interleaved = np.empty(data.size * 2, dtype="<f8")
        flat = data.reshape(-1)
        interleaved[0::2] = flat.real
        interleaved[1::2] = flat.imag
        fh.write(interleaved.tobytes())


def load_tensor(path) -> ReceivedTensor:
    with open(path, "rb") as fh:
        raw = fh.read()
    dims = np.frombuffer(raw[:16], dtype=_HEADER_DTYPE)
    values = np.frombuffer(raw[16:], dtype="<f8")
    expected = int(np.prod(dims))
    if values.size != 2 * expected:
        raise ValueError(
            f"payload holds {values.size // 2} entries, header promises {expected}"
        )
    flat = values[0::2] + 1j * values[1::2]
    return ReceivedTensor(data=flat.reshape(tuple(int(d) for d in dims)))
