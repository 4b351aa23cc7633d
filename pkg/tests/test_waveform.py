"""Tests for steering vectors, tensor synthesis, and noise calibration."""

import cmath

import numpy as np
import pytest
from scipy.stats import kstest

from isac_track.errors import ConfigMismatch, ZeroSignal
from isac_track.geometry import AnchorGeometry, PhysicalConstants, UserState, link_params
from isac_track.waveform import (
    FrameTruth,
    ReceivedTensor,
    RisLink,
    SceneModel,
    WaveformConfig,
    load_tensor,
    measured_snr_db,
    noise_power_for_snr,
    random_phase_profile,
    ris_steering,
    save_tensor,
    steering_phase,
    steering_ula,
    synthesize_tensor,
)

CONSTS = PhysicalConstants(carrier_wavelength=0.0107)


def paper_waveform(m_i=64):
    return WaveformConfig(
        bs_antennas=6,
        ris_elements=m_i,
        total_subcarriers=12,
        isac_subcarriers=12,
        subcarrier_stride=1,
        subcarrier_spacing_hz=10e6 / 12,
        group_symbols=12,
        num_groups=12,
        group_stride=200,
        cyclic_prefix=3,
    )


def small_scene(rng, num_ris=1, m_i=8):
    cfg = paper_waveform(m_i=m_i)
    bs = AnchorGeometry(position=[0.0, 0.0], orientation=[0.0, 1.0], num_elements=6)
    ris_anchors = []
    ris_links = []
    positions = [[20.0, 40.0], [45.0, 30.0]]
    for r in range(num_ris):
        anchor = AnchorGeometry(
            position=positions[r], orientation=[1.0, 0.0], num_elements=m_i
        )
        dist = np.linalg.norm(anchor.position - bs.position)
        ris_anchors.append(anchor)
        ris_links.append(
            RisLink(
                gain=0.3 * np.exp(1j * rng.uniform(0, 2 * np.pi)),
                delay_s=dist / CONSTS.speed_of_light,
                aoa_at_bs=rng.uniform(0.3, 2.8),
                aod=rng.uniform(0.3, 2.8),
                phase_profile=random_phase_profile(m_i, cfg.group_symbols, rng),
            )
        )
    return SceneModel(
        bs=bs, ris_anchors=ris_anchors, ris_links=ris_links, waveform=cfg, consts=CONSTS
    )


class TestWaveformConfig:
    def test_paper_timing(self):
        cfg = paper_waveform()
        assert cfg.symbol_period_s == pytest.approx(15.0 / 10e6)
        assert cfg.omega_spatial == pytest.approx(np.pi)
        assert cfg.omega_freq == pytest.approx(2 * np.pi * 10e6 / 12)

    def test_overlapping_groups_rejected(self):
        with pytest.raises(ValueError):
            WaveformConfig(
                bs_antennas=6, ris_elements=8, total_subcarriers=12,
                isac_subcarriers=12, subcarrier_stride=1,
                subcarrier_spacing_hz=1e6, group_symbols=12, num_groups=12,
                group_stride=6, cyclic_prefix=3,
            )

    def test_subcarrier_overflow_rejected(self):
        with pytest.raises(ValueError):
            WaveformConfig(
                bs_antennas=6, ris_elements=8, total_subcarriers=12,
                isac_subcarriers=12, subcarrier_stride=2,
                subcarrier_spacing_hz=1e6, group_symbols=12, num_groups=12,
                group_stride=200, cyclic_prefix=3,
            )


class TestSteering:
    def test_broadside_is_all_ones(self):
        vec = steering_ula(np.pi / 2, 7)
        np.testing.assert_allclose(vec, np.ones(7), atol=1e-12)

    def test_endfire_half_wavelength(self):
        vec = steering_ula(0.0, 2, spatial_freq=np.pi)
        np.testing.assert_allclose(vec, [1.0, -1.0], atol=1e-12)

    def test_matches_elementwise_oracle(self):
        angle, length = np.pi / 3, 6
        vec = steering_ula(angle, length)
        for m in range(length):
            expected = cmath.exp(1j * np.pi * m * np.cos(angle))
            assert vec[m] == pytest.approx(expected, abs=1e-12)

    def test_phase_ramp_zero_delay(self):
        np.testing.assert_allclose(steering_phase(0.0, 5, 2.0), np.ones(5))

    def test_phase_ramp_geometric(self):
        omega, value = 3.7, 0.41
        vec = steering_phase(value, 8, omega)
        ratios = vec[1:] / vec[:-1]
        np.testing.assert_allclose(ratios, np.exp(-1j * omega * value), atol=1e-12)

    def test_phase_ramp_half_cycle(self):
        delta_n, delta_f = 1, 1e6
        omega = 2 * np.pi * delta_n * delta_f
        tau = 1.0 / (2 * delta_n * delta_f)
        np.testing.assert_allclose(
            steering_phase(tau, 4, omega), [1, -1, 1, -1], atol=1e-10
        )

    def test_conjugate_symmetry(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            omega = rng.uniform(0.1, 5.0)
            value = rng.normal()
            forward = steering_phase(value, 9, omega)
            backward = steering_phase(-value, 9, omega)
            np.testing.assert_allclose(backward, forward.conj(), atol=1e-12)


class TestRisSteering:
    def test_conjugate_cancelling_angles(self):
        cfg = paper_waveform(m_i=16)
        theta = 2.0
        phi = np.pi - theta  # cos(phi) = -cos(theta)
        link = RisLink(
            gain=1.0, delay_s=0.0, aoa_at_bs=1.0, aod=phi,
            phase_profile=np.ones((16, cfg.group_symbols)),
        )
        vec = ris_steering(theta, 0.0, link, cfg)
        np.testing.assert_allclose(vec, 16.0 * np.ones(cfg.group_symbols), atol=1e-9)

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(1)
        cfg = paper_waveform(m_i=8)
        profile = random_phase_profile(8, cfg.group_symbols, rng)
        link = RisLink(
            gain=1.0, delay_s=0.0, aoa_at_bs=0.7, aod=1.1, phase_profile=profile
        )
        theta, doppler = 1.9, 800.0
        vec = ris_steering(theta, doppler, link, cfg)
        for q in range(cfg.group_symbols):
            acc = 0j
            for m in range(8):
                acc += (
                    profile[m, q]
                    * cmath.exp(1j * np.pi * m * np.cos(link.aod))
                    * cmath.exp(1j * np.pi * m * np.cos(theta))
                )
            acc *= cmath.exp(-1j * cfg.omega_time1 * q * doppler)
            assert vec[q] == pytest.approx(acc, rel=1e-12)

    def test_zero_doppler_is_pure_projection(self):
        rng = np.random.default_rng(2)
        cfg = paper_waveform(m_i=8)
        profile = random_phase_profile(8, cfg.group_symbols, rng)
        link = RisLink(
            gain=1.0, delay_s=0.0, aoa_at_bs=0.7, aod=1.1, phase_profile=profile
        )
        still = ris_steering(1.3, 0.0, link, cfg)
        moving = ris_steering(1.3, 500.0, link, cfg)
        ramp = steering_phase(500.0, cfg.group_symbols, cfg.omega_time1)
        np.testing.assert_allclose(moving, still * ramp, atol=1e-12)


class TestRandomPhaseProfile:
    def test_unit_modulus(self):
        profile = random_phase_profile(32, 12, np.random.default_rng(3))
        np.testing.assert_allclose(np.abs(profile), 1.0, atol=1e-12)

    def test_seed_determinism(self):
        a = random_phase_profile(16, 8, 1234)
        b = random_phase_profile(16, 8, 1234)
        np.testing.assert_array_equal(a, b)

    def test_phases_uniform(self):
        profile = random_phase_profile(500, 200, np.random.default_rng(4))
        phases = np.mod(np.angle(profile).ravel(), 2 * np.pi)
        stat, _ = kstest(phases / (2 * np.pi), "uniform")
        assert stat < 0.01


def loop_oracle_tensor(truth, scene):
    """Element-wise nested-loop evaluation of the received-signal model."""
    cfg = scene.waveform
    m_b, q1, n0, q2 = cfg.tensor_shape
    out = np.zeros((m_b, q1, n0, q2), dtype=complex)
    sqrt_p = np.sqrt(truth.power)

    for k, state in enumerate(truth.states):
        if truth.bs_blockage[k]:
            delay, doppler, aoa = link_params(state, scene.bs, scene.consts)
            w = sqrt_p * truth.symbols[k] * truth.bs_gains[k]
            for m in range(m_b):
                for q in range(q1):
                    for n in range(n0):
                        for i in range(q2):
                            out[m, q, n, i] += w * (
                                cmath.exp(1j * np.pi * m * np.cos(aoa))
                                * cmath.exp(-1j * cfg.omega_time1 * q * doppler)
                                * cmath.exp(-1j * cfg.omega_freq * n * delay)
                                * cmath.exp(-1j * cfg.omega_time2 * i * doppler)
                            )
        for r in range(scene.num_ris):
            if not truth.ris_blockage[k, r]:
                continue
            anchor, link = scene.ris_anchors[r], scene.ris_links[r]
            delay, doppler, aoa = link_params(state, anchor, scene.consts)
            total_delay = delay + link.delay_s
            w = sqrt_p * truth.symbols[k] * truth.ris_gains[k, r]
            # reflected per-symbol response, explicit inner loop
            reflected = []
            for q in range(q1):
                acc = 0j
                for e in range(anchor.num_elements):
                    acc += (
                        link.phase_profile[e, q]
                        * cmath.exp(1j * np.pi * e * np.cos(link.aod))
                        * cmath.exp(1j * np.pi * e * np.cos(aoa))
                    )
                reflected.append(acc * cmath.exp(-1j * cfg.omega_time1 * q * doppler))
            for m in range(m_b):
                for q in range(q1):
                    for n in range(n0):
                        for i in range(q2):
                            out[m, q, n, i] += w * (
                                cmath.exp(1j * np.pi * m * np.cos(link.aoa_at_bs))
                                * reflected[q]
                                * cmath.exp(-1j * cfg.omega_freq * n * total_delay)
                                * cmath.exp(-1j * cfg.omega_time2 * i * doppler)
                            )
    return out


def random_truth(rng, scene, num_users):
    num_ris = scene.num_ris
    states = [
        UserState(
            position=[rng.uniform(25, 65), rng.uniform(-25, 15)],
            velocity=rng.uniform(-40, 40, size=2),
        )
        for _ in range(num_users)
    ]
    bs_alpha = rng.integers(0, 2, size=num_users)
    ris_alpha = rng.integers(0, 2, size=(num_users, num_ris))
    for k in range(num_users):  # keep at least one path per user
        if bs_alpha[k] + ris_alpha[k].sum() == 0:
            if num_ris:
                ris_alpha[k, rng.integers(num_ris)] = 1
            else:
                bs_alpha[k] = 1
    return FrameTruth(
        states=states,
        symbols=rng.normal(size=num_users) + 1j * rng.normal(size=num_users),
        bs_blockage=bs_alpha,
        ris_blockage=ris_alpha,
        bs_gains=rng.normal(size=num_users) + 1j * rng.normal(size=num_users),
        ris_gains=rng.normal(size=(num_users, num_ris))
        + 1j * rng.normal(size=(num_users, num_ris)),
        power=rng.uniform(0.5, 2.0),
    )


class TestSynthesizeTensor:
    def test_all_ones_single_path(self):
        cfg = paper_waveform()
        bs = AnchorGeometry([0.0, 0.0], [0.0, 1.0], num_elements=6)
        scene = SceneModel(bs=bs, ris_anchors=[], ris_links=[], waveform=cfg, consts=CONSTS)
        # broadside user, zero velocity; rescale gain so the path weight is 1
        state = UserState(position=[30.0, 0.0], velocity=[0.0, 0.0])
        delay, _, _ = link_params(state, bs, CONSTS)
        gain = np.exp(1j * cfg.omega_freq * delay * np.arange(1))  # placeholder 1.0
        truth = FrameTruth(
            states=[state], symbols=[1.0], bs_blockage=[1],
            ris_blockage=np.zeros((1, 0), dtype=int),
            bs_gains=[1.0], ris_gains=np.zeros((1, 0)), power=1.0,
        )
        tensor = synthesize_tensor(truth, scene).data
        # delay ramp is the only non-constant factor; divide it out
        ramp = steering_phase(delay, cfg.isac_subcarriers, cfg.omega_freq)
        flattened = tensor / ramp[None, None, :, None]
        np.testing.assert_allclose(flattened, np.ones(cfg.tensor_shape), atol=1e-10)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(5)
        scene = small_scene(rng, num_ris=1, m_i=8)
        truth = random_truth(rng, scene, num_users=2)
        fast = synthesize_tensor(truth, scene).data
        slow = loop_oracle_tensor(truth, scene)
        assert np.abs(fast - slow).max() < 1e-10

    def test_blocked_link_contributes_nothing(self):
        rng = np.random.default_rng(6)
        scene = small_scene(rng, num_ris=1, m_i=8)
        truth = random_truth(rng, scene, num_users=2)
        blocked = FrameTruth(
            states=truth.states, symbols=truth.symbols,
            bs_blockage=np.zeros_like(truth.bs_blockage),
            ris_blockage=np.ones_like(truth.ris_blockage),
            bs_gains=truth.bs_gains * 100.0,  # changing a blocked gain is invisible
            ris_gains=truth.ris_gains, power=truth.power,
        )
        reference = FrameTruth(
            states=truth.states, symbols=truth.symbols,
            bs_blockage=np.zeros_like(truth.bs_blockage),
            ris_blockage=np.ones_like(truth.ris_blockage),
            bs_gains=truth.bs_gains, ris_gains=truth.ris_gains, power=truth.power,
        )
        np.testing.assert_array_equal(
            synthesize_tensor(blocked, scene).data,
            synthesize_tensor(reference, scene).data,
        )

    def test_linear_in_user_sets(self):
        rng = np.random.default_rng(7)
        scene = small_scene(rng, num_ris=2, m_i=8)
        truth = random_truth(rng, scene, num_users=3)

        def subset(idx):
            return FrameTruth(
                states=[truth.states[i] for i in idx],
                symbols=truth.symbols[idx],
                bs_blockage=truth.bs_blockage[idx],
                ris_blockage=truth.ris_blockage[idx],
                bs_gains=truth.bs_gains[idx],
                ris_gains=truth.ris_gains[idx],
                power=truth.power,
            )

        full = synthesize_tensor(truth, scene).data
        parts = (
            synthesize_tensor(subset([0]), scene).data
            + synthesize_tensor(subset([1, 2]), scene).data
        )
        assert np.abs(full - parts).max() < 1e-10

    def test_single_path_unfolding_rank_one(self):
        rng = np.random.default_rng(8)
        scene = small_scene(rng, num_ris=0)
        truth = random_truth(rng, scene, num_users=1)
        tensor = synthesize_tensor(truth, scene).data
        unfolded = tensor.reshape(tensor.shape[0], -1)
        s = np.linalg.svd(unfolded, compute_uv=False)
        assert s[1] < 1e-8 * s[0]

    def test_one_symbol_per_user_enforced(self):
        rng = np.random.default_rng(9)
        scene = small_scene(rng, num_ris=1, m_i=8)
        truth = random_truth(rng, scene, num_users=2)
        with pytest.raises(ValueError):
            FrameTruth(
                states=truth.states,
                symbols=np.ones((2, 12), dtype=complex),  # per-subcarrier rejected
                bs_blockage=truth.bs_blockage, ris_blockage=truth.ris_blockage,
                bs_gains=truth.bs_gains, ris_gains=truth.ris_gains,
            )

    def test_footnote_constraint_enforced(self):
        rng = np.random.default_rng(10)
        scene = small_scene(rng, num_ris=1, m_i=8)
        truth = random_truth(rng, scene, num_users=1)
        with pytest.raises(ValueError):
            FrameTruth(
                states=truth.states, symbols=truth.symbols,
                bs_blockage=[0], ris_blockage=[[0]],
                bs_gains=truth.bs_gains, ris_gains=truth.ris_gains,
            )

    def test_shape_mismatch_raises(self):
        rng = np.random.default_rng(11)
        scene = small_scene(rng, num_ris=1, m_i=8)
        truth = random_truth(rng, scene, num_users=2)
        wrong = small_scene(rng, num_ris=2, m_i=8)
        with pytest.raises(ConfigMismatch):
            synthesize_tensor(truth, wrong)


class TestNoiseCalibration:
    def test_zero_db(self):
        rng = np.random.default_rng(12)
        scene = small_scene(rng, num_ris=1, m_i=8)
        truth = random_truth(rng, scene, num_users=2)
        signal = synthesize_tensor(truth, scene)
        sigma2 = noise_power_for_snr(signal, 0.0)
        energy = float(np.vdot(signal.data, signal.data).real)
        assert sigma2 == pytest.approx(energy / signal.data.size)

    def test_decade_scaling(self):
        rng = np.random.default_rng(13)
        scene = small_scene(rng, num_ris=1, m_i=8)
        signal = synthesize_tensor(random_truth(rng, scene, 2), scene)
        assert noise_power_for_snr(signal, -10.0) == pytest.approx(
            10.0 * noise_power_for_snr(signal, 0.0)
        )

    def test_zero_signal_raises(self):
        with pytest.raises(ZeroSignal):
            noise_power_for_snr(np.zeros((2, 2, 2, 2), dtype=complex), 0.0)

    def test_monte_carlo_snr_within_half_db(self):
        rng = np.random.default_rng(14)
        scene = small_scene(rng, num_ris=2, m_i=64)
        truth = random_truth(rng, scene, num_users=3)
        signal = synthesize_tensor(truth, scene)
        sigma2 = noise_power_for_snr(signal, -10.0)
        shape = signal.data.shape
        measured = []
        for _ in range(100):
            noise = np.sqrt(sigma2 / 2) * (
                rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
            )
            measured.append(measured_snr_db(signal.data, noise))
        assert -10.5 < np.mean(measured) < -9.5


class TestTensorDump:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(15)
        scene = small_scene(rng, num_ris=1, m_i=8)
        tensor = synthesize_tensor(random_truth(rng, scene, 2), scene)
        path = tmp_path / "frame.bin"
        save_tensor(path, tensor)
        loaded = load_tensor(path)
        np.testing.assert_array_equal(loaded.data, tensor.data)

    def test_golden_bytes(self, tmp_path):
        data = np.array(
            [[[[1.0 + 2.0j, 3.0 - 4.0j]]], [[[0.5j, -1.0]]]], dtype=complex
        )  # shape (2, 1, 1, 2)
        path = tmp_path / "golden.bin"
        save_tensor(path, ReceivedTensor(data=data))
        raw = path.read_bytes()
        header = np.frombuffer(raw[:16], dtype="<u4")
        np.testing.assert_array_equal(header, [2, 1, 1, 2])
        floats = np.frombuffer(raw[16:], dtype="<f8")
        np.testing.assert_array_equal(
            floats, [1.0, 2.0, 3.0, -4.0, 0.0, 0.5, -1.0, 0.0]
        )
