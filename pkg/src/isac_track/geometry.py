"""Kinematic-state to link-parameter maps for array anchors.

Each anchor (base station or reflecting surface) sees a moving user through
three scalar link parameters: propagation delay, Doppler shift, and angle of
arrival at the anchor's linear array.  This module provides those maps and
their analytic Jacobians with respect to the 4D user state
``[px, py, vx, vy]``, which the estimators use for local linearization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AngularSingularity, DegenerateGeometry

SPEED_OF_LIGHT = 299792458.0

# Below this separation the direction vector is numerically meaningless.
MIN_ANCHOR_DISTANCE_M = 1e-6

# Jacobian guard: the arccos derivative diverges toward the array axis.
ENDFIRE_GUARD_RAD = 1e-4


def _as_vec2(value, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (2,):
        raise ValueError(f"{name} must be a 2-vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be finite, got {arr}")
    return arr


@dataclass(frozen=True)
class UserState:
    """2D position (m) and velocity (m/s) of one user at one frame."""

    position: np.ndarray
    velocity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", _as_vec2(self.position, "position"))
        object.__setattr__(self, "velocity", _as_vec2(self.velocity, "velocity"))

    def as_vector(self) -> np.ndarray:
        """Stacked state vector [px, py, vx, vy]."""
        return np.concatenate([self.position, self.velocity])

    @classmethod
    def from_vector(cls, psi) -> "UserState":
        psi = np.asarray(psi, dtype=float)
        return cls(position=psi[:2], velocity=psi[2:4])


@dataclass(frozen=True)
class AnchorGeometry:
    """A uniform linear array acting as a sensing anchor.

    ``orientation`` is the unit vector along the array axis.  Users are
    assumed to lie on the side of the array reached by rotating the
    orientation 90 degrees clockwise (see :meth:`side_normal`); the AOA in
    [0, pi] plus that convention fixes the direction unambiguously in 2D.
    """

    position: np.ndarray
    orientation: np.ndarray
    num_elements: int

    def __post_init__(self):
        object.__setattr__(self, "position", _as_vec2(self.position, "position"))
        object.__setattr__(
            self, "orientation", _as_vec2(self.orientation, "orientation")
        )
        norm = float(np.linalg.norm(self.orientation))
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"orientation must be unit-norm, |e| = {norm!r}")
        if self.num_elements < 1:
            raise ValueError("num_elements must be positive")

    def side_normal(self) -> np.ndarray:
        """Unit normal pointing into the half-plane users occupy."""
        e = self.orientation
        return np.array([e[1], -e[0]])


@dataclass(frozen=True)
class PhysicalConstants:
    """Carrier wavelength and propagation speed."""

    carrier_wavelength: float
    speed_of_light: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if self.carrier_wavelength <= 0:
            raise ValueError("carrier_wavelength must be positive")
        if self.speed_of_light <= 0:
            raise ValueError("speed_of_light must be positive")

    @classmethod
    def from_carrier(
        cls, carrier_hz: float, speed_of_light: float = SPEED_OF_LIGHT
    ) -> "PhysicalConstants":
        return cls(
            carrier_wavelength=speed_of_light / carrier_hz,
            speed_of_light=speed_of_light,
        )


def _offset(state: UserState, anchor: AnchorGeometry):
    """Anchor-to-user offset, distance, and unit direction."""
    diff = state.position - anchor.position
    dist = float(np.linalg.norm(diff))
    if dist <= MIN_ANCHOR_DISTANCE_M:
        raise DegenerateGeometry(
            f"user at {state.position} coincides with anchor at {anchor.position}"
        )
    return diff, dist, diff / dist


def delay_from_state(
    state: UserState, anchor: AnchorGeometry, consts: PhysicalConstants
) -> float:
    """One-way propagation delay in seconds."""
    _, dist, _ = _offset(state, anchor)
    return dist / consts.speed_of_light


def doppler_from_state(
    state: UserState, anchor: AnchorGeometry, consts: PhysicalConstants
) -> float:
    """Doppler shift in Hz: radial speed away from the anchor over wavelength."""
    _, _, unit = _offset(state, anchor)
    return float(state.velocity @ unit) / consts.carrier_wavelength


def aoa_from_state(state: UserState, anchor: AnchorGeometry) -> float:
    """Angle of arrival in [0, pi] between array axis and user direction."""
    _, _, unit = _offset(state, anchor)
    cos_angle = float(anchor.orientation @ unit)
    return float(np.arccos(np.clip(cos_angle, -1.0, 1.0)))


def cos_aoa_from_state(state: UserState, anchor: AnchorGeometry) -> float:
    """Cosine of the AOA; the quantity the array actually resolves."""
    _, _, unit = _offset(state, anchor)
    return float(np.clip(anchor.orientation @ unit, -1.0, 1.0))


def link_params(
    state: UserState, anchor: AnchorGeometry, consts: PhysicalConstants
) -> tuple[float, float, float]:
    """(delay s, Doppler Hz, AOA rad) for one user-anchor link."""
    return (
        delay_from_state(state, anchor, consts),
        doppler_from_state(state, anchor, consts),
        aoa_from_state(state, anchor),
    )


def link_params_jacobian(
    state: UserState, anchor: AnchorGeometry, consts: PhysicalConstants
) -> np.ndarray:
    """3x4 Jacobian of (delay, Doppler, AOA) w.r.t. [px, py, vx, vy].

    Raises AngularSingularity when the AOA is within ENDFIRE_GUARD_RAD of the
    array axis, where the arccos derivative blows up.
    """
    _, dist, unit = _offset(state, anchor)
    proj = np.eye(2) - np.outer(unit, unit)  # d(unit)/d(position) * dist

    jac = np.zeros((3, 4))
    # delay: |p - p_a| / c
    jac[0, :2] = unit / consts.speed_of_light
    # Doppler: v . unit / lambda
    jac[1, :2] = (proj @ state.velocity) / (dist * consts.carrier_wavelength)
    jac[1, 2:] = unit / consts.carrier_wavelength
    # AOA: arccos(orientation . unit)
    cos_angle = float(np.clip(anchor.orientation @ unit, -1.0, 1.0))
    angle = float(np.arccos(cos_angle))
    if min(angle, np.pi - angle) < ENDFIRE_GUARD_RAD:
        raise AngularSingularity(
            f"AOA {angle:.2e} rad within {ENDFIRE_GUARD_RAD} of the array axis"
        )
    sin_angle = np.sqrt(1.0 - cos_angle**2)
    jac[2, :2] = -(proj @ anchor.orientation) / (dist * sin_angle)
    return jac


def cos_aoa_gradient(state: UserState, anchor: AnchorGeometry) -> np.ndarray:
    """Gradient of cos(AOA) w.r.t. user position; finite even at endfire."""
    _, dist, unit = _offset(state, anchor)
    proj = np.eye(2) - np.outer(unit, unit)
    return (proj @ anchor.orientation) / dist
