"""Hybrid per-frame inference over link parameters, user states, and symbols.

Each frame couples three layers of unknowns:

* per-link phase-mapped parameters (cos of arrival angle, total delay,
  Doppler) carried by von Mises beliefs,
* per-user kinematic states (2D position and velocity) carried by Gaussians,
* per-link effective gains and per-user transmit symbols carried by scalar
  complex Gaussians.

The frame solver alternates coordinate-ascent updates of the link parameters
against the residual tensor (each variable maximizes a surrogate objective
that is the prior log-density plus the data correlation term), a greedy
on/off search over blockage indicators, and damped Gaussian messages that
project the phase-domain evidence back onto positions and velocities.
Forward prediction through the motion model chains the frames into a causal
tracker that also resolves the transmit symbols blindly, anchoring the
unobservable common phase at the first frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .beliefs import (
    ComplexGaussianBelief,
    GaussianBelief,
    VonMisesBelief,
    cgaussian_fuse,
    gaussian_fuse,
    gaussian_to_vm,
    vm_to_gaussian,
    wrap_angle,
)
from .errors import (
    AllNonInformative,
    NoActiveLinks,
    NoInformativeData,
    TooDiffuse,
)
from .geometry import (
    AnchorGeometry,
    UserState,
    cos_aoa_from_state,
    cos_aoa_gradient,
    delay_from_state,
    doppler_from_state,
)
from .mobility import MotionModel
from .waveform import (
    ReceivedTensor,
    SceneModel,
    ris_profile_matrix,
    steering_phase,
    steering_ula_cos,
)

PARAM_COS_AOA = "cos_aoa"
PARAM_DELAY = "delay"
PARAM_DOPPLER = "doppler"

_SYMBOL_PRIOR = ComplexGaussianBelief(mean=0.0, variance=1.0)

# Geometry guards for the polar-to-Cartesian position message.
_MIN_SIN_AOA = 1e-3
_MIN_RANGE_M = 0.5


@dataclass(frozen=True)
class HvmpConfig:
    """Iteration counts, grids, and thresholds of the frame solver."""

    outer_iterations: int = 8
    inner_iterations: int = 3
    gn_iterations: int = 2
    grid_points: int = 512
    newton_steps: int = 5
    damping: float = 0.7
    state_tol_m: float = 1e-3
    activation_threshold: float = 9.0
    kappa_min: float = 2.0

    def __post_init__(self):
        for name in ("outer_iterations", "inner_iterations", "gn_iterations",
                     "grid_points", "newton_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.damping <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        if self.state_tol_m <= 0:
            raise ValueError("state_tol_m must be positive")
        if self.activation_threshold <= 0:
            raise ValueError("activation_threshold must be positive")


@dataclass
class StateBeliefs:
    """Per-user Gaussian position/velocity beliefs and symbol beliefs."""

    positions: list[GaussianBelief]
    velocities: Optional[list[GaussianBelief]]
    symbols: list[ComplexGaussianBelief]

    @property
    def num_users(self) -> int:
        return len(self.positions)

    def position_means(self) -> np.ndarray:
        return np.array([b.mean for b in self.positions])


@dataclass
class LinkBelief:
    """Converged per-link beliefs for one frame."""

    active: bool
    cos_aoa: VonMisesBelief
    delay: VonMisesBelief
    doppler: Optional[VonMisesBelief]
    gain: ComplexGaussianBelief
    point: "LinkPoint"


@dataclass
class UserLinkBeliefs:
    direct: LinkBelief
    reflected: list[LinkBelief]

    def all_links(self) -> list[LinkBelief]:
        return [self.direct, *self.reflected]


@dataclass
class LinkBeliefSet:
    users: list[UserLinkBeliefs]


@dataclass
class FrameResult:
    states: StateBeliefs
    links: LinkBeliefSet
    diagnostics: list[dict]


@dataclass
class LinkPoint:
    """Point estimates of the steering parameters of one link."""

    cos_aoa: float
    delay: float          # total delay including any infrastructure hop
    doppler: float


class LinkSteeringModel:
    """Steering-tensor factory and contraction helpers for one link.

    Direct links steer all four tensor modes from (cos AOA, delay, Doppler).
    Reflected links have a fixed receiver-side mode; their angle enters
    through the surface profile projection, and their delay includes the
    known infrastructure hop.
    """

    def __init__(self, scene: SceneModel, user: int, ris_index: Optional[int] = None):
        cfg = scene.waveform
        self.cfg = cfg
        self.consts = scene.consts
        self.user = user
        self.ris_index = ris_index
        self.is_reflected = ris_index is not None
        if self.is_reflected:
            link = scene.ris_links[ris_index]
            self.anchor = scene.ris_anchors[ris_index]
            self.delay_offset = link.delay_s
            self.infra_gain = complex(link.gain)
            self.rx_mode = steering_ula_cos(
                math.cos(link.aoa_at_bs), cfg.bs_antennas, cfg.omega_spatial
            )
            self.profile = ris_profile_matrix(link, cfg.omega_spatial)
            self.profile_gram = self.profile.conj().T @ self.profile
        else:
            self.anchor = scene.bs
            self.delay_offset = 0.0
            self.infra_gain = 1.0 + 0.0j
            self.rx_mode = None
            self.profile = None
            self.profile_gram = None

    @property
    def key(self) -> tuple:
        return (self.user, "ris" if self.is_reflected else "bs", self.ris_index)

    def label(self) -> str:
        if self.is_reflected:
            return f"u{self.user}_ris{self.ris_index}"
        return f"u{self.user}_bs"

    # -- steering ----------------------------------------------------------

    def element_steering(self, cos_aoa: float | np.ndarray) -> np.ndarray:
        length = self.cfg.ris_elements if self.is_reflected else self.cfg.bs_antennas
        grid = np.atleast_1d(np.asarray(cos_aoa, dtype=float))
        vecs = np.exp(
            1j * self.cfg.omega_spatial * np.outer(grid, np.arange(length))
        )
        return vecs if np.ndim(cos_aoa) else vecs[0]

    def modes(self, point: LinkPoint) -> tuple[np.ndarray, ...]:
        cfg = self.cfg
        if self.is_reflected:
            m1 = self.rx_mode
            m2 = (self.profile @ self.element_steering(point.cos_aoa)) * steering_phase(
                point.doppler, cfg.group_symbols, cfg.omega_time1
            )
        else:
            m1 = self.element_steering(point.cos_aoa)
            m2 = steering_phase(point.doppler, cfg.group_symbols, cfg.omega_time1)
        m3 = steering_phase(point.delay, cfg.isac_subcarriers, cfg.omega_freq)
        m4 = steering_phase(point.doppler, cfg.num_groups, cfg.omega_time2)
        return m1, m2, m3, m4

    def steering_tensor(self, point: LinkPoint) -> np.ndarray:
        m1, m2, m3, m4 = self.modes(point)
        return np.einsum("m,q,n,i->mqni", m1, m2, m3, m4, optimize=True)

    def norm_sq(self, point: LinkPoint) -> float:
        m1, m2, m3, m4 = self.modes(point)
        return float(
            np.vdot(m1, m1).real
            * np.vdot(m2, m2).real
            * np.vdot(m3, m3).real
            * np.vdot(m4, m4).real
        )

    def slice_norm_sq(self, point: LinkPoint) -> float:
        """Norm of one group slice (modes 1-3 only)."""
        m1, m2, m3, _ = self.modes(point)
        return float(
            np.vdot(m1, m1).real * np.vdot(m2, m2).real * np.vdot(m3, m3).real
        )

    # -- geometry-side predictions -----------------------------------------

    def point_from_state(self, state: UserState) -> LinkPoint:
        return LinkPoint(
            cos_aoa=cos_aoa_from_state(state, self.anchor),
            delay=delay_from_state(state, self.anchor, self.consts) + self.delay_offset,
            doppler=doppler_from_state(state, self.anchor, self.consts),
        )

    def unit_direction(self, position: np.ndarray) -> np.ndarray:
        diff = position - self.anchor.position
        return diff / np.linalg.norm(diff)

    def path_amplitude(self, position: np.ndarray, wavelength: float) -> complex:
        """Free-space gain model at the estimated user position."""
        dist = float(np.linalg.norm(position - self.anchor.position))
        return wavelength / (4.0 * np.pi * max(dist, 1.0)) * self.infra_gain


def _mapping_frequencies(cfg) -> dict[str, float]:
    return {
        PARAM_COS_AOA: cfg.omega_spatial,
        PARAM_DELAY: -cfg.omega_freq,
        PARAM_DOPPLER: -cfg.omega_time1,
    }


# ---------------------------------------------------------------------------
# Surrogate-objective parameter updates
# ---------------------------------------------------------------------------

def _objective_evaluator(
    residual: np.ndarray,
    model: LinkSteeringModel,
    point: LinkPoint,
    which: str,
    gain: ComplexGaussianBelief,
    noise_var: float,
    slice_gains: Optional[np.ndarray] = None,
) -> tuple[Callable[[np.ndarray], np.ndarray], float]:
    """Build a vectorized data-term evaluator J_data(candidate values).

    Returns the evaluator and the magnitude of its linear coefficient, used
    for the no-information guard.  All constant terms are dropped.
    """
    cfg = model.cfg
    m1, m2, m3, m4 = model.modes(point)
    if slice_gains is not None:
        # Non-coherent group handling: per-slice gains take the place of the
        # group-mode steering vector.
        m4 = slice_gains
        w_mean, w_second = 1.0 + 0.0j, 1.0
    else:
        w_mean = gain.mean
        var = 0.0 if np.isinf(gain.variance) else gain.variance
        w_second = abs(gain.mean) ** 2 + var
    two_over_s2 = 2.0 / noise_var

    if which == PARAM_DELAY:
        rvec = np.einsum(
            "mqni,m,q,i->n", residual, m1.conj(), m2.conj(), m4.conj(), optimize=True
        )
        coeff = two_over_s2 * w_mean.conjugate() * rvec
        steps = np.arange(cfg.isac_subcarriers)

        def evaluate(values: np.ndarray) -> np.ndarray:
            grid = np.exp(1j * cfg.omega_freq * np.outer(values, steps))
            return (grid @ coeff).real

        return evaluate, float(np.linalg.norm(coeff))

    if which == PARAM_DOPPLER:
        if model.is_reflected:
            base = model.profile @ model.element_steering(point.cos_aoa)
            rmat = np.einsum(
                "mqni,m,n,q->qi", residual, m1.conj(), m3.conj(), base.conj(),
                optimize=True,
            )
        else:
            rmat = np.einsum(
                "mqni,m,n->qi", residual, m1.conj(), m3.conj(), optimize=True
            )
        coeff = two_over_s2 * w_mean.conjugate() * rmat
        q_steps = np.arange(cfg.group_symbols)
        i_steps = np.arange(cfg.num_groups)

        def evaluate(values: np.ndarray) -> np.ndarray:
            t1 = np.exp(1j * cfg.omega_time1 * np.outer(values, q_steps))
            t2 = np.exp(1j * cfg.omega_time2 * np.outer(values, i_steps))
            return np.einsum("gq,qi,gi->g", t1, coeff, t2, optimize=True).real

        return evaluate, float(np.linalg.norm(coeff))

    if which != PARAM_COS_AOA:
        raise ValueError(f"unknown parameter {which!r}")

    if model.is_reflected:
        rvec = np.einsum(
            "mqni,m,n,i->q", residual, m1.conj(), m3.conj(), m4.conj(), optimize=True
        )
        t1 = steering_phase(point.doppler, cfg.group_symbols, cfg.omega_time1)
        g = model.profile.conj().T @ (t1.conj() * rvec)
        coeff = two_over_s2 * w_mean.conjugate() * g
        gram = model.profile_gram
        other_norms = (
            np.vdot(m1, m1).real
            * np.vdot(m3, m3).real
            * np.vdot(m4, m4).real
        )
        quad_scale = w_second / noise_var * other_norms

        def evaluate(values: np.ndarray) -> np.ndarray:
            vecs = model.element_steering(values)
            linear = (vecs.conj() @ coeff).real
            quad = np.einsum("ge,ge->g", vecs.conj(), vecs @ gram.T, optimize=True).real
            return linear - quad_scale * quad

        return evaluate, float(np.linalg.norm(coeff))

    rvec = np.einsum(
        "mqni,q,n,i->m", residual, m2.conj(), m3.conj(), m4.conj(), optimize=True
    )
    coeff = two_over_s2 * w_mean.conjugate() * rvec

    def evaluate(values: np.ndarray) -> np.ndarray:
        vecs = model.element_steering(values)
        return (vecs.conj() @ coeff).real

    return evaluate, float(np.linalg.norm(coeff))


def _search_window(
    model: LinkSteeringModel, which: str, prior: VonMisesBelief, center: float
) -> tuple[float, float]:
    """Grid interval for one parameter, prior-informed and period-capped."""
    cfg = model.cfg
    if which == PARAM_COS_AOA:
        return -1.0, 1.0
    if which == PARAM_DELAY:
        omega = cfg.omega_freq
        period = 2.0 * np.pi / omega
        cell = period / cfg.isac_subcarriers
    else:
        omega = cfg.omega_time1
        period = 2.0 * np.pi / omega
        cell = 2.0 * np.pi / (cfg.omega_time2 * cfg.num_groups)
    if prior.concentration > 0:
        sigma = 1.0 / (abs(omega) * np.sqrt(prior.concentration))
    else:
        sigma = np.inf
    half = min(max(4.0 * sigma, 4.0 * cell), period / 2.0)
    return center - half, center + half


def vmp_update_parameter(
    residual: np.ndarray,
    model: LinkSteeringModel,
    point: LinkPoint,
    which: str,
    gain: ComplexGaussianBelief,
    prior: VonMisesBelief,
    noise_var: float,
    cfg: HvmpConfig,
    slice_gains: Optional[np.ndarray] = None,
) -> tuple[VonMisesBelief, float]:
    """Coordinate update of one link parameter on the surrogate objective.

    Grid-search the prior-plus-data objective over the admissible window,
    refine with Newton steps, and fit a von Mises belief from the local
    curvature at the optimum.  Returns the belief (prior included) and the
    refined point estimate.
    """
    evaluate_data, lin_norm = _objective_evaluator(
        residual, model, point, which, gain, noise_var, slice_gains
    )
    if lin_norm < 1e-12:
        raise NoInformativeData(
            f"{which} update for {model.label()}: residual carries no signal"
        )
    omega = _mapping_frequencies(model.cfg)[which]
    center = getattr(point, which)

    def objective(values: np.ndarray) -> np.ndarray:
        data = evaluate_data(np.atleast_1d(values))
        return data + prior.concentration * np.cos(
            omega * np.atleast_1d(values) - prior.mean_direction
        )

    lo, hi = _search_window(model, which, prior, center)
    grid = np.linspace(lo, hi, cfg.grid_points)
    values = objective(grid)
    best = float(grid[int(np.argmax(values))])
    best_val = float(values.max())

    step = (hi - lo) / cfg.grid_points
    h = max(step / 16.0, abs(best) * 1e-9, 1e-18)
    for _ in range(cfg.newton_steps):
        trio = objective(np.array([best - h, best, best + h]))
        d1 = (trio[2] - trio[0]) / (2.0 * h)
        d2 = (trio[2] - 2.0 * trio[1] + trio[0]) / h**2
        if d2 >= 0.0:
            break
        candidate = best - d1 / d2
        candidate = min(max(candidate, lo), hi)
        cand_val = float(objective(np.array([candidate]))[0])
        if cand_val < trio[1]:
            break
        best, best_val = candidate, cand_val

    trio = objective(np.array([best - h, best, best + h]))
    curvature = (trio[2] - 2.0 * trio[1] + trio[0]) / h**2
    kappa = -curvature / omega**2
    if not np.isfinite(kappa) or kappa <= 0.0:
        return prior, center
    kappa = min(kappa, 1e15)
    return VonMisesBelief(mean_direction=omega * best, concentration=kappa), best


def mmse_gain_update(
    residual_with_own: np.ndarray,
    model: LinkSteeringModel,
    point: LinkPoint,
    prior: ComplexGaussianBelief,
    noise_var: float,
) -> ComplexGaussianBelief:
    """Linear-Gaussian estimate of the effective link gain.

    Conditional on the current steering parameters the observation is linear
    in the scalar gain, so the posterior is the ridge-regularized projection
    of the residual onto the link's steering tensor.
    """
    steering = model.steering_tensor(point)
    norm_sq = float(np.vdot(steering, steering).real)
    correlation = complex(np.vdot(steering, residual_with_own))
    ridge = 0.0 if np.isinf(prior.variance) else noise_var / prior.variance
    prior_pull = 0.0 if np.isinf(prior.variance) else prior.mean * ridge
    denom = norm_sq + ridge
    return ComplexGaussianBelief(
        mean=(correlation + prior_pull) / denom, variance=noise_var / denom
    )


def mmse_slice_gains(
    residual_with_own: np.ndarray,
    model: LinkSteeringModel,
    point: LinkPoint,
    prior: ComplexGaussianBelief,
    noise_var: float,
) -> tuple[np.ndarray, float]:
    """Per-group independent gain estimates (non-coherent group handling)."""
    m1, m2, m3, _ = model.modes(point)
    slice_steering = np.einsum("m,q,n->mqn", m1, m2, m3, optimize=True)
    norm_sq = float(np.vdot(slice_steering, slice_steering).real)
    correlations = np.einsum(
        "mqni,mqn->i", residual_with_own, slice_steering.conj(), optimize=True
    )
    ridge = 0.0 if np.isinf(prior.variance) else noise_var / prior.variance
    prior_pull = 0.0 if np.isinf(prior.variance) else prior.mean * ridge
    denom = norm_sq + ridge
    return (correlations + prior_pull) / denom, noise_var / denom


def update_blockage(
    active: dict,
    removal_gain: Callable,
    addition_gain: Callable,
    user_of: dict,
    threshold: float,
) -> dict:
    """Greedy on/off sweep over blockage indicators.

    ``removal_gain(key)`` is the residual-energy increase if an active link
    is dropped; ``addition_gain(key)`` the decrease if an inactive link is
    added (both evaluated against the current active set; the callables see
    mutations of ``active``).  A link is dropped when its removal costs less
    than ``threshold`` and added when it explains more than ``threshold``.
    Every user always keeps at least one active link.
    """
    active = dict(active)
    for _ in range(len(active) + 1):
        changed = False
        for key in list(active):
            if not active[key]:
                continue
            user = user_of[key]
            remaining = sum(
                1 for k, on in active.items() if on and user_of[k] == user
            )
            if remaining <= 1:
                continue
            if removal_gain(key) < threshold:
                active[key] = False
                changed = True
        candidates = [
            (addition_gain(key), key) for key, on in active.items() if not on
        ]
        candidates = [(gain, key) for gain, key in candidates if gain > threshold]
        if candidates:
            _, best = max(candidates)
            active[best] = True
            changed = True
        if not changed:
            break
    return active


# ---------------------------------------------------------------------------
# Gaussian state messages
# ---------------------------------------------------------------------------

def position_message_from_link(
    cos_aoa: VonMisesBelief,
    delay: VonMisesBelief,
    reference: LinkPoint,
    model: LinkSteeringModel,
    kappa_min: float,
) -> GaussianBelief:
    """Range/bearing evidence of one link as a 2D Cartesian Gaussian.

    The two circular beliefs are lifted to Gaussians at the branch nearest
    the predicted parameters, giving a polar (range, cos-bearing) pair about
    the anchor; first-order error propagation maps them to Cartesian.
    """
    cfg = model.cfg
    c_gauss = vm_to_gaussian(
        cos_aoa, cfg.omega_spatial, reference=reference.cos_aoa, kappa_min=kappa_min
    )
    tau_gauss = vm_to_gaussian(
        delay, -cfg.omega_freq, reference=reference.delay, kappa_min=kappa_min
    )
    c0 = model.consts.speed_of_light
    dist = (float(tau_gauss.mean[0]) - model.delay_offset) * c0
    sigma_d = math.sqrt(float(tau_gauss.covariance[0, 0])) * c0
    if dist < _MIN_RANGE_M:
        raise TooDiffuse(f"{model.label()}: implied range {dist:.3g} m is unusable")
    c_hat = float(np.clip(c_gauss.mean[0], -1.0, 1.0))
    sin_hat = math.sqrt(max(1.0 - c_hat**2, 0.0))
    if sin_hat < _MIN_SIN_AOA:
        raise TooDiffuse(f"{model.label()}: bearing too close to the array axis")
    axis = model.anchor.orientation
    normal = model.anchor.side_normal()
    direction = c_hat * axis + sin_hat * normal
    mean = model.anchor.position + dist * direction
    d_dir_dc = axis - (c_hat / sin_hat) * normal
    jac = np.column_stack([direction, dist * d_dir_dc])
    diag = np.diag([sigma_d**2, float(c_gauss.covariance[0, 0])])
    return GaussianBelief(mean=mean, covariance=jac @ diag @ jac.T)


def position_message_from_links(
    entries: Sequence[tuple[VonMisesBelief, VonMisesBelief, LinkPoint, LinkSteeringModel]],
    kappa_min: float,
) -> tuple[list[Optional[GaussianBelief]], GaussianBelief]:
    """Per-link Cartesian position messages and their fusion.

    Links whose circular beliefs are too diffuse (or geometrically unusable)
    are skipped and reported as ``None``; raises AllNonInformative when no
    link qualifies.
    """
    per_link: list[Optional[GaussianBelief]] = []
    usable = []
    for cos_aoa, delay, reference, model in entries:
        try:
            message = position_message_from_link(
                cos_aoa, delay, reference, model, kappa_min
            )
        except TooDiffuse:
            per_link.append(None)
            continue
        per_link.append(message)
        usable.append(message)
    if not usable:
        raise AllNonInformative("no link produced a usable position message")
    return per_link, gaussian_fuse(usable)


def velocity_message_from_dopplers(
    entries: Sequence[tuple[VonMisesBelief, float, np.ndarray]],
    model_cfg,
    wavelength: float,
    kappa_min: float,
) -> GaussianBelief:
    """Weighted least-squares velocity evidence from Doppler beliefs.

    Each entry is (Doppler belief, predicted Doppler for branch selection,
    unit direction toward the user).  Every link contributes one linear
    constraint along its direction; with fewer than two well-conditioned
    constraints the returned precision is rank-deficient, informative only
    along the measured directions.
    """
    precision = np.zeros((2, 2))
    shift = np.zeros(2)
    used = 0
    for belief, reference, direction in entries:
        if belief.concentration < kappa_min:
            continue
        gauss = vm_to_gaussian(
            belief, -model_cfg.omega_time1, reference=reference, kappa_min=kappa_min
        )
        nu_hat = float(gauss.mean[0])
        var = float(gauss.covariance[0, 0])
        h = direction / wavelength
        precision += np.outer(h, h) / var
        shift += h * nu_hat / var
        used += 1
    if used == 0:
        raise NoActiveLinks("no Doppler belief passed the concentration threshold")
    return GaussianBelief.from_precision(precision, shift)


def symbol_message(
    gains: Sequence[tuple[ComplexGaussianBelief, complex]],
    power: float,
    prior: ComplexGaussianBelief = _SYMBOL_PRIOR,
) -> ComplexGaussianBelief:
    """Fuse per-link gain beliefs into a transmit-symbol belief.

    Each active link contributes the pseudo-observation gain / (sqrt(P)
    * modeled path amplitude); the unit-power circular prior regularizes the
    blind estimate.
    """
    if not gains:
        raise NoActiveLinks("symbol message requested with no active links")
    pseudo = [prior]
    for gain, amplitude in gains:
        if not gain.is_informative() or amplitude == 0:
            continue
        scale = math.sqrt(power) * amplitude
        pseudo.append(
            ComplexGaussianBelief(
                mean=gain.mean / scale, variance=gain.variance / abs(scale) ** 2
            )
        )
    return cgaussian_fuse(pseudo)


def forward_predict(posterior: StateBeliefs, model: MotionModel) -> StateBeliefs:
    """Propagate the factored state beliefs through the motion model.

    The joint 4D covariance is assembled block-diagonally (the factored
    representation carries no position/velocity cross terms), pushed through
    the transition, and re-factored.  Symbol beliefs reset to the prior:
    symbols are independent across frames.
    """
    f = model.transition
    q = model.process_noise
    positions, velocities = [], []
    for pos, vel in zip(posterior.positions, posterior.velocities):
        joint_mean = np.concatenate([pos.mean, vel.mean])
        joint_cov = np.zeros((4, 4))
        joint_cov[:2, :2] = pos.covariance
        joint_cov[2:, 2:] = vel.covariance
        mean = f @ joint_mean
        cov = f @ joint_cov @ f.T + q
        positions.append(GaussianBelief(mean=mean[:2], covariance=cov[:2, :2]))
        velocities.append(GaussianBelief(mean=mean[2:], covariance=cov[2:, 2:]))
    symbols = [_SYMBOL_PRIOR] * posterior.num_users
    return StateBeliefs(positions=positions, velocities=velocities, symbols=symbols)


# ---------------------------------------------------------------------------
# Frame engine
# ---------------------------------------------------------------------------

@dataclass
class _LinkWork:
    """Mutable per-link working state inside one frame."""

    model: LinkSteeringModel
    point: LinkPoint
    priors: dict
    posts: dict
    gain: ComplexGaussianBelief
    slice_gains: Optional[np.ndarray]
    slice_var: float
    active: bool
    contribution: np.ndarray
    amplitude: complex = 0.0 + 0.0j
    predicted: LinkPoint = None

    def extrinsic(self, which: str) -> VonMisesBelief:
        return VonMisesBelief.from_natural(
            self.posts[which].natural - self.priors[which].natural
        )


class HvmpTracker:
    """Online multi-frame tracker around the per-frame factor-graph solver.

    ``track_velocity=False`` with ``coherent_groups=False`` yields the
    position-only variant: Doppler is a nuisance absorbed by independent
    per-group gains, and prediction degrades to a position random walk.
    """

    def __init__(
        self,
        scene: SceneModel,
        motion: MotionModel,
        cfg: Optional[HvmpConfig] = None,
        *,
        power: float = 1.0,
        track_velocity: bool = True,
        coherent_groups: bool = True,
        position_walk_std: float = 0.3,
    ):
        self.scene = scene
        self.motion = motion
        self.cfg = cfg or HvmpConfig()
        self.power = power
        self.track_velocity = track_velocity
        self.coherent_groups = coherent_groups
        self.position_walk_std = position_walk_std
        # Blind phase anchors: estimated once tracking starts, relative
        # offsets refined across frames, common mode left to the metric's
        # global alignment.
        self._phases: dict = {}
        self._phase_counts: dict = {}

    # -- construction helpers ---------------------------------------------

    def _link_models(self, num_users: int) -> list[LinkSteeringModel]:
        models = []
        for k in range(num_users):
            models.append(LinkSteeringModel(self.scene, k))
            for r in range(self.scene.num_ris):
                models.append(LinkSteeringModel(self.scene, k, r))
        return models

    def _amplitude(self, model: LinkSteeringModel, position: np.ndarray) -> complex:
        base = model.path_amplitude(position, self.scene.consts.carrier_wavelength)
        phase = self._phases.get(model.key, 0.0)
        return base * np.exp(1j * phase)

    def _state_point(self, positions, velocities, k) -> UserState:
        vel = velocities[k].mean if velocities is not None else np.zeros(2)
        return UserState(position=positions[k].mean, velocity=vel)

    def _link_priors(self, model, pos_belief, vel_belief):
        """Predicted point and von Mises priors from the state Gaussians."""
        vel_mean = vel_belief.mean if vel_belief is not None else np.zeros(2)
        state = UserState(position=pos_belief.mean, velocity=vel_mean)
        point = model.point_from_state(state)
        pos_cov = pos_belief.covariance
        cfg = model.cfg

        grad_c = cos_aoa_gradient(state, model.anchor)
        var_c = float(grad_c @ pos_cov @ grad_c) + 1e-12
        prior_c = gaussian_to_vm(
            GaussianBelief.scalar(point.cos_aoa, var_c), cfg.omega_spatial
        )

        unit = model.unit_direction(state.position)
        c0 = model.consts.speed_of_light
        grad_tau = unit / c0
        var_tau = float(grad_tau @ pos_cov @ grad_tau) + 1e-24
        prior_tau = gaussian_to_vm(
            GaussianBelief.scalar(point.delay, var_tau), -cfg.omega_freq
        )

        if self.track_velocity and vel_belief is not None:
            lam = model.consts.carrier_wavelength
            dist = float(np.linalg.norm(state.position - model.anchor.position))
            proj = (np.eye(2) - np.outer(unit, unit)) @ state.velocity / (dist * lam)
            var_nu = (
                float(proj @ pos_cov @ proj)
                + float((unit / lam) @ vel_belief.covariance @ (unit / lam))
                + 1e-12
            )
            prior_nu = gaussian_to_vm(
                GaussianBelief.scalar(point.doppler, var_nu), -cfg.omega_time1
            )
        else:
            point = replace(point, doppler=0.0)
            prior_nu = VonMisesBelief.uniform()
        return point, {
            PARAM_COS_AOA: prior_c,
            PARAM_DELAY: prior_tau,
            PARAM_DOPPLER: prior_nu,
        }

    # -- per-frame solver ----------------------------------------------------

    def run_frame(
        self,
        tensor: ReceivedTensor | np.ndarray,
        predicted: StateBeliefs,
        noise_var: float,
    ) -> FrameResult:
        if noise_var <= 0:
            raise ValueError("noise_var must be positive")
        observed = tensor.data if isinstance(tensor, ReceivedTensor) else np.asarray(tensor)
        cfg = self.cfg
        num_users = predicted.num_users
        positions = list(predicted.positions)
        velocities = (
            list(predicted.velocities)
            if (self.track_velocity and predicted.velocities is not None)
            else None
        )
        symbols = [_SYMBOL_PRIOR] * num_users

        works: dict = {}
        for model in self._link_models(num_users):
            vel_b = velocities[model.user] if velocities is not None else None
            point, priors = self._link_priors(model, positions[model.user], vel_b)
            works[model.key] = _LinkWork(
                model=model,
                point=point,
                priors=priors,
                posts=dict(priors),
                gain=ComplexGaussianBelief.noninformative(),
                slice_gains=None,
                slice_var=np.inf,
                active=True,
                contribution=np.zeros_like(observed),
                amplitude=self._amplitude(model, positions[model.user]),
                predicted=point,
            )
        user_links = {
            k: [w for w in works.values() if w.model.user == k]
            for k in range(num_users)
        }
        residual = observed.copy()
        pos_msgs = {key: None for key in works}
        vel_msgs = {key: None for key in works}
        damped_pos = [GaussianBelief.noninformative(2) for _ in range(num_users)]
        damped_vel = [GaussianBelief.noninformative(2) for _ in range(num_users)]
        diagnostics: list[dict] = []
        prev_means = np.array([p.mean for p in positions])

        for outer in range(cfg.outer_iterations):
            skipped = 0
            # (a) coordinate-ascent sweeps over link parameters and gains
            for _ in range(cfg.inner_iterations):
                for k in range(num_users):
                    for work in user_links[k]:
                        if not work.active:
                            continue
                        residual += work.contribution
                        skipped += self._refine_link(work, residual, symbols, noise_var)
                        work.contribution = self._contribution(work)
                        residual -= work.contribution

            # (b) greedy blockage search
            residual = self._blockage_sweep(works, user_links, observed, residual,
                                            symbols, noise_var, positions, velocities)

            # (c) damped Gaussian messages into position and velocity
            for _ in range(cfg.gn_iterations):
                self._update_states(
                    works, user_links, predicted, positions, velocities,
                    damped_pos, damped_vel, pos_msgs, vel_msgs,
                )

            # (d) symbol messages
            for k in range(num_users):
                try:
                    symbols[k] = symbol_message(
                        [
                            (w.gain if self.coherent_groups else self._mean_slice_gain(w),
                             w.amplitude)
                            for w in user_links[k]
                            if w.active
                        ],
                        self.power,
                    )
                except NoActiveLinks:
                    symbols[k] = _SYMBOL_PRIOR

            # (e) refresh link priors from extrinsic state beliefs
            for key, work in works.items():
                k = work.model.user
                pos_ext = self._extrinsic_state(
                    predicted.positions[k], user_links[k], pos_msgs, key
                )
                vel_ext = None
                if velocities is not None:
                    vel_ext = self._extrinsic_state(
                        predicted.velocities[k], user_links[k], vel_msgs, key
                    )
                _, work.priors = self._link_priors(work.model, pos_ext, vel_ext)
                work.amplitude = self._amplitude(work.model, positions[k].mean)

            new_means = np.array([p.mean for p in positions])
            move = float(np.linalg.norm(new_means - prev_means, axis=1).max())
            prev_means = new_means
            diagnostics.append(
                self._diagnostic_record(outer, works, positions, residual,
                                        noise_var, move, skipped)
            )
            if move < cfg.state_tol_m and outer > 0:
                break

        self._update_phase_anchors(works, symbols)
        states = StateBeliefs(
            positions=positions,
            velocities=velocities,
            symbols=symbols,
        )
        return FrameResult(
            states=states,
            links=self._export_links(works, num_users),
            diagnostics=diagnostics,
        )

    # -- engine internals ------------------------------------------------------

    def _contribution(self, work: _LinkWork) -> np.ndarray:
        if self.coherent_groups:
            if not work.gain.is_informative() or work.gain.mean == 0:
                return np.zeros(self.scene.waveform.tensor_shape, dtype=complex)
            return work.gain.mean * work.model.steering_tensor(work.point)
        if work.slice_gains is None:
            return np.zeros(self.scene.waveform.tensor_shape, dtype=complex)
        m1, m2, m3, _ = work.model.modes(work.point)
        return np.einsum(
            "m,q,n,i->mqni", m1, m2, m3, work.slice_gains, optimize=True
        )

    def _mean_slice_gain(self, work: _LinkWork) -> ComplexGaussianBelief:
        if work.slice_gains is None or not np.isfinite(work.slice_var):
            return ComplexGaussianBelief.noninformative()
        count = work.slice_gains.size
        return ComplexGaussianBelief(
            mean=work.slice_gains.mean(), variance=work.slice_var / count
        )

    def _symbol_extrinsic(self, work: _LinkWork, symbols) -> ComplexGaussianBelief:
        """Symbol belief excluding this link's own contribution."""
        others = []
        k = work.model.user
        for other in self._sibling_works(work):
            if other is work or not other.active:
                continue
            gain = other.gain if self.coherent_groups else self._mean_slice_gain(other)
            if gain.is_informative() and other.amplitude != 0:
                scale = math.sqrt(self.power) * other.amplitude
                others.append(
                    ComplexGaussianBelief(
                        mean=gain.mean / scale,
                        variance=gain.variance / abs(scale) ** 2,
                    )
                )
        return cgaussian_fuse([_SYMBOL_PRIOR, *others])

    def _sibling_works(self, work: _LinkWork):
        return self._current_user_links[work.model.user]

    def _gain_prior(self, work: _LinkWork, symbols) -> ComplexGaussianBelief:
        symbol_ext = self._symbol_extrinsic(work, symbols)
        scale = math.sqrt(self.power) * work.amplitude
        if scale == 0:
            return ComplexGaussianBelief.noninformative()
        return ComplexGaussianBelief(
            mean=scale * symbol_ext.mean,
            variance=abs(scale) ** 2 * symbol_ext.variance,
        )

    def _refine_link(self, work: _LinkWork, residual_with_own, symbols, noise_var) -> int:
        """Gain update followed by coordinate updates of the parameters."""
        skipped = 0
        prior_gain = self._gain_prior(work, symbols)
        if self.coherent_groups:
            work.gain = mmse_gain_update(
                residual_with_own, work.model, work.point, prior_gain, noise_var
            )
        else:
            work.slice_gains, work.slice_var = mmse_slice_gains(
                residual_with_own, work.model, work.point, prior_gain, noise_var
            )
        params = [PARAM_COS_AOA, PARAM_DELAY]
        if self.coherent_groups:
            params.append(PARAM_DOPPLER)
        for which in params:
            try:
                belief, value = vmp_update_parameter(
                    residual_with_own,
                    work.model,
                    work.point,
                    which,
                    work.gain,
                    work.priors[which],
                    noise_var,
                    self.cfg,
                    slice_gains=None if self.coherent_groups else work.slice_gains,
                )
            except NoInformativeData:
                skipped += 1
                continue
            work.posts[which] = belief
            work.point = replace(work.point, **{which: value})
        return skipped

    def _link_energy(self, work: _LinkWork) -> float:
        return float(np.vdot(work.contribution, work.contribution).real)

    def _activation_threshold(self, noise_var: float) -> float:
        n_dof = 1 if self.coherent_groups else self.scene.waveform.num_groups
        gamma = self.cfg.activation_threshold
        return noise_var * (n_dof - 1 + gamma * math.sqrt(n_dof))

    def _blockage_sweep(self, works, user_links, observed, residual, symbols,
                        noise_var, positions, velocities):
        threshold = self._activation_threshold(noise_var)
        self._current_user_links = user_links
        trial_cache: dict = {}

        def removal_gain(key):
            work = works[key]
            with_link = residual + work.contribution
            return float(np.vdot(with_link, with_link).real) - float(
                np.vdot(residual, residual).real
            )

        def addition_gain(key):
            work = works[key]
            # Re-seed from the current state belief, refine once, then score.
            vel_b = velocities[work.model.user] if velocities is not None else None
            point, priors = self._link_priors(
                work.model, positions[work.model.user], vel_b
            )
            trial = _LinkWork(
                model=work.model, point=point, priors=priors, posts=dict(priors),
                gain=ComplexGaussianBelief.noninformative(), slice_gains=None,
                slice_var=np.inf, active=True,
                contribution=np.zeros_like(observed),
                amplitude=work.amplitude, predicted=point,
            )
            self._refine_link(trial, residual, symbols, noise_var)
            trial.contribution = self._contribution(trial)
            after = residual - trial.contribution
            gain = float(np.vdot(residual, residual).real) - float(
                np.vdot(after, after).real
            )
            trial_cache[key] = trial
            return gain

        active = {key: work.active for key, work in works.items()}
        user_of = {key: work.model.user for key, work in works.items()}
        decided = update_blockage(active, removal_gain, addition_gain, user_of, threshold)

        for key, work in works.items():
            if work.active and not decided[key]:
                residual = residual + work.contribution
                work.active = False
                work.contribution = np.zeros_like(observed)
                work.gain = ComplexGaussianBelief.noninformative()
                work.slice_gains = None
            elif not work.active and decided[key]:
                trial = trial_cache.get(key)
                if trial is None:
                    continue
                works[key].point = trial.point
                works[key].posts = trial.posts
                works[key].priors = trial.priors
                works[key].gain = trial.gain
                works[key].slice_gains = trial.slice_gains
                works[key].slice_var = trial.slice_var
                works[key].active = True
                works[key].contribution = trial.contribution
                residual = residual - trial.contribution
        return residual

    def _update_states(self, works, user_links, predicted, positions, velocities,
                       damped_pos, damped_vel, pos_msgs, vel_msgs):
        gamma = self.cfg.damping
        kappa_min = self.cfg.kappa_min
        for k in range(len(positions)):
            entries = []
            keys = []
            for work in user_links[k]:
                if not work.active:
                    pos_msgs[work.model.key] = None
                    continue
                entries.append(
                    (
                        work.extrinsic(PARAM_COS_AOA),
                        work.extrinsic(PARAM_DELAY),
                        work.predicted,
                        work.model,
                    )
                )
                keys.append(work.model.key)
            try:
                per_link, fused = position_message_from_links(entries, kappa_min)
                for key, message in zip(keys, per_link):
                    pos_msgs[key] = message
                damped_pos[k] = GaussianBelief.from_precision(
                    gamma * fused.precision + (1 - gamma) * damped_pos[k].precision,
                    gamma * fused.shift + (1 - gamma) * damped_pos[k].shift,
                )
            except AllNonInformative:
                pass
            positions[k] = gaussian_fuse([predicted.positions[k], damped_pos[k]])

            if velocities is None:
                continue
            dop_entries = []
            dop_keys = []
            for work in user_links[k]:
                if not work.active:
                    vel_msgs[work.model.key] = None
                    continue
                direction = work.model.unit_direction(positions[k].mean)
                dop_entries.append(
                    (work.extrinsic(PARAM_DOPPLER), work.predicted.doppler, direction)
                )
                dop_keys.append(work.model.key)
            try:
                fused_vel = velocity_message_from_dopplers(
                    dop_entries, self.scene.waveform,
                    self.scene.consts.carrier_wavelength, kappa_min,
                )
                # Per-link velocity messages for extrinsic bookkeeping.
                for key, entry in zip(dop_keys, dop_entries):
                    try:
                        vel_msgs[key] = velocity_message_from_dopplers(
                            [entry], self.scene.waveform,
                            self.scene.consts.carrier_wavelength, kappa_min,
                        )
                    except NoActiveLinks:
                        vel_msgs[key] = None
                damped_vel[k] = GaussianBelief.from_precision(
                    gamma * fused_vel.precision + (1 - gamma) * damped_vel[k].precision,
                    gamma * fused_vel.shift + (1 - gamma) * damped_vel[k].shift,
                )
            except NoActiveLinks:
                pass
            velocities[k] = gaussian_fuse([predicted.velocities[k], damped_vel[k]])

    def _extrinsic_state(self, prediction, user_works, messages, own_key):
        parts = [prediction]
        for work in user_works:
            key = work.model.key
            if key == own_key:
                continue
            message = messages.get(key)
            if message is not None:
                parts.append(message)
        return gaussian_fuse(parts)

    def _update_phase_anchors(self, works, symbols):
        """Track per-link phase offsets from the converged gains.

        The common component is unobservable (it trades against the symbol
        phase) and is pinned by the established links, so fresh links absorb
        their own discrepancy.
        """
        deltas, weights, keys = [], [], []
        for key, work in works.items():
            if not work.active:
                continue
            gain = work.gain if self.coherent_groups else self._mean_slice_gain(work)
            symbol = symbols[work.model.user]
            scale = math.sqrt(self.power) * work.amplitude * symbol.mean
            if not gain.is_informative() or abs(scale) < 1e-12:
                continue
            snr_like = abs(gain.mean) ** 2 / gain.variance
            if snr_like < 4.0:
                continue
            deltas.append(float(np.angle(gain.mean * np.conj(scale))))
            weights.append(0.1 + min(self._phase_counts.get(key, 0), 5))
            keys.append(key)
        if not keys:
            return
        common = float(
            np.angle(sum(w * np.exp(1j * d) for w, d in zip(weights, deltas)))
        )
        for key, delta in zip(keys, deltas):
            adjust = float(wrap_angle(delta - common))
            self._phases[key] = self._phases.get(key, 0.0) + 0.5 * adjust
            self._phase_counts[key] = self._phase_counts.get(key, 0) + 1

    def _diagnostic_record(self, outer, works, positions, residual, noise_var,
                           move, skipped) -> dict:
        record = {
            "outer": outer,
            "residual_energy": float(np.vdot(residual, residual).real),
            "surrogate_objective": -float(np.vdot(residual, residual).real) / noise_var,
            "max_position_move_m": move,
            "skipped_updates": skipped,
        }
        for k, belief in enumerate(positions):
            record[f"u{k}_px"] = float(belief.mean[0])
            record[f"u{k}_py"] = float(belief.mean[1])
            record[f"u{k}_pos_trace"] = float(np.trace(belief.covariance))
        for work in works.values():
            label = work.model.label()
            record[f"{label}_active"] = int(work.active)
            record[f"{label}_kappa_aoa"] = work.posts[PARAM_COS_AOA].concentration
            record[f"{label}_kappa_delay"] = work.posts[PARAM_DELAY].concentration
            record[f"{label}_kappa_doppler"] = work.posts[PARAM_DOPPLER].concentration
        return record

    def _export_links(self, works, num_users) -> LinkBeliefSet:
        users = []
        for k in range(num_users):
            direct = None
            reflected = []
            for work in works.values():
                if work.model.user != k:
                    continue
                gain = work.gain if self.coherent_groups else self._mean_slice_gain(work)
                if not work.active:
                    gain = ComplexGaussianBelief.noninformative()
                belief = LinkBelief(
                    active=work.active,
                    cos_aoa=work.posts[PARAM_COS_AOA],
                    delay=work.posts[PARAM_DELAY],
                    doppler=work.posts[PARAM_DOPPLER] if self.coherent_groups else None,
                    gain=gain,
                    point=work.point,
                )
                if work.model.is_reflected:
                    reflected.append((work.model.ris_index, belief))
                else:
                    direct = belief
            reflected = [b for _, b in sorted(reflected, key=lambda rb: rb[0])]
            users.append(UserLinkBeliefs(direct=direct, reflected=reflected))
        return LinkBeliefSet(users=users)

    # -- multi-frame driver -----------------------------------------------------

    def forward_predict(self, posterior: StateBeliefs) -> StateBeliefs:
        if self.track_velocity:
            return forward_predict(posterior, self.motion)
        walk = self.position_walk_std**2 * np.eye(2)
        positions = [
            GaussianBelief(mean=b.mean, covariance=b.covariance + walk)
            for b in posterior.positions
        ]
        return StateBeliefs(
            positions=positions,
            velocities=None,
            symbols=[_SYMBOL_PRIOR] * posterior.num_users,
        )

    def run_tracking(
        self,
        tensors: Sequence[ReceivedTensor | np.ndarray],
        initial: StateBeliefs,
        noise_vars: Sequence[float] | float,
    ) -> list[FrameResult]:
        if np.isscalar(noise_vars):
            noise_vars = [float(noise_vars)] * len(tensors)
        if len(noise_vars) != len(tensors):
            raise ValueError("need one noise variance per frame")
        results = []
        belief = initial
        for frame, (tensor, noise_var) in enumerate(zip(tensors, noise_vars)):
            result = self.run_frame(tensor, belief, noise_var)
            for record in result.diagnostics:
                record["frame"] = frame
            results.append(result)
            belief = self.forward_predict(result.states)
        return results


def run_frame(
    tensor,
    predicted: StateBeliefs,
    scene: SceneModel,
    cfg: Optional[HvmpConfig] = None,
    noise_var: float = 1.0,
    power: float = 1.0,
) -> FrameResult:
    """Single-frame inference with a fresh tracker (first-frame semantics)."""
    motion = MotionModel.constant_velocity(1.0, accel_std=0.0)
    tracker = HvmpTracker(scene, motion, cfg, power=power)
    return tracker.run_frame(tensor, predicted, noise_var)


def run_tracking(
    tensors,
    initial: StateBeliefs,
    scene: SceneModel,
    motion: MotionModel,
    cfg: Optional[HvmpConfig] = None,
    noise_vars=1.0,
    power: float = 1.0,
) -> list[FrameResult]:
    """Causal multi-frame tracking with a fresh tracker."""
    tracker = HvmpTracker(scene, motion, cfg, power=power)
    return tracker.run_tracking(tensors, initial, noise_vars)


def diagnostics_lines(results: Iterable[FrameResult]) -> list[str]:
    """Flatten diagnostics into one ``key=value`` text record per line."""
    lines = []
    for result in results:
        for record in result.diagnostics:
            ordered = sorted(record.items(), key=lambda kv: (kv[0] != "frame", kv[0]))
            lines.append(
                " ".join(
                    f"{key}={value:.6g}" if isinstance(value, float) else f"{key}={value}"
                    for key, value in ordered
                )
            )
    return lines
