"""Belief algebra: Gaussian, von Mises, and scalar complex-Gaussian messages.

All inference in this library is carried by three closed families:

* multivariate Gaussians over kinematic states (moment or information form),
* von Mises distributions over phase-mapped link parameters,
* scalar complex Gaussians over effective link gains and transmit symbols.

Fusion is a pointwise density product in every family.  The von Mises /
Gaussian bridges implement the Laplace approximation at the circular mode and
its exact inverse, so phase-domain evidence can be projected into the
Cartesian state layer and back.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import i0e, i1e

from .errors import AllNonInformative, TooDiffuse, UniformBelief

# Below this concentration the Laplace (quadratic) fit to a von Mises density
# is unusable; callers treat such beliefs as uninformative for state updates.
KAPPA_MIN = 2.0

# Covariance inversion guard.
_COND_LIMIT = 1e12
_RIDGE = 1e-12


def wrap_angle(phi):
    """Wrap angle(s) to (-pi, pi]."""
    return -((np.pi - np.asarray(phi)) % (2.0 * np.pi)) + np.pi


def _symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def _stable_inverse(mat: np.ndarray) -> np.ndarray:
    """Inverse with a relative ridge when the matrix is ill-conditioned."""
    mat = _symmetrize(np.asarray(mat, dtype=float))
    dim = mat.shape[0]
    if np.linalg.cond(mat) > _COND_LIMIT:
        mat = mat + (_RIDGE * np.trace(mat) / dim + _RIDGE) * np.eye(dim)
    return _symmetrize(np.linalg.inv(mat))


class GaussianBelief:
    """Multivariate Gaussian stored in moment and/or information form.

    Either form may be supplied; the other is derived lazily.  Information
    form (``precision``, ``shift = precision @ mean``) supports degenerate
    beliefs whose precision is singular, e.g. a single bearing constraint
    that is informative along one direction only.
    """

    __slots__ = ("_mean", "_cov", "_prec", "_shift")

    def __init__(self, mean=None, covariance=None, *, precision=None, shift=None):
        if (mean is None) != (covariance is None):
            raise ValueError("mean and covariance must be given together")
        if (precision is None) != (shift is None):
            raise ValueError("precision and shift must be given together")
        if mean is None and precision is None:
            raise ValueError("provide moment form, information form, or both")
        self._mean = None if mean is None else np.asarray(mean, dtype=float).reshape(-1)
        self._cov = (
            None if covariance is None else _symmetrize(np.atleast_2d(np.asarray(covariance, dtype=float)))
        )
        self._prec = (
            None if precision is None else _symmetrize(np.atleast_2d(np.asarray(precision, dtype=float)))
        )
        self._shift = None if shift is None else np.asarray(shift, dtype=float).reshape(-1)
        if self._cov is not None:
            eigmin = float(np.linalg.eigvalsh(self._cov).min())
            if eigmin < -1e-10 * max(1.0, float(np.trace(self._cov))):
                raise ValueError(f"covariance not PSD (min eigenvalue {eigmin:.3e})")

    # -- constructors --------------------------------------------------------

    @classmethod
    def from_moments(cls, mean, covariance) -> "GaussianBelief":
        return cls(mean=mean, covariance=covariance)

    @classmethod
    def from_precision(cls, precision, shift) -> "GaussianBelief":
        return cls(precision=precision, shift=shift)

    @classmethod
    def noninformative(cls, dim: int) -> "GaussianBelief":
        return cls(precision=np.zeros((dim, dim)), shift=np.zeros(dim))

    @classmethod
    def scalar(cls, mean: float, variance: float) -> "GaussianBelief":
        return cls(mean=[mean], covariance=[[variance]])

    # -- views ----------------------------------------------------------------

    @property
    def dim(self) -> int:
        if self._mean is not None:
            return self._mean.size
        return self._shift.size

    @property
    def mean(self) -> np.ndarray:
        if self._mean is None:
            prec = self._prec
            if np.linalg.matrix_rank(prec, tol=1e-12 * max(1.0, float(np.abs(prec).max()))) < prec.shape[0]:
                # Minimum-norm mean of a degenerate belief.
                self._mean = np.linalg.pinv(prec) @ self._shift
            else:
                self._mean = np.linalg.solve(prec, self._shift)
        return self._mean

    @property
    def covariance(self) -> np.ndarray:
        if self._cov is None:
            self._cov = _stable_inverse(self._prec)
        return self._cov

    @property
    def precision(self) -> np.ndarray:
        if self._prec is None:
            self._prec = _stable_inverse(self._cov)
        return self._prec

    @property
    def shift(self) -> np.ndarray:
        if self._shift is None:
            self._shift = self.precision @ self._mean
        return self._shift

    def is_informative(self, tol: float = 0.0) -> bool:
        prec = self._prec if self._prec is not None else self.precision
        return bool(np.abs(prec).max() > tol)

    def marginal(self, indices: Sequence[int]) -> "GaussianBelief":
        idx = np.asarray(indices)
        return GaussianBelief(
            mean=self.mean[idx], covariance=self.covariance[np.ix_(idx, idx)]
        )

    def __repr__(self) -> str:
        return f"GaussianBelief(mean={np.array2string(self.mean, precision=4)})"


def gaussian_fuse(beliefs: Iterable[GaussianBelief]) -> GaussianBelief:
    """Density product of Gaussians via precision accumulation."""
    beliefs = list(beliefs)
    if not beliefs:
        raise ValueError("gaussian_fuse requires at least one belief")
    dim = beliefs[0].dim
    prec = np.zeros((dim, dim))
    shift = np.zeros(dim)
    for b in beliefs:
        if b.dim != dim:
            raise ValueError("dimension mismatch in gaussian_fuse")
        prec = prec + b.precision
        shift = shift + b.shift
    if np.abs(prec).max() == 0.0:
        raise AllNonInformative("every Gaussian in the fusion has zero precision")
    return GaussianBelief(precision=prec, shift=shift)


@dataclass(frozen=True)
class VonMisesBelief:
    """Circular belief with density proportional to exp(kappa cos(phi - mu)).

    ``concentration == 0`` is the circular-uniform (neutral) belief.
    """

    mean_direction: float
    concentration: float

    def __post_init__(self):
        if not (self.concentration >= 0 and math.isfinite(self.concentration)):
            raise ValueError(f"concentration must be finite and >= 0, got {self.concentration}")
        object.__setattr__(
            self, "mean_direction", float(np.mod(self.mean_direction, 2.0 * np.pi))
        )

    @property
    def natural(self) -> complex:
        """Natural parameter kappa * exp(j mu)."""
        return self.concentration * np.exp(1j * self.mean_direction)

    @classmethod
    def from_natural(cls, eta: complex) -> "VonMisesBelief":
        kappa = abs(eta)
        mu = float(np.angle(eta)) if kappa > 0 else 0.0
        return cls(mean_direction=mu, concentration=kappa)

    @classmethod
    def uniform(cls) -> "VonMisesBelief":
        return cls(mean_direction=0.0, concentration=0.0)

    def log_density(self, phi) -> np.ndarray:
        """Unnormalized log density kappa cos(phi - mu)."""
        return self.concentration * np.cos(np.asarray(phi) - self.mean_direction)


def vm_fuse(beliefs: Iterable[VonMisesBelief]) -> VonMisesBelief:
    """Pointwise product of von Mises densities: natural parameters add."""
    eta = 0.0 + 0.0j
    for b in beliefs:
        eta += b.natural
    return VonMisesBelief.from_natural(eta)


def bessel_ratio(kappa: float) -> float:
    """I1(kappa) / I0(kappa), stable for all non-negative kappa."""
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    if kappa == 0.0:
        return 0.0
    return float(i1e(kappa) / i0e(kappa))


def vm_mode_and_spread(belief: VonMisesBelief) -> tuple[float, float]:
    """Mode and circular variance 1 - I1(kappa)/I0(kappa)."""
    if belief.concentration == 0.0:
        raise UniformBelief("mode of a circular-uniform belief is undefined")
    return belief.mean_direction, 1.0 - bessel_ratio(belief.concentration)


def vm_to_gaussian(
    belief: VonMisesBelief,
    omega: float,
    reference: Optional[float] = None,
    kappa_min: float = KAPPA_MIN,
) -> GaussianBelief:
    """Laplace fit of a von Mises belief on the circle phi = omega * x.

    Returns a 1D Gaussian over x with variance 1 / (kappa omega^2).  The mode
    mu lifts to infinitely many x; ``reference`` selects the branch closest
    to it (default: the principal branch with omega*x in (-pi, pi]).
    """
    if omega == 0.0:
        raise ValueError("mapping frequency omega must be nonzero")
    if belief.concentration < kappa_min:
        raise TooDiffuse(
            f"kappa = {belief.concentration:.3g} below the Laplace threshold {kappa_min}"
        )
    if reference is None:
        x = float(wrap_angle(belief.mean_direction)) / omega
    else:
        delta = float(wrap_angle(belief.mean_direction - omega * reference))
        x = reference + delta / omega
    variance = 1.0 / (belief.concentration * omega**2)
    return GaussianBelief.scalar(x, variance)


def gaussian_to_vm(belief: GaussianBelief, omega: float) -> VonMisesBelief:
    """Exact inverse of :func:`vm_to_gaussian` on the (mu, kappa) pair."""
    if belief.dim != 1:
        raise ValueError("gaussian_to_vm expects a 1D belief")
    variance = float(belief.covariance[0, 0])
    if variance <= 0:
        raise ValueError("variance must be positive")
    return VonMisesBelief(
        mean_direction=omega * float(belief.mean[0]),
        concentration=1.0 / (omega**2 * variance),
    )


@dataclass(frozen=True)
class ComplexGaussianBelief:
    """Scalar circular complex Gaussian; variance may be +inf (neutral)."""

    mean: complex
    variance: float

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")
        object.__setattr__(self, "mean", complex(self.mean))

    @classmethod
    def noninformative(cls) -> "ComplexGaussianBelief":
        return cls(mean=0.0, variance=np.inf)

    @property
    def precision(self) -> float:
        return 0.0 if np.isinf(self.variance) else 1.0 / self.variance

    def is_informative(self) -> bool:
        return not np.isinf(self.variance)


def cgaussian_fuse(beliefs: Iterable[ComplexGaussianBelief]) -> ComplexGaussianBelief:
    """Inverse-variance weighted product of scalar complex Gaussians."""
    prec = 0.0
    weighted = 0.0 + 0.0j
    for b in beliefs:
        prec += b.precision
        weighted += b.precision * b.mean
    if prec == 0.0:
        raise AllNonInformative("every complex-Gaussian input has zero precision")
    return ComplexGaussianBelief(mean=weighted / prec, variance=1.0 / prec)
