"""Constant-velocity motion model and ground-truth trajectory generation.

The same transition model serves two roles: the simulator samples true user
motion from it, and the trackers use it as the forward prediction prior.
Users bounce specularly off the walls of a square region so the prescribed
average speeds persist over long runs.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Sequence, TextIO

import numpy as np

from .geometry import UserState


def white_acceleration_noise(frame_interval_s: float, accel_std: float) -> np.ndarray:
    """Process-noise covariance of a piecewise-constant acceleration model."""
    dt = frame_interval_s
    q_pp = dt**4 / 4.0
    q_pv = dt**3 / 2.0
    q_vv = dt**2
    eye = np.eye(2)
    return accel_std**2 * np.block([[q_pp * eye, q_pv * eye], [q_pv * eye, q_vv * eye]])


@dataclass(frozen=True)
class MotionModel:
    """Discrete-time constant-velocity transition with Gaussian motion noise."""

    frame_interval_s: float
    process_noise: np.ndarray

    def __post_init__(self):
        if self.frame_interval_s <= 0:
            raise ValueError("frame_interval_s must be positive")
        q = np.asarray(self.process_noise, dtype=float)
        if q.shape != (4, 4):
            raise ValueError("process_noise must be 4x4")
        if np.abs(q - q.T).max() > 1e-12 * max(1.0, np.abs(q).max()):
            raise ValueError("process_noise must be symmetric")
        if float(np.linalg.eigvalsh(q).min()) < -1e-12:
            raise ValueError("process_noise must be positive semi-definite")
        object.__setattr__(self, "process_noise", 0.5 * (q + q.T))

    @property
    def transition(self) -> np.ndarray:
        """Block transition matrix [[I, dt I], [0, I]]."""
        f = np.eye(4)
        f[0, 2] = f[1, 3] = self.frame_interval_s
        return f

    @classmethod
    def constant_velocity(
        cls, frame_interval_s: float, accel_std: float = 5.0
    ) -> "MotionModel":
        return cls(
            frame_interval_s=frame_interval_s,
            process_noise=white_acceleration_noise(frame_interval_s, accel_std),
        )


@dataclass(frozen=True)
class SquareRegion:
    """Axis-aligned square given by its center and side length."""

    center: np.ndarray
    side: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        if self.side <= 0:
            raise ValueError("side must be positive")

    @property
    def low(self) -> np.ndarray:
        return self.center - self.side / 2.0

    @property
    def high(self) -> np.ndarray:
        return self.center + self.side / 2.0

    def contains(self, position: np.ndarray) -> bool:
        return bool(np.all(position >= self.low) and np.all(position <= self.high))

    def reflect(self, position: np.ndarray, velocity: np.ndarray):
        """Fold a position back into the region, flipping velocity components.

        Repeated folding handles overshoots larger than one side length.
        """
        pos = np.array(position, dtype=float)
        vel = np.array(velocity, dtype=float)
        for axis in range(2):
            lo, hi = self.low[axis], self.high[axis]
            while pos[axis] < lo or pos[axis] > hi:
                if pos[axis] < lo:
                    pos[axis] = 2.0 * lo - pos[axis]
                else:
                    pos[axis] = 2.0 * hi - pos[axis]
                vel[axis] = -vel[axis]
        return pos, vel


@dataclass(frozen=True)
class Trajectory:
    """Ordered per-frame states of one user inside a bounded region."""

    states: Sequence[UserState]
    region: SquareRegion

    def __len__(self) -> int:
        return len(self.states)

    def positions(self) -> np.ndarray:
        return np.array([s.position for s in self.states])

    def velocities(self) -> np.ndarray:
        return np.array([s.velocity for s in self.states])


def transition_mean(state: UserState, model: MotionModel) -> UserState:
    """Noise-free propagation through the transition matrix."""
    return UserState.from_vector(model.transition @ state.as_vector())


def _noise_factor(q: np.ndarray) -> np.ndarray:
    """Square root of a PSD covariance; handles the singular kinematic Q."""
    vals, vecs = np.linalg.eigh(q)
    return vecs @ np.diag(np.sqrt(np.clip(vals, 0.0, None)))


def sample_transition(
    state: UserState, model: MotionModel, rng: np.random.Generator
) -> UserState:
    """One random step: transition mean plus sampled motion noise."""
    mean = model.transition @ state.as_vector()
    if np.abs(model.process_noise).max() == 0.0:
        return UserState.from_vector(mean)
    noise = _noise_factor(model.process_noise) @ rng.standard_normal(4)
    return UserState.from_vector(mean + noise)


def generate_trajectories(
    num_users: int,
    num_frames: int,
    region: SquareRegion,
    speeds: Sequence[float],
    model: MotionModel,
    rng: np.random.Generator,
) -> list[Trajectory]:
    """Random initial states evolved with reflection at the region boundary."""
    if len(speeds) != num_users:
        raise ValueError("speeds must list one value per user")
    trajectories = []
    for k in range(num_users):
        position = rng.uniform(region.low, region.high)
        heading = rng.uniform(0.0, 2.0 * np.pi)
        velocity = speeds[k] * np.array([np.cos(heading), np.sin(heading)])
        states = [UserState(position=position, velocity=velocity)]
        for _ in range(num_frames - 1):
            nxt = sample_transition(states[-1], model, rng)
            pos, vel = region.reflect(nxt.position, nxt.velocity)
            states.append(UserState(position=pos, velocity=vel))
        trajectories.append(Trajectory(states=states, region=region))
    return trajectories


def write_trajectories_csv(trajectories: Sequence[Trajectory], stream: TextIO) -> None:
    """Dump trajectories as ``frame,user,px,py,vx,vy`` rows."""
    stream.write("frame,user,px,py,vx,vy\n")
    for user, traj in enumerate(trajectories):
        for frame, state in enumerate(traj.states):
            px, py = state.position
            vx, vy = state.velocity
            stream.write(f"{frame},{user},{px:.9g},{py:.9g},{vx:.9g},{vy:.9g}\n")


def trajectories_to_csv(trajectories: Sequence[Trajectory]) -> str:
    buf = io.StringIO()
    write_trajectories_csv(trajectories, buf)
    return buf.getvalue()
