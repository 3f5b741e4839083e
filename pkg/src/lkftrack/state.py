"""Shared domain types, configuration, and angle conventions.

Every box-like quantity in the tracker is a 7-vector
``[x, y, z, w, l, h, theta]``: centroid in meters, extents in meters,
heading in radians. All headings are stored wrapped to ``[-pi, pi)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

import numpy as np

STATE_DIM = 7
TWO_PI = 2.0 * math.pi

# Index map for the flat 7-vector layout.
IX, IY, IZ, IW, IL, IH, ITHETA = range(STATE_DIM)


def wrap_angle(theta: float) -> float:
    """Wrap an angle to ``[-pi, pi)``.

    In-range inputs are returned untouched (bit-exact), which keeps
    no-op filter updates exactly reproducible.
    """
    theta = float(theta)
    if not math.isfinite(theta):
        raise ValueError(f"angle must be finite, got {theta!r}")
    if -math.pi <= theta < math.pi:
        return theta
    wrapped = (theta + math.pi) % TWO_PI - math.pi
    # Rounding in the modulo can land exactly on +pi.
    if wrapped >= math.pi:
        wrapped -= TWO_PI
    return wrapped


def angle_residual(a: float, b: float) -> float:
    """Smallest signed rotation taking ``b`` to ``a``, in ``[-pi, pi)``."""
    return wrap_angle(float(a) - float(b))


def wrap_angle_array(theta: np.ndarray) -> np.ndarray:
    """Vectorized :func:`wrap_angle`. In-range entries keep their bits."""
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("angles must be finite")
    out_of_range = (theta < -math.pi) | (theta >= math.pi)
    if not out_of_range.any():
        return theta
    wrapped = (theta + math.pi) % TWO_PI - math.pi
    wrapped = np.where(wrapped >= math.pi, wrapped - TWO_PI, wrapped)
    return np.where(out_of_range, wrapped, theta)


@dataclass(frozen=True, slots=True)
class StateVector:
    """One 3D box state: centroid, extents, heading."""

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    theta: float

    def __post_init__(self):
        for name in ("x", "y", "z", "w", "l", "h", "theta"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ValueError(f"StateVector.{name} must be finite, got {v!r}")
        if self.w <= 0 or self.l <= 0 or self.h <= 0:
            raise ValueError(
                f"box extents must be positive, got w={self.w} l={self.l} h={self.h}"
            )
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.z, self.w, self.l, self.h, self.theta],
            dtype=np.float64,
        )

    @classmethod
    def from_array(cls, arr) -> "StateVector":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.shape != (STATE_DIM,):
            raise ValueError(f"expected shape ({STATE_DIM},), got {arr.shape}")
        return cls(*[float(v) for v in arr])


@dataclass(frozen=True, slots=True)
class Detection:
    """A single detector output box with its confidence."""

    state: StateVector
    score: float
    frame: int
    source_id: int = 0

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")
        if self.frame < 0:
            raise ValueError(f"frame must be >= 0, got {self.frame}")


class TrackStatus(Enum):
    TENTATIVE = "tentative"
    ACTIVE = "active"
    DEAD = "dead"


# Valid lifecycle transitions; DEAD is terminal.
_ALLOWED_TRANSITIONS = {
    (TrackStatus.TENTATIVE, TrackStatus.ACTIVE),
    (TrackStatus.TENTATIVE, TrackStatus.DEAD),
    (TrackStatus.ACTIVE, TrackStatus.DEAD),
}


class CostFunction(Enum):
    """Association cost choices (the three ablation alternatives included)."""

    CIOU_3D = "ciou3d"
    L2 = "l2"
    L2_PLUS_SIZE = "l2_size"
    CIOU_2D = "ciou2d"


@dataclass
class TrackerConfig:
    """Inference-time tracker parameters."""

    t_max: int = 8            # warm-up ramp length, frames
    a_min: float = 0.1        # residual damping floor
    a_max: float = 0.9        # residual damping ceiling during misses
    mu_max: int = 22          # consecutive misses before a track dies
    sigma_birth: int = 5      # frames a never-updated track survives
    tau_3d: float = 1.20      # association cost threshold
    p_window: int = 10        # posterior-difference history length
    epsilon_init: float = 1e-3  # birth padding offset, meters
    cost_function: CostFunction = CostFunction.CIOU_3D
    report_coasted: bool = False

    def __post_init__(self):
        if isinstance(self.cost_function, str):
            self.cost_function = CostFunction(self.cost_function)
        if not (0.0 <= self.a_min < self.a_max <= 1.0):
            raise ValueError(f"need 0 <= a_min < a_max <= 1, got {self.a_min}, {self.a_max}")
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")
        if self.mu_max < 1:
            raise ValueError("mu_max must be >= 1")
        if self.sigma_birth < 1:
            raise ValueError("sigma_birth must be >= 1")
        if self.tau_3d <= 0:
            raise ValueError("tau_3d must be positive")
        if self.p_window < 1:
            raise ValueError("p_window must be >= 1")
        if self.epsilon_init <= 0:
            raise ValueError("epsilon_init must be positive")


@dataclass
class Trajectory:
    """One tracked vehicle: posterior history, filter state, and lifecycle counters."""

    track_id: int
    birth_frame: int
    status: TrackStatus = TrackStatus.TENTATIVE
    posteriors: list[StateVector] = field(default_factory=list)
    last_prior: Optional[StateVector] = None
    last_detection: Optional[Detection] = None
    last_gain_update: np.ndarray = field(
        default_factory=lambda: np.zeros(STATE_DIM, dtype=np.float64)
    )
    miss_count: int = 0
    age: int = 0
    gain_rnn_state: Any = None
    # Flat float64 mirror of `posteriors`, maintained on every append so the
    # prediction input can be assembled without per-frame reconversion.
    _history: list[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self):
        if self.posteriors and not self._history:
            self._history = [s.as_array() for s in self.posteriors]

    @property
    def is_live(self) -> bool:
        return self.status is not TrackStatus.DEAD

    def append_posterior(self, state: StateVector) -> None:
        if self.status is TrackStatus.DEAD:
            raise ValueError(f"track {self.track_id} is dead and cannot be extended")
        self.posteriors.append(state)
        self._history.append(state.as_array())

    def history_array(self, depth: int) -> np.ndarray:
        """Last ``depth`` posteriors as an (n, 7) array, oldest first."""
        rows = self._history[-depth:]
        return np.stack(rows, axis=0)

    def transition(self, new_status: TrackStatus) -> None:
        if new_status is self.status:
            return
        if (self.status, new_status) not in _ALLOWED_TRANSITIONS:
            raise ValueError(
                f"illegal status transition {self.status.value} -> {new_status.value}"
            )
        self.status = new_status
