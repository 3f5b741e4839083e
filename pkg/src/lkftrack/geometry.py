"""Rotated-box overlap and distance computations.

Boxes are upright: a rotated rectangle in the ground (bird's-eye) plane
spanned by x/y, extruded along z. The length extent runs along the
heading; corners are produced counterclockwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .state import CostFunction, StateVector, angle_residual

_CORNER_DX = np.array([0.5, -0.5, -0.5, 0.5])
_CORNER_DY = np.array([0.5, 0.5, -0.5, -0.5])


@dataclass(frozen=True)
class RotatedBox3D:
    """Ground-plane rectangle plus a vertical interval."""

    cx: float
    cy: float
    cz: float
    length: float  # extent along heading
    width: float   # extent across heading
    height: float
    yaw: float

    def __post_init__(self):
        if self.length <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError(
                f"degenerate box: l={self.length} w={self.width} h={self.height}"
            )

    @classmethod
    def from_state(cls, s) -> "RotatedBox3D":
        if isinstance(s, StateVector):
            return cls(s.x, s.y, s.z, s.l, s.w, s.h, s.theta)
        arr = np.asarray(s, dtype=np.float64)
        return cls(arr[0], arr[1], arr[2], arr[4], arr[3], arr[5], arr[6])

    def bev_corners(self) -> np.ndarray:
        """(4, 2) counterclockwise ground-plane corners."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        dx = _CORNER_DX * self.length
        dy = _CORNER_DY * self.width
        return np.stack(
            [self.cx + c * dx - s * dy, self.cy + s * dx + c * dy], axis=1
        )

    @property
    def z_interval(self) -> tuple[float, float]:
        return (self.cz - self.height / 2.0, self.cz + self.height / 2.0)

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def bev_area(self) -> float:
        return self.length * self.width


def polygon_area(pts: np.ndarray) -> float:
    """Shoelace area of a simple polygon given counterclockwise (n, 2) points."""
    if len(pts) < 3:
        return 0.0
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon by a convex ccw polygon."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        pts = output
        output = []
        prev = pts[-1]
        prev_side = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in pts:
            cur_side = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if cur_side >= 0.0:
                if prev_side < 0.0:
                    t = prev_side / (prev_side - cur_side)
                    output.append((prev[0] + t * (cur[0] - prev[0]),
                                   prev[1] + t * (cur[1] - prev[1])))
                output.append(cur)
            elif prev_side >= 0.0:
                t = prev_side / (prev_side - cur_side)
                output.append((prev[0] + t * (cur[0] - prev[0]),
                               prev[1] + t * (cur[1] - prev[1])))
            prev, prev_side = cur, cur_side
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def bev_intersection_area(a: RotatedBox3D, b: RotatedBox3D) -> float:
    """Ground-plane overlap area of two rotated rectangles."""
    ca, cb = a.bev_corners(), b.bev_corners()
    # Cheap reject: separated axis-aligned bounds.
    if (ca[:, 0].max() <= cb[:, 0].min() or cb[:, 0].max() <= ca[:, 0].min()
            or ca[:, 1].max() <= cb[:, 1].min() or cb[:, 1].max() <= ca[:, 1].min()):
        return 0.0
    poly = clip_convex(ca, cb)
    return max(0.0, polygon_area(poly))


def _vertical_overlap(a: RotatedBox3D, b: RotatedBox3D) -> float:
    lo_a, hi_a = a.z_interval
    lo_b, hi_b = b.z_interval
    return max(0.0, min(hi_a, hi_b) - max(lo_a, lo_b))


def iou_3d(a: RotatedBox3D, b: RotatedBox3D) -> float:
    """Volume intersection-over-union of two upright rotated boxes."""
    inter = bev_intersection_area(a, b) * _vertical_overlap(a, b)
    union = a.volume + b.volume - inter
    return inter / union if union > 0 else 0.0


def _enclosing_diag_sq_3d(a: RotatedBox3D, b: RotatedBox3D) -> float:
    ca, cb = a.bev_corners(), b.bev_corners()
    xs = np.concatenate([ca[:, 0], cb[:, 0]])
    ys = np.concatenate([ca[:, 1], cb[:, 1]])
    za, zb = a.z_interval, b.z_interval
    dz = max(za[1], zb[1]) - min(za[0], zb[0])
    dx = xs.max() - xs.min()
    dy = ys.max() - ys.min()
    return dx * dx + dy * dy + dz * dz


def ciou_3d(a: RotatedBox3D, b: RotatedBox3D) -> float:
    """Complete IoU in 3D: volume IoU penalized by normalized center
    distance and by heading disagreement (gated while IoU < 0.5)."""
    iou = iou_3d(a, b)
    rho_sq = ((a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2 + (a.cz - b.cz) ** 2)
    diag_sq = _enclosing_diag_sq_3d(a, b)
    v = (4.0 / math.pi ** 2) * angle_residual(a.yaw, b.yaw) ** 2
    alpha = v / ((1.0 - iou) + v) if (iou >= 0.5 and v > 0) else 0.0
    value = iou - rho_sq / diag_sq - alpha * v
    if not (-1.0 < value <= 1.0 + 1e-12):
        raise AssertionError(f"CIoU out of range: {value}")
    return min(value, 1.0)


def _iou_bev(a: RotatedBox3D, b: RotatedBox3D) -> float:
    inter = bev_intersection_area(a, b)
    union = a.bev_area + b.bev_area - inter
    return inter / union if union > 0 else 0.0


def ciou_bev(a: RotatedBox3D, b: RotatedBox3D) -> float:
    """Complete IoU of the ground-plane rectangles only, with the
    conventional aspect-ratio consistency term."""
    iou = _iou_bev(a, b)
    rho_sq = (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2
    ca, cb = a.bev_corners(), b.bev_corners()
    dx = max(ca[:, 0].max(), cb[:, 0].max()) - min(ca[:, 0].min(), cb[:, 0].min())
    dy = max(ca[:, 1].max(), cb[:, 1].max()) - min(ca[:, 1].min(), cb[:, 1].min())
    diag_sq = dx * dx + dy * dy
    v = (4.0 / math.pi ** 2) * (
        math.atan(a.width / a.length) - math.atan(b.width / b.length)
    ) ** 2
    alpha = v / ((1.0 - iou) + v) if (iou >= 0.5 and v > 0) else 0.0
    value = iou - rho_sq / diag_sq - alpha * v
    if not (-1.0 < value <= 1.0 + 1e-12):
        raise AssertionError(f"BEV CIoU out of range: {value}")
    return min(value, 1.0)


def cost(a, b, which: CostFunction) -> float:
    """Association cost between two box states (lower is better)."""
    va = a.as_array() if isinstance(a, StateVector) else np.asarray(a, dtype=np.float64)
    vb = b.as_array() if isinstance(b, StateVector) else np.asarray(b, dtype=np.float64)
    if which is CostFunction.L2:
        return float(np.linalg.norm(va[:3] - vb[:3]))
    if which is CostFunction.L2_PLUS_SIZE:
        return float(np.linalg.norm(va[:3] - vb[:3]) + np.linalg.norm(va[3:6] - vb[3:6]))
    box_a = RotatedBox3D.from_state(va)
    box_b = RotatedBox3D.from_state(vb)
    if which is CostFunction.CIOU_3D:
        return 1.0 - ciou_3d(box_a, box_b)
    if which is CostFunction.CIOU_2D:
        return 1.0 - ciou_bev(box_a, box_b)
    raise ValueError(f"unknown cost function {which!r}")
