"""Oriented 3D box geometry: corners, rotated IoU, yaw utilities.

Boxes are (center, size, yaw) with yaw about +z.  IoU is the bird's-eye
rotated-rectangle overlap times the z extent overlap, over the union; it
is invariant under a yaw flip of pi, which keeps box quality metrics
independent of heading direction (heading is scored separately via bins).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractError

N_HEADING_BINS = 8


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def wrap_axis_angle(a: float) -> float:
    """Wrap to (-pi/2, pi/2] (orientation without heading direction)."""
    a = math.fmod(a, math.pi)
    if a > math.pi / 2.0:
        a -= math.pi
    elif a <= -math.pi / 2.0:
        a += math.pi
    return a


def heading_bin(yaw: float, n_bins: int = N_HEADING_BINS) -> int:
    """Index of the angular bin containing ``yaw``; bin 0 is centered on 0."""
    width = 2.0 * math.pi / n_bins
    return int(math.floor((wrap_angle(yaw) + width / 2.0) / width)) % n_bins


def bin_center(idx: int, n_bins: int = N_HEADING_BINS) -> float:
    return wrap_angle(idx * 2.0 * math.pi / n_bins)


@dataclass
class Box:
    """Oriented box: center (3,), size (3,) positive, yaw in (-pi, pi]."""

    center: np.ndarray
    size: np.ndarray
    yaw: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.size = np.asarray(self.size, dtype=np.float64)
        if np.any(self.size <= 0.0):
            raise ContractError(f"box size must be positive, got {self.size}")
        self.yaw = wrap_angle(float(self.yaw))

    def bev_corners(self) -> np.ndarray:
        """Four xy corners, counter-clockwise."""
        cx, cy = self.center[0], self.center[1]
        hx, hy = self.size[0] / 2.0, self.size[1] / 2.0
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([cx, cy])

    def z_interval(self) -> tuple[float, float]:
        half = self.size[2] / 2.0
        return self.center[2] - half, self.center[2] + half

    def volume(self) -> float:
        return float(np.prod(self.size))

    def rotate_z(self, angle: float, pivot=None) -> "Box":
        pivot = np.zeros(3) if pivot is None else np.asarray(pivot, dtype=np.float64)
        c, s = math.cos(angle), math.sin(angle)
        rel = self.center - pivot
        new_center = pivot + np.array([c * rel[0] - s * rel[1],
                                       s * rel[0] + c * rel[1], rel[2]])
        return Box(new_center, self.size.copy(), self.yaw + angle)


def _clip_polygon(subject: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Keep the part of ``subject`` left of the directed edge a->b."""
    out = []
    n = subject.shape[0]
    for i in range(n):
        p, q = subject[i], subject[(i + 1) % n]
        side_p = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
        side_q = (b[0] - a[0]) * (q[1] - a[1]) - (b[1] - a[1]) * (q[0] - a[0])
        if side_p >= 0.0:
            out.append(p)
        if (side_p > 0.0) != (side_q > 0.0) and side_p != side_q:
            t = side_p / (side_p - side_q)
            out.append(p + t * (q - p))
    return np.array(out) if out else np.zeros((0, 2))


def _polygon_area(poly: np.ndarray) -> float:
    if poly.shape[0] < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def bev_intersection_area(a: Box, b: Box) -> float:
    """Overlap area of the two rotated footprints (Sutherland-Hodgman)."""
    poly = a.bev_corners()
    clip = b.bev_corners()
    for i in range(4):
        poly = _clip_polygon(poly, clip[i], clip[(i + 1) % 4])
        if poly.shape[0] == 0:
            return 0.0
    return _polygon_area(poly)


def iou3d(a: Box, b: Box) -> float:
    """Rotated 3D IoU; flip-invariant in yaw by construction."""
    inter_bev = bev_intersection_area(a, b)
    if inter_bev <= 0.0:
        return 0.0
    za0, za1 = a.z_interval()
    zb0, zb1 = b.z_interval()
    dz = min(za1, zb1) - max(za0, zb0)
    if dz <= 0.0:
        return 0.0
    inter = inter_bev * dz
    union = a.volume() + b.volume() - inter
    return float(inter / union) if union > 0.0 else 0.0


def greedy_nms(boxes: list[Box], scores: np.ndarray, iou_thresh: float) -> list[int]:
    """Indices kept by greedy IoU suppression in descending-score order."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    kept: list[int] = []
    for i in order:
        if all(iou3d(boxes[i], boxes[j]) <= iou_thresh for j in kept):
            kept.append(int(i))
    return kept


def points_in_box(box: Box, points: np.ndarray) -> np.ndarray:
    """Boolean mask of points inside the oriented box."""
    rel = points - box.center
    c, s = math.cos(-box.yaw), math.sin(-box.yaw)
    local_x = c * rel[:, 0] - s * rel[:, 1]
    local_y = s * rel[:, 0] + c * rel[:, 1]
    half = box.size / 2.0
    return ((np.abs(local_x) <= half[0]) & (np.abs(local_y) <= half[1])
            & (np.abs(rel[:, 2]) <= half[2]))
