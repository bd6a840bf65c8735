"""Boxes, rigid transforms, and the overlap measures built on them.

Every box lives in a right-handed frame with z pointing up. Yaw is measured
about z and kept in (-pi, pi].
"""

import math
from dataclasses import dataclass, replace
from typing import Sequence, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from panoptrack.utils.errors import GeometryError

TWO_PI = 2.0 * math.pi
QUATERNION_TOLERANCE = 1e-9


def wrap_angle(theta: float) -> float:
    wrapped = math.remainder(theta, TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    return wrapped


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    wrapped = np.remainder(np.asarray(theta, dtype=np.float64) + math.pi, TWO_PI) - math.pi
    return np.where(wrapped <= -math.pi, wrapped + TWO_PI, wrapped)


def angle_diff(a: float, b: float) -> float:
    return wrap_angle(a - b)


@dataclass(frozen=True)
class Box3D:
    x: float
    y: float
    z: float
    theta: float
    l: float  # noqa: E741
    w: float
    h: float

    def __post_init__(self) -> None:
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise GeometryError(
                f"box dimensions must be positive: l={self.l} w={self.w} h={self.h}"
            )
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box3D":
        if len(values) != 7:
            raise GeometryError(f"expected 7 box values, got {len(values)}")
        return cls(*(float(v) for v in values))

    def to_array(self) -> np.ndarray:
        return np.array(
            [self.x, self.y, self.z, self.theta, self.l, self.w, self.h],
            dtype=np.float64,
        )

    def as_tuple(self) -> Tuple[float, ...]:
        return (self.x, self.y, self.z, self.theta, self.l, self.w, self.h)

    @property
    def center(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    def translated(self, offset: Sequence[float]) -> "Box3D":
        return replace(
            self, x=self.x + offset[0], y=self.y + offset[1], z=self.z + offset[2]
        )


@dataclass(frozen=True)
class Box2D:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise GeometryError(
                f"degenerate 2D box: [{self.x_min}, {self.y_min}, "
                f"{self.x_max}, {self.y_max}]"
            )

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class RigidTransform:
    """Rotation as a unit quaternion (w, x, y, z) followed by a translation."""

    rotation: Tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    translation: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        rotation = tuple(float(v) for v in self.rotation)
        translation = tuple(float(v) for v in self.translation)
        if len(rotation) != 4 or len(translation) != 3:
            raise GeometryError("rotation needs 4 values and translation 3")
        norm = math.sqrt(sum(v * v for v in rotation))
        if abs(norm - 1.0) > QUATERNION_TOLERANCE:
            raise GeometryError(f"rotation quaternion is not unit norm: {norm}")
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def from_yaw(
        cls, yaw: float, translation: Sequence[float] = (0.0, 0.0, 0.0)
    ) -> "RigidTransform":
        half = 0.5 * yaw
        return cls(
            rotation=(math.cos(half), 0.0, 0.0, math.sin(half)),
            translation=tuple(translation),
        )

    @property
    def _scipy(self) -> Rotation:
        w, x, y, z = self.rotation
        return Rotation.from_quat([x, y, z, w])

    @property
    def matrix(self) -> np.ndarray:
        return self._scipy.as_matrix()

    @property
    def yaw(self) -> float:
        # Heading of the rotated x axis; exact for the yaw-only rig poses used here.
        m = self.matrix
        return math.atan2(m[1, 0], m[0, 0])

    def inverse(self) -> "RigidTransform":
        w, x, y, z = self.rotation
        conjugate = (w, -x, -y, -z)
        inverse_matrix = self.matrix.T
        translation = -inverse_matrix @ np.asarray(self.translation)
        return RigidTransform(rotation=conjugate, translation=tuple(translation))

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self applied after other."""
        rotation = self._scipy * other._scipy
        x, y, z, w = rotation.as_quat()
        norm = math.sqrt(w * w + x * x + y * y + z * z)
        translation = self.matrix @ np.asarray(other.translation) + np.asarray(
            self.translation
        )
        return RigidTransform(
            rotation=(w / norm, x / norm, y / norm, z / norm),
            translation=tuple(translation),
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix.T + np.asarray(self.translation)


def transform_box(box: Box3D, pose: RigidTransform) -> Box3D:
    center = pose.matrix @ box.center + np.asarray(pose.translation)
    return Box3D(
        x=float(center[0]),
        y=float(center[1]),
        z=float(center[2]),
        theta=box.theta + pose.yaw,
        l=box.l,
        w=box.w,
        h=box.h,
    )


def bev_distance(a: Box3D, b: Box3D) -> float:
    return math.hypot(a.x - b.x, a.y - b.y)


def bev_corners(box: Box3D) -> np.ndarray:
    """Counter-clockwise ground-plane corners, shape (4, 2)."""
    c, s = math.cos(box.theta), math.sin(box.theta)
    half_l, half_w = 0.5 * box.l, 0.5 * box.w
    local = np.array(
        [[half_l, half_w], [-half_l, half_w], [-half_l, -half_w], [half_l, -half_w]]
    )
    rotation = np.array([[c, -s], [s, c]])
    return local @ rotation.T + np.array([box.x, box.y])


def polygon_area(polygon: np.ndarray) -> float:
    if len(polygon) < 3:
        return 0.0
    x, y = polygon[:, 0], polygon[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def clip_polygon(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clipping of a polygon against a convex CCW polygon."""
    output = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p: Tuple[float, float]) -> float:
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        current, output = output, []
        previous = current[-1]
        previous_side = side(previous)
        for point in current:
            point_side = side(point)
            if point_side >= 0.0:
                if previous_side < 0.0:
                    output.append(_intersect(previous, point, previous_side, point_side))
                output.append(point)
            elif previous_side >= 0.0:
                output.append(_intersect(previous, point, previous_side, point_side))
            previous, previous_side = point, point_side
    return np.array(output, dtype=np.float64).reshape(-1, 2)


def _intersect(
    p: Tuple[float, float], q: Tuple[float, float], side_p: float, side_q: float
) -> Tuple[float, float]:
    t = side_p / (side_p - side_q)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    return polygon_area(clip_polygon(bev_corners(a), bev_corners(b)))


def iou_3d(a: Box3D, b: Box3D) -> float:
    if a == b:
        return 1.0
    # Canonical argument order makes the result exactly symmetric.
    if b.as_tuple() < a.as_tuple():
        a, b = b, a
    overlap_h = min(a.z + 0.5 * a.h, b.z + 0.5 * b.h) - max(a.z - 0.5 * a.h, b.z - 0.5 * b.h)
    if overlap_h <= 0.0:
        return 0.0
    if bev_distance(a, b) > 0.5 * (math.hypot(a.l, a.w) + math.hypot(b.l, b.w)):
        return 0.0
    area = bev_intersection_area(a, b)
    if area <= 0.0:
        return 0.0
    intersection = area * overlap_h
    union = a.volume + b.volume - intersection
    return float(min(1.0, max(0.0, intersection / union)))


def iou_2d(a: Box2D, b: Box2D) -> float:
    width = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    height = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if width <= 0.0 or height <= 0.0:
        return 0.0
    intersection = width * height
    return intersection / (a.area + b.area - intersection)
