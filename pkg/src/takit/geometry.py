"""Axis-aligned boxes, IoU, and coordinate-convention conversion."""

import math
from dataclasses import dataclass
from enum import Enum

RANGE_TOL = 1e-6


class GeometryError(ValueError):
    pass


class DegenerateBox(GeometryError):
    pass


class OutOfRange(GeometryError):
    pass


@dataclass(frozen=True, order=True)
class Box:
    """Absolute-pixel rectangle (x_min, y_min, x_max, y_max) with positive area."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        coords = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"non-finite box coordinates {coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DegenerateBox(f"degenerate box {coords}")
        for name, c in zip(("x_min", "y_min", "x_max", "y_max"), coords):
            object.__setattr__(self, name, float(c))

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> list:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def shift(self, dx: float, dy: float) -> "Box":
        return Box(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)

    def clamp(self, image: "ImageSize") -> "Box":
        """Clip to image bounds; raises DegenerateBox if nothing is left."""
        return Box(
            min(max(self.x_min, 0.0), image.width),
            min(max(self.y_min, 0.0), image.height),
            min(max(self.x_max, 0.0), image.width),
            min(max(self.y_max, 0.0), image.height),
        )

    @classmethod
    def from_list(cls, coords) -> "Box":
        if len(coords) != 4:
            raise GeometryError(f"expected 4 coordinates, got {len(coords)}")
        return cls(*(float(c) for c in coords))


@dataclass(frozen=True)
class ImageSize:
    width: int
    height: int

    def __post_init__(self):
        if int(self.width) != self.width or int(self.height) != self.height:
            raise GeometryError("image dimensions must be integers")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"invalid image size {self.width}x{self.height}")


class CoordConvention(str, Enum):
    XYXY_ABS = "XyxyAbs"
    YXYX_ABS = "YxyxAbs"
    XYXY_NORM01 = "XyxyNorm01"
    XYXY_REL1000 = "XyxyRel1000"


def iou(a: Box, b: Box) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def _scale_for(conv: CoordConvention, image: ImageSize):
    if conv is CoordConvention.XYXY_NORM01:
        return float(image.width), float(image.height), 1.0
    if conv is CoordConvention.XYXY_REL1000:
        return image.width / 1000.0, image.height / 1000.0, 1000.0
    return None


def to_canonical(coords, conv: CoordConvention, image: ImageSize) -> Box:
    """Convert four native coordinates to a canonical absolute XYXY box."""
    conv = CoordConvention(conv)
    if len(coords) != 4:
        raise GeometryError(f"expected 4 coordinates, got {len(coords)}")
    c = [float(v) for v in coords]
    if not all(math.isfinite(v) for v in c):
        raise GeometryError(f"non-finite coordinates {coords}")
    if conv is CoordConvention.YXYX_ABS:
        return Box(c[1], c[0], c[3], c[2])
    scale = _scale_for(conv, image)
    if scale is None:
        return Box(*c)
    sx, sy, upper = scale
    tol = RANGE_TOL * upper
    if any(v < -tol or v > upper + tol for v in c):
        raise OutOfRange(f"{conv.value} coordinates {coords} outside [0, {upper:g}]")
    c = [min(max(v, 0.0), upper) for v in c]
    return Box(c[0] * sx, c[1] * sy, c[2] * sx, c[3] * sy)


def from_canonical(box: Box, conv: CoordConvention, image: ImageSize) -> list:
    """Inverse of :func:`to_canonical`; the box is clamped to the image first."""
    conv = CoordConvention(conv)
    box = box.clamp(image)
    if conv is CoordConvention.YXYX_ABS:
        return [box.y_min, box.x_min, box.y_max, box.x_max]
    scale = _scale_for(conv, image)
    if scale is None:
        return box.as_list()
    sx, sy, _ = scale
    return [box.x_min / sx, box.y_min / sy, box.x_max / sx, box.y_max / sy]
