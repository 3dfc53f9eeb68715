from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import StrEnum, unique

import numpy as np
from numpy.typing import NDArray

# predicate slack for solver outputs compared against hard constraints
TOLERANCE = 1e-9


@unique
class MaskSource(StrEnum):
    """
    Where a layout mask comes from.

    Values:
        FROM_BOX: Rasterized from a solved bounding box
        FROM_ATTENTION: Thresholded cross-attention
    """

    FROM_BOX = "FROM_BOX"
    FROM_ATTENTION = "FROM_ATTENTION"


@unique
class Axis(StrEnum):
    """Canvas axis; origin is top-left so `y` grows downwards."""

    X = "x"
    Y = "y"


@unique
class Direction(StrEnum):
    """Side of a half-plane bound the box centre must lie on."""

    GREATER = "greater"
    LESS = "less"


@dataclass(frozen=True)
class BBox:
    """A normalized box, origin top-left, coordinates in [0, 1]."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            msg = f"Invalid box coordinates {self}"
            raise ValueError(msg)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> BBox:
        """Build a box from its centre and size, clipping rounding noise at the canvas edges."""
        x0, x1 = cx - w / 2, cx + w / 2
        y0, y1 = cy - h / 2, cy + h / 2
        return cls(max(0.0, x0), max(0.0, y0), min(1.0, x1), min(1.0, y1))

    @property
    def width(self) -> float:
        """Box width."""
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        """Box height."""
        return self.y1 - self.y0

    @property
    def area(self) -> float:
        """Box area."""
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        """Box centre (x, y)."""
        return (self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2

    def intersection(self, other: BBox) -> float:
        """Area of the intersection with `other`."""
        w = min(self.x1, other.x1) - max(self.x0, other.x0)
        h = min(self.y1, other.y1) - max(self.y0, other.y0)
        return max(0.0, w) * max(0.0, h)

    def iou(self, other: BBox) -> float:
        """Intersection over union with `other`."""
        inter = self.intersection(other)
        return inter / (self.area + other.area - inter)

    def center_distance(self, other: BBox) -> float:
        """Euclidean distance between the two centres."""
        (ax, ay), (bx, by) = self.center, other.center
        return math.hypot(ax - bx, ay - by)

    def contains(self, other: BBox) -> bool:
        """Whether `other` lies inside this box."""
        return (
            other.x0 >= self.x0 - TOLERANCE
            and other.y0 >= self.y0 - TOLERANCE
            and other.x1 <= self.x1 + TOLERANCE
            and other.y1 <= self.y1 + TOLERANCE
        )


CANVAS = BBox(0.0, 0.0, 1.0, 1.0)


@dataclass
class LayoutMask:
    """
    A binary spatial mask on the attention grid.

    Attributes:
        grid (NDArray[np.bool_]): H'xW' boolean matrix.
        source (MaskSource): How the mask was produced.
        degenerate (bool): Set when built from a constant attention map (all cells on).
    """

    grid: NDArray[np.bool_]
    source: MaskSource
    degenerate: bool = False

    def __post_init__(self) -> None:
        if self.grid.ndim != 2:  # noqa: PLR2004
            raise ValueError("Layout mask must be two-dimensional")

    @property
    def shape(self) -> tuple[int, int]:
        """Grid shape (H', W')."""
        return self.grid.shape[0], self.grid.shape[1]

    def as_float(self) -> NDArray[np.float64]:
        """The mask as a 0/1 float matrix."""
        return self.grid.astype(np.float64)

    @classmethod
    def full(cls, h: int, w: int, source: MaskSource = MaskSource.FROM_BOX) -> LayoutMask:
        """All-on mask."""
        return cls(np.ones((h, w), dtype=bool), source)

    @classmethod
    def empty(cls, h: int, w: int, source: MaskSource = MaskSource.FROM_BOX) -> LayoutMask:
        """All-off mask, used by ablations and identity runs."""
        return cls(np.zeros((h, w), dtype=bool), source)


# a constraint target is either another box variable (by index) or a fixed box
Target = int | BBox


def _resolve(target: Target, boxes: list[BBox]) -> BBox:
    return boxes[target] if isinstance(target, int) else target


@dataclass(frozen=True)
class HalfPlane:
    """The centre of box `var` lies strictly on one side of `bound` along `axis`."""

    var: int
    axis: Axis
    bound: float
    direction: Direction

    def is_satisfied(self, boxes: list[BBox]) -> bool:
        """Evaluate the predicate on concrete boxes."""
        cx, cy = boxes[self.var].center
        value = cx if self.axis is Axis.X else cy
        return value > self.bound if self.direction is Direction.GREATER else value < self.bound


@dataclass(frozen=True)
class Proximity:
    """Centres of `var` and `other` are at most `max_distance` apart."""

    var: int
    other: Target
    max_distance: float

    def is_satisfied(self, boxes: list[BBox]) -> bool:
        """Evaluate the predicate on concrete boxes."""
        return boxes[self.var].center_distance(_resolve(self.other, boxes)) <= self.max_distance + TOLERANCE


@dataclass(frozen=True)
class Overlap:
    """Boxes `var` and `other` overlap with IoU of at least `min_iou`."""

    var: int
    other: Target
    min_iou: float

    def is_satisfied(self, boxes: list[BBox]) -> bool:
        """Evaluate the predicate on concrete boxes."""
        return boxes[self.var].iou(_resolve(self.other, boxes)) >= self.min_iou - TOLERANCE


@dataclass(frozen=True)
class Containment:
    """Box `var` lies inside `box`."""

    var: int
    box: BBox

    def is_satisfied(self, boxes: list[BBox]) -> bool:
        """Evaluate the predicate on concrete boxes."""
        return self.box.contains(boxes[self.var])


@dataclass(frozen=True)
class NoOverlap:
    """Box `var` has zero-area intersection with every target."""

    var: int
    others: tuple[Target, ...]

    def is_satisfied(self, boxes: list[BBox]) -> bool:
        """Evaluate the predicate on concrete boxes."""
        box = boxes[self.var]
        return all(box.intersection(_resolve(o, boxes)) <= TOLERANCE for o in self.others)


Constraint = HalfPlane | Proximity | Overlap | Containment | NoOverlap


@dataclass
class ConstraintSet:
    """
    Constraints over declared box variables.

    Attributes:
        names (list[str]): Entity name of each box variable.
        sizes (list[tuple[float, float]]): Fixed (width, height) of each box variable.
        constraints (list[Constraint]): Hard constraints.
    """

    names: list[str] = field(default_factory=list)
    sizes: list[tuple[float, float]] = field(default_factory=list)
    constraints: list[Constraint] = field(default_factory=list)

    def declare(self, name: str, size: tuple[float, float]) -> int:
        """Declare a box variable and return its index."""
        self.names.append(name)
        self.sizes.append(size)
        return len(self.names) - 1

    def add(self, constraint: Constraint) -> None:
        """Add a constraint, checking that it references declared variables only."""
        refs = [constraint.var]
        if isinstance(constraint, (Proximity, Overlap)) and isinstance(constraint.other, int):
            refs.append(constraint.other)
        if isinstance(constraint, NoOverlap):
            refs.extend(o for o in constraint.others if isinstance(o, int))
        if any(not 0 <= r < len(self.names) for r in refs):
            msg = f"Constraint {constraint} references an undeclared box variable"
            raise ValueError(msg)
        self.constraints.append(constraint)

    def without(self, kind: type) -> ConstraintSet:
        """Copy of the set with every constraint of `kind` dropped."""
        return ConstraintSet(
            names=list(self.names),
            sizes=list(self.sizes),
            constraints=[c for c in self.constraints if not isinstance(c, kind)],
        )

    def all_satisfied(self, boxes: list[BBox]) -> bool:
        """Whether every constraint holds on `boxes`."""
        return all(c.is_satisfied(boxes) for c in self.constraints)


@dataclass
class LayoutReport:
    """Named boxes of a scene, in insertion order."""

    boxes: dict[str, BBox] = field(default_factory=dict)

    def copy(self) -> LayoutReport:
        """Shallow copy."""
        return LayoutReport(dict(self.boxes))
