import logging
import math

import numpy as np
from numpy.typing import NDArray

from app.core.config import RunConfig
from app.core.exceptions import (
    DegenerateAttentionError,
    InfeasibleError,
    MissingAnchorError,
    UnknownRelationError,
)
from app.entity.directive import (
    Directive,
    EditingDirective,
    ErasingDirective,
    Relation,
    RelationKind,
    SynthesisDirective,
)
from app.entity.latent import FloatArray
from app.entity.layout import (
    CANVAS,
    Axis,
    BBox,
    Constraint,
    ConstraintSet,
    Containment,
    Direction,
    HalfPlane,
    LayoutMask,
    LayoutReport,
    MaskSource,
    NoOverlap,
    Overlap,
    Proximity,
    Target,
)

logger = logging.getLogger(__name__)

GRID = 32
MAX_ITERS = 200
CONVERGENCE = 1e-4
# strict half-plane bounds are projected this far past the bound
MARGIN = 1e-6

# anchors that name the canvas itself
CANVAS_ANCHORS = frozenset({"image", "canvas", "scene", "picture", "frame"})

SEPARATED_INTERACTIONS = frozenset({"playing with", "play together", "shaking hands with", "chasing with"})


class LayoutEngine:
    """
    Deterministic replacement of a language-model layout call.

    Relation text is turned into box constraints, solved by grid initialization followed by iterative
    projection, and rasterized onto the attention grid.
    """

    def __init__(
        self,
        proximity_ratio: float = 0.25,
        wearing_iou: float = 0.3,
        default_box_ratio: float = 0.3,
        min_box_area: float = 0.01,
    ) -> None:
        """
        Initialize LayoutEngine.

        Args:
            proximity_ratio (float): Interaction radius as a fraction of the canvas diagonal.
            wearing_iou (float): Minimum IoU of a "wearing" pair.
            default_box_ratio (float): Box side as a fraction of the anchor side (or canvas side).
            min_box_area (float): Minimum box area; smaller size priors are scaled up to it.
        """
        self.proximity_ratio = proximity_ratio
        self.wearing_iou = wearing_iou
        self.default_box_ratio = default_box_ratio
        self.min_box_area = min_box_area

    @classmethod
    def from_config(cls, config: RunConfig) -> "LayoutEngine":
        """Build an engine from a run config."""
        return cls(config.proximity_ratio, config.wearing_iou, config.default_box_ratio, config.min_box_area)

    def _size(self, reference: BBox) -> tuple[float, float]:
        w = self.default_box_ratio * reference.width
        h = self.default_box_ratio * reference.height
        if w * h < self.min_box_area:
            scale = math.sqrt(self.min_box_area / (w * h))
            w, h = min(1.0, w * scale), min(1.0, h * scale)
        return w, h

    def _spatial(self, var: int, relation: Relation, anchor: BBox, canvas: BBox) -> list[Constraint]:
        cx, cy = anchor.center
        diag = math.hypot(canvas.width, canvas.height)
        match relation.lexeme:
            case "left of":
                return [HalfPlane(var, Axis.X, cx, Direction.LESS)]
            case "right of":
                return [HalfPlane(var, Axis.X, cx, Direction.GREATER)]
            case "above":
                return [HalfPlane(var, Axis.Y, cy, Direction.LESS)]
            case "below":
                return [HalfPlane(var, Axis.Y, cy, Direction.GREATER)]
            case "on top of":
                return [
                    HalfPlane(var, Axis.Y, cy, Direction.LESS),
                    HalfPlane(var, Axis.X, anchor.x0, Direction.GREATER),
                    HalfPlane(var, Axis.X, anchor.x1, Direction.LESS),
                ]
            case "under":
                return [
                    HalfPlane(var, Axis.Y, cy, Direction.GREATER),
                    HalfPlane(var, Axis.X, anchor.x0, Direction.GREATER),
                    HalfPlane(var, Axis.X, anchor.x1, Direction.LESS),
                ]
            case "next to":
                return [Proximity(var, anchor, self.proximity_ratio * diag)]
        msg = f"No geometry registered for spatial relation '{relation.lexeme}'"
        raise InfeasibleError(msg)

    def _interactional(self, var: int, partner: int, relation: Relation, canvas: BBox) -> list[Constraint]:
        radius = self.proximity_ratio * math.hypot(canvas.width, canvas.height)
        if relation.lexeme == "wearing":
            return [Proximity(var, partner, radius), Overlap(var, partner, self.wearing_iou)]
        if relation.lexeme == "hugging with":
            return [Proximity(var, partner, radius / 2)]
        constraints: list[Constraint] = [Proximity(var, partner, radius)]
        if relation.lexeme in SEPARATED_INTERACTIONS:
            constraints.append(NoOverlap(var, (partner,)))
        return constraints

    def relation_to_constraints(
        self,
        directive: SynthesisDirective,
        anchors: dict[str, BBox],
        canvas: BBox = CANVAS,
    ) -> ConstraintSet:
        """
        Translate a synthesis directive into box constraints.

        Spatial lexemes become half-plane (or proximity) constraints relative to the anchor box and apply to
        every inserted entity; interactional lexemes become proximity, plus overlap for "wearing" and
        separation for the play/chase/handshake family. Every box is contained in the canvas.

        Args:
            directive (SynthesisDirective): Directive to place.
            anchors (dict[str, BBox]): Known boxes by entity name.
            canvas (BBox): Canvas box.

        Raises:
            MissingAnchorError: If the position anchor has no box.
            UnknownRelationError: If a relation has the wrong kind for its slot.

        Returns:
            ConstraintSet: Variables (subject first, then partner) and their constraints.
        """
        anchor_box: BBox | None = None
        if directive.position and directive.anchor:
            if directive.position.kind is not RelationKind.SPATIAL:
                msg = f"'{directive.position.lexeme}' is not a spatial relation"
                raise UnknownRelationError(msg)
            anchor_box = anchors.get(directive.anchor.name)
            if anchor_box is None and directive.anchor.name in CANVAS_ANCHORS:
                anchor_box = canvas
            if anchor_box is None:
                msg = f"No box known for anchor '{directive.anchor.name}'"
                raise MissingAnchorError(msg)

        reference = anchor_box or canvas
        cset = ConstraintSet()
        variables = [cset.declare(e.name, self._size(reference)) for e in directive.inserted]
        for var in variables:
            cset.add(Containment(var, canvas))
            if directive.position and anchor_box is not None:
                for constraint in self._spatial(var, directive.position, anchor_box, canvas):
                    cset.add(constraint)

        if directive.relation and len(variables) == 2:  # noqa: PLR2004
            for constraint in self._interactional(variables[0], variables[1], directive.relation, canvas):
                cset.add(constraint)
        return cset

    @staticmethod
    def _with_existing(constraints: ConstraintSet, existing: list[BBox]) -> list[Constraint]:
        result = list(constraints.constraints)
        if existing:
            result.extend(NoOverlap(var, tuple(existing)) for var in range(len(constraints.names)))
        return result

    @staticmethod
    def _unary_ok(constraint: Constraint, var: int, box: BBox) -> bool:
        """Evaluate a constraint on a lone candidate box; pairwise constraints are ignored."""
        if constraint.var != var:
            return True
        if isinstance(constraint, (Proximity, Overlap)) and isinstance(constraint.other, int):
            return True
        if isinstance(constraint, NoOverlap):
            fixed = tuple(o for o in constraint.others if isinstance(o, BBox))
            return NoOverlap(0, fixed).is_satisfied([box])
        trial = [box] * (var + 1)
        return constraint.is_satisfied(trial)

    def candidates(self, constraints: ConstraintSet, existing: list[BBox], var: int) -> NDArray[np.float64]:
        """Centres on the 32x32 grid whose box satisfies every unary constraint of `var`."""
        w, h = constraints.sizes[var]
        all_constraints = self._with_existing(constraints, existing)
        points = []
        for gy in range(GRID):
            for gx in range(GRID):
                cx, cy = (gx + 0.5) / GRID, (gy + 0.5) / GRID
                if cx - w / 2 < 0 or cx + w / 2 > 1 or cy - h / 2 < 0 or cy + h / 2 > 1:
                    continue
                box = BBox.from_center(cx, cy, w, h)
                if all(self._unary_ok(c, var, box) for c in all_constraints):
                    points.append((cx, cy))
        return np.asarray(points, dtype=np.float64).reshape(-1, 2)

    def initialize(self, constraints: ConstraintSet, existing: list[BBox]) -> NDArray[np.float64]:
        """
        Centroid of each variable's feasible grid candidates.

        Raises:
            InfeasibleError: If a variable has no feasible candidate.

        Returns:
            NDArray[np.float64]: n x 2 initial centres.
        """
        centers = np.zeros((len(constraints.names), 2), dtype=np.float64)
        for var, name in enumerate(constraints.names):
            points = self.candidates(constraints, existing, var)
            if len(points) == 0:
                msg = f"No feasible placement for '{name}' on the candidate grid"
                raise InfeasibleError(msg)
            centers[var] = points.mean(axis=0)
        return centers

    def solve_layout(self, constraints: ConstraintSet, existing: list[BBox], seed: int = 0) -> list[BBox]:
        """
        Solve box positions by grid initialization and cyclic projection.

        Every constraint (plus no-overlap with `existing`) is projected in turn until the largest centre
        displacement of a sweep drops below 1e-4, for at most 200 sweeps. The seed only breaks symmetric
        ties between coincident boxes.

        Args:
            constraints (ConstraintSet): Variables and constraints.
            existing (list[BBox]): Boxes the new boxes must not overlap.
            seed (int): Tie-breaking seed.

        Raises:
            InfeasibleError: If no assignment satisfying every constraint is reached.

        Returns:
            list[BBox]: One box per variable.
        """
        if not constraints.names:
            return []
        rng = np.random.default_rng(seed)
        all_constraints = self._with_existing(constraints, existing)
        centers = self.initialize(constraints, existing)
        sizes = constraints.sizes

        for _ in range(MAX_ITERS):
            previous = centers.copy()
            for constraint in all_constraints:
                self._project(constraint, centers, sizes, all_constraints, rng)
            if float(np.max(np.abs(centers - previous))) < CONVERGENCE:
                break

        try:
            boxes = [BBox.from_center(cx, cy, w, h) for (cx, cy), (w, h) in zip(centers, sizes, strict=True)]
        except ValueError as exc:
            raise InfeasibleError("Projection left a box outside the canvas") from exc
        final = ConstraintSet(constraints.names, sizes, all_constraints)
        if not final.all_satisfied(boxes):
            violated = [c for c in all_constraints if not c.is_satisfied(boxes)]
            msg = f"Projection did not converge to a feasible layout; violated: {violated}"
            raise InfeasibleError(msg)
        return boxes

    def _project(
        self,
        constraint: Constraint,
        centers: NDArray[np.float64],
        sizes: list[tuple[float, float]],
        all_constraints: list[Constraint],
        rng: np.random.Generator,
    ) -> None:
        i = constraint.var
        match constraint:
            case HalfPlane(axis=axis, bound=bound, direction=direction):
                k = 0 if axis is Axis.X else 1
                if direction is Direction.GREATER and centers[i, k] <= bound:
                    centers[i, k] = bound + MARGIN
                elif direction is Direction.LESS and centers[i, k] >= bound:
                    centers[i, k] = bound - MARGIN
            case Containment(box=box):
                w, h = sizes[i]
                lo = np.array([box.x0 + w / 2, box.y0 + h / 2])
                hi = np.array([box.x1 - w / 2, box.y1 - h / 2])
                if np.all(lo <= hi):
                    centers[i] = np.clip(centers[i], lo, hi)
            case Proximity(other=other, max_distance=distance):
                self._project_proximity(i, other, distance, centers)
            case Overlap(other=other, min_iou=min_iou):
                self._project_overlap(i, other, min_iou, centers, sizes)
            case NoOverlap(others=others):
                for other in others:
                    self._project_separation(i, other, centers, sizes, all_constraints, rng)

    @staticmethod
    def _other_center(other: Target, centers: NDArray[np.float64]) -> NDArray[np.float64]:
        return centers[other] if isinstance(other, int) else np.asarray(other.center)

    def _project_proximity(self, i: int, other: Target, distance: float, centers: NDArray[np.float64]) -> None:
        target = self._other_center(other, centers)
        offset = centers[i] - target
        norm = float(np.hypot(*offset))
        limit = distance * (1 - 1e-9)
        if norm <= limit:
            return
        if isinstance(other, int):
            shift = offset / norm * (norm - limit) / 2
            centers[i] -= shift
            centers[other] += shift
        else:
            centers[i] = target + offset / norm * limit

    def _project_overlap(
        self,
        i: int,
        other: Target,
        min_iou: float,
        centers: NDArray[np.float64],
        sizes: list[tuple[float, float]],
    ) -> None:
        other_size = sizes[other] if isinstance(other, int) else (other.width, other.height)
        ci, co = centers[i].copy(), self._other_center(other, centers).copy()

        def iou_at(scale: float) -> float:
            mid = (ci + co) / 2 if isinstance(other, int) else co
            a = mid + (ci - mid) * scale
            b = mid + (co - mid) * scale
            return _iou_centers(a, sizes[i], b, other_size)

        if iou_at(1.0) >= min_iou or iou_at(0.0) < min_iou:
            return
        lo, hi = 0.0, 1.0
        for _ in range(60):
            mid_scale = (lo + hi) / 2
            if iou_at(mid_scale) >= min_iou:
                lo = mid_scale
            else:
                hi = mid_scale
        mid = (ci + co) / 2 if isinstance(other, int) else co
        centers[i] = mid + (ci - mid) * lo
        if isinstance(other, int):
            centers[other] = mid + (co - mid) * lo

    def _project_separation(
        self,
        i: int,
        other: Target,
        centers: NDArray[np.float64],
        sizes: list[tuple[float, float]],
        all_constraints: list[Constraint],
        rng: np.random.Generator,
    ) -> None:
        w, h = sizes[i]
        ow, oh = sizes[other] if isinstance(other, int) else (other.width, other.height)
        co = self._other_center(other, centers)
        delta = centers[i] - co
        pen_x = (w + ow) / 2 - abs(delta[0])
        pen_y = (h + oh) / 2 - abs(delta[1])
        if pen_x <= 0 or pen_y <= 0:
            return

        pushes = []
        for k, pen in ((0, pen_x), (1, pen_y)):
            if delta[k] == 0:
                signs = [1.0, -1.0] if rng.random() < 0.5 else [-1.0, 1.0]  # noqa: PLR2004
            else:
                sign = math.copysign(1.0, delta[k])
                signs = [sign, -sign]
            for sign in signs:
                extra = pen if sign == math.copysign(1.0, delta[k] or sign) else pen + 2 * abs(delta[k])
                move = np.zeros(2)
                move[k] = sign * extra
                pushes.append(move)

        movable = isinstance(other, int)

        def acceptable(move: NDArray[np.float64]) -> bool:
            share = move / 2 if movable else move
            moved = centers[i] + share
            box = _box_or_none(moved, (w, h))
            return box is not None and all(self._unary_ok(c, i, box) for c in all_constraints if _is_unary(c))

        pushes.sort(key=lambda m: float(np.abs(m).sum()))
        chosen = next((m for m in pushes if acceptable(m)), pushes[0])
        if movable:
            centers[i] += chosen / 2
            centers[other] -= chosen / 2
        else:
            centers[i] += chosen

    def place(
        self,
        directive: SynthesisDirective,
        layout: LayoutReport,
        seed: int = 0,
        canvas: BBox = CANVAS,
    ) -> dict[str, BBox]:
        """
        Place the entities of a synthesis directive into an existing scene.

        New boxes avoid every existing box except the anchor. On infeasibility the no-overlap constraints are
        relaxed first, then proximity.

        Raises:
            InfeasibleError: If the directive cannot be placed even after relaxation.
            MissingAnchorError: If the anchor has no box.

        Returns:
            dict[str, BBox]: New boxes by entity name.
        """
        cset = self.relation_to_constraints(directive, layout.boxes, canvas)
        anchor_name = directive.anchor.name if directive.anchor else None
        new_names = set(cset.names)
        existing = [box for name, box in layout.boxes.items() if name != anchor_name and name not in new_names]

        attempts = [(cset, existing), (cset.without(NoOverlap), []), (cset.without(NoOverlap).without(Proximity), [])]
        for attempt, (constraints, obstacles) in enumerate(attempts):
            try:
                boxes = self.solve_layout(constraints, obstacles, seed)
            except InfeasibleError:
                logger.info("Layout attempt %d infeasible for %s", attempt, directive.subject.name)
                continue
            return dict(zip(cset.names, boxes, strict=True))
        msg = f"Cannot place '{directive.subject.name}' even after relaxing constraints"
        raise InfeasibleError(msg)

    def plan(
        self,
        directives: list[Directive],
        anchors: LayoutReport | None = None,
        seed: int = 0,
    ) -> list[LayoutReport]:
        """
        Layout report after each directive of a script, without running diffusion.

        Synthesis places new boxes, editing hands the source's box to the target and erasing drops the box.
        """
        layout = anchors.copy() if anchors else LayoutReport()
        reports = []
        for directive in directives:
            layout = layout.copy()
            match directive:
                case SynthesisDirective():
                    layout.boxes.update(self.place(directive, layout, seed))
                case EditingDirective(source=source, target=target):
                    layout.boxes = {target.name if k == source.name else k: v for k, v in layout.boxes.items()}
                case ErasingDirective(target=target):
                    layout.boxes.pop(target.name, None)
            reports.append(layout)
        return reports


def _iou_centers(
    a: NDArray[np.float64],
    a_size: tuple[float, float],
    b: NDArray[np.float64],
    b_size: tuple[float, float],
) -> float:
    ix = max(0.0, min(a[0] + a_size[0] / 2, b[0] + b_size[0] / 2) - max(a[0] - a_size[0] / 2, b[0] - b_size[0] / 2))
    iy = max(0.0, min(a[1] + a_size[1] / 2, b[1] + b_size[1] / 2) - max(a[1] - a_size[1] / 2, b[1] - b_size[1] / 2))
    inter = ix * iy
    return inter / (a_size[0] * a_size[1] + b_size[0] * b_size[1] - inter)


def _box_or_none(center: NDArray[np.float64], size: tuple[float, float]) -> BBox | None:
    try:
        return BBox.from_center(float(center[0]), float(center[1]), *size)
    except ValueError:
        return None


def _is_unary(constraint: Constraint) -> bool:
    return isinstance(constraint, (HalfPlane, Containment)) or (
        isinstance(constraint, Proximity) and not isinstance(constraint.other, int)
    )


def rasterize_mask(box: BBox, h: int, w: int) -> LayoutMask:
    """
    Rasterize a box onto an h x w grid.

    A cell is set when its centre lies inside the (closed) box; when no centre does, the cell containing the
    box centre is set.

    Returns:
        LayoutMask: Mask with source FROM_BOX.
    """
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    cols = (xs >= box.x0) & (xs <= box.x1)
    rows = (ys >= box.y0) & (ys <= box.y1)
    grid = np.outer(rows, cols)
    if not grid.any():
        cx, cy = box.center
        grid[min(int(cy * h), h - 1), min(int(cx * w), w - 1)] = True
    return LayoutMask(grid, MaskSource.FROM_BOX)


def attention_to_mask(attn: FloatArray, threshold_quantile: float, *, strict: bool = False) -> LayoutMask:
    """
    Threshold a non-negative attention map at one of its quantiles.

    Cells strictly above the quantile are set (cells equal to it when nothing is strictly above). A constant
    map yields an all-on mask flagged `degenerate`.

    Args:
        attn (FloatArray): Non-negative H' x W' map, typically softmaxed attention.
        threshold_quantile (float): Quantile in (0, 1).
        strict (bool): Raise on constant maps instead of returning the flagged mask.

    Raises:
        ValueError: If the quantile is out of range or the map has negative values.
        DegenerateAttentionError: In strict mode, if the map is constant.

    Returns:
        LayoutMask: Mask with source FROM_ATTENTION.
    """
    if not 0.0 < threshold_quantile < 1.0:
        raise ValueError("threshold_quantile must lie in (0, 1)")
    if np.any(attn < 0):
        raise ValueError("attention must be non-negative")

    if float(attn.max() - attn.min()) <= 1e-15 * max(1.0, float(attn.max())):
        if strict:
            raise DegenerateAttentionError("Attention map is constant")
        logger.warning("Constant attention map, falling back to an all-on mask")
        return LayoutMask(np.ones(attn.shape, dtype=bool), MaskSource.FROM_ATTENTION, degenerate=True)

    threshold = float(np.quantile(attn, threshold_quantile))
    grid = attn > threshold
    if not grid.any():
        grid = attn >= threshold
    return LayoutMask(grid, MaskSource.FROM_ATTENTION)


def mask_bbox(mask: LayoutMask) -> BBox:
    """Smallest box covering every set cell of a mask."""
    rows = np.flatnonzero(mask.grid.any(axis=1))
    cols = np.flatnonzero(mask.grid.any(axis=0))
    h, w = mask.shape
    return BBox(cols[0] / w, rows[0] / h, (cols[-1] + 1) / w, (rows[-1] + 1) / h)


def mass_center(probabilities: FloatArray) -> tuple[float, float]:
    """Centre of mass (x, y) of a normalized map in canvas coordinates."""
    h, w = probabilities.shape
    xs = (np.arange(w) + 0.5) / w
    ys = (np.arange(h) + 0.5) / h
    total = float(probabilities.sum())
    return float(probabilities.sum(axis=0) @ xs) / total, float(probabilities.sum(axis=1) @ ys) / total
