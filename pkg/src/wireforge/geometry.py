"""3D cubic Bezier wires, orthographic view planes, and the projection maps.

The scene lives in the cube [-1, 1]^3. A wire is a chain of cubic segments
sharing endpoints (C0); all control points of a wire art sit in one flat
(P, 3) array so that a shared chain point is a single row referenced by both
adjacent segments. Projecting a 3D cubic onto a plane equals forming the 2D
cubic of the projected control points, so rendering reduces to 2D; this
module supplies that projection and its exact adjoint for the backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ORTHO_TOL = 1e-12


def bernstein3(t):
    """Cubic Bernstein weights at t. Scalar t -> (4,), array (T,) -> (T, 4)."""
    t = np.asarray(t, dtype=np.float64)
    s = 1.0 - t
    w = np.stack([s * s * s, 3.0 * s * s * t, 3.0 * s * t * t, t * t * t], axis=-1)
    return w


def bezier_point(ctrl, t):
    """Evaluate a cubic Bezier with control points ctrl (4, D) at t in [0, 1].

    t may be a scalar (returns (D,)) or a (T,) array (returns (T, D)).
    """
    ctrl = np.asarray(ctrl, dtype=np.float64)
    if ctrl.shape[0] != 4:
        raise ValueError(f"cubic segment needs 4 control points, got {ctrl.shape[0]}")
    tval = np.asarray(t, dtype=np.float64)
    if np.any(tval < 0.0) or np.any(tval > 1.0):
        raise ValueError(f"curve parameter t={t!r} outside [0, 1]")
    return bernstein3(tval) @ ctrl


@dataclass(frozen=True)
class ViewPlane:
    """Orthographic view: unit normal, a point on the plane, in-plane basis u, v.

    {u, v, normal} must be orthonormal and right-handed (u x v = normal).
    """

    normal: np.ndarray
    origin: np.ndarray
    u: np.ndarray
    v: np.ndarray
    name: str = ""

    def __post_init__(self):
        for attr in ("normal", "origin", "u", "v"):
            arr = np.asarray(getattr(self, attr), dtype=np.float64)
            if arr.shape != (3,) or not np.all(np.isfinite(arr)):
                raise ValueError(f"ViewPlane.{attr} must be a finite 3-vector")
            object.__setattr__(self, attr, arr)
        for name, vec in (("normal", self.normal), ("u", self.u), ("v", self.v)):
            if abs(np.linalg.norm(vec) - 1.0) > _ORTHO_TOL:
                raise ValueError(f"ViewPlane.{name} must be unit length")
        for a, b in ((self.u, self.v), (self.u, self.normal), (self.v, self.normal)):
            if abs(float(a @ b)) > _ORTHO_TOL:
                raise ValueError("ViewPlane basis must be pairwise orthogonal")
        if np.max(np.abs(np.cross(self.u, self.v) - self.normal)) > _ORTHO_TOL:
            raise ValueError("ViewPlane basis must be right-handed (u x v = normal)")


def axis_view_planes() -> dict[str, ViewPlane]:
    """The three canonical coordinate-plane views through the origin.

    X view looks down +X with u=+Y, v=+Z; Y view u=+Z, v=+X; Z view u=+X, v=+Y.
    """
    ex, ey, ez = np.eye(3)
    o = np.zeros(3)
    return {
        "X": ViewPlane(ex, o, ey, ez, name="X"),
        "Y": ViewPlane(ey, o, ez, ex, name="Y"),
        "Z": ViewPlane(ez, o, ex, ey, name="Z"),
    }


@dataclass(frozen=True)
class Window:
    """Canvas window: scene offsets along u, v are divided by `scale` and
    shifted to `center`, landing in canvas-normalized [0, 1]^2 coordinates.

    The default (scale 2, center (0.5, 0.5)) maps the [-1, 1] scene extent
    onto the full canvas.
    """

    scale: float = 2.0
    center: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if self.scale == 0.0:
            raise ValueError("window scale must be nonzero")


def project_point(p, plane: ViewPlane):
    """Drop p onto the plane along the normal: p - [N.(p - q)] N.

    Accepts a single (3,) point or an (N, 3) batch.
    """
    p = np.asarray(p, dtype=np.float64)
    d = (p - plane.origin) @ plane.normal
    return p - np.multiply.outer(d, plane.normal)


def to_plane_coords(p, plane: ViewPlane, window: Window = Window()):
    """Coordinates of an on-plane point in the canvas-normalized frame."""
    p = np.asarray(p, dtype=np.float64)
    rel = p - plane.origin
    cx, cy = window.center
    x = (rel @ plane.u) / window.scale + cx
    y = (rel @ plane.v) / window.scale + cy
    return np.stack([x, y], axis=-1)


@dataclass(frozen=True)
class ProjectionMap:
    """The affine map Point3 -> Point2 of to_plane_coords(project_point(.)).

    Since u, v are orthogonal to the normal, the drop onto the plane vanishes
    inside the dot products and the whole chain is matrix @ p + offset.
    """

    matrix: np.ndarray  # (2, 3)
    offset: np.ndarray  # (2,)

    @classmethod
    def from_plane(cls, plane: ViewPlane, window: Window = Window()) -> "ProjectionMap":
        m = np.stack([plane.u, plane.v]) / window.scale
        off = np.asarray(window.center, dtype=np.float64) - m @ plane.origin
        return cls(m, off)

    def apply(self, pts):
        """(..., 3) scene points -> (..., 2) canvas-normalized points."""
        return np.asarray(pts, dtype=np.float64) @ self.matrix.T + self.offset

    def adjoint(self, g2d):
        """Transpose map: (..., 2) canvas-coordinate gradients -> (..., 3)."""
        return np.asarray(g2d, dtype=np.float64) @ self.matrix


def project_wire(ctrl3, plane: ViewPlane, window: Window = Window()):
    """Project a wire's (S, 4, 3) control points to (S, 4, 2) canvas coords.

    Chained segments stay chained: projection is pointwise, so the shared
    endpoint projects to one shared 2D point.
    """
    return ProjectionMap.from_plane(plane, window).apply(ctrl3)


def backproject_gradient(g2d, plane: ViewPlane, window: Window = Window()):
    """Pull canvas-coordinate gradients back to 3D control points (J^T g)."""
    return ProjectionMap.from_plane(plane, window).adjoint(g2d)


@dataclass
class Wire:
    """A C0 chain of cubic segments; `points` is a (3k+1, 3) view into the
    owning WireArt's flat buffer, so chain points are shared storage."""

    id: int
    points: np.ndarray

    def __post_init__(self):
        n = self.points.shape[0]
        if n < 4 or (n - 1) % 3 != 0:
            raise ValueError(f"wire needs 3k+1 control points, got {n}")

    @property
    def n_segments(self) -> int:
        return (self.points.shape[0] - 1) // 3

    def segment(self, k: int):
        """(4, 3) view of segment k; row 3 of segment k is row 0 of k+1."""
        return self.points[3 * k : 3 * k + 4]

    def control_segments(self):
        """(S, 4, 3) copy of all segments (for projection / rendering)."""
        s = self.n_segments
        idx = 3 * np.arange(s)[:, None] + np.arange(4)[None, :]
        return self.points[idx]

    @property
    def head(self):
        return self.points[0]

    @property
    def tail(self):
        return self.points[-1]


@dataclass
class WireArt:
    """All wires plus the flat (P, 3) control-point vector the optimizer owns.

    `endpoints[i]` holds the global row indices of wire i's first and last
    control points. `ctrl_index(i)` gives the (S, 4) global-row layout of
    wire i's segments, used to scatter gradients back onto shared points.
    """

    points: np.ndarray  # (P, 3) float64, single storage for everything
    wire_offsets: np.ndarray  # (n,) first point row of each wire
    wire_segments: np.ndarray  # (n,) segment count of each wire
    wires: list[Wire] = field(default_factory=list)

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64)
        self.wire_offsets = np.asarray(self.wire_offsets, dtype=np.int64)
        self.wire_segments = np.asarray(self.wire_segments, dtype=np.int64)
        counts = 3 * self.wire_segments + 1
        if self.points.shape[0] != int(counts.sum()):
            raise ValueError("point buffer does not match wire layout")
        self.wires = []
        for i, (off, seg) in enumerate(zip(self.wire_offsets, self.wire_segments)):
            self.wires.append(Wire(i, self.points[off : off + 3 * seg + 1]))

    @classmethod
    def from_segment_counts(cls, points, segment_counts) -> "WireArt":
        segment_counts = np.asarray(segment_counts, dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(3 * segment_counts + 1)])[:-1]
        return cls(points, offsets, segment_counts)

    @property
    def n_wires(self) -> int:
        return len(self.wires)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def endpoints(self):
        """(n, 2) global row indices of each wire's head and tail point."""
        heads = self.wire_offsets
        tails = self.wire_offsets + 3 * self.wire_segments
        return np.stack([heads, tails], axis=1)

    def ctrl_index(self, i: int):
        """(S, 4) global point-row index of wire i's segment control points."""
        s = int(self.wire_segments[i])
        base = int(self.wire_offsets[i])
        return base + 3 * np.arange(s)[:, None] + np.arange(4)[None, :]

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "wires": [
                {"id": w.id, "segments": w.n_segments} for w in self.wires
            ],
            "points": self.points.tolist(),
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "WireArt":
        version = data.get("schema_version")
        if version != 1:
            raise ValueError(f"unsupported wireart schema_version {version!r}")
        counts = [w["segments"] for w in data["wires"]]
        points = np.array(data["points"], dtype=np.float64)
        return cls.from_segment_counts(points, counts)
