"""Deterministic synthetic cloud sequences with exact per-point ground truth.

Scenes are built from plane patches, boxes, and spheres; movers follow a
constant velocity or a piecewise-linear waypoint path. Static surfaces are
sampled once and re-observed every frame (as a fixed sensor scanning a
static scene would), while mover samples ride along with the shape. Each
point carries a persistent within-frame time offset so frames look like a
real scan rather than a single instant; mover positions are evaluated at
each point's own timestamp, so a sampled moving plane satisfies its
spacetime plane equation exactly and the closed-form score below is an
exact oracle for the full pipeline.

When a sensor origin is given, closed solids (boxes, spheres) expose only
their sensor-facing surface elements, as a real range sensor would; plane
patches count as thin two-sided sheets and are never culled. Occlusion
between primitives is not modeled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cloud import Cloud
from .config import parse_kv_text
from .errors import SceneError

__all__ = [
    "Plane",
    "Box",
    "Sphere",
    "Mover",
    "SensorModel",
    "SceneSpec",
    "LabeledCloud",
    "generate",
    "moving_plane_oracle",
    "plane_basis",
    "plane_interior_mask",
    "parse_scene",
    "load_scene",
    "bundled_scene_path",
]


def _unit(v, what):
    v = np.asarray(v, dtype=np.float64).reshape(3)
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > 1e-9:
        raise SceneError(f"{what} must be a unit vector (norm {n:.12f})")
    return v / n


def plane_basis(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic in-plane orthonormal axes (u, v) for a unit normal."""
    n = np.asarray(normal, dtype=np.float64)
    helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(n, helper)
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return u, v


@dataclass(frozen=True)
class Plane:
    """Rectangular plane patch: center, unit normal, in-plane half-extents."""

    center: tuple[float, float, float]
    normal: tuple[float, float, float]
    extents: tuple[float, float]

    def __post_init__(self):
        _unit(self.normal, "plane normal")
        if min(self.extents) <= 0:
            raise SceneError(f"plane extents must be > 0, got {self.extents}")

    def area(self) -> float:
        return 4.0 * self.extents[0] * self.extents[1]

    def sample_local(self, rng, n: int) -> np.ndarray:
        u, v = plane_basis(_unit(self.normal, "plane normal"))
        a = rng.uniform(-self.extents[0], self.extents[0], n)
        b = rng.uniform(-self.extents[1], self.extents[1], n)
        return a[:, None] * u + b[:, None] * v

    def local_normals(self, pts: np.ndarray):
        return None  # thin sheet, visible from both sides


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, sampled on its surface. ``size`` is full edge lengths."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]

    def __post_init__(self):
        if min(self.size) <= 0:
            raise SceneError(f"box size must be > 0, got {self.size}")

    def area(self) -> float:
        sx, sy, sz = self.size
        return 2.0 * (sx * sy + sy * sz + sx * sz)

    def sample_local(self, rng, n: int) -> np.ndarray:
        sx, sy, sz = self.size
        face_areas = np.array([sy * sz, sy * sz, sx * sz, sx * sz, sx * sy, sx * sy])
        face = rng.choice(6, size=n, p=face_areas / face_areas.sum())
        a = rng.uniform(-0.5, 0.5, n)
        b = rng.uniform(-0.5, 0.5, n)
        pts = np.empty((n, 3))
        for f, (axis, sign) in enumerate([(0, 1), (0, -1), (1, 1), (1, -1), (2, 1), (2, -1)]):
            m = face == f
            o1, o2 = [(1, 2), (1, 2), (0, 2), (0, 2), (0, 1), (0, 1)][f]
            pts[m, axis] = 0.5 * self.size[axis] * sign
            pts[m, o1] = a[m] * self.size[o1]
            pts[m, o2] = b[m] * self.size[o2]
        return pts

    def local_normals(self, pts: np.ndarray) -> np.ndarray:
        half = 0.5 * np.asarray(self.size)
        at_face = np.isclose(np.abs(pts), half)  # exact by construction
        axis = np.argmax(at_face, axis=1)
        normals = np.zeros_like(pts)
        rows = np.arange(pts.shape[0])
        normals[rows, axis] = np.sign(pts[rows, axis])
        return normals


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise SceneError(f"sphere radius must be > 0, got {self.radius}")

    def area(self) -> float:
        return 4.0 * math.pi * self.radius ** 2

    def sample_local(self, rng, n: int) -> np.ndarray:
        g = rng.normal(size=(n, 3))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return g * self.radius

    def local_normals(self, pts: np.ndarray) -> np.ndarray:
        return pts / np.linalg.norm(pts, axis=1, keepdims=True)


Primitive = Plane | Box | Sphere


@dataclass(frozen=True)
class Mover:
    """A primitive with motion: constant velocity or (t, x, y, z) waypoints.

    Waypoint paths are piecewise linear in the shape center; outside the
    waypoint time range the center holds at the endpoint with zero velocity.
    """

    shape: Primitive
    velocity: tuple[float, float, float] | None = None
    waypoints: tuple[tuple[float, float, float, float], ...] | None = None

    def __post_init__(self):
        if (self.velocity is None) == (self.waypoints is None):
            raise SceneError("mover needs exactly one of velocity or waypoints")
        if self.waypoints is not None:
            times = [w[0] for w in self.waypoints]
            if len(times) < 2 or sorted(times) != times or len(set(times)) != len(times):
                raise SceneError("waypoints need >= 2 strictly increasing times")

    def center_at(self, tau: np.ndarray) -> np.ndarray:
        base = np.asarray(self.shape.center, dtype=np.float64)
        if self.velocity is not None:
            return base + np.outer(tau, np.asarray(self.velocity, dtype=np.float64))
        wp = np.asarray(self.waypoints, dtype=np.float64)
        out = np.empty((tau.size, 3))
        for k in range(3):
            out[:, k] = np.interp(tau, wp[:, 0], wp[:, k + 1])
        return out

    def velocity_at(self, tau: np.ndarray) -> np.ndarray:
        if self.velocity is not None:
            return np.broadcast_to(np.asarray(self.velocity, dtype=np.float64),
                                   (tau.size, 3)).copy()
        wp = np.asarray(self.waypoints, dtype=np.float64)
        seg = np.clip(np.searchsorted(wp[:, 0], tau, side="right") - 1, 0, wp.shape[0] - 2)
        dt = wp[seg + 1, 0] - wp[seg, 0]
        vel = (wp[seg + 1, 1:] - wp[seg, 1:]) / dt[:, None]
        outside = (tau < wp[0, 0]) | (tau >= wp[-1, 0])
        vel[outside] = 0.0
        return vel


@dataclass(frozen=True)
class SensorModel:
    """Sampling model: rate, frame count, per-frame budget, noise, origin."""

    frame_rate: float = 10.0
    frames: int = 21
    points_per_frame: int = 5000
    noise_sigma: float = 0.0
    origin: tuple[float, float, float] | None = None
    range_weighted: bool = False

    def __post_init__(self):
        if self.frame_rate <= 0:
            raise SceneError(f"frame_rate must be > 0, got {self.frame_rate}")
        if self.frames < 1:
            raise SceneError(f"frames must be >= 1, got {self.frames}")
        if self.points_per_frame < 1:
            raise SceneError("points_per_frame must be >= 1")
        if self.noise_sigma < 0:
            raise SceneError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.range_weighted and self.origin is None:
            raise SceneError("range_weighted sampling needs a sensor origin")


@dataclass(frozen=True)
class SceneSpec:
    statics: tuple[Primitive, ...] = ()
    movers: tuple[Mover, ...] = ()
    sensor: SensorModel = field(default_factory=SensorModel)
    seed: int = 0

    def __post_init__(self):
        n_prims = len(self.statics) + len(self.movers)
        if n_prims == 0:
            raise SceneError("scene has no primitives")
        if self.sensor.points_per_frame < n_prims:
            raise SceneError(
                f"points budget {self.sensor.points_per_frame} smaller than the "
                f"{n_prims} primitives (each needs at least one sample)")


@dataclass(frozen=True)
class LabeledCloud:
    """A frame plus per-point ground truth (label and true velocity)."""

    cloud: Cloud
    labels: np.ndarray
    velocities: np.ndarray

    @property
    def origin(self):
        return None


def _allocate(budget: int, areas: np.ndarray) -> np.ndarray:
    """Largest-remainder allocation of ``budget`` samples, one minimum each."""
    n = areas.size
    counts = np.ones(n, dtype=np.int64)
    rest = budget - n
    quota = rest * areas / areas.sum()
    counts += np.floor(quota).astype(np.int64)
    frac = quota - np.floor(quota)
    short = budget - int(counts.sum())
    if short > 0:
        counts[np.argsort(-frac, kind="stable")[:short]] += 1
    return counts


def generate(spec: SceneSpec) -> list[LabeledCloud]:
    """Produce the frame sequence described by ``spec``, reproducibly."""
    rng = np.random.default_rng(spec.seed)
    sensor = spec.sensor
    prims: list[tuple[Primitive, Mover | None]] = \
        [(p, None) for p in spec.statics] + [(m.shape, m) for m in spec.movers]
    areas = np.array([p.area() for p, _ in prims])
    budget = sensor.points_per_frame

    if sensor.range_weighted:
        pool_counts = _allocate(2 * budget, areas)
    else:
        pool_counts = _allocate(budget, areas)

    # persistent per-primitive sample sets (local coords) and time offsets
    half_period = 0.5 / sensor.frame_rate
    local = []
    for (prim, mover), n in zip(prims, pool_counts):
        local.append(prim.sample_local(rng, int(n)))

    if sensor.range_weighted:
        origin = np.asarray(sensor.origin, dtype=np.float64)
        world0 = []
        for (prim, mover), loc in zip(prims, local):
            if mover is None:
                world0.append(loc + np.asarray(prim.center, dtype=np.float64))
            else:
                world0.append(loc + mover.center_at(np.zeros(1))[0])
        keep_of = []
        w_all = []
        owner = []
        for pi, w0 in enumerate(world0):
            d2 = np.sum((w0 - origin) ** 2, axis=1)
            w_all.append(1.0 / (d2 + 1e-2))
            owner.append(np.full(w0.shape[0], pi))
        w_all = np.concatenate(w_all)
        owner = np.concatenate(owner)
        chosen = rng.choice(w_all.size, size=budget, replace=True, p=w_all / w_all.sum())
        chosen.sort(kind="stable")
        starts = np.cumsum([0] + [loc.shape[0] for loc in local])
        picked = [chosen[(chosen >= starts[i]) & (chosen < starts[i + 1])] - starts[i]
                  for i in range(len(local))]
        local = [loc[sel] for loc, sel in zip(local, picked)]

    deltas = [rng.uniform(-half_period, half_period, loc.shape[0]) for loc in local]
    normals = [prim.local_normals(loc) for (prim, _), loc in zip(prims, local)]
    origin = None if sensor.origin is None else np.asarray(sensor.origin, dtype=np.float64)

    frames: list[LabeledCloud] = []
    for k in range(sensor.frames):
        stamp = k / sensor.frame_rate
        xyz_parts = []
        t_parts = []
        lab_parts = []
        vel_parts = []
        for (prim, mover), loc, delta, nrm in zip(prims, local, deltas, normals):
            tau = stamp + delta
            if mover is None:
                pts = loc + np.asarray(prim.center, dtype=np.float64)
                vel = np.zeros((loc.shape[0], 3))
            else:
                pts = loc + mover.center_at(tau)
                vel = mover.velocity_at(tau)
            if origin is not None and nrm is not None:
                # closed solids expose only sensor-facing surface elements
                visible = np.sum((pts - origin) * nrm, axis=1) < 0.0
                pts, tau, vel = pts[visible], tau[visible], vel[visible]
            if sensor.noise_sigma > 0:
                pts = pts + rng.normal(0.0, sensor.noise_sigma, pts.shape)
            xyz_parts.append(pts)
            t_parts.append(tau)
            vel_parts.append(vel)
            lab_parts.append(np.any(vel != 0.0, axis=1))
        cloud = Cloud(np.vstack(xyz_parts), np.concatenate(t_parts),
                      frame_index=k, stamp=stamp)
        frames.append(LabeledCloud(cloud=cloud,
                                   labels=np.concatenate(lab_parts),
                                   velocities=np.vstack(vel_parts)))
    return frames


def moving_plane_oracle(normal, velocity) -> float:
    """Exact pipeline score for an infinite plane in rigid translation.

    Points of a plane with unit normal n moving at velocity w satisfy
    n.p - (n.w) t = const, so the flattest direction of the 4D neighborhood
    is (n, -(n.w)) normalized and the score is |n.w| / sqrt(1 + (n.w)^2).
    Motion tangent to the plane (n.w = 0) scores 0: it is invisible to the
    detector by construction.
    """
    n = np.asarray(normal, dtype=np.float64).reshape(3)
    norm = float(np.linalg.norm(n))
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"normal must be unit length (norm {norm:.12f})")
    w = np.asarray(velocity, dtype=np.float64).reshape(3)
    nv = float(n @ w)
    return abs(nv) / math.sqrt(1.0 + nv * nv)


def plane_interior_mask(plane: Plane, xyz: np.ndarray, t: np.ndarray,
                        margin: float, velocity=(0.0, 0.0, 0.0)) -> np.ndarray:
    """True for points at least ``margin`` inside the (possibly moving) patch.

    Boundary neighborhoods violate the planar assumption behind the
    closed-form oracle, so evaluations exclude them.
    """
    n = _unit(plane.normal, "plane normal")
    u, v = plane_basis(n)
    centers = np.asarray(plane.center, dtype=np.float64) \
        + np.outer(np.asarray(t, dtype=np.float64), np.asarray(velocity, dtype=np.float64))
    rel = np.asarray(xyz, dtype=np.float64) - centers
    return (np.abs(rel @ u) <= plane.extents[0] - margin) \
        & (np.abs(rel @ v) <= plane.extents[1] - margin)


# ---------------------------------------------------------------------------
# scene files (same key = value format as the CLI config)
# ---------------------------------------------------------------------------

def parse_scene(text: str, *, seed: int | None = None) -> SceneSpec:
    """Parse a scene description. ``seed`` overrides the file's seed."""
    kv = parse_kv_text(text)
    statics = []
    movers = []
    sensor_kwargs = {}
    file_seed = 0
    for key, value in kv.items():
        tokens = value.split()
        try:
            if key.startswith("static."):
                statics.append((int(key.split(".", 1)[1]), _parse_primitive(tokens)))
            elif key.startswith("mover."):
                movers.append((int(key.split(".", 1)[1]), _parse_mover(tokens)))
            elif key == "frames":
                sensor_kwargs["frames"] = int(value)
            elif key == "rate":
                sensor_kwargs["frame_rate"] = float(value)
            elif key == "points":
                sensor_kwargs["points_per_frame"] = int(value)
            elif key == "noise":
                sensor_kwargs["noise_sigma"] = float(value)
            elif key == "origin":
                sensor_kwargs["origin"] = tuple(float(v) for v in tokens)
            elif key == "range_weighted":
                sensor_kwargs["range_weighted"] = value.lower() in ("1", "true", "yes")
            elif key == "seed":
                file_seed = int(value)
            else:
                raise SceneError(f"unknown scene key {key!r}")
        except (ValueError, IndexError) as exc:
            raise SceneError(f"bad scene entry {key!r}: {exc}") from exc
    statics.sort(key=lambda kv_: kv_[0])
    movers.sort(key=lambda kv_: kv_[0])
    return SceneSpec(
        statics=tuple(p for _, p in statics),
        movers=tuple(m for _, m in movers),
        sensor=SensorModel(**sensor_kwargs),
        seed=file_seed if seed is None else seed,
    )


def _parse_primitive(tokens: list[str]) -> Primitive:
    kind = tokens[0]
    vals = [float(v) for v in tokens[1:]]
    if kind == "plane":
        if len(vals) != 8:
            raise SceneError("plane needs: cx cy cz nx ny nz ex ey")
        return Plane(center=tuple(vals[0:3]), normal=tuple(vals[3:6]),
                     extents=tuple(vals[6:8]))
    if kind == "box":
        if len(vals) != 6:
            raise SceneError("box needs: cx cy cz sx sy sz")
        return Box(center=tuple(vals[0:3]), size=tuple(vals[3:6]))
    if kind == "sphere":
        if len(vals) != 4:
            raise SceneError("sphere needs: cx cy cz r")
        return Sphere(center=tuple(vals[0:3]), radius=vals[3])
    raise SceneError(f"unknown primitive {kind!r}")


def _parse_mover(tokens: list[str]) -> Mover:
    if "vel" in tokens:
        cut = tokens.index("vel")
        shape = _parse_primitive(tokens[:cut])
        vals = [float(v) for v in tokens[cut + 1:]]
        if len(vals) != 3:
            raise SceneError("vel needs: vx vy vz")
        return Mover(shape=shape, velocity=tuple(vals))
    if "path" in tokens:
        cut = tokens.index("path")
        shape = _parse_primitive(tokens[:cut])
        waypoints = []
        for wp in tokens[cut + 1:]:
            when, _, where = wp.partition(":")
            coords = [float(v) for v in where.split(",")]
            if len(coords) != 3:
                raise SceneError(f"waypoint needs t:x,y,z, got {wp!r}")
            waypoints.append((float(when), *coords))
        return Mover(shape=shape, waypoints=tuple(waypoints))
    raise SceneError("mover needs a 'vel vx vy vz' or 'path t:x,y,z ...' suffix")


def bundled_scene_path(name: str) -> Path:
    path = Path(__file__).parent / "scenes" / f"{name}.scene"
    if not path.exists():
        raise FileNotFoundError(f"no bundled scene named {name!r}")
    return path


def load_scene(name_or_path, *, seed: int | None = None) -> SceneSpec:
    """Load a scene file; bare names resolve to bundled scenes."""
    path = Path(name_or_path)
    if not path.exists() and path.suffix == "":
        path = bundled_scene_path(str(name_or_path))
    if not path.exists():
        raise FileNotFoundError(f"scene file not found: {path}")
    return parse_scene(path.read_text(encoding="utf-8"), seed=seed)
