from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from modules.errors import DatasetIoError, DegenerateInput, DegenerateTriangulation, VersionError, VpAtInfinity
from modules.factors import vp_project
from modules.geometry import (
    CameraPose,
    PluckerLine,
    Segment2D,
    exp_so3,
    transform_line,
    triangulate_line,
    widest_baseline_pair,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
TRAJECTORY_KINDS = ("orbit", "pure_translation", "forward_corridor")
OUTLIER_ID_BASE = 1_000_000
MIN_SEGMENT_LENGTH = 0.02

CANONICAL_AXES: Tuple[Tuple[float, float, float], ...] = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))


def _unit(v: Iterable[float], what: str) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    norm = float(np.linalg.norm(v))
    if norm <= 1e-12:
        raise ValueError(f"{what} must be non-zero")
    return v / norm


@dataclass(frozen=True)
class SceneSpec:
    structural_directions: Tuple[Tuple[float, float, float], ...] = CANONICAL_AXES
    lines_per_direction: int = 5
    unstructured_lines: int = 0
    box_min: Tuple[float, float, float] = (-1.5, -1.0, 2.0)
    box_max: Tuple[float, float, float] = (1.5, 1.0, 4.0)
    rng_seed: int = 0

    def __post_init__(self) -> None:
        dirs = tuple(tuple(float(x) for x in _unit(d, "structural direction")) for d in self.structural_directions)
        object.__setattr__(self, "structural_directions", dirs)
        object.__setattr__(self, "box_min", tuple(float(x) for x in self.box_min))
        object.__setattr__(self, "box_max", tuple(float(x) for x in self.box_max))
        if self.lines_per_direction < 0 or self.unstructured_lines < 0:
            raise ValueError("line counts must be >= 0")
        if any(lo >= hi for lo, hi in zip(self.box_min, self.box_max)):
            raise ValueError("scene bounding box is empty")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "structural_directions": [list(d) for d in self.structural_directions],
            "lines_per_direction": self.lines_per_direction,
            "unstructured_lines": self.unstructured_lines,
            "box_min": list(self.box_min),
            "box_max": list(self.box_max),
            "rng_seed": self.rng_seed,
        }


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "orbit"
    num_frames: int = 5
    step: float = 0.2
    direction: Tuple[float, float, float] = (0.3, 0.1, 1.0)
    start: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    center: Tuple[float, float, float] = (0.0, 0.0, 3.0)
    radius: float = 3.0

    def __post_init__(self) -> None:
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"unknown trajectory kind {self.kind!r}; expected one of {TRAJECTORY_KINDS}")
        if self.num_frames < 2:
            raise ValueError("trajectory needs at least 2 frames")
        if not self.step > 0 or not self.radius > 0:
            raise ValueError("step and radius must be positive")
        object.__setattr__(self, "direction", tuple(float(x) for x in _unit(self.direction, "motion direction")))
        object.__setattr__(self, "start", tuple(float(x) for x in self.start))
        object.__setattr__(self, "center", tuple(float(x) for x in self.center))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "num_frames": self.num_frames,
            "step": self.step,
            "direction": list(self.direction),
            "start": list(self.start),
            "center": list(self.center),
            "radius": self.radius,
        }


@dataclass(frozen=True)
class SceneLine:
    line_id: int
    line: PluckerLine
    direction_class: int

    def to_dict(self) -> Dict[str, Any]:
        return {"line_id": self.line_id, "line": self.line.to_dict(), "direction_class": self.direction_class}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SceneLine":
        return cls(int(data["line_id"]), PluckerLine.from_dict(data["line"]), int(data["direction_class"]))


@dataclass(frozen=True)
class FrameBundle:
    frame_id: int
    pose: CameraPose
    segments: Tuple[Segment2D, ...]
    vp_truth: Dict[int, np.ndarray] = field(default_factory=dict)
    associations: Dict[int, int] = field(default_factory=dict)
    degenerate_flags: Dict[int, bool] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "record": "frame",
            "frame_id": self.frame_id,
            "pose": self.pose.to_dict(),
            "segments": [s.to_dict() for s in self.segments],
            "vp_truth": {str(k): np.asarray(v).tolist() for k, v in sorted(self.vp_truth.items())},
            "associations": {str(k): v for k, v in sorted(self.associations.items())},
            "degenerate_flags": {str(k): v for k, v in sorted(self.degenerate_flags.items())},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FrameBundle":
        return cls(
            frame_id=int(data["frame_id"]),
            pose=CameraPose.from_dict(data["pose"]),
            segments=tuple(Segment2D.from_dict(s) for s in data["segments"]),
            vp_truth={int(k): np.asarray(v, dtype=float) for k, v in data["vp_truth"].items()},
            associations={int(k): int(v) for k, v in data["associations"].items()},
            degenerate_flags={int(k): bool(v) for k, v in data["degenerate_flags"].items()},
        )


@dataclass(frozen=True)
class Dataset:
    spec: Dict[str, Any]
    scene: List[SceneLine]
    bundles: List[FrameBundle]


@dataclass(frozen=True)
class PencilSet:
    segments: List[Segment2D]
    labels: Dict[int, int]
    vps: List[np.ndarray]


def look_at(eye: Iterable[float], target: Iterable[float], up: Iterable[float] = (0.0, -1.0, 0.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera at eye looking at target (z forward, y down)."""
    eye = np.asarray(eye, dtype=float)
    z = _unit(np.asarray(target, dtype=float) - eye, "viewing direction")
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) <= 1e-12:
        raise DegenerateInput("viewing direction is parallel to the up vector")
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def make_scene(spec: SceneSpec) -> List[SceneLine]:
    rng = np.random.default_rng(spec.rng_seed)
    lo, hi = np.array(spec.box_min), np.array(spec.box_max)
    lines: List[SceneLine] = []
    for cls, d in enumerate(spec.structural_directions):
        d = np.array(d)
        for _ in range(spec.lines_per_direction):
            P = rng.uniform(lo, hi)
            lines.append(SceneLine(len(lines), PluckerLine(n=np.cross(P, d), d=d), cls))
    for _ in range(spec.unstructured_lines):
        P = rng.uniform(lo, hi)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        lines.append(SceneLine(len(lines), PluckerLine(n=np.cross(P, d), d=d), -1))
    return lines


def make_trajectory(spec: TrajectorySpec) -> List[CameraPose]:
    direction = np.array(spec.direction)
    start = np.array(spec.start)
    poses: List[CameraPose] = []
    if spec.kind == "pure_translation":
        for k in range(spec.num_frames):
            poses.append(CameraPose(R=np.eye(3), p=start + k * spec.step * direction))
    elif spec.kind == "forward_corridor":
        R = look_at(start, start + direction)
        for k in range(spec.num_frames):
            poses.append(CameraPose(R=R, p=start + k * spec.step * direction))
    else:
        center = np.array(spec.center)
        mid = 0.5 * (spec.num_frames - 1)
        for k in range(spec.num_frames):
            theta = (k - mid) * spec.step / spec.radius
            eye = center + spec.radius * np.array([math.sin(theta), 0.0, -math.cos(theta)])
            poses.append(CameraPose(R=look_at(eye, center), p=eye))
    return poses


def perturb_poses(
    poses: Sequence[CameraPose],
    trans_sigma: float,
    rot_sigma: float,
    rng: np.random.Generator,
    *,
    keep: int = 0,
) -> List[CameraPose]:
    """Gaussian translation and small-angle rotation noise; the first `keep` poses are left exact."""
    out: List[CameraPose] = list(poses[:keep])
    for pose in poses[keep:]:
        dp = rng.normal(size=3) * trans_sigma
        dtheta = rng.normal(size=3) * rot_sigma
        out.append(CameraPose(R=pose.R @ exp_so3(dtheta), p=pose.p + dp, extrinsic=pose.extrinsic))
    return out


def _clip_interval(constraints: Iterable[Tuple[float, float]]) -> Optional[Tuple[float, float]]:
    """Largest [t0, t1] with f0 + f1*t >= 0 for every (f0, f1)."""
    t_lo, t_hi = -math.inf, math.inf
    for f0, f1 in constraints:
        if abs(f1) <= 1e-15:
            if f0 < 0:
                return None
            continue
        t = -f0 / f1
        if f1 > 0:
            t_lo = max(t_lo, t)
        else:
            t_hi = min(t_hi, t)
    if not t_lo < t_hi or math.isinf(t_lo) or math.isinf(t_hi):
        return None
    return t_lo, t_hi


def _visible_segment(
    line: PluckerLine,
    pose: CameraPose,
    box_min: np.ndarray,
    box_max: np.ndarray,
    tan_half_fov: float,
    near: float,
) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    P0 = line.closest_point()
    u = line.unit_direction
    R, c = pose.camera_rotation, pose.camera_center
    a = R.T @ (P0 - c)
    b = R.T @ u
    k = tan_half_fov
    constraints = []
    for i in range(3):
        constraints.append((P0[i] - box_min[i], u[i]))
        constraints.append((box_max[i] - P0[i], -u[i]))
    constraints.append((a[2] - near, b[2]))
    constraints.append((k * a[2] - a[0], k * b[2] - b[0]))
    constraints.append((k * a[2] + a[0], k * b[2] + b[0]))
    constraints.append((k * a[2] - a[1], k * b[2] - b[1]))
    constraints.append((k * a[2] + a[1], k * b[2] + b[1]))
    interval = _clip_interval(constraints)
    if interval is None:
        return None
    X0 = a + interval[0] * b
    X1 = a + interval[1] * b
    return X0[:2] / X0[2], X1[:2] / X1[2]


def _frame_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def render_observations(
    scene: Sequence[SceneLine],
    poses: Sequence[CameraPose],
    *,
    noise_sigma: float = 0.0,
    fov: float = math.pi / 2,
    seed: int = 0,
    box_min: Iterable[float] = SceneSpec.box_min,
    box_max: Iterable[float] = SceneSpec.box_max,
    near: float = 0.1,
    min_length: float = MIN_SEGMENT_LENGTH,
    outlier_rate: float = 0.0,
) -> List[FrameBundle]:
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    if not 0.0 < fov < math.pi:
        raise ValueError("fov must lie in (0, pi)")
    if not 0.0 <= outlier_rate < 1.0:
        raise ValueError("outlier_rate must lie in [0, 1)")
    lo, hi = np.asarray(box_min, dtype=float), np.asarray(box_max, dtype=float)
    k = math.tan(fov / 2)

    class_lines: Dict[int, PluckerLine] = {}
    for sl in scene:
        if sl.direction_class >= 0:
            class_lines.setdefault(sl.direction_class, sl.line)

    frames: List[Tuple[CameraPose, List[Segment2D], Dict[int, Segment2D], Dict[int, np.ndarray], Dict[int, int]]] = []
    for index, pose in enumerate(poses):
        rng = _frame_rng(seed, index)
        segments: List[Segment2D] = []
        clean: Dict[int, Segment2D] = {}
        assoc: Dict[int, int] = {}
        for sl in scene:
            vis = _visible_segment(sl.line, pose, lo, hi, k, near)
            if vis is None or np.linalg.norm(vis[1] - vis[0]) < min_length:
                continue
            p_s = vis[0] + rng.normal(scale=noise_sigma, size=2) if noise_sigma > 0 else vis[0]
            p_e = vis[1] + rng.normal(scale=noise_sigma, size=2) if noise_sigma > 0 else vis[1]
            if np.linalg.norm(p_e - p_s) < min_length:
                continue
            segments.append(Segment2D(p_s, p_e, sl.line_id))
            clean[sl.line_id] = Segment2D(vis[0], vis[1], sl.line_id)
            assoc[sl.line_id] = sl.line_id

        num_outliers = int(round(outlier_rate * len(segments)))
        for j in range(num_outliers):
            while True:
                ends = rng.uniform(-k, k, size=(2, 2))
                if np.linalg.norm(ends[1] - ends[0]) >= min_length:
                    break
            sid = OUTLIER_ID_BASE + index * 1000 + j
            segments.append(Segment2D(ends[0], ends[1], sid))
            assoc[sid] = -1

        vp_truth: Dict[int, np.ndarray] = {}
        for cls, line in sorted(class_lines.items()):
            try:
                _, p_v = vp_project(transform_line(line, pose))
            except VpAtInfinity:
                continue
            vp_truth[cls] = p_v
        frames.append((pose, segments, clean, vp_truth, assoc))

    flags = _degeneracy_flags(frames)
    return [
        FrameBundle(
            frame_id=index,
            pose=pose,
            segments=tuple(segments),
            vp_truth=vp_truth,
            associations=assoc,
            degenerate_flags=dict(flags),
        )
        for index, (pose, segments, _, vp_truth, assoc) in enumerate(frames)
    ]


def _degeneracy_flags(frames) -> Dict[int, bool]:
    """Triangulation verdict on noise-free segments from the widest-baseline pair of true poses."""
    seen: Dict[int, Dict[int, Tuple[CameraPose, Segment2D]]] = {}
    for index, (pose, _, clean, _, _) in enumerate(frames):
        for line_id, seg in clean.items():
            seen.setdefault(line_id, {})[index] = (pose, seg)
    flags: Dict[int, bool] = {}
    for line_id, views in sorted(seen.items()):
        if len(views) < 2:
            continue
        a, b = widest_baseline_pair({i: pose.camera_center for i, (pose, _) in views.items()})
        try:
            triangulate_line(views[a][1], views[a][0], views[b][1], views[b][0])
            flags[line_id] = False
        except DegenerateTriangulation:
            flags[line_id] = True
    return flags


def make_pencil_segments(
    num_vps: int = 3,
    lines_per_vp: int = 10,
    *,
    outlier_rate: float = 0.0,
    noise_sigma: float = 0.0,
    seed: int = 0,
    extent: float = 1.0,
    min_vp_separation: float = 1.0,
) -> PencilSet:
    """Labelled 2D segments through a few finite vanishing points plus random outliers (label -1)."""
    rng = np.random.default_rng(seed)
    vps: List[np.ndarray] = []
    while len(vps) < num_vps:
        cand = rng.uniform(-1.5 * extent, 1.5 * extent, size=2)
        if all(np.linalg.norm(cand - v) >= min_vp_separation for v in vps):
            vps.append(cand)

    segments: List[Segment2D] = []
    labels: Dict[int, int] = {}
    for label, vp in enumerate(vps):
        for _ in range(lines_per_vp):
            while True:
                mid = rng.uniform(-extent, extent, size=2)
                if np.linalg.norm(mid - vp) >= 0.6 * extent:
                    break
            u = (vp - mid) / np.linalg.norm(vp - mid)
            half = rng.uniform(0.25, 0.5) * extent
            ends = np.array([mid - half * u, mid + half * u]) + rng.normal(scale=noise_sigma, size=(2, 2))
            sid = len(segments)
            segments.append(Segment2D(ends[0], ends[1], sid))
            labels[sid] = label

    num_outliers = int(round(outlier_rate * num_vps * lines_per_vp))
    for _ in range(num_outliers):
        mid = rng.uniform(-extent, extent, size=2)
        angle = rng.uniform(0.0, math.pi)
        half = rng.uniform(0.25, 0.5) * extent
        u = np.array([math.cos(angle), math.sin(angle)])
        sid = len(segments)
        segments.append(Segment2D(mid - half * u, mid + half * u, sid))
        labels[sid] = -1
    return PencilSet(segments=segments, labels=labels, vps=vps)


def _header(spec: Optional[Dict[str, Any]], scene: Sequence[SceneLine]) -> Dict[str, Any]:
    return {
        "record": "header",
        "schema_version": SCHEMA_VERSION,
        "spec": spec or {},
        "scene": [sl.to_dict() for sl in scene],
    }


def emit_dataset(
    bundles: Sequence[FrameBundle],
    path: Path | str,
    *,
    spec: Optional[Dict[str, Any]] = None,
    scene: Sequence[SceneLine] = (),
) -> Path:
    path = Path(path)
    records = [_header(spec, scene)] + [b.to_dict() for b in bundles]
    try:
        with path.open("w", encoding="utf-8") as f:
            for rec in records:
                f.write(json.dumps(rec, sort_keys=True, ensure_ascii=False))
                f.write("\n")
    except OSError as exc:
        raise DatasetIoError(f"cannot write dataset {path}: {exc}") from exc
    logger.info("wrote %d frame(s) to %s", len(bundles), path)
    return path


def load_dataset(path: Path | str) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DatasetIoError(f"cannot read dataset {path}: {exc}") from exc

    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise DatasetIoError(f"{path}: empty file, missing header record")
    try:
        records = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise DatasetIoError(f"{path}: invalid JSON ({exc})") from exc

    header = records[0]
    if header.get("record") != "header":
        raise DatasetIoError(f"{path}: first record is not a header")
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise VersionError(f"{path}: schema version {version!r}, expected {SCHEMA_VERSION}")
    try:
        scene = [SceneLine.from_dict(d) for d in header.get("scene", [])]
        bundles = [FrameBundle.from_dict(r) for r in records[1:]]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetIoError(f"{path}: malformed record ({exc})") from exc
    return Dataset(spec=header.get("spec", {}), scene=scene, bundles=bundles)
