from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from modules.errors import DegenerateInput, DegenerateTriangulation, GeometryError, LineAtInfinity

logger = logging.getLogger(__name__)

KLEIN_EPS = 1e-9
SO3_TOL = 1e-10
DEGENERACY_TAU = 1e-3
MIN_NORM = 1e-12

FRAMES = ("world", "camera", "body")


def _frozen(values: Any, shape: tuple) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(shape)
    arr.setflags(write=False)
    return arr


def hat(v: Iterable[float]) -> np.ndarray:
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array(
        [
            [0.0, -z, y],
            [z, 0.0, -x],
            [-y, x, 0.0],
        ]
    )


def exp_so3(w: Iterable[float]) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=float).reshape(3)).as_matrix()


def project_so3(M: np.ndarray) -> np.ndarray:
    """Closest rotation to M in the Frobenius sense."""
    U, _, Vt = np.linalg.svd(np.asarray(M, dtype=float))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1.0
        R = U @ Vt
    return R


def _check_rotation(R: np.ndarray, name: str) -> None:
    if R.shape != (3, 3):
        raise GeometryError(f"{name} must be 3x3, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > SO3_TOL or abs(np.linalg.det(R) - 1.0) > SO3_TOL:
        raise GeometryError(f"{name} is not a rotation matrix")


@dataclass(frozen=True)
class Segment2D:
    """Observed image segment on the normalized plane; `id` is the line track id."""

    p_s: np.ndarray
    p_e: np.ndarray
    id: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "p_s", _frozen(self.p_s, (2,)))
        object.__setattr__(self, "p_e", _frozen(self.p_e, (2,)))
        object.__setattr__(self, "id", int(self.id))
        if np.linalg.norm(self.p_s - self.p_e) <= 1e-9:
            raise DegenerateInput(f"segment {self.id} has coincident endpoints")

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.p_s + self.p_e)

    @property
    def direction(self) -> np.ndarray:
        return self.p_e - self.p_s

    def homogeneous_line(self) -> np.ndarray:
        return np.cross(np.append(self.p_s, 1.0), np.append(self.p_e, 1.0))

    def to_dict(self) -> Dict[str, Any]:
        return {"id": self.id, "p_s": self.p_s.tolist(), "p_e": self.p_e.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Segment2D":
        return cls(p_s=data["p_s"], p_e=data["p_e"], id=int(data["id"]))


@dataclass(frozen=True)
class PluckerLine:
    n: np.ndarray
    d: np.ndarray
    frame: str = "world"

    def __post_init__(self) -> None:
        object.__setattr__(self, "n", _frozen(self.n, (3,)))
        object.__setattr__(self, "d", _frozen(self.d, (3,)))
        if self.frame not in FRAMES:
            raise GeometryError(f"unknown frame tag {self.frame!r}")
        dn = float(np.linalg.norm(self.d))
        if dn <= MIN_NORM:
            raise DegenerateInput("Plücker line needs a non-zero direction")
        if abs(float(self.n @ self.d)) > KLEIN_EPS * float(np.linalg.norm(self.n)) * dn:
            raise DegenerateInput("Plücker coordinates violate the Klein constraint n·d = 0")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.n, self.d])

    @property
    def unit_direction(self) -> np.ndarray:
        return self.d / np.linalg.norm(self.d)

    def normalized(self) -> "PluckerLine":
        s = float(np.linalg.norm(self.vector))
        return PluckerLine(self.n / s, self.d / s, self.frame)

    def closest_point(self) -> np.ndarray:
        """Point of the line closest to the frame origin."""
        return np.cross(self.d, self.n) / float(self.d @ self.d)

    def to_dict(self) -> Dict[str, Any]:
        return {"n": self.n.tolist(), "d": self.d.tolist(), "frame": self.frame}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PluckerLine":
        return cls(n=data["n"], d=data["d"], frame=data.get("frame", "world"))


@dataclass(frozen=True)
class OrthonormalLine:
    """Minimal line state: U in SO(3) and phi with (w1, w2) = (cos phi, sin phi)."""

    U: np.ndarray
    phi: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "U", _frozen(self.U, (3, 3)))
        object.__setattr__(self, "phi", float(self.phi))
        _check_rotation(self.U, "U")

    @property
    def w(self) -> np.ndarray:
        return np.array([math.cos(self.phi), math.sin(self.phi)])

    def to_dict(self) -> Dict[str, Any]:
        return {"U": self.U.tolist(), "phi": self.phi}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OrthonormalLine":
        return cls(U=data["U"], phi=float(data["phi"]))


@dataclass(frozen=True)
class Extrinsic:
    """Fixed body<-camera transform: rotation R and camera origin t in the body frame."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self) -> None:
        object.__setattr__(self, "R", _frozen(self.R, (3, 3)))
        object.__setattr__(self, "t", _frozen(self.t, (3,)))
        _check_rotation(self.R, "extrinsic rotation")

    def to_dict(self) -> Dict[str, Any]:
        return {"R": self.R.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Extrinsic":
        return cls(R=data["R"], t=data["t"])


@dataclass(frozen=True)
class CameraPose:
    """Body pose in the world (R = R^w_b, p = p^w_b) with a fixed camera extrinsic."""

    R: np.ndarray
    p: np.ndarray
    extrinsic: Extrinsic = field(default_factory=Extrinsic)

    def __post_init__(self) -> None:
        object.__setattr__(self, "R", _frozen(self.R, (3, 3)))
        object.__setattr__(self, "p", _frozen(self.p, (3,)))
        _check_rotation(self.R, "pose rotation")

    @property
    def camera_rotation(self) -> np.ndarray:
        return self.R @ self.extrinsic.R

    @property
    def camera_center(self) -> np.ndarray:
        return self.p + self.R @ self.extrinsic.t

    def to_dict(self) -> Dict[str, Any]:
        return {"R": self.R.tolist(), "p": self.p.tolist(), "extrinsic": self.extrinsic.to_dict()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CameraPose":
        ext = data.get("extrinsic")
        return cls(R=data["R"], p=data["p"], extrinsic=Extrinsic.from_dict(ext) if ext else Extrinsic())


@dataclass(frozen=True)
class LineMetrics:
    direction_error: float
    orthogonal_distance_error: float

    def to_dict(self) -> Dict[str, float]:
        return {
            "direction_error": self.direction_error,
            "orthogonal_distance_error": self.orthogonal_distance_error,
        }


def plucker_from_points(P1: Iterable[float], P2: Iterable[float], *, frame: str = "world") -> PluckerLine:
    a = np.asarray(P1, dtype=float).reshape(3)
    b = np.asarray(P2, dtype=float).reshape(3)
    if np.linalg.norm(b - a) <= MIN_NORM:
        raise DegenerateInput("cannot build a line from coincident points")
    return PluckerLine(n=np.cross(a, b), d=b - a, frame=frame)


def to_orthonormal(L: PluckerLine) -> OrthonormalLine:
    n_norm = float(np.linalg.norm(L.n))
    d_norm = float(np.linalg.norm(L.d))
    if n_norm <= MIN_NORM:
        raise DegenerateInput("line passes through the frame origin (n = 0)")
    if d_norm <= MIN_NORM:
        raise DegenerateInput("line has no direction (d = 0)")
    u2 = L.d / d_norm
    # Klein residual is removed from u1 so that U is orthonormal to round-off.
    u1 = L.n / n_norm
    u1 = u1 - (u1 @ u2) * u2
    u1 /= np.linalg.norm(u1)
    u3 = np.cross(u1, u2)
    return OrthonormalLine(U=np.column_stack([u1, u2, u3]), phi=math.atan2(d_norm, n_norm))


def to_plucker(O: OrthonormalLine, *, frame: str = "world") -> PluckerLine:
    w1, w2 = O.w
    if abs(w2) <= MIN_NORM:
        raise LineAtInfinity("phi = 0 encodes a line at infinity (d = 0)")
    return PluckerLine(n=w1 * O.U[:, 0], d=w2 * O.U[:, 1], frame=frame)


def orthonormal_update(O: OrthonormalLine, delta: Iterable[float]) -> OrthonormalLine:
    delta = np.asarray(delta, dtype=float).reshape(4)
    U = project_so3(O.U @ exp_so3(delta[:3]))
    return OrthonormalLine(U=U, phi=O.phi + float(delta[3]))


def orthonormal_jacobian(O: OrthonormalLine) -> np.ndarray:
    """d(n, d)/d(delta_psi, delta_phi) at the unit-scale Plücker vector of O (6x4)."""
    w1, w2 = O.w
    u1, u2, u3 = O.U[:, 0], O.U[:, 1], O.U[:, 2]
    J = np.zeros((6, 4))
    J[:3, 1] = -w1 * u3
    J[:3, 2] = w1 * u2
    J[:3, 3] = -w2 * u1
    J[3:, 0] = w2 * u3
    J[3:, 2] = -w2 * u1
    J[3:, 3] = w1 * u2
    return J


def plucker_transform_matrix(R: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Maps Plücker coordinates from frame A into frame B, where X_A = R X_B + t."""
    Rt = np.asarray(R, dtype=float).T
    T = np.zeros((6, 6))
    T[:3, :3] = Rt
    T[:3, 3:] = -Rt @ hat(t)
    T[3:, 3:] = Rt
    return T


def plucker_transform(L: PluckerLine, R: np.ndarray, t: np.ndarray, *, frame: str) -> PluckerLine:
    v = plucker_transform_matrix(R, t) @ L.vector
    return PluckerLine(n=v[:3], d=v[3:], frame=frame)


def camera_from_world_matrix(pose: CameraPose) -> np.ndarray:
    T_bw = plucker_transform_matrix(pose.R, pose.p)
    T_cb = plucker_transform_matrix(pose.extrinsic.R, pose.extrinsic.t)
    return T_cb @ T_bw


def transform_line(L: PluckerLine, pose: CameraPose) -> PluckerLine:
    if L.frame != "world":
        raise GeometryError(f"transform_line expects a world-frame line, got {L.frame!r}")
    body = plucker_transform(L, pose.R, pose.p, frame="body")
    return plucker_transform(body, pose.extrinsic.R, pose.extrinsic.t, frame="camera")


def pose_update(pose: CameraPose, delta: Iterable[float]) -> CameraPose:
    """Retraction with delta = (dp, dtheta): p + dp, R Exp(dtheta)."""
    delta = np.asarray(delta, dtype=float).reshape(6)
    return CameraPose(
        R=project_so3(pose.R @ exp_so3(delta[3:])),
        p=pose.p + delta[:3],
        extrinsic=pose.extrinsic,
    )


def backprojection_plane(obs: Segment2D, pose: CameraPose) -> np.ndarray:
    """World-frame plane (m, -m·c) through the camera centre and the observed segment."""
    m = pose.camera_rotation @ obs.homogeneous_line()
    return np.append(m, -float(m @ pose.camera_center))


def triangulate_line(
    obs1: Segment2D,
    pose1: CameraPose,
    obs2: Segment2D,
    pose2: CameraPose,
    *,
    tau: float = DEGENERACY_TAU,
) -> PluckerLine:
    if obs1.id != obs2.id:
        raise GeometryError(f"observations belong to different tracks ({obs1.id} vs {obs2.id})")
    if np.linalg.norm(pose1.camera_center - pose2.camera_center) <= MIN_NORM:
        raise DegenerateTriangulation(f"track {obs1.id}: zero baseline between the two views")

    pi1 = backprojection_plane(obs1, pose1)
    pi2 = backprojection_plane(obs2, pose2)
    m1, b1 = pi1[:3], pi1[3]
    m2, b2 = pi2[:3], pi2[3]
    d = np.cross(m1, m2)
    sine = float(np.linalg.norm(d)) / (float(np.linalg.norm(m1)) * float(np.linalg.norm(m2)))
    if sine < tau:
        raise DegenerateTriangulation(
            f"track {obs1.id}: back-projection planes are nearly coincident (sin={sine:.3e} < {tau:g})"
        )
    n = b1 * m2 - b2 * m1
    return PluckerLine(n=n, d=d, frame="world").normalized()


def widest_baseline_pair(centers: Dict[int, np.ndarray]) -> Tuple[int, int]:
    """Keys of the two camera centres farthest apart; ties go to the earliest pair."""
    keys = list(centers)
    if len(keys) < 2:
        raise ValueError("need at least two camera centres")
    best = (keys[0], keys[1])
    best_dist = -1.0
    for i, a in enumerate(keys):
        for b in keys[i + 1 :]:
            dist = float(np.linalg.norm(np.asarray(centers[a]) - np.asarray(centers[b])))
            if dist > best_dist:
                best, best_dist = (a, b), dist
    return best


def line_error(est: PluckerLine, gt: PluckerLine) -> LineMetrics:
    d1 = est.unit_direction
    d2 = gt.unit_direction
    cross = np.cross(d1, d2)
    c = float(np.linalg.norm(cross))
    direction_error = math.atan2(c, abs(float(d1 @ d2)))

    offset = gt.closest_point() - est.closest_point()
    if c < MIN_NORM:
        distance = float(np.linalg.norm(np.cross(offset, d1)))
    else:
        distance = abs(float(offset @ cross)) / c
    return LineMetrics(direction_error=direction_error, orthogonal_distance_error=distance)


def random_rotation(rng: np.random.Generator, *, max_angle: Optional[float] = None) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0.0, math.pi if max_angle is None else max_angle)
    return exp_so3(axis * angle)
