from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

from modules.errors import DegenerateLine, VpAtInfinity
from modules.geometry import (
    CameraPose,
    OrthonormalLine,
    PluckerLine,
    Segment2D,
    camera_from_world_matrix,
    hat,
    orthonormal_jacobian,
    plucker_transform_matrix,
    to_orthonormal,
    to_plucker,
)

EPS_LD = 1e-12
EPS_V3 = 1e-6

# Pixel-level noise is mapped to the normalized plane through a virtual focal length.
F_VIRTUAL = 460.0
DEFAULT_SIGMA = 1.5 / F_VIRTUAL

LOSS_KINDS = ("huber", "arctan", "cauchy", "none")


@dataclass(frozen=True)
class Intrinsics:
    fx: float = 1.0
    fy: float = 1.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_line(self) -> np.ndarray:
        """fx*fy*K^-T, the line projection matrix."""
        fx, fy, cx, cy = self.fx, self.fy, self.cx, self.cy
        return np.array([[fy, 0.0, 0.0], [0.0, fx, 0.0], [-fy * cx, -fx * cy, fx * fy]])


@dataclass(frozen=True)
class LineResidualEval:
    r: np.ndarray
    J_pose: np.ndarray
    J_line: np.ndarray
    # Same residual differentiated w.r.t. the orthonormal update of the line
    # expressed in the observing camera frame.
    J_line_local: np.ndarray


@dataclass(frozen=True)
class VpResidualEval:
    r: np.ndarray
    J_pose: np.ndarray
    J_line: np.ndarray
    J_line_local: np.ndarray


@dataclass(frozen=True)
class RobustLoss:
    kind: str = "huber"
    scale: float = 1.5

    def __post_init__(self) -> None:
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"unknown robust loss {self.kind!r}; expected one of {LOSS_KINDS}")
        if not self.scale > 0:
            raise ValueError("robust loss scale must be positive")


def robust_weight(loss: RobustLoss, squared_norm: float) -> Tuple[float, float]:
    """Returns (rho(s), drho/ds) for s = squared whitened residual norm."""
    s = float(squared_norm)
    if s < 0:
        raise ValueError("squared norm must be non-negative")
    if loss.kind == "none":
        return s, 1.0
    a2 = loss.scale * loss.scale
    if loss.kind == "huber":
        if s <= a2:
            return s, 1.0
        root = math.sqrt(s)
        return 2.0 * loss.scale * root - a2, loss.scale / root
    if loss.kind == "arctan":
        q = s / a2
        return a2 * math.atan(q), 1.0 / (1.0 + q * q)
    q = s / a2
    return a2 * math.log1p(q), 1.0 / (1.0 + q)


def project_line(L_c: PluckerLine, K: Intrinsics = Intrinsics()) -> np.ndarray:
    return K.K_line @ L_c.n


def _line_norm(l: np.ndarray) -> float:
    ld = math.hypot(float(l[0]), float(l[1]))
    if ld <= EPS_LD:
        raise DegenerateLine("re-projected line is at infinity (l1 = l2 = 0)")
    return ld


def line_residual(l: Iterable[float], p_s: Iterable[float], p_e: Iterable[float]) -> np.ndarray:
    l = np.asarray(l, dtype=float).reshape(3)
    ld = _line_norm(l)
    pts = np.array([[*np.asarray(p_s, dtype=float), 1.0], [*np.asarray(p_e, dtype=float), 1.0]])
    return pts @ l / ld


def point_line_jacobian(l: Iterable[float], points: Iterable[Iterable[float]]) -> np.ndarray:
    """d(p^T l / l_d)/dl for each image point p, one row per point."""
    l = np.asarray(l, dtype=float).reshape(3)
    ld = _line_norm(l)
    rows = []
    for p in points:
        u, v = np.asarray(p, dtype=float).reshape(2)
        ph = np.array([u, v, 1.0])
        proj = float(ph @ l)
        rows.append(ph / ld - proj * np.array([l[0], l[1], 0.0]) / ld**3)
    return np.array(rows)


def _pose_block(pose: CameraPose, L_w: PluckerLine) -> np.ndarray:
    """d(L^c)/d(dp, dtheta) for the body perturbation p + dp, R Exp(dtheta)."""
    Rt = pose.R.T
    n_b = Rt @ (L_w.n + np.cross(L_w.d, pose.p))
    d_b = Rt @ L_w.d
    block = np.zeros((6, 6))
    block[:3, :3] = Rt @ hat(L_w.d)
    block[:3, 3:] = hat(n_b)
    block[3:, 3:] = hat(d_b)
    T_cb = plucker_transform_matrix(pose.extrinsic.R, pose.extrinsic.t)
    return T_cb @ block


def camera_line(state: CameraPose, O: OrthonormalLine) -> Tuple[PluckerLine, np.ndarray, np.ndarray]:
    L_w = to_plucker(O)
    T_cw = camera_from_world_matrix(state)
    v = T_cw @ L_w.vector
    return L_w, T_cw, v


def camera_tangent_jacobian(L_c_vec: np.ndarray) -> np.ndarray:
    """d(L^c)/d(delta o) for the orthonormal update taken in the camera frame, at the scale of L_c_vec."""
    L_c = PluckerLine(n=L_c_vec[:3], d=L_c_vec[3:], frame="camera")
    scale = float(np.linalg.norm(L_c_vec))
    return scale * orthonormal_jacobian(to_orthonormal(L_c.normalized()))


def line_jacobian(
    state: CameraPose,
    O: OrthonormalLine,
    obs: Segment2D,
    K: Intrinsics = Intrinsics(),
) -> LineResidualEval:
    L_w, T_cw, L_c = camera_line(state, O)
    l = K.K_line @ L_c[:3]
    r = line_residual(l, obs.p_s, obs.p_e)

    dr_dLc = np.zeros((2, 6))
    dr_dLc[:, :3] = point_line_jacobian(l, [obs.p_s, obs.p_e]) @ K.K_line

    return LineResidualEval(
        r=r,
        J_pose=dr_dLc @ _pose_block(state, L_w),
        J_line=dr_dLc @ T_cw @ orthonormal_jacobian(O),
        J_line_local=dr_dLc @ camera_tangent_jacobian(L_c),
    )


def vp_project(L_c: PluckerLine, K: Intrinsics = Intrinsics()) -> Tuple[np.ndarray, np.ndarray]:
    v = K.K @ L_c.d
    _check_v3(v)
    return v, v[:2] / v[2]


def _check_v3(v: np.ndarray) -> None:
    if abs(float(v[2])) <= EPS_V3 * float(np.linalg.norm(v)):
        raise VpAtInfinity("vanishing point is at infinity (direction parallel to the image plane)")


def vp_residual(p_v: Iterable[float], v: Iterable[float]) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(3)
    _check_v3(v)
    return np.asarray(p_v, dtype=float).reshape(2) - v[:2] / v[2]


def vp_residual_jacobian(v: np.ndarray) -> np.ndarray:
    v1, v2, v3 = (float(x) for x in v)
    return np.array(
        [
            [-1.0 / v3, 0.0, v1 / v3**2],
            [0.0, -1.0 / v3, v2 / v3**2],
        ]
    )


def vp_jacobian(
    state: CameraPose,
    O: OrthonormalLine,
    p_v: Iterable[float],
    K: Intrinsics = Intrinsics(),
) -> VpResidualEval:
    L_w, T_cw, L_c = camera_line(state, O)
    v = K.K @ L_c[3:]
    r = vp_residual(p_v, v)

    dr_dLc = np.zeros((2, 6))
    dr_dLc[:, 3:] = vp_residual_jacobian(v) @ K.K

    return VpResidualEval(
        r=r,
        J_pose=dr_dLc @ _pose_block(state, L_w),
        J_line=dr_dLc @ T_cw @ orthonormal_jacobian(O),
        J_line_local=dr_dLc @ camera_tangent_jacobian(L_c),
    )
