"""
Per-line Fisher information and numeric rank certification.

All information matrices are 4x4 in the orthonormal tangent of the line. Single
observations use the tangent taken in the observing camera frame; tracks use the
world-frame tangent so that information from several views can be summed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from scipy import linalg

from modules.errors import VpAtInfinity
from modules.factors import (
    DEFAULT_SIGMA,
    Intrinsics,
    camera_line,
    camera_tangent_jacobian,
    line_jacobian,
    point_line_jacobian,
    vp_jacobian,
    vp_project,
)
from modules.geometry import CameraPose, OrthonormalLine, PluckerLine, Segment2D

logger = logging.getLogger(__name__)

RANK_TOL = 1e-8
PSD_TOL = 1e-10


@dataclass(frozen=True)
class FimReport:
    H_line: np.ndarray
    H_vp: np.ndarray
    H_total: np.ndarray
    rank_line: int
    rank_vp: int
    rank_total: int
    singular_values: Dict[str, List[float]]
    slope_degenerate: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return {
            "H_line": self.H_line.tolist(),
            "H_vp": self.H_vp.tolist(),
            "H_total": self.H_total.tolist(),
            "rank_line": self.rank_line,
            "rank_vp": self.rank_vp,
            "rank_total": self.rank_total,
            "singular_values": self.singular_values,
            "slope_degenerate": self.slope_degenerate,
        }


def _check_spd(Omega: np.ndarray) -> np.ndarray:
    Omega = np.asarray(Omega, dtype=float)
    if Omega.ndim != 2 or Omega.shape[0] != Omega.shape[1]:
        raise ValueError(f"information matrix must be square, got {Omega.shape}")
    if not np.allclose(Omega, Omega.T, rtol=1e-12, atol=1e-12 * max(1.0, float(np.abs(Omega).max()))):
        raise ValueError("information matrix must be symmetric")
    try:
        linalg.cholesky(Omega)
    except linalg.LinAlgError as exc:
        raise ValueError("information matrix must be positive definite") from exc
    return Omega


def line_fim(J: np.ndarray, Omega: np.ndarray) -> np.ndarray:
    J = np.asarray(J, dtype=float)
    Omega = _check_spd(Omega)
    H = J.T @ Omega @ J
    return 0.5 * (H + H.T)


def numeric_rank(M: np.ndarray, tol_ratio: float = RANK_TOL) -> int:
    if not tol_ratio > 0:
        raise ValueError("tol_ratio must be positive")
    s = linalg.svdvals(np.atleast_2d(np.asarray(M, dtype=float)))
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol_ratio * s[0]))


def is_slope_degenerate(l: Iterable[float], p_s: Iterable[float], p_e: Iterable[float], tol: float = 1e-9) -> bool:
    """True when the segment slope equals l2/l1, i.e. the endpoint Jacobian loses a row."""
    l1, l2, _ = np.asarray(l, dtype=float).reshape(3)
    us, vs = np.asarray(p_s, dtype=float).reshape(2)
    ue, ve = np.asarray(p_e, dtype=float).reshape(2)
    ld = float(np.hypot(l1, l2))
    du, dv = us - ue, vs - ve
    return bool(abs(l2 * du - l1 * dv) <= tol * ld * float(np.hypot(du, dv)))


def line_measurement_rank(l: Iterable[float], p_s: Iterable[float], p_e: Iterable[float], tol_ratio: float = RANK_TOL) -> int:
    """Rank of d(r_l)/d(l) for the two endpoint residuals."""
    return numeric_rank(point_line_jacobian(l, [p_s, p_e]), tol_ratio)


def _singular_values(H: np.ndarray) -> List[float]:
    return [float(x) for x in linalg.svdvals(H)]


def _report(H_line: np.ndarray, H_vp: np.ndarray, slope_degenerate: bool, tol_ratio: float) -> FimReport:
    H_total = H_line + H_vp
    for name, H in (("line", H_line), ("vp", H_vp), ("total", H_total)):
        lo = float(np.linalg.eigvalsh(H).min())
        scale = max(1.0, float(np.abs(H).max()))
        if lo < -PSD_TOL * scale:
            logger.warning("%s information matrix has negative eigenvalue %.3e", name, lo)
    return FimReport(
        H_line=H_line,
        H_vp=H_vp,
        H_total=H_total,
        rank_line=numeric_rank(H_line, tol_ratio),
        rank_vp=numeric_rank(H_vp, tol_ratio),
        rank_total=numeric_rank(H_total, tol_ratio),
        singular_values={
            "line": _singular_values(H_line),
            "vp": _singular_values(H_vp),
            "total": _singular_values(H_total),
        },
        slope_degenerate=bool(slope_degenerate),
    )


def stacked_fim(
    J_line: np.ndarray,
    J_vp: np.ndarray,
    Omega_l: np.ndarray,
    Omega_v: np.ndarray,
    *,
    l: Optional[Iterable[float]] = None,
    segment: Optional[Segment2D] = None,
    tol_ratio: float = RANK_TOL,
) -> FimReport:
    """Information of the stacked (line, vp) Jacobian with block-diagonal weights."""
    slope = False
    if l is not None and segment is not None:
        slope = is_slope_degenerate(l, segment.p_s, segment.p_e)
    return _report(line_fim(J_line, Omega_l), line_fim(J_vp, Omega_v), slope, tol_ratio)


def _omega(sigma: float) -> np.ndarray:
    return np.eye(2) / (sigma * sigma)


def observation_report(
    pose: CameraPose,
    line: OrthonormalLine,
    segment: Segment2D,
    *,
    include_vp: bool = True,
    K: Intrinsics = Intrinsics(),
    sigma_line: float = DEFAULT_SIGMA,
    sigma_vp: float = DEFAULT_SIGMA,
    tol_ratio: float = RANK_TOL,
) -> FimReport:
    """Single-view report using the camera-frame tangent; the VP is taken at its model value."""
    line_eval = line_jacobian(pose, line, segment, K)
    J_vp = np.zeros((2, 4))
    L_c = camera_line(pose, line)[2]
    if include_vp:
        try:
            _, p_v = vp_project(PluckerLine(n=L_c[:3], d=L_c[3:], frame="camera"), K)
            J_vp = vp_jacobian(pose, line, p_v, K).J_line_local
        except VpAtInfinity:
            logger.debug("track %d: vanishing point at infinity, line factor only", segment.id)
    l = K.K_line @ L_c[:3]
    return stacked_fim(
        line_eval.J_line_local,
        J_vp,
        _omega(sigma_line),
        _omega(sigma_vp),
        l=l,
        segment=segment,
        tol_ratio=tol_ratio,
    )


def track_report(
    poses: Sequence[CameraPose],
    line: OrthonormalLine,
    segments: Sequence[Segment2D],
    *,
    vp_mask: Optional[Sequence[bool]] = None,
    K: Intrinsics = Intrinsics(),
    sigma_line: float = DEFAULT_SIGMA,
    sigma_vp: float = DEFAULT_SIGMA,
    tol_ratio: float = RANK_TOL,
) -> FimReport:
    """Information about one line accumulated over all of its observations (world-frame tangent)."""
    if len(poses) != len(segments):
        raise ValueError("poses and segments must have the same length")
    if vp_mask is None:
        vp_mask = [True] * len(poses)
    Om_l, Om_v = _omega(sigma_line), _omega(sigma_vp)
    H_line = np.zeros((4, 4))
    H_vp = np.zeros((4, 4))
    slope = False
    for pose, seg, use_vp in zip(poses, segments, vp_mask):
        H_line += line_fim(line_jacobian(pose, line, seg, K).J_line, Om_l)
        L_c = camera_line(pose, line)[2]
        slope = slope or is_slope_degenerate(K.K_line @ L_c[:3], seg.p_s, seg.p_e)
        if not use_vp:
            continue
        try:
            _, p_v = vp_project(PluckerLine(n=L_c[:3], d=L_c[3:], frame="camera"), K)
        except VpAtInfinity:
            continue
        H_vp += line_fim(vp_jacobian(pose, line, p_v, K).J_line, Om_v)
    return _report(H_line, H_vp, slope, tol_ratio)


def interior_augmented_jacobian(
    pose: CameraPose,
    line: OrthonormalLine,
    segment: Segment2D,
    alphas: Sequence[float],
    K: Intrinsics = Intrinsics(),
) -> np.ndarray:
    """Line Jacobian (camera-frame tangent) with extra rows for interior points a*p_s + (1-a)*p_e."""
    L_c = camera_line(pose, line)[2]
    l = K.K_line @ L_c[:3]
    points = [segment.p_s, segment.p_e]
    for a in alphas:
        if not 0.0 < a < 1.0:
            raise ValueError(f"interior weight must lie in (0, 1), got {a}")
        points.append(a * segment.p_s + (1.0 - a) * segment.p_e)
    dr_dn = point_line_jacobian(l, points) @ K.K_line
    return dr_dn @ camera_tangent_jacobian(L_c)[:3]
