from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from modules.errors import (
    DegenerateInput,
    DegenerateLine,
    DegenerateTriangulation,
    EstimatorError,
    GeometryError,
    InconsistentIds,
    LineAtInfinity,
    SingularNormalEquations,
    TrackTooShort,
    VpAtInfinity,
)
from modules.factors import DEFAULT_SIGMA, Intrinsics, RobustLoss, line_jacobian, robust_weight, vp_jacobian
from modules.geometry import (
    DEGENERACY_TAU,
    CameraPose,
    OrthonormalLine,
    PluckerLine,
    Segment2D,
    orthonormal_update,
    plucker_from_points,
    pose_update,
    to_orthonormal,
    triangulate_line,
    widest_baseline_pair,
)
from modules.observability import numeric_rank
from modules.vp_detect import VanishingPointObservation

logger = logging.getLogger(__name__)

POSE_DIM = 6
LINE_DIM = 4
MAX_DAMPING = 1e16
# Triangulated directions further than this from an observed vanishing point are discarded.
VP_INIT_GATE = math.radians(5.0)
_NUMERIC_FAILURES = (DegenerateLine, VpAtInfinity, LineAtInfinity, DegenerateInput)


@dataclass(frozen=True)
class LineMeasurement:
    frame_id: int
    track_id: int
    segment: Segment2D


@dataclass(frozen=True)
class VpMeasurement:
    frame_id: int
    track_id: int
    vp: VanishingPointObservation


@dataclass(frozen=True)
class MeasurementSet:
    line_obs: Tuple[LineMeasurement, ...] = ()
    vp_obs: Tuple[VpMeasurement, ...] = ()
    sigma_line: float = DEFAULT_SIGMA
    sigma_vp: float = DEFAULT_SIGMA

    def __post_init__(self) -> None:
        object.__setattr__(self, "line_obs", tuple(self.line_obs))
        object.__setattr__(self, "vp_obs", tuple(self.vp_obs))
        if not (self.sigma_line > 0 and self.sigma_vp > 0):
            raise ValueError("measurement sigmas must be positive")

    def without_vp(self) -> "MeasurementSet":
        return replace(self, vp_obs=())

    def track_ids(self) -> List[int]:
        return sorted({m.track_id for m in self.line_obs})

    def observations_of(self, track_id: int) -> List[LineMeasurement]:
        return [m for m in self.line_obs if m.track_id == track_id]

    def restricted_to(self, frame_ids: Iterable[int]) -> "MeasurementSet":
        keep = set(frame_ids)
        return replace(
            self,
            line_obs=tuple(m for m in self.line_obs if m.frame_id in keep),
            vp_obs=tuple(m for m in self.vp_obs if m.frame_id in keep),
        )

    def merged(self, other: "MeasurementSet") -> "MeasurementSet":
        return replace(self, line_obs=self.line_obs + other.line_obs, vp_obs=self.vp_obs + other.vp_obs)


@dataclass(frozen=True)
class WindowState:
    """Poses keyed by frame id (oldest first) and lines keyed by track id."""

    poses: Dict[int, CameraPose]
    lines: Dict[int, OrthonormalLine] = field(default_factory=dict)
    fixed: FrozenSet[int] = frozenset()
    max_size: int = 10
    degenerate_init: FrozenSet[int] = frozenset()
    skipped_tracks: Dict[int, str] = field(default_factory=dict)
    retired: Dict[int, OrthonormalLine] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "poses", dict(self.poses))
        object.__setattr__(self, "lines", dict(self.lines))
        object.__setattr__(self, "fixed", frozenset(self.fixed))
        object.__setattr__(self, "degenerate_init", frozenset(self.degenerate_init))
        if self.max_size < 2:
            raise ValueError("window size must be >= 2")
        if len(self.poses) > self.max_size:
            raise ValueError(f"window holds {len(self.poses)} poses, capacity is {self.max_size}")
        unknown = self.fixed - set(self.poses)
        if unknown:
            raise InconsistentIds(f"fixed frames not in window: {sorted(unknown)}")

    @property
    def frame_ids(self) -> List[int]:
        return list(self.poses)

    @property
    def free_frames(self) -> List[int]:
        return [f for f in self.poses if f not in self.fixed]


@dataclass(frozen=True)
class SolveOptions:
    max_iterations: int = 50
    initial_damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    gradient_tolerance: float = 1e-10
    step_tolerance: float = 1e-12
    line_loss: RobustLoss = RobustLoss("huber", 1.5)
    vp_loss: RobustLoss = RobustLoss("arctan", 1.0)
    rank_tolerance: float = 1e-8
    # relative to the largest eigenvalue of a line block; image noise lifts exact null directions to about 1e-6
    block_rank_tolerance: float = 1e-4
    intrinsics: Intrinsics = Intrinsics()

    def __post_init__(self) -> None:
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        tolerances = ("gradient_tolerance", "step_tolerance", "rank_tolerance", "block_rank_tolerance")
        for name in ("initial_damping", "damping_up", "damping_down", *tolerances):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not self.damping_up > 1.0 or not self.damping_down < 1.0:
            raise ValueError("damping_up must be > 1 and damping_down < 1")
        if not all(getattr(self, name) < 1 for name in tolerances):
            raise ValueError("tolerances must be < 1")


@dataclass(frozen=True)
class SolveStats:
    iterations: int
    initial_cost: float
    final_cost: float
    termination_reason: str
    cost_trace: List[float]
    gradient_norm: float = 0.0
    line_block_ranks: Dict[int, int] = field(default_factory=dict)
    underdetermined_lines: List[int] = field(default_factory=list)
    skipped_factors: int = 0

    def to_dict(self) -> Dict[str, object]:
        return {
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "termination_reason": self.termination_reason,
            "cost_trace": list(self.cost_trace),
            "gradient_norm": self.gradient_norm,
            "line_block_ranks": {str(k): v for k, v in sorted(self.line_block_ranks.items())},
            "underdetermined_lines": list(self.underdetermined_lines),
            "skipped_factors": self.skipped_factors,
        }


@dataclass(frozen=True)
class Factor:
    kind: str
    frame_id: int
    track_id: int
    segment: Optional[Segment2D] = None
    p_v: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Problem:
    window: WindowState
    factors: Tuple[Factor, ...]
    pose_offsets: Dict[int, int]
    line_offsets: Dict[int, int]
    num_parameters: int
    sigma_line: float
    sigma_vp: float
    options: SolveOptions

    @property
    def num_residuals(self) -> int:
        return 2 * len(self.factors)

    def variable_of(self, index: int) -> Tuple[str, int]:
        for fid, off in self.pose_offsets.items():
            if off <= index < off + POSE_DIM:
                return "pose", fid
        for tid, off in self.line_offsets.items():
            if off <= index < off + LINE_DIM:
                return "line", tid
        raise IndexError(index)


def _initial_line_from_depth(obs: Segment2D, pose: CameraPose, depth: float) -> OrthonormalLine:
    """Line through both endpoints back-projected at a fixed depth (stays in the back-projection plane)."""
    R, c = pose.camera_rotation, pose.camera_center
    P1 = c + R @ (np.append(obs.p_s, 1.0) * depth)
    P2 = c + R @ (np.append(obs.p_e, 1.0) * depth)
    return to_orthonormal(plucker_from_points(P1, P2).normalized())


def _initial_line_from_vp(obs: Segment2D, pose: CameraPose, p_v: np.ndarray, depth: float) -> OrthonormalLine:
    """Line through the segment midpoint at a fixed depth, direction from the VP projected into the back-projection plane."""
    R, c = pose.camera_rotation, pose.camera_center
    m = R @ obs.homogeneous_line()
    m /= np.linalg.norm(m)
    d = R @ np.append(p_v, 1.0)
    d = d - (d @ m) * m
    if np.linalg.norm(d) <= 1e-9:
        raise DegenerateInput("vanishing point direction is normal to the back-projection plane")
    X = c + R @ (np.append(obs.midpoint, 1.0) * depth)
    return to_orthonormal(PluckerLine(n=np.cross(X, d), d=d).normalized())


def _vp_angle(L: PluckerLine, pose: CameraPose, p_v: np.ndarray) -> float:
    ray = pose.camera_rotation @ np.append(p_v, 1.0)
    d = L.unit_direction
    return math.atan2(float(np.linalg.norm(np.cross(d, ray))), abs(float(d @ ray)))


def initialize_track(
    observations: Sequence[LineMeasurement],
    poses: Dict[int, CameraPose],
    *,
    vps: Sequence[VpMeasurement] = (),
    init_depth: float = 3.0,
    tau: float = DEGENERACY_TAU,
    vp_gate: float = VP_INIT_GATE,
) -> Tuple[OrthonormalLine, bool]:
    """
    Returns (line, degenerate) for one track, triangulating its widest-baseline pair.

    Degenerate tracks are placed in the back-projection plane of one observation at
    init_depth; the direction comes from a vanishing point of the same frame when one
    is available, otherwise from the back-projected segment. A triangulation whose
    direction is more than vp_gate away from an observed vanishing point is treated
    as degenerate too (nearly coincident planes under noise pass the tau test).
    """
    obs = [m for m in observations if m.frame_id in poses]
    if len(obs) < 2:
        track = observations[0].track_id if observations else -1
        raise TrackTooShort(f"track {track} has {len(obs)} observation(s) in the window, need 2")

    by_frame = {m.frame_id: m for m in obs}
    usable_vps = [v for v in vps if v.frame_id in by_frame and v.vp.is_finite]
    fa, fb = widest_baseline_pair({f: poses[f].camera_center for f in by_frame})
    a, b = by_frame[fa], by_frame[fb]
    try:
        L = triangulate_line(a.segment, poses[a.frame_id], b.segment, poses[b.frame_id], tau=tau)
        disagreement = max((_vp_angle(L, poses[v.frame_id], v.vp.p_v) for v in usable_vps), default=0.0)
        if disagreement <= vp_gate:
            return to_orthonormal(L), False
        logger.info(
            "track %d: triangulated direction is %.1f deg off its vanishing point; initializing at depth %.2f m",
            a.track_id,
            math.degrees(disagreement),
            init_depth,
        )
    except DegenerateTriangulation as exc:
        logger.info("%s; initializing at depth %.2f m", exc, init_depth)
    for vp in usable_vps:
        seen = by_frame[vp.frame_id]
        try:
            return _initial_line_from_vp(seen.segment, poses[seen.frame_id], vp.vp.p_v, init_depth), True
        except GeometryError as exc:
            logger.debug("track %d: vanishing point initialization failed (%s)", seen.track_id, exc)
    first = obs[0]
    return _initial_line_from_depth(first.segment, poses[first.frame_id], init_depth), True


def initialize_lines(
    window: WindowState,
    meas: MeasurementSet,
    *,
    init_depth: float = 3.0,
    tau: float = DEGENERACY_TAU,
    vp_gate: float = VP_INIT_GATE,
) -> WindowState:
    lines = dict(window.lines)
    degenerate = set(window.degenerate_init)
    skipped = dict(window.skipped_tracks)
    by_track: Dict[int, List[LineMeasurement]] = defaultdict(list)
    for m in meas.line_obs:
        if m.frame_id in window.poses:
            by_track[m.track_id].append(m)
    vps_by_track: Dict[int, List[VpMeasurement]] = defaultdict(list)
    for v in meas.vp_obs:
        vps_by_track[v.track_id].append(v)

    for track_id in sorted(by_track):
        if track_id in lines:
            continue
        try:
            line, is_degenerate = initialize_track(
                by_track[track_id],
                window.poses,
                vps=vps_by_track.get(track_id, ()),
                init_depth=init_depth,
                tau=tau,
                vp_gate=vp_gate,
            )
        except TrackTooShort as exc:
            skipped[track_id] = str(exc)
            logger.debug("%s", exc)
            continue
        except GeometryError as exc:
            skipped[track_id] = f"track {track_id}: {exc}"
            logger.warning("track %d could not be initialized: %s", track_id, exc)
            continue
        lines[track_id] = line
        skipped.pop(track_id, None)
        if is_degenerate:
            degenerate.add(track_id)

    return replace(window, lines=lines, degenerate_init=frozenset(degenerate), skipped_tracks=skipped)


def fix_gauge(window: WindowState) -> WindowState:
    """Freezes the two oldest poses (position, orientation and scale anchor)."""
    ids = window.frame_ids
    if len(ids) < 2:
        raise ValueError("gauge fixing needs at least two poses")
    return replace(window, fixed=frozenset(window.fixed & set(ids)) | set(ids[:2]))


def build_problem(window: WindowState, meas: MeasurementSet, opts: SolveOptions = SolveOptions()) -> Problem:
    missing_frames = sorted({m.frame_id for m in (*meas.line_obs, *meas.vp_obs)} - set(window.poses))
    missing_tracks = sorted({m.track_id for m in (*meas.line_obs, *meas.vp_obs)} - set(window.lines))
    if missing_frames or missing_tracks:
        raise InconsistentIds(f"unresolved ids: frames={missing_frames} tracks={missing_tracks}")

    factors: List[Factor] = [Factor("line", m.frame_id, m.track_id, segment=m.segment) for m in meas.line_obs]
    for m in meas.vp_obs:
        if not m.vp.is_finite:
            logger.debug("frame %d track %d: vanishing point at infinity, skipped", m.frame_id, m.track_id)
            continue
        factors.append(Factor("vp", m.frame_id, m.track_id, p_v=m.vp.p_v))

    offset = 0
    pose_offsets: Dict[int, int] = {}
    for fid in window.free_frames:
        pose_offsets[fid] = offset
        offset += POSE_DIM
    line_offsets: Dict[int, int] = {}
    for tid in sorted(window.lines):
        line_offsets[tid] = offset
        offset += LINE_DIM

    return Problem(
        window=window,
        factors=tuple(factors),
        pose_offsets=pose_offsets,
        line_offsets=line_offsets,
        num_parameters=offset,
        sigma_line=meas.sigma_line,
        sigma_vp=meas.sigma_vp,
        options=opts,
    )


def _evaluate(problem: Problem, window: WindowState, factor: Factor):
    K = problem.options.intrinsics
    pose = window.poses[factor.frame_id]
    line = window.lines[factor.track_id]
    if factor.kind == "line":
        return line_jacobian(pose, line, factor.segment, K), problem.sigma_line, problem.options.line_loss
    return vp_jacobian(pose, line, factor.p_v, K), problem.sigma_vp, problem.options.vp_loss


@dataclass(frozen=True)
class Linearization:
    """Whitened, robustly weighted evaluation of the active factors at one state."""

    cost: float
    H: np.ndarray
    g: np.ndarray


def _linearize(problem: Problem, window: WindowState, active: Sequence[int]) -> Linearization:
    n = problem.num_parameters
    H = np.zeros((n, n))
    g = np.zeros(n)
    total = 0.0
    for i in active:
        f = problem.factors[i]
        ev, sigma, loss = _evaluate(problem, window, f)
        r = ev.r / sigma
        rho, weight = robust_weight(loss, float(r @ r))
        total += rho
        lo = problem.line_offsets[f.track_id]
        ls = slice(lo, lo + LINE_DIM)
        Jl = ev.J_line / sigma
        H[ls, ls] += weight * (Jl.T @ Jl)
        g[ls] += weight * (Jl.T @ r)
        if f.frame_id in problem.pose_offsets:
            po = problem.pose_offsets[f.frame_id]
            ps = slice(po, po + POSE_DIM)
            Jp = ev.J_pose / sigma
            H[ps, ps] += weight * (Jp.T @ Jp)
            cross = weight * (Jp.T @ Jl)
            H[ps, ls] += cross
            H[ls, ps] += cross.T
            g[ps] += weight * (Jp.T @ r)
    return Linearization(cost=0.5 * total, H=H, g=g)


def _active_factors(problem: Problem, window: WindowState) -> List[int]:
    active = []
    for i, f in enumerate(problem.factors):
        try:
            _evaluate(problem, window, f)
        except _NUMERIC_FAILURES as exc:
            logger.warning("%s factor frame %d track %d skipped: %s", f.kind, f.frame_id, f.track_id, exc)
            continue
        active.append(i)
    return active


def _retract(problem: Problem, window: WindowState, delta: np.ndarray) -> WindowState:
    poses = dict(window.poses)
    for fid, off in problem.pose_offsets.items():
        poses[fid] = pose_update(poses[fid], delta[off : off + POSE_DIM])
    lines = dict(window.lines)
    for tid, off in problem.line_offsets.items():
        lines[tid] = orthonormal_update(lines[tid], delta[off : off + LINE_DIM])
    return replace(window, poses=poses, lines=lines)


def _diagonally_scaled(M: np.ndarray) -> np.ndarray:
    """D^-1/2 M D^-1/2 with D = diag(M); coordinates with (numerically) no information stay zero."""
    d = np.diag(M)
    scale = np.zeros_like(d)
    informed = d > 1e-14 * float(d.max(initial=0.0))
    scale[informed] = 1.0 / np.sqrt(d[informed])
    return M * np.outer(scale, scale)


def _psd_pinv(M: np.ndarray, tol_ratio: float) -> np.ndarray:
    evals, evecs = linalg.eigh(M)
    keep = evals > tol_ratio * max(float(evals[-1]), 0.0)
    return (evecs[:, keep] / evals[keep]) @ evecs[:, keep].T


def _check_gauge(problem: Problem, H: np.ndarray) -> None:
    """
    Raises when the free poses are not determined by the factors.

    Lines are eliminated first (Schur complement with a pseudo-inverse of each 4x4 line block),
    so null directions that stay inside a line block never count. The reduced pose matrix is
    scaled to unit diagonal before the eigen test; positions and angles carry very different
    information magnitudes.
    """
    if not problem.pose_offsets:
        return
    tol = problem.options.rank_tolerance
    pose_idx = np.concatenate([np.arange(off, off + POSE_DIM) for off in problem.pose_offsets.values()])
    S = H[np.ix_(pose_idx, pose_idx)].copy()
    for off in problem.line_offsets.values():
        ls = slice(off, off + LINE_DIM)
        B = H[pose_idx, ls]
        if not B.any():
            continue
        S -= B @ _psd_pinv(H[ls, ls], tol) @ B.T
    evals, evecs = linalg.eigh(_diagonally_scaled(0.5 * (S + S.T)))
    top = max(float(evals[-1]), 0.0)
    null = evecs[:, evals <= tol * top] if top > 0 else evecs
    if null.shape[1] == 0:
        return
    involved = sorted({problem.variable_of(int(pose_idx[i])) for i in np.flatnonzero(np.abs(null).max(axis=1) > 1e-6)})
    raise SingularNormalEquations(
        f"normal matrix has {null.shape[1]} null direction(s) involving free poses; is the gauge fixed?",
        variables=involved,
    )


def line_block_ranks(problem: Problem, H: np.ndarray) -> Dict[int, int]:
    ranks = {}
    for tid, off in problem.line_offsets.items():
        block = H[off : off + LINE_DIM, off : off + LINE_DIM]
        ranks[tid] = numeric_rank(block, problem.options.block_rank_tolerance)
    return ranks


def optimize(problem: Problem, opts: Optional[SolveOptions] = None) -> Tuple[WindowState, SolveStats]:
    opts = opts or problem.options
    if opts is not problem.options:
        problem = replace(problem, options=opts)
    if problem.num_parameters == 0:
        raise EstimatorError("problem has no free parameters")

    window = problem.window
    active = _active_factors(problem, window)
    skipped = len(problem.factors) - len(active)
    lin = _linearize(problem, window, active)
    initial_cost = lin.cost
    trace = [lin.cost]
    _check_gauge(problem, lin.H)

    damping = opts.initial_damping
    reason = "max_iterations"
    iterations = 0
    for iterations in range(1, opts.max_iterations + 1):
        H, g = lin.H, lin.g
        if float(np.max(np.abs(g), initial=0.0)) <= opts.gradient_tolerance:
            reason = "gradient_tolerance"
            iterations -= 1
            break
        A = H + np.diag(damping * np.maximum(np.diag(H), 1e-6))
        try:
            delta = linalg.cho_solve(linalg.cho_factor(A), -g)
        except linalg.LinAlgError:
            damping *= opts.damping_up
            logger.debug("iteration %d: damped system not positive definite, damping=%.1e", iterations, damping)
            continue
        if float(np.linalg.norm(delta)) <= opts.step_tolerance:
            reason = "step_tolerance"
            break

        trial_lin: Optional[Linearization] = None
        try:
            trial = _retract(problem, window, delta)
            trial_lin = _linearize(problem, trial, active)
        except _NUMERIC_FAILURES as exc:
            logger.debug("iteration %d: step rejected (%s)", iterations, exc)

        if trial_lin is not None and trial_lin.cost < lin.cost:
            window, lin = trial, trial_lin
            trace.append(lin.cost)
            damping = max(damping * opts.damping_down, 1e-15)
            logger.debug("iteration %d: cost=%.6e damping=%.1e", iterations, lin.cost, damping)
        else:
            damping *= opts.damping_up
            if damping > MAX_DAMPING:
                reason = "damping_limit"
                break

    ranks = line_block_ranks(problem, lin.H)
    under = sorted(tid for tid, r in ranks.items() if r < LINE_DIM)
    stats = SolveStats(
        iterations=iterations,
        initial_cost=initial_cost,
        final_cost=lin.cost,
        termination_reason=reason,
        cost_trace=trace,
        gradient_norm=float(np.max(np.abs(lin.g), initial=0.0)),
        line_block_ranks=ranks,
        underdetermined_lines=under,
        skipped_factors=skipped,
    )
    logger.info(
        "solve finished: %s after %d iteration(s), cost %.3e -> %.3e, %d underdetermined line(s)",
        reason,
        iterations,
        initial_cost,
        lin.cost,
        len(under),
    )
    return window, stats


def slide_window(
    window: WindowState,
    meas: MeasurementSet,
    new_frame: Tuple[int, CameraPose],
    new_meas: MeasurementSet,
) -> Tuple[WindowState, MeasurementSet]:
    """Drop-and-fix sliding: evicts the oldest frame when full, retires lines nobody observes any more."""
    frame_id, pose = new_frame
    if frame_id in window.poses:
        raise InconsistentIds(f"frame {frame_id} is already in the window")

    poses = dict(window.poses)
    if len(poses) >= window.max_size:
        oldest = next(iter(poses))
        del poses[oldest]
        logger.debug("evicted frame %d", oldest)
    poses[frame_id] = pose

    merged = meas.restricted_to(poses).merged(new_meas.restricted_to([frame_id]))
    observed = {m.track_id for m in merged.line_obs}
    lines = {tid: L for tid, L in window.lines.items() if tid in observed}
    retired = dict(window.retired)
    for tid, L in window.lines.items():
        if tid not in observed:
            retired[tid] = L
    merged = replace(merged, vp_obs=tuple(m for m in merged.vp_obs if m.track_id in observed))

    slid = WindowState(
        poses=poses,
        lines=lines,
        fixed=window.fixed & set(poses),
        max_size=window.max_size,
        degenerate_init=window.degenerate_init & set(lines),
        skipped_tracks=dict(window.skipped_tracks),
        retired=retired,
    )
    if len(poses) >= 2:
        slid = fix_gauge(slid)
    return slid, merged
