from __future__ import annotations

from collections import Counter
from dataclasses import replace

import numpy as np
import pytest

from modules.errors import EstimatorError, InconsistentIds, SingularNormalEquations, TrackTooShort
from modules.estimator import (
    LineMeasurement,
    MeasurementSet,
    SolveOptions,
    VpMeasurement,
    WindowState,
    build_problem,
    fix_gauge,
    initialize_lines,
    initialize_track,
    optimize,
    slide_window,
)
from modules.factors import line_jacobian
from modules.geometry import (
    CameraPose,
    Segment2D,
    line_error,
    orthonormal_update,
    plucker_from_points,
    pose_update,
    to_orthonormal,
    to_plucker,
)
from modules.simulator import SceneSpec, TrajectorySpec, make_scene, make_trajectory, render_observations
from modules.vp_detect import VanishingPointObservation

MOTION = np.array([0.3, 0.1, 1.0]) / np.linalg.norm([0.3, 0.1, 1.0])


def _orbit_case(num_frames: int = 4):
    # no direction parallel to the orbit chord, which would make the widest pair degenerate
    spec = SceneSpec(structural_directions=((1.0, 0.3, 0.4), (0.0, 1.0, 0.0), (0.2, -0.1, 1.0)), unstructured_lines=2)
    scene = make_scene(spec)
    bundles = render_observations(scene, make_trajectory(TrajectorySpec(kind="orbit", num_frames=num_frames, step=0.3)))
    return {sl.line_id: sl for sl in scene}, bundles


def _measurements(scene, bundles, *, with_vp: bool = True) -> MeasurementSet:
    views = Counter(s.id for b in bundles for s in b.segments)
    line_obs = [LineMeasurement(b.frame_id, s.id, s) for b in bundles for s in b.segments if views[s.id] >= 2]
    vp_obs = []
    if with_vp:
        for b in bundles:
            for s in b.segments:
                cls = scene[s.id].direction_class
                if views[s.id] >= 2 and cls in b.vp_truth:
                    vp_obs.append(VpMeasurement(b.frame_id, s.id, VanishingPointObservation.from_point(b.vp_truth[cls], [s.id])))
    return MeasurementSet(tuple(line_obs), tuple(vp_obs))


def _segment(A, B, pose: CameraPose, track: int) -> Segment2D:
    R, c = pose.camera_rotation, pose.camera_center
    ends = []
    for P in (A, B):
        X = R.T @ (np.asarray(P, dtype=float) - c)
        ends.append(X[:2] / X[2])
    return Segment2D(ends[0], ends[1], track)


def _epipolar_case(track: int = 3):
    """Pure translation along MOTION and one line parallel to it (its plane holds every camera centre)."""
    poses = {k: CameraPose(R=np.eye(3), p=k * 0.3 * MOTION) for k in range(4)}
    P = np.array([0.8, -0.4, 3.0])
    truth = plucker_from_points(P, P + MOTION)
    obs = [LineMeasurement(k, track, _segment(P, P + MOTION, pose, track)) for k, pose in poses.items()]
    p_v = MOTION[:2] / MOTION[2]
    vps = [VpMeasurement(k, track, VanishingPointObservation.from_point(p_v, [track])) for k in poses]
    return poses, truth, obs, vps


def _two_view_problem_inputs():
    poses = {0: CameraPose(R=np.eye(3), p=np.zeros(3)), 1: CameraPose(R=np.eye(3), p=(0.5, 0.0, 0.0))}
    A, B = (-1.0, 0.3, 3.0), (1.0, -0.2, 4.0)
    O = to_orthonormal(plucker_from_points(A, B).normalized())
    line_obs = tuple(LineMeasurement(f, 5, _segment(A, B, p, 5)) for f, p in poses.items())
    d = np.subtract(B, A)
    vp_obs = (VpMeasurement(0, 5, VanishingPointObservation.from_point(d[:2] / d[2], [5])),)
    window = WindowState(poses=poses, lines={5: O}, fixed={0, 1})
    return window, MeasurementSet(line_obs, vp_obs)


def test_build_problem_counts() -> None:
    window, meas = _two_view_problem_inputs()
    problem = build_problem(window, meas)
    assert problem.num_residuals == 6
    assert problem.num_parameters == 4
    assert problem.line_offsets == {5: 0}
    assert problem.pose_offsets == {}

    line_only = build_problem(window, meas.without_vp())
    assert line_only.num_residuals == 4
    assert line_only.num_parameters == problem.num_parameters


def test_build_problem_skips_vp_at_infinity() -> None:
    window, meas = _two_view_problem_inputs()
    far = VpMeasurement(1, 5, VanishingPointObservation.from_homogeneous((1.0, 0.0, 0.0), [5]))
    problem = build_problem(window, replace(meas, vp_obs=meas.vp_obs + (far,)))
    assert sum(1 for f in problem.factors if f.kind == "vp") == 1


def test_build_problem_rejects_unknown_ids() -> None:
    window, meas = _two_view_problem_inputs()
    stray = LineMeasurement(0, 99, Segment2D((0, 0), (0.1, 0.1), 99))
    with pytest.raises(InconsistentIds):
        build_problem(window, replace(meas, line_obs=meas.line_obs + (stray,)))
    unknown_frame = LineMeasurement(7, 5, Segment2D((0, 0), (0.1, 0.1), 5))
    with pytest.raises(InconsistentIds):
        build_problem(window, replace(meas, line_obs=meas.line_obs + (unknown_frame,)))


def test_window_state_validation() -> None:
    pose = CameraPose(R=np.eye(3), p=np.zeros(3))
    with pytest.raises(ValueError):
        WindowState(poses={k: pose for k in range(3)}, max_size=2)
    with pytest.raises(InconsistentIds):
        WindowState(poses={0: pose}, fixed={4})


def test_fix_gauge() -> None:
    pose = CameraPose(R=np.eye(3), p=np.zeros(3))
    five = fix_gauge(WindowState(poses={k: pose for k in range(10, 15)}))
    assert five.fixed == {10, 11}
    assert five.free_frames == [12, 13, 14]

    two = fix_gauge(WindowState(poses={3: pose, 4: pose}))
    assert two.free_frames == []

    with pytest.raises(ValueError):
        fix_gauge(WindowState(poses={3: pose}))


def test_noise_free_lines_initialize_exactly() -> None:
    scene, bundles = _orbit_case()
    meas = _measurements(scene, bundles)
    window = initialize_lines(WindowState(poses={b.frame_id: b.pose for b in bundles}), meas)

    assert set(window.lines) == set(meas.track_ids())
    assert not window.degenerate_init
    for tid, O in window.lines.items():
        m = line_error(to_plucker(O), scene[tid].line)
        assert m.direction_error < 1e-9
        assert m.orthogonal_distance_error < 1e-9


def test_single_view_tracks_are_skipped() -> None:
    pose = CameraPose(R=np.eye(3), p=np.zeros(3))
    only = LineMeasurement(0, 8, Segment2D((0.0, 0.1), (0.3, 0.2), 8))
    with pytest.raises(TrackTooShort):
        initialize_track([only], {0: pose})

    window = initialize_lines(WindowState(poses={0: pose, 1: pose}), MeasurementSet((only,)))
    assert 8 not in window.lines
    assert 8 in window.skipped_tracks


def test_epipolar_line_is_initialized_in_its_plane() -> None:
    poses, truth, obs, vps = _epipolar_case()
    window = initialize_lines(WindowState(poses=poses), MeasurementSet(tuple(obs)))
    assert 3 in window.degenerate_init
    for m in obs:
        assert np.abs(line_jacobian(poses[m.frame_id], window.lines[3], m.segment).r).max() < 1e-9

    with_vp = initialize_lines(WindowState(poses=poses), MeasurementSet(tuple(obs), tuple(vps)))
    assert 3 in with_vp.degenerate_init
    assert line_error(to_plucker(with_vp.lines[3]), truth).direction_error < 1e-9


def test_optimize_converges_from_perturbed_start() -> None:
    scene, bundles = _orbit_case()
    meas = _measurements(scene, bundles)
    rng = np.random.default_rng(4)
    poses = {b.frame_id: b.pose for b in bundles}
    for fid in (2, 3):
        poses[fid] = pose_update(poses[fid], rng.normal(scale=1e-3, size=6))
    lines = {
        tid: orthonormal_update(to_orthonormal(scene[tid].line.normalized()), rng.normal(scale=1e-2, size=4))
        for tid in meas.track_ids()
    }
    window = fix_gauge(WindowState(poses=poses, lines=lines))

    solved, stats = optimize(build_problem(window, meas))

    assert stats.termination_reason != "max_iterations"
    assert stats.final_cost < 1e-12
    assert stats.final_cost <= stats.initial_cost
    assert all(b <= a for a, b in zip(stats.cost_trace, stats.cost_trace[1:]))
    assert stats.underdetermined_lines == []
    for tid, O in solved.lines.items():
        assert line_error(to_plucker(O), scene[tid].line).direction_error < 1e-6
    for b in bundles:
        np.testing.assert_allclose(solved.poses[b.frame_id].p, b.pose.p, atol=1e-6)


def test_optimize_at_truth_stops_immediately() -> None:
    scene, bundles = _orbit_case()
    meas = _measurements(scene, bundles)
    lines = {tid: to_orthonormal(scene[tid].line.normalized()) for tid in meas.track_ids()}
    window = fix_gauge(WindowState(poses={b.frame_id: b.pose for b in bundles}, lines=lines))

    _, stats = optimize(build_problem(window, meas))
    assert stats.iterations <= 1
    assert stats.final_cost < 1e-16


def test_missing_gauge_is_reported() -> None:
    scene, bundles = _orbit_case(num_frames=3)
    meas = _measurements(scene, bundles)
    lines = {tid: to_orthonormal(scene[tid].line.normalized()) for tid in meas.track_ids()}
    window = WindowState(poses={b.frame_id: b.pose for b in bundles}, lines=lines)

    with pytest.raises(SingularNormalEquations) as info:
        optimize(build_problem(window, meas))
    assert any(kind == "pose" for kind, _ in info.value.variables)


def test_gauge_check_accepts_fixed_window_with_mixed_units() -> None:
    # position and angle information differ by orders of magnitude on this window
    scene = make_scene(SceneSpec(unstructured_lines=2))
    by_id = {sl.line_id: sl for sl in scene}
    bundles = render_observations(scene, make_trajectory(TrajectorySpec(kind="orbit", num_frames=6, step=0.3)))
    meas = _measurements(by_id, bundles)
    lines = {tid: to_orthonormal(by_id[tid].line.normalized()) for tid in meas.track_ids()}
    window = fix_gauge(WindowState(poses={b.frame_id: b.pose for b in bundles}, lines=lines))

    problem = build_problem(window, meas)
    assert len(problem.pose_offsets) == 4
    _, stats = optimize(problem)
    assert stats.final_cost < 1e-16


def test_optimize_needs_free_parameters() -> None:
    pose = CameraPose(R=np.eye(3), p=np.zeros(3))
    window = WindowState(poses={0: pose, 1: pose}, fixed={0, 1})
    with pytest.raises(EstimatorError):
        optimize(build_problem(window, MeasurementSet()))


def test_vp_factors_fix_degenerate_line_direction() -> None:
    poses, truth, obs, vps = _epipolar_case()
    u = obs[0].segment.direction / np.linalg.norm(obs[0].segment.direction)
    off = VpMeasurement(0, 3, VanishingPointObservation.from_point(vps[0].vp.p_v + 0.03 * u, [3]))
    start, degenerate = initialize_track(obs, poses, vps=[off])
    assert degenerate
    start_error = line_error(to_plucker(start), truth).direction_error
    assert start_error > 0.01

    window = WindowState(poses=poses, lines={3: start}, fixed=set(poses))
    opts = SolveOptions()

    line_only, stats_without = optimize(build_problem(window, MeasurementSet(tuple(obs)), opts))
    assert line_error(to_plucker(line_only.lines[3]), truth).direction_error == pytest.approx(start_error, abs=1e-6)
    assert stats_without.line_block_ranks[3] == 2
    assert stats_without.underdetermined_lines == [3]

    with_vp, stats_with = optimize(build_problem(window, MeasurementSet(tuple(obs), tuple(vps)), opts))
    assert line_error(to_plucker(with_vp.lines[3]), truth).direction_error < 1e-6
    assert stats_with.line_block_ranks[3] == 3


def test_slide_window_evicts_oldest_and_retires_lines() -> None:
    pose = CameraPose(R=np.eye(3), p=np.zeros(3))
    A = to_orthonormal(plucker_from_points((0, 0, 3), (1, 0, 3)))
    B = to_orthonormal(plucker_from_points((0, 1, 3), (0, 1, 4)))

    def seg(track: int) -> Segment2D:
        return Segment2D((0.0, 0.0), (0.1, 0.2), track)

    line_obs = [LineMeasurement(1, 1, seg(1))] + [LineMeasurement(k, 2, seg(2)) for k in range(1, 11)]
    vp_obs = [
        VpMeasurement(1, 1, VanishingPointObservation.from_point((0.5, 0.5), [1])),
        VpMeasurement(5, 2, VanishingPointObservation.from_point((0.1, 0.4), [2])),
    ]
    window = WindowState(poses={k: pose for k in range(1, 11)}, lines={1: A, 2: B}, fixed={1, 2})
    new_meas = MeasurementSet((LineMeasurement(11, 2, seg(2)), LineMeasurement(3, 2, seg(2))))

    slid, meas = slide_window(window, MeasurementSet(tuple(line_obs), tuple(vp_obs)), (11, pose), new_meas)

    assert slid.frame_ids == list(range(2, 12))
    assert set(slid.lines) == {2}
    assert slid.lines[2] is B
    assert set(slid.retired) == {1}
    assert slid.fixed == {2, 3}
    assert all(m.frame_id != 1 for m in meas.line_obs)
    assert [m.track_id for m in meas.vp_obs] == [2]
    assert sum(1 for m in meas.line_obs if m.frame_id == 3) == 1
    assert any(m.frame_id == 11 for m in meas.line_obs)


def test_slide_window_rejects_known_frame() -> None:
    pose = CameraPose(R=np.eye(3), p=np.zeros(3))
    window = WindowState(poses={0: pose, 1: pose})
    with pytest.raises(InconsistentIds):
        slide_window(window, MeasurementSet(), (1, pose), MeasurementSet())
