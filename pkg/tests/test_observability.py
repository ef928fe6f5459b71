from __future__ import annotations

import json

import numpy as np
import pytest

from modules.factors import project_line
from modules.geometry import (
    CameraPose,
    Segment2D,
    exp_so3,
    plucker_from_points,
    random_rotation,
    to_orthonormal,
    transform_line,
)
from modules.observability import (
    interior_augmented_jacobian,
    is_slope_degenerate,
    line_fim,
    line_measurement_rank,
    numeric_rank,
    observation_report,
    stacked_fim,
    track_report,
)

OMEGA = np.eye(2) * 4.0


def _segment(A, B, pose: CameraPose, track: int = 0) -> Segment2D:
    R, c = pose.camera_rotation, pose.camera_center
    ends = []
    for P in (A, B):
        X = R.T @ (np.asarray(P, dtype=float) - c)
        ends.append(X[:2] / X[2])
    return Segment2D(ends[0], ends[1], track)


def test_line_fim_keeps_zero_columns_and_symmetry() -> None:
    rng = np.random.default_rng(0)
    J = rng.normal(size=(2, 4))
    J[:, 0] = 0.0
    H = line_fim(J, OMEGA)
    assert np.all(H[0, :] == 0.0) and np.all(H[:, 0] == 0.0)
    np.testing.assert_array_equal(H, H.T)


def test_line_fim_rejects_bad_weights() -> None:
    J = np.ones((2, 4))
    with pytest.raises(ValueError):
        line_fim(J, np.array([[1.0, 0.0], [0.0, -1.0]]))
    with pytest.raises(ValueError):
        line_fim(J, np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_numeric_rank_examples() -> None:
    assert numeric_rank(np.eye(4)) == 4
    assert numeric_rank(np.outer([1, 2, 3, 4], [1, 2, 3, 4])) == 1
    assert numeric_rank(np.zeros((4, 4))) == 0
    assert numeric_rank(np.diag([1.0, 1e-12, 0.0, 0.0])) == 1


def test_numeric_rank_of_random_products() -> None:
    rng = np.random.default_rng(1)
    for _ in range(200):
        r = int(rng.integers(0, 5))
        M = rng.normal(size=(4, r)) @ rng.normal(size=(r, 4))
        assert numeric_rank(M) == r


def test_slope_degeneracy_examples() -> None:
    assert is_slope_degenerate((1, 1, 0), (0, 0), (1, 1))
    assert not is_slope_degenerate((1, -1, 0), (0, 0), (1, 1))
    assert is_slope_degenerate((0, 1, -0.5), (0.3, 0.2), (0.3, 0.9))


def test_measurement_rank_drops_on_slope_degeneracy() -> None:
    assert line_measurement_rank((1, 1, 0), (0, 0), (1, 1)) == 1
    assert line_measurement_rank((1, -1, 0.2), (0, 0.2), (1, 1.2)) == 2


def test_stacked_structural_template_ranks() -> None:
    rng = np.random.default_rng(2)
    J_line = rng.normal(size=(2, 4))
    J_line[:, 0] = 0.0
    J_vp = rng.normal(size=(2, 4))
    J_vp[:, 1] = 0.0
    report = stacked_fim(J_line, J_vp, OMEGA, OMEGA)
    assert (report.rank_line, report.rank_vp, report.rank_total) == (2, 2, 4)
    np.testing.assert_allclose(report.H_total, report.H_line + report.H_vp)
    assert report.singular_values["total"] == sorted(report.singular_values["total"], reverse=True)


def test_single_observation_leaves_camera_distance_unobserved() -> None:
    pose = CameraPose(R=np.eye(3), p=np.zeros(3))
    A, B = (-1.0, 0.3, 3.0), (1.0, -0.2, 4.0)
    O = to_orthonormal(plucker_from_points(A, B).normalized())
    seg = _segment(A, B, pose)

    report = observation_report(pose, O, seg)
    assert (report.rank_line, report.rank_vp, report.rank_total) == (2, 2, 3)
    assert not report.slope_degenerate

    line_only = observation_report(pose, O, seg, include_vp=False)
    assert line_only.rank_total == 2
    assert line_only.rank_vp == 0


def test_injected_slope_degenerate_observation() -> None:
    pose = CameraPose(R=np.eye(3), p=np.zeros(3))
    A, B = (-1.0, 0.3, 3.0), (1.0, -0.2, 4.0)
    L = plucker_from_points(A, B).normalized()
    l = project_line(transform_line(L, pose))
    # endpoints along the line normal: segment slope equals l2/l1
    normal = l[:2] / np.linalg.norm(l[:2])
    seg = Segment2D(np.array([0.1, 0.1]), np.array([0.1, 0.1]) + 0.5 * normal, 0)

    report = observation_report(pose, to_orthonormal(L), seg, include_vp=False)
    assert report.slope_degenerate
    assert report.rank_line == 1


def test_track_rank_for_generic_and_epipolar_lines() -> None:
    poses = [CameraPose(R=np.eye(3), p=np.zeros(3)), CameraPose(R=exp_so3([0.0, 0.15, 0.0]), p=(0.5, 0.1, 0.0))]
    A, B = (-1.0, 0.3, 3.0), (1.0, -0.2, 4.0)
    O = to_orthonormal(plucker_from_points(A, B).normalized())
    report = track_report(poses, O, [_segment(A, B, p) for p in poses], vp_mask=[False, False])
    assert report.rank_line == 4

    t = np.array([0.3, 0.1, 1.0]) / np.linalg.norm([0.3, 0.1, 1.0])
    translating = [CameraPose(R=np.eye(3), p=k * 0.3 * t) for k in range(4)]
    P = np.array([0.8, -0.4, 3.0])
    O = to_orthonormal(plucker_from_points(P, P + t).normalized())
    segs = [_segment(P, P + t, p) for p in translating]

    without = track_report(translating, O, segs, vp_mask=[False] * 4)
    with_vp = track_report(translating, O, segs)
    assert without.rank_total == 2
    assert with_vp.rank_line == 2
    assert with_vp.rank_total == 3


def test_track_report_length_mismatch() -> None:
    pose = CameraPose(R=np.eye(3), p=np.zeros(3))
    A, B = (-1.0, 0.3, 3.0), (1.0, -0.2, 4.0)
    O = to_orthonormal(plucker_from_points(A, B).normalized())
    with pytest.raises(ValueError):
        track_report([pose, pose], O, [_segment(A, B, pose)])


def test_interior_points_add_no_rank() -> None:
    pose = CameraPose(R=exp_so3([0.05, -0.1, 0.02]), p=(0.2, 0.0, -0.1))
    A, B = (-1.0, 0.3, 3.0), (1.0, -0.2, 4.0)
    O = to_orthonormal(plucker_from_points(A, B).normalized())
    seg = _segment(A, B, pose)
    J = interior_augmented_jacobian(pose, O, seg, [0.25, 0.5, 0.75])
    assert J.shape == (5, 4)
    assert numeric_rank(J) == 2

    with pytest.raises(ValueError):
        interior_augmented_jacobian(pose, O, seg, [1.0])


def test_slope_flags_are_plain_bools() -> None:
    assert type(is_slope_degenerate((1, 1, 0), (0, 0), (1, 1))) is bool
    assert type(is_slope_degenerate(np.array([1.0, -1.0, 0.0]), np.zeros(2), np.ones(2))) is bool

    pose = CameraPose(R=np.eye(3), p=np.zeros(3))
    A, B = (-1.0, 0.3, 3.0), (1.0, -0.2, 4.0)
    O = to_orthonormal(plucker_from_points(A, B).normalized())
    report = track_report([pose], O, [_segment(A, B, pose)])
    assert type(report.slope_degenerate) is bool
    assert json.loads(json.dumps({"flag": report.slope_degenerate})) == {"flag": False}


def test_single_view_ranks_over_random_configurations() -> None:
    rng = np.random.default_rng(12)
    for _ in range(1000):
        pose = CameraPose(R=random_rotation(rng, max_angle=0.4), p=rng.normal(scale=0.5, size=3))
        R, c = pose.camera_rotation, pose.camera_center
        X1 = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2, 4)])
        step = rng.normal(size=3)
        step[2] = abs(step[2]) + 0.5
        X2 = X1 + step
        O = to_orthonormal(plucker_from_points(c + R @ X1, c + R @ X2).normalized())
        seg = Segment2D(X1[:2] / X1[2], X2[:2] / X2[2], 0)

        report = observation_report(pose, O, seg)
        assert (report.rank_line, report.rank_vp, report.rank_total) == (2, 2, 3)


def test_translation_parallel_lines_over_random_configurations() -> None:
    rng = np.random.default_rng(13)
    for _ in range(200):
        t = rng.normal(size=3)
        t[2] = abs(t[2]) + 1.0
        t /= np.linalg.norm(t)
        poses = [CameraPose(R=np.eye(3), p=k * rng.uniform(0.1, 0.4) * t) for k in range(4)]
        P = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(2.5, 4)])
        O = to_orthonormal(plucker_from_points(P, P + t).normalized())
        segs = [_segment(P, P + t, p) for p in poses]

        assert track_report(poses, O, segs, vp_mask=[False] * 4).rank_total == 2
        assert track_report(poses, O, segs).rank_total == 3
