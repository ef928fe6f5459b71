from __future__ import annotations

import math

import numpy as np
import pytest

from modules.errors import DegenerateHypothesis, IllConditioned
from modules.geometry import Segment2D
from modules.simulator import make_pencil_segments
from modules.vp_detect import (
    JLinkageParams,
    VanishingPointObservation,
    clustering_accuracy,
    consistency,
    fit_vp,
    jlinkage_cluster,
    outlier_ids,
    vp_hypothesis,
)


def test_hypothesis_of_crossing_segments() -> None:
    v = vp_hypothesis(Segment2D((0, 0), (1, 1), 1), Segment2D((0, 1), (2, 1), 2))
    np.testing.assert_allclose(v / v[2], [1, 1, 1])


def test_hypothesis_of_parallel_segments_is_at_infinity() -> None:
    v = vp_hypothesis(Segment2D((0, 0), (1, 0), 1), Segment2D((0, 1), (1, 1), 2))
    assert v[2] == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(np.abs(v / np.linalg.norm(v)), [1, 0, 0], atol=1e-15)
    assert not VanishingPointObservation.from_homogeneous(v, [1, 2]).is_finite


def test_hypothesis_of_identical_segments_raises() -> None:
    with pytest.raises(DegenerateHypothesis):
        vp_hypothesis(Segment2D((0, 0), (1, 1), 1), Segment2D((0, 0), (1, 1), 2))


def test_consistency_examples() -> None:
    seg = Segment2D((0, 0), (0.5, 0.5), 0)
    assert consistency(seg, (1, 1, 1)) == pytest.approx(0.0, abs=1e-12)
    assert consistency(Segment2D((0, 0), (1, 0), 0), (0, 1, 0)) == pytest.approx(math.pi / 2)

    other = Segment2D((0.2, -0.3), (0.7, 0.1), 3)
    swapped = Segment2D(other.p_e, other.p_s, 3)
    v = np.array([2.0, -1.0, 1.0])
    assert consistency(other, v) == pytest.approx(consistency(swapped, v))
    assert 0.0 <= consistency(other, v) <= math.pi / 2
    assert consistency(other, -v) == pytest.approx(consistency(other, v))


def test_fit_vp_recovers_exact_pencil() -> None:
    vp = np.array([0.5, 0.2])
    segments = []
    for i, angle in enumerate(np.linspace(0.2, 2.8, 6)):
        u = np.array([math.cos(angle), math.sin(angle)])
        segments.append(Segment2D(vp + 0.4 * u, vp + 0.9 * u, i))
    v = fit_vp(segments)
    assert v[2] > 0
    np.testing.assert_allclose(v[:2] / v[2], vp, atol=1e-9)


def test_fit_vp_of_one_repeated_line_is_ill_conditioned() -> None:
    segments = [Segment2D((0, 0), (1, 1), 0), Segment2D((2, 2), (3, 3), 1), Segment2D((-1, -1), (-2, -2), 2)]
    with pytest.raises(IllConditioned):
        fit_vp(segments)


@pytest.mark.parametrize("seed", range(10))
def test_jlinkage_recovers_noise_free_pencils(seed: int) -> None:
    pencils = make_pencil_segments(num_vps=3, lines_per_vp=10, seed=seed)
    clusters = jlinkage_cluster(pencils.segments, JLinkageParams(rng_seed=seed))

    assert len(clusters) == 3
    assert all(c.is_finite for c in clusters)
    assert clustering_accuracy(clusters, pencils.labels) == 1.0
    for vp in pencils.vps:
        assert min(float(np.linalg.norm(c.p_v - vp)) for c in clusters) < 1e-6
    assert outlier_ids(pencils.segments, clusters) == []


def test_jlinkage_with_endpoint_noise_and_outliers() -> None:
    accuracies = []
    recovered = 0
    for seed in range(20):
        pencils = make_pencil_segments(num_vps=3, lines_per_vp=10, outlier_rate=0.1, noise_sigma=0.001, seed=seed)
        clusters = jlinkage_cluster(pencils.segments, JLinkageParams(rng_seed=seed))
        accuracies.append(clustering_accuracy(clusters, pencils.labels))
        recovered += sum(1 for vp in pencils.vps if any(np.linalg.norm(c.p_v - vp) < 0.05 for c in clusters if c.is_finite))
    assert float(np.median(accuracies)) >= 0.95
    assert recovered >= 0.9 * 20 * 3


def test_fit_vp_matches_truth_on_each_pencil() -> None:
    pencils = make_pencil_segments(num_vps=3, lines_per_vp=6, seed=11)
    for label, vp in enumerate(pencils.vps):
        members = [s for s in pencils.segments if pencils.labels[s.id] == label]
        v = fit_vp(members)
        np.testing.assert_allclose(v[:2] / v[2], vp, atol=1e-9)


def test_jlinkage_with_outliers_keeps_inliers_together() -> None:
    pencils = make_pencil_segments(num_vps=3, lines_per_vp=10, outlier_rate=0.2, seed=4)
    clusters = jlinkage_cluster(pencils.segments, JLinkageParams(rng_seed=4))
    assert len(clusters) >= 3
    assert clustering_accuracy(clusters, pencils.labels) >= 0.9


def test_jlinkage_is_deterministic_for_a_seed() -> None:
    pencils = make_pencil_segments(num_vps=2, lines_per_vp=8, noise_sigma=0.002, seed=2)
    params = JLinkageParams(num_hypotheses=200, rng_seed=9)
    first = [c.to_dict() for c in jlinkage_cluster(pencils.segments, params)]
    second = [c.to_dict() for c in jlinkage_cluster(pencils.segments, params)]
    assert first == second


def test_jlinkage_needs_two_segments() -> None:
    with pytest.raises(ValueError):
        jlinkage_cluster([Segment2D((0, 0), (1, 0), 0)])


def test_clusters_smaller_than_minimum_are_dropped() -> None:
    pencils = make_pencil_segments(num_vps=1, lines_per_vp=2, seed=1)
    assert jlinkage_cluster(pencils.segments, JLinkageParams(min_cluster_size=3)) == []


def test_clustering_accuracy_uses_majority_labels() -> None:
    clusters = [
        VanishingPointObservation.from_point((0.0, 0.0), [0, 1, 2]),
        VanishingPointObservation.from_point((5.0, 0.0), [3, 4]),
    ]
    labels = {0: 0, 1: 0, 2: 1, 3: 1, 4: 1, 5: 1, 6: -1}
    # 2 is outvoted, 5 is unclustered, 6 is an outlier and not counted
    assert clustering_accuracy(clusters, labels) == pytest.approx(4 / 6)


def test_params_validation() -> None:
    with pytest.raises(ValueError):
        JLinkageParams(num_hypotheses=0)
    with pytest.raises(ValueError):
        JLinkageParams(consensus_threshold=0.0)
    with pytest.raises(ValueError):
        JLinkageParams(min_cluster_size=1)


def test_observation_from_point() -> None:
    obs = VanishingPointObservation.from_point((0.3, -0.1), [4, 2])
    assert obs.is_finite
    np.testing.assert_allclose(obs.p_v, [0.3, -0.1])
    assert obs.to_dict()["member_ids"] == [2, 4]
