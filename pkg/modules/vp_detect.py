"""
J-linkage clustering of image segments by shared vanishing point.

Hypotheses are intersections of randomly sampled segment pairs; each segment's
preference set is the set of hypotheses it is consistent with, and clusters are
merged greedily by Jaccard distance of their preference sets. Merged clusters are then
refined by moving each segment to the fitted vanishing point it agrees with best.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Sequence

import numpy as np

from modules.errors import DegenerateHypothesis, IllConditioned
from modules.geometry import Segment2D

logger = logging.getLogger(__name__)

FINITE_EPS = 1e-6
REFINE_ITERATIONS = 10


@dataclass(frozen=True)
class JLinkageParams:
    num_hypotheses: int = 500
    consensus_threshold: float = 0.0175
    min_cluster_size: int = 3
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if self.num_hypotheses < 1:
            raise ValueError("num_hypotheses must be >= 1")
        if not self.consensus_threshold > 0:
            raise ValueError("consensus_threshold must be positive")
        if self.min_cluster_size < 2:
            raise ValueError("min_cluster_size must be >= 2")


@dataclass(frozen=True)
class VanishingPointObservation:
    """Cluster vanishing point; p_v is None when the point is at infinity."""

    v: np.ndarray
    member_ids: FrozenSet[int]
    is_finite: bool
    p_v: Optional[np.ndarray] = None

    @classmethod
    def from_homogeneous(cls, v: Iterable[float], member_ids: Iterable[int]) -> "VanishingPointObservation":
        v = np.asarray(v, dtype=float).reshape(3)
        v = v / np.linalg.norm(v)
        finite = abs(float(v[2])) > FINITE_EPS
        p_v = v[:2] / v[2] if finite else None
        return cls(v=v, member_ids=frozenset(int(i) for i in member_ids), is_finite=finite, p_v=p_v)

    @classmethod
    def from_point(cls, p_v: Iterable[float], member_ids: Iterable[int] = ()) -> "VanishingPointObservation":
        p = np.asarray(p_v, dtype=float).reshape(2)
        return cls.from_homogeneous(np.append(p, 1.0), member_ids)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "v": self.v.tolist(),
            "p_v": None if self.p_v is None else self.p_v.tolist(),
            "is_finite": self.is_finite,
            "member_ids": sorted(self.member_ids),
        }


def _unit_line(s: Segment2D) -> np.ndarray:
    l = s.homogeneous_line()
    return l / np.linalg.norm(l)


def vp_hypothesis(s1: Segment2D, s2: Segment2D) -> np.ndarray:
    v = np.cross(_unit_line(s1), _unit_line(s2))
    if np.linalg.norm(v) < 1e-12:
        raise DegenerateHypothesis(f"segments {s1.id} and {s2.id} are collinear")
    return v


def consistency(s: Segment2D, v: Iterable[float]) -> float:
    """Angle between the segment and the ray from its midpoint toward v, folded to [0, pi/2]."""
    v = np.asarray(v, dtype=float).reshape(3)
    m = s.midpoint
    toward = v[:2] - v[2] * m
    seg = s.direction
    cross = seg[0] * toward[1] - seg[1] * toward[0]
    dot = seg @ toward
    return float(np.arctan2(abs(cross), abs(dot)))


def _consistency_matrix(segments: Sequence[Segment2D], hypotheses: np.ndarray) -> np.ndarray:
    mids = np.array([s.midpoint for s in segments])
    dirs = np.array([s.direction for s in segments])
    toward = hypotheses[None, :, :2] - hypotheses[None, :, 2:3] * mids[:, None, :]
    cross = dirs[:, None, 0] * toward[:, :, 1] - dirs[:, None, 1] * toward[:, :, 0]
    dot = dirs[:, None, 0] * toward[:, :, 0] + dirs[:, None, 1] * toward[:, :, 1]
    return np.arctan2(np.abs(cross), np.abs(dot))


def fit_vp(members: Sequence[Segment2D]) -> np.ndarray:
    if len(members) < 2:
        raise ValueError("fit_vp needs at least two segments")
    lines = np.array([s.homogeneous_line() for s in members])
    lines /= np.linalg.norm(lines[:, :2], axis=1, keepdims=True)
    evals, evecs = np.linalg.eigh(lines.T @ lines)
    if evals[1] - evals[0] < 1e-12:
        raise IllConditioned("vanishing point direction is ambiguous (rank-1 scatter)")
    v = evecs[:, 0]
    if abs(v[2]) > FINITE_EPS:
        return v if v[2] > 0 else -v
    lead = v[np.flatnonzero(np.abs(v) > FINITE_EPS)[0]]
    return v if lead > 0 else -v


def _sample_hypotheses(segments: Sequence[Segment2D], params: JLinkageParams) -> np.ndarray:
    rng = np.random.default_rng(params.rng_seed)
    n = len(segments)
    hyps: List[np.ndarray] = []
    skipped = 0
    for _ in range(params.num_hypotheses):
        i, j = rng.choice(n, size=2, replace=False)
        try:
            v = vp_hypothesis(segments[int(i)], segments[int(j)])
        except DegenerateHypothesis:
            skipped += 1
            continue
        hyps.append(v / np.linalg.norm(v))
    if skipped:
        logger.debug("skipped %d degenerate hypotheses", skipped)
    return np.array(hyps).reshape(-1, 3)


def _jaccard_row(ps: np.ndarray, row: np.ndarray) -> np.ndarray:
    inter = ps.astype(np.int64) @ row.astype(np.int64)
    union = ps.sum(axis=1) + row.sum() - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(union > 0, 1.0 - inter / np.maximum(union, 1), 1.0)
    return dist


def _refine(segments: Sequence[Segment2D], groups: List[List[int]], params: JLinkageParams) -> List[List[int]]:
    """
    Reassigns every segment to the cluster vanishing point it is most consistent with and refits.

    Merged clusters can carry a few segments of another pencil, which bias the fit until they
    are moved out. A segment consistent with no cluster stays unclustered. Clusters whose
    vanishing points coincide collapse into one.
    """
    for _ in range(REFINE_ITERATIONS):
        vps: List[np.ndarray] = []
        for group in groups:
            try:
                v = fit_vp([segments[i] for i in group])
            except IllConditioned as exc:
                logger.warning("dropping cluster of %d segments: %s", len(group), exc)
                continue
            v = v / np.linalg.norm(v)
            if any(abs(float(v @ u)) > np.cos(params.consensus_threshold) for u in vps):
                continue
            vps.append(v)
        if not vps:
            return []
        cost = _consistency_matrix(segments, np.array(vps))
        best = np.argmin(cost, axis=1)
        inlier = cost[np.arange(len(segments)), best] < params.consensus_threshold
        regrouped = [np.flatnonzero(inlier & (best == k)).tolist() for k in range(len(vps))]
        regrouped = [g for g in regrouped if len(g) >= params.min_cluster_size]
        if regrouped == groups:
            break
        groups = regrouped
    return groups


def jlinkage_cluster(segments: Sequence[Segment2D], params: JLinkageParams = JLinkageParams()) -> List[VanishingPointObservation]:
    if len(segments) < 2:
        raise ValueError("J-linkage needs at least two segments")

    hypotheses = _sample_hypotheses(segments, params)
    if hypotheses.shape[0] == 0:
        return []
    preference = _consistency_matrix(segments, hypotheses) < params.consensus_threshold

    members: List[List[int]] = [[i] for i in range(len(segments))]
    ps = preference.copy()
    dist = np.array([_jaccard_row(ps, ps[i]) for i in range(len(members))])
    np.fill_diagonal(dist, np.inf)

    while len(members) > 1:
        flat = int(np.argmin(dist))
        a, b = divmod(flat, dist.shape[1])
        if not dist[a, b] < 1.0:
            break
        a, b = min(a, b), max(a, b)
        members[a] = members[a] + members[b]
        ps[a] = ps[a] & ps[b]
        del members[b]
        ps = np.delete(ps, b, axis=0)
        dist = np.delete(np.delete(dist, b, axis=0), b, axis=1)
        row = _jaccard_row(ps, ps[a])
        row[a] = np.inf
        dist[a, :] = row
        dist[:, a] = row

    groups = [sorted(g) for g in members if len(g) >= params.min_cluster_size]
    clusters: List[VanishingPointObservation] = []
    for group in _refine(segments, groups, params):
        group_segments = [segments[i] for i in group]
        try:
            v = fit_vp(group_segments)
        except IllConditioned as exc:
            logger.warning("dropping cluster of %d segments: %s", len(group), exc)
            continue
        clusters.append(VanishingPointObservation.from_homogeneous(v, (s.id for s in group_segments)))

    clusters.sort(key=lambda c: min(c.member_ids))
    return clusters


def outlier_ids(segments: Sequence[Segment2D], clusters: Sequence[VanishingPointObservation]) -> List[int]:
    clustered = set().union(*(c.member_ids for c in clusters)) if clusters else set()
    return sorted(s.id for s in segments if s.id not in clustered)


def clustering_accuracy(
    clusters: Sequence[VanishingPointObservation],
    labels: Dict[int, int],
    *,
    outlier_label: int = -1,
) -> float:
    """Fraction of labelled (non-outlier) segments whose cluster majority label matches theirs."""
    assigned: Dict[int, int] = {}
    for c in clusters:
        votes = Counter(labels.get(i, outlier_label) for i in c.member_ids)
        majority = votes.most_common(1)[0][0]
        for i in c.member_ids:
            assigned[i] = majority
    inliers = [i for i, lab in labels.items() if lab != outlier_label]
    if not inliers:
        return 1.0
    correct = sum(1 for i in inliers if assigned.get(i) == labels[i])
    return correct / len(inliers)
