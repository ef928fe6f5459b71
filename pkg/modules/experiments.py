from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from statistics import median
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from modules.errors import ConfigError, DataError, DatasetIoError, VplineError
from modules.estimator import (
    LineMeasurement,
    MeasurementSet,
    SolveOptions,
    SolveStats,
    VpMeasurement,
    WindowState,
    build_problem,
    fix_gauge,
    initialize_lines,
    optimize,
    slide_window,
)
from modules.factors import DEFAULT_SIGMA, F_VIRTUAL
from modules.geometry import CameraPose, Segment2D, line_error, to_orthonormal, to_plucker
from modules.observability import observation_report, track_report
from modules.simulator import (
    Dataset,
    FrameBundle,
    SceneSpec,
    TrajectorySpec,
    emit_dataset,
    load_dataset,
    make_scene,
    make_trajectory,
    perturb_poses,
    render_observations,
)
from modules.vp_detect import JLinkageParams, VanishingPointObservation, clustering_accuracy, jlinkage_cluster, outlier_ids
from utils.results_io import config_hash, content_hash, ensure_dir, write_csv, write_json

logger = logging.getLogger(__name__)

SOLVE_COLUMNS = (
    "seed",
    "use_vp",
    "line_id",
    "direction_class",
    "degenerate",
    "degenerate_init",
    "direction_error_deg",
    "distance_error",
    "block_rank",
    "rank_line",
    "rank_vp",
    "rank_total",
)
AB_COLUMNS = ("seed", "arm", "line_id", "direction_error_deg", "distance_error", "block_rank", "truth_rank")
FIM_COLUMNS = (
    "line_id",
    "direction_class",
    "num_observations",
    "vp_covered",
    "observation_rank_line",
    "observation_rank_total",
    "track_rank_line",
    "track_rank_vp",
    "track_rank_total",
    "slope_degenerate",
)


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneSpec = SceneSpec()
    trajectory: TrajectorySpec = TrajectorySpec()
    noise_sigma: float = 1.0 / F_VIRTUAL
    fov: float = math.pi / 2
    near: float = 0.1
    min_length: float = 0.02
    outlier_rate: float = 0.0
    pose_trans_sigma: float = 0.0
    pose_rot_sigma: float = 0.0
    solver: SolveOptions = SolveOptions()
    sigma_line: float = DEFAULT_SIGMA
    sigma_vp: float = DEFAULT_SIGMA
    jlinkage: JLinkageParams = JLinkageParams()
    window_size: int = 10
    init_depth: float = 3.0
    vp_source: str = "truth"
    use_vp: bool = True
    seeds: Tuple[int, ...] = (0,)
    workers: int = 1
    output_dir: str = "results"

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if self.vp_source not in ("truth", "jlinkage"):
            raise ValueError(f"unknown vp_source {self.vp_source!r}")
        if self.noise_sigma < 0 or self.init_depth <= 0:
            raise ValueError("noise_sigma must be >= 0 and init_depth > 0")


@dataclass(frozen=True)
class CommandResult:
    outputs: List[str]
    errors: int
    details: List[str]
    summary: Dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class SeedResult:
    seed: int
    use_vp: bool
    vp_source: str
    lines: List[Dict[str, Any]]
    pose_rmse: float
    stats: Optional[SolveStats]
    num_solves: int
    clustering_accuracy: Optional[float] = None
    skipped_tracks: Dict[int, str] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "seed": self.seed,
            "use_vp": self.use_vp,
            "vp_source": self.vp_source,
            "pose_rmse": self.pose_rmse,
            "final_cost": self.stats.final_cost if self.stats else None,
            "stats": self.stats.to_dict() if self.stats else None,
            "num_solves": self.num_solves,
            "lines": self.lines,
            "skipped_tracks": {str(k): v for k, v in sorted(self.skipped_tracks.items())},
        }
        if self.clustering_accuracy is not None:
            data["clustering_accuracy"] = self.clustering_accuracy
        return data

    def direction_errors(self, line_ids: Optional[Sequence[int]] = None) -> List[float]:
        wanted = None if line_ids is None else set(line_ids)
        return [r["direction_error"] for r in self.lines if wanted is None or r["line_id"] in wanted]


def dataset_spec(cfg: ExperimentConfig, seed: int, scene: Optional[SceneSpec] = None) -> Dict[str, Any]:
    return {
        "seed": seed,
        "scene": replace(scene or cfg.scene, rng_seed=seed).to_dict(),
        "trajectory": cfg.trajectory.to_dict(),
        "render": {
            "noise_sigma": cfg.noise_sigma,
            "fov": cfg.fov,
            "near": cfg.near,
            "min_length": cfg.min_length,
            "outlier_rate": cfg.outlier_rate,
        },
    }


def simulate(cfg: ExperimentConfig, seed: int, *, scene_spec: Optional[SceneSpec] = None) -> Dataset:
    if scene_spec is None:
        # a corridor runs along one of its own structural directions
        scene_spec = scene_with_motion_direction(cfg) if cfg.trajectory.kind == "forward_corridor" else cfg.scene
    spec = replace(scene_spec, rng_seed=seed)
    scene = make_scene(spec)
    bundles = render_observations(
        scene,
        make_trajectory(cfg.trajectory),
        noise_sigma=cfg.noise_sigma,
        fov=cfg.fov,
        seed=seed,
        box_min=spec.box_min,
        box_max=spec.box_max,
        near=cfg.near,
        min_length=cfg.min_length,
        outlier_rate=cfg.outlier_rate,
    )
    return Dataset(spec=dataset_spec(cfg, seed, scene_spec), scene=scene, bundles=bundles)


def build_measurements(
    dataset: Dataset,
    cfg: ExperimentConfig,
    *,
    seed: int,
    use_vp: bool,
    vp_source: str,
) -> Tuple[MeasurementSet, Optional[float]]:
    """Line measurements for associated segments plus VP measurements from truth or from J-linkage."""
    classes = {sl.line_id: sl.direction_class for sl in dataset.scene}
    line_obs: List[LineMeasurement] = []
    vp_obs: List[VpMeasurement] = []
    accuracies: List[float] = []

    for b in sorted(dataset.bundles, key=lambda x: x.frame_id):
        tracked = [s for s in b.segments if b.associations.get(s.id, -1) >= 0]
        line_obs.extend(LineMeasurement(b.frame_id, b.associations[s.id], s) for s in tracked)
        if not use_vp:
            continue

        if vp_source == "truth":
            rng = np.random.default_rng([seed, 2, b.frame_id])
            for cls, p_v in sorted(b.vp_truth.items()):
                members = [s for s in tracked if classes.get(b.associations[s.id], -1) == cls]
                if not members:
                    continue
                noisy = np.asarray(p_v) + (rng.normal(scale=cfg.noise_sigma, size=2) if cfg.noise_sigma > 0 else 0.0)
                vp = VanishingPointObservation.from_point(noisy, (s.id for s in members))
                vp_obs.extend(VpMeasurement(b.frame_id, b.associations[s.id], vp) for s in members)
            continue

        if len(b.segments) < 2:
            continue
        clusters = jlinkage_cluster(list(b.segments), replace(cfg.jlinkage, rng_seed=seed))
        labels = {
            s.id: classes.get(b.associations.get(s.id, -1), -1) if b.associations.get(s.id, -1) >= 0 else -1
            for s in b.segments
        }
        accuracies.append(clustering_accuracy(clusters, labels))
        for c in clusters:
            if not c.is_finite:
                continue
            for sid in sorted(c.member_ids):
                track = b.associations.get(sid, -1)
                if track >= 0:
                    vp_obs.append(VpMeasurement(b.frame_id, track, c))

    meas = MeasurementSet(tuple(line_obs), tuple(vp_obs), sigma_line=cfg.sigma_line, sigma_vp=cfg.sigma_vp)
    return meas, (float(np.mean(accuracies)) if accuracies else None)


def _restrict_to_lines(meas: MeasurementSet, line_ids: Sequence[int]) -> MeasurementSet:
    keep = set(line_ids)
    return replace(
        meas,
        line_obs=tuple(m for m in meas.line_obs if m.track_id in keep),
        vp_obs=tuple(m for m in meas.vp_obs if m.track_id in keep),
    )


def solve_dataset(
    dataset: Dataset,
    cfg: ExperimentConfig,
    *,
    seed: int,
    use_vp: bool,
    vp_source: str,
    mapping_only: bool = False,
) -> SeedResult:
    """Runs the sliding-window estimator frame by frame and scores the result against ground truth."""
    bundles = sorted(dataset.bundles, key=lambda b: b.frame_id)
    if not bundles:
        raise DataError("dataset has no frames")
    scene = {sl.line_id: sl for sl in dataset.scene}
    true_poses = [b.pose for b in bundles]
    if mapping_only:
        initial = true_poses
    else:
        rng = np.random.default_rng([seed, 1])
        initial = perturb_poses(true_poses, cfg.pose_trans_sigma, cfg.pose_rot_sigma, rng, keep=2)

    meas, accuracy = build_measurements(dataset, cfg, seed=seed, use_vp=use_vp, vp_source=vp_source)
    window = WindowState(poses={}, max_size=cfg.window_size)
    window_meas = MeasurementSet(sigma_line=meas.sigma_line, sigma_vp=meas.sigma_vp)
    latest: Dict[int, CameraPose] = {}
    stats_list: List[SolveStats] = []

    for b, pose0 in zip(bundles, initial):
        frame_meas = meas.restricted_to([b.frame_id])
        if len(window.poses) < window.max_size:
            window = replace(window, poses={**window.poses, b.frame_id: pose0})
            window_meas = window_meas.merged(frame_meas)
        else:
            window, window_meas = slide_window(window, window_meas, (b.frame_id, pose0), frame_meas)
        latest[b.frame_id] = pose0
        if len(window.poses) < 2:
            continue
        window = replace(window, fixed=frozenset(window.poses)) if mapping_only else fix_gauge(window)
        window = initialize_lines(window, window_meas, init_depth=cfg.init_depth)
        problem = build_problem(window, _restrict_to_lines(window_meas, list(window.lines)), cfg.solver)
        if problem.num_parameters == 0:
            continue
        window, stats = optimize(problem)
        stats_list.append(stats)
        latest.update(window.poses)

    estimates = {**window.retired, **window.lines}
    truth_by_frame = {b.frame_id: b.pose for b in bundles}
    flags = bundles[0].degenerate_flags
    rows: List[Dict[str, Any]] = []
    for line_id, O in sorted(estimates.items()):
        gt = scene[line_id]
        metrics = line_error(to_plucker(O), gt.line)
        block_rank = next((s.line_block_ranks[line_id] for s in reversed(stats_list) if line_id in s.line_block_ranks), None)
        obs = [m for m in meas.line_obs if m.track_id == line_id and m.frame_id in latest]
        vp_frames = {m.frame_id for m in meas.vp_obs if m.track_id == line_id}
        ranks: Dict[str, Optional[int]] = {"rank_line": None, "rank_vp": None, "rank_total": None}
        try:
            report = track_report(
                [latest[m.frame_id] for m in obs],
                O,
                [m.segment for m in obs],
                vp_mask=[m.frame_id in vp_frames for m in obs],
                sigma_line=cfg.sigma_line,
                sigma_vp=cfg.sigma_vp,
            )
            ranks = {"rank_line": report.rank_line, "rank_vp": report.rank_vp, "rank_total": report.rank_total}
        except VplineError as exc:
            logger.debug("line %d: no information report (%s)", line_id, exc)
        rows.append(
            {
                "line_id": line_id,
                "direction_class": gt.direction_class,
                "degenerate": bool(flags.get(line_id, False)),
                "degenerate_init": line_id in window.degenerate_init,
                "direction_error": metrics.direction_error,
                "direction_error_deg": math.degrees(metrics.direction_error),
                "distance_error": metrics.orthogonal_distance_error,
                "block_rank": block_rank,
                **ranks,
            }
        )

    sq = [float(np.sum((latest[f].p - truth_by_frame[f].p) ** 2)) for f in latest]
    return SeedResult(
        seed=seed,
        use_vp=use_vp,
        vp_source=vp_source,
        lines=rows,
        pose_rmse=math.sqrt(sum(sq) / len(sq)) if sq else 0.0,
        stats=stats_list[-1] if stats_list else None,
        num_solves=len(stats_list),
        clustering_accuracy=accuracy,
        skipped_tracks=dict(window.skipped_tracks),
    )


def _run_seeds(cfg: ExperimentConfig, fn: Callable[[int], Any]) -> List[Tuple[int, Any, Optional[Exception]]]:
    """Runs fn per seed (optionally in a thread pool); failures are returned, not raised."""

    def guarded(seed: int) -> Tuple[int, Any, Optional[Exception]]:
        try:
            return seed, fn(seed), None
        except VplineError as exc:
            return seed, None, exc

    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            outcomes = list(pool.map(guarded, cfg.seeds))
    else:
        outcomes = [guarded(s) for s in cfg.seeds]
    return sorted(outcomes, key=lambda o: o[0])


def _median(values: Sequence[float]) -> Optional[float]:
    return float(median(values)) if values else None


def cmd_simulate(cfg: ExperimentConfig, config: Dict[str, Any]) -> CommandResult:
    out = ensure_dir(cfg.output_dir)
    outputs: List[str] = []
    details: List[str] = []
    for seed in cfg.seeds:
        dataset = simulate(cfg, seed)
        path = emit_dataset(dataset.bundles, out / f"dataset_seed{seed}.jsonl", spec=dataset.spec, scene=dataset.scene)
        outputs.append(str(path))
        n_seg = sum(len(b.segments) for b in dataset.bundles)
        n_deg = sum(1 for v in dataset.bundles[0].degenerate_flags.values() if v) if dataset.bundles else 0
        details.append(f"seed={seed}: {len(dataset.bundles)} frames, {n_seg} segments, {n_deg} degenerate lines -> {path}")
    return CommandResult(outputs=outputs, errors=0, details=details)


def cmd_solve(cfg: ExperimentConfig, config: Dict[str, Any], dataset_path: Optional[Path | str] = None) -> CommandResult:
    out = ensure_dir(cfg.output_dir)
    input_hash: Optional[str] = None
    if dataset_path is not None:
        dataset = load_dataset(dataset_path)
        input_hash = content_hash(dataset_path)
        seed = int(dataset.spec.get("seed", cfg.seeds[0]))
        cfg = replace(cfg, seeds=(seed,))

        def run(s: int) -> SeedResult:
            return solve_dataset(dataset, cfg, seed=s, use_vp=cfg.use_vp, vp_source=cfg.vp_source)

    else:

        def run(s: int) -> SeedResult:
            return solve_dataset(simulate(cfg, s), cfg, seed=s, use_vp=cfg.use_vp, vp_source=cfg.vp_source)

    records: List[Dict[str, Any]] = []
    rows: List[Dict[str, Any]] = []
    details: List[str] = []
    errors = 0
    for seed, result, exc in _run_seeds(cfg, run):
        if exc is not None:
            errors += 1
            details.append(f"seed={seed}: {type(exc).__name__}: {exc}")
            continue
        records.append(result.to_dict())
        rows.extend({"seed": seed, "use_vp": cfg.use_vp, **r} for r in result.lines)
        errs = result.direction_errors()
        details.append(
            f"seed={seed}: final_cost={result.stats.final_cost if result.stats else float('nan'):.3e} "
            f"median_direction_error_deg={math.degrees(_median(errs) or 0.0):.4f} pose_rmse={result.pose_rmse:.4e}"
        )

    all_errors = [r["direction_error"] for r in rows]
    summary = {
        "median_direction_error": _median(all_errors),
        "median_distance_error": _median([r["distance_error"] for r in rows]),
        "median_pose_rmse": _median([r["pose_rmse"] for r in records]),
        "median_final_cost": _median([r["final_cost"] for r in records if r["final_cost"] is not None]),
        "seeds_ok": len(records),
        "seeds_failed": errors,
    }
    payload = {
        "command": "solve",
        "use_vp": cfg.use_vp,
        "vp_source": cfg.vp_source,
        "config": config,
        "config_hash": config_hash(config),
        "input_hash": input_hash,
        "records": records,
        "aggregate": summary,
    }
    json_path = write_json(out / "solve_results.json", payload)
    csv_path = write_csv(out / "solve_lines.csv", SOLVE_COLUMNS, rows)
    return CommandResult(outputs=[str(json_path), str(csv_path)], errors=errors, details=details, summary=summary)


def scene_with_motion_direction(cfg: ExperimentConfig) -> SceneSpec:
    """The configured scene with the motion direction added to its structural directions."""
    motion = np.asarray(cfg.trajectory.direction)
    dirs = list(cfg.scene.structural_directions)
    if not any(abs(abs(float(np.dot(d, motion))) - 1.0) < 1e-12 for d in dirs):
        dirs.append(tuple(float(x) for x in motion))
    return replace(cfg.scene, structural_directions=tuple(dirs))


def _line_views(dataset: Dataset, line_id: int) -> List[Tuple[FrameBundle, Segment2D]]:
    return [
        (b, s)
        for b in sorted(dataset.bundles, key=lambda x: x.frame_id)
        for s in b.segments
        if b.associations.get(s.id) == line_id
    ]


def _truth_rank(dataset: Dataset, cfg: ExperimentConfig, line_id: int, *, use_vp: bool) -> Optional[int]:
    sl = next(s for s in dataset.scene if s.line_id == line_id)
    views = _line_views(dataset, line_id)
    if not views:
        return None
    vp_mask = [use_vp and sl.direction_class >= 0 and sl.direction_class in b.vp_truth for b, _ in views]
    try:
        report = track_report(
            [b.pose for b, _ in views],
            to_orthonormal(sl.line.normalized()),
            [s for _, s in views],
            vp_mask=vp_mask,
            sigma_line=cfg.sigma_line,
            sigma_vp=cfg.sigma_vp,
        )
    except VplineError as exc:
        logger.debug("line %d: no ground-truth report (%s)", line_id, exc)
        return None
    return report.rank_total


def run_ab_seed(cfg: ExperimentConfig, seed: int) -> Dict[str, Any]:
    dataset = simulate(cfg, seed, scene_spec=scene_with_motion_direction(cfg))
    flags = dataset.bundles[0].degenerate_flags if dataset.bundles else {}
    degenerate = sorted(k for k, v in flags.items() if v)
    arms = {
        "with_vp": solve_dataset(dataset, cfg, seed=seed, use_vp=True, vp_source=cfg.vp_source, mapping_only=True),
        "without_vp": solve_dataset(dataset, cfg, seed=seed, use_vp=False, vp_source=cfg.vp_source, mapping_only=True),
    }
    rows = []
    for arm, result in arms.items():
        for r in result.lines:
            if r["line_id"] in degenerate:
                rows.append(
                    {
                        "seed": seed,
                        "arm": arm,
                        "line_id": r["line_id"],
                        "direction_error": r["direction_error"],
                        "direction_error_deg": r["direction_error_deg"],
                        "distance_error": r["distance_error"],
                        "block_rank": r["block_rank"],
                        "truth_rank": _truth_rank(dataset, cfg, r["line_id"], use_vp=arm == "with_vp"),
                    }
                )
    return {
        "seed": seed,
        "degenerate_lines": degenerate,
        "rows": rows,
        "clustering_accuracy": arms["with_vp"].clustering_accuracy,
    }


def cmd_ab_degeneracy(cfg: ExperimentConfig, config: Dict[str, Any]) -> CommandResult:
    if cfg.trajectory.kind != "pure_translation":
        raise ConfigError("ab-degeneracy needs trajectory.kind = pure_translation")
    out = ensure_dir(cfg.output_dir)
    rows: List[Dict[str, Any]] = []
    details: List[str] = []
    per_seed: List[Dict[str, Any]] = []
    errors = 0
    for seed, result, exc in _run_seeds(cfg, lambda s: run_ab_seed(cfg, s)):
        if exc is not None:
            errors += 1
            details.append(f"seed={seed}: {type(exc).__name__}: {exc}")
            continue
        rows.extend(result["rows"])
        per_seed.append({k: v for k, v in result.items() if k != "rows"})
        if result["clustering_accuracy"] is not None:
            details.append(f"seed={seed}: clustering accuracy {result['clustering_accuracy']:.3f}")

    def arm_values(arm: str, key: str) -> List[Any]:
        return [r[key] for r in rows if r["arm"] == arm and r[key] is not None]

    with_med = _median(arm_values("with_vp", "direction_error"))
    without_med = _median(arm_values("without_vp", "direction_error"))
    ratio = None
    if with_med is not None and without_med is not None and with_med > 0:
        ratio = without_med / with_med

    def rank_hist(arm: str, key: str = "block_rank") -> Dict[str, int]:
        hist: Dict[str, int] = {}
        for rank in arm_values(arm, key):
            hist[str(rank)] = hist.get(str(rank), 0) + 1
        return dict(sorted(hist.items()))

    summary = {
        "num_degenerate_lines": len(arm_values("with_vp", "direction_error")),
        "median_direction_error_with_vp": with_med,
        "median_direction_error_without_vp": without_med,
        "median_direction_error_with_vp_deg": math.degrees(with_med) if with_med is not None else None,
        "median_direction_error_without_vp_deg": math.degrees(without_med) if without_med is not None else None,
        "improvement_ratio": ratio,
        "block_ranks_with_vp": rank_hist("with_vp"),
        "block_ranks_without_vp": rank_hist("without_vp"),
        "truth_ranks_with_vp": rank_hist("with_vp", "truth_rank"),
        "truth_ranks_without_vp": rank_hist("without_vp", "truth_rank"),
        "seeds_ok": len(per_seed),
        "seeds_failed": errors,
    }
    details.append(
        "degenerate lines: median direction error "
        f"with VP {summary['median_direction_error_with_vp_deg']}, without VP {summary['median_direction_error_without_vp_deg']} (deg)"
    )
    payload = {
        "command": "ab-degeneracy",
        "config": config,
        "config_hash": config_hash(config),
        "seeds": per_seed,
        "aggregate": summary,
    }
    json_path = write_json(out / "ab_degeneracy.json", payload)
    csv_path = write_csv(out / "ab_degeneracy.csv", AB_COLUMNS, rows)
    return CommandResult(outputs=[str(json_path), str(csv_path)], errors=errors, details=details, summary=summary)


def fim_rows(dataset: Dataset, cfg: ExperimentConfig) -> List[Dict[str, Any]]:
    """Per-line information ranks at ground truth: first observation (camera tangent) and whole track."""
    rows = []
    for sl in dataset.scene:
        O = to_orthonormal(sl.line.normalized())
        views = _line_views(dataset, sl.line_id)
        if not views:
            continue
        vp_mask = [sl.direction_class >= 0 and sl.direction_class in b.vp_truth for b, _ in views]
        try:
            first = observation_report(
                views[0][0].pose,
                O,
                views[0][1],
                include_vp=vp_mask[0],
                sigma_line=cfg.sigma_line,
                sigma_vp=cfg.sigma_vp,
            )
            track = track_report(
                [b.pose for b, _ in views],
                O,
                [s for _, s in views],
                vp_mask=vp_mask,
                sigma_line=cfg.sigma_line,
                sigma_vp=cfg.sigma_vp,
            )
        except VplineError as exc:
            logger.warning("line %d skipped: %s", sl.line_id, exc)
            continue
        rows.append(
            {
                "line_id": sl.line_id,
                "direction_class": sl.direction_class,
                "num_observations": len(views),
                "vp_covered": any(vp_mask),
                "observation_rank_line": first.rank_line,
                "observation_rank_total": first.rank_total,
                "track_rank_line": track.rank_line,
                "track_rank_vp": track.rank_vp,
                "track_rank_total": track.rank_total,
                "slope_degenerate": track.slope_degenerate,
                "report": track.to_dict(),
            }
        )
    return rows


def cmd_fim(cfg: ExperimentConfig, config: Dict[str, Any], dataset_path: Path | str) -> CommandResult:
    out = ensure_dir(cfg.output_dir)
    dataset = load_dataset(dataset_path)
    rows = fim_rows(dataset, cfg)
    summary = {
        "lines": len(rows),
        "vp_covered": sum(1 for r in rows if r["vp_covered"]),
        "track_rank_4": sum(1 for r in rows if r["track_rank_total"] == 4),
        "track_rank_4_vp_covered": sum(1 for r in rows if r["vp_covered"] and r["track_rank_total"] == 4),
        "observation_line_rank_le_2": sum(1 for r in rows if r["observation_rank_line"] <= 2),
        "line_only": sum(1 for r in rows if not r["vp_covered"]),
        "slope_degenerate": sum(1 for r in rows if r["slope_degenerate"]),
    }
    payload = {
        "command": "fim",
        "config": config,
        "config_hash": config_hash(config),
        "input_hash": content_hash(dataset_path),
        "lines": rows,
        "summary": summary,
    }
    stem = Path(dataset_path).stem
    json_path = write_json(out / f"fim_{stem}.json", payload)
    csv_path = write_csv(out / f"fim_{stem}.csv", FIM_COLUMNS, rows)
    details = [f"{k}={v}" for k, v in summary.items()]
    return CommandResult(outputs=[str(json_path), str(csv_path)], errors=0, details=details, summary=summary)


def save_segments(path: Path | str, segments: Sequence[Segment2D], labels: Optional[Dict[int, int]] = None) -> Path:
    payload: Dict[str, Any] = {"segments": [s.to_dict() for s in segments]}
    if labels is not None:
        payload["labels"] = {str(k): v for k, v in sorted(labels.items())}
    path = Path(path)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def load_segments(path: Path | str) -> Tuple[List[Segment2D], Optional[Dict[int, int]]]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DatasetIoError(f"cannot read segments {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetIoError(f"{path}: invalid JSON ({exc})") from exc
    try:
        segments = [Segment2D.from_dict(s) for s in data.get("segments", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetIoError(f"{path}: malformed segment ({exc})") from exc
    labels = data.get("labels")
    return segments, ({int(k): int(v) for k, v in labels.items()} if labels is not None else None)


def cmd_cluster(cfg: ExperimentConfig, config: Dict[str, Any], segments_path: Path | str) -> CommandResult:
    segments, labels = load_segments(segments_path)
    if len(segments) < 2:
        raise DataError(f"{segments_path}: need at least two segments to cluster, got {len(segments)}")
    out = ensure_dir(cfg.output_dir)
    params = replace(cfg.jlinkage, rng_seed=cfg.seeds[0])
    clusters = jlinkage_cluster(segments, params)
    payload: Dict[str, Any] = {
        "command": "cluster",
        "config": config,
        "config_hash": config_hash(config),
        "input_hash": content_hash(segments_path),
        "clusters": [c.to_dict() for c in clusters],
        "outliers": outlier_ids(segments, clusters),
    }
    summary: Dict[str, Any] = {"clusters": len(clusters), "outliers": len(payload["outliers"])}
    if labels is not None:
        summary["accuracy"] = clustering_accuracy(clusters, labels)
        payload["accuracy"] = summary["accuracy"]
    json_path = write_json(out / f"clusters_{Path(segments_path).stem}.json", payload)
    details = [f"{k}={v}" for k, v in summary.items()]
    return CommandResult(outputs=[str(json_path)], errors=0, details=details, summary=summary)
