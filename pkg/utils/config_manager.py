from __future__ import annotations

import copy
import json
import math
from pathlib import Path
from typing import Any, Dict, Optional

from modules.errors import ConfigError
from modules.estimator import SolveOptions
from modules.experiments import ExperimentConfig
from modules.factors import F_VIRTUAL, LOSS_KINDS, RobustLoss
from modules.simulator import TRAJECTORY_KINDS, SceneSpec, TrajectorySpec
from modules.vp_detect import JLinkageParams

VP_SOURCES = ("truth", "jlinkage")


def _default_config() -> Dict[str, Any]:
    return {
        "scene": {
            "structural_directions": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            "lines_per_direction": 5,
            "unstructured_lines": 2,
            "box_min": [-1.5, -1.0, 2.0],
            "box_max": [1.5, 1.0, 4.0],
        },
        "trajectory": {
            "kind": "orbit",
            "num_frames": 6,
            "step": 0.3,
            "direction": [0.3, 0.1, 1.0],
            "start": [0.0, 0.0, 0.0],
            "center": [0.0, 0.0, 3.0],
            "radius": 3.0,
        },
        "render": {
            "noise_px": 1.0,
            "fov_deg": 90.0,
            "near": 0.1,
            "min_length": 0.02,
            "outlier_rate": 0.0,
        },
        "pose_noise": {
            "trans_sigma": 0.0,
            "rot_sigma": 0.0,
        },
        "solver": {
            "max_iterations": 50,
            "initial_damping": 1e-4,
            "damping_up": 10.0,
            "damping_down": 0.5,
            "gradient_tolerance": 1e-10,
            "step_tolerance": 1e-12,
            "rank_tolerance": 1e-8,
            "block_rank_tolerance": 1e-4,
            "line_loss": {"kind": "huber", "scale": 1.5},
            "vp_loss": {"kind": "arctan", "scale": 1.0},
            "sigma_px": 1.5,
        },
        "jlinkage": {
            "num_hypotheses": 500,
            "consensus_threshold": 0.0175,
            "min_cluster_size": 3,
        },
        "window_size": 10,
        "init_depth": 3.0,
        "vp_source": "truth",
        "use_vp": True,
        "seeds": [0],
        "workers": 1,
        "output_dir": "results",
    }


def _merge_defaults(config: Dict[str, Any], defaults: Dict[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(defaults)
    for key, value in config.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge_defaults(value, merged[key])
        else:
            merged[key] = value
    return merged


def _validate(config: Dict[str, Any]) -> None:
    if config["vp_source"] not in VP_SOURCES:
        raise ConfigError(f"vp_source must be one of {VP_SOURCES}, got {config['vp_source']!r}")
    if config["trajectory"]["kind"] not in TRAJECTORY_KINDS:
        raise ConfigError(f"trajectory.kind must be one of {TRAJECTORY_KINDS}, got {config['trajectory']['kind']!r}")
    for family in ("line_loss", "vp_loss"):
        kind = config["solver"][family].get("kind")
        if kind not in LOSS_KINDS:
            raise ConfigError(f"solver.{family}.kind must be one of {LOSS_KINDS}, got {kind!r}")
    seeds = config["seeds"]
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")


def load_config(path: Optional[Path | str] = None) -> Dict[str, Any]:
    """Reads a JSON config (or the defaults when path is None) and fills in missing keys."""
    if path is None:
        config: Dict[str, Any] = {}
    else:
        path = Path(path)
        try:
            config = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"Cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"Invalid JSON in {path}") from exc
        if not isinstance(config, dict):
            raise ConfigError(f"{path}: top-level value must be an object")

    resolved = _merge_defaults(config, _default_config())
    _validate(resolved)
    return resolved


def save_config(config: Dict[str, Any], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(config, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return path


def apply_overrides(
    config: Dict[str, Any],
    *,
    seed: Optional[int] = None,
    no_vp: bool = False,
    vp_source: Optional[str] = None,
    out: Optional[str] = None,
) -> Dict[str, Any]:
    resolved = copy.deepcopy(config)
    if seed is not None:
        resolved["seeds"] = [int(seed)]
    if no_vp:
        resolved["use_vp"] = False
    if vp_source is not None:
        resolved["vp_source"] = vp_source
    if out is not None:
        resolved["output_dir"] = out
    _validate(resolved)
    return resolved


def experiment_config_from_dict(config: Dict[str, Any]) -> ExperimentConfig:
    try:
        scene = config["scene"]
        traj = config["trajectory"]
        render = config["render"]
        solver = config["solver"]
        jl = config["jlinkage"]
        sigma = float(solver["sigma_px"]) / F_VIRTUAL
        return ExperimentConfig(
            scene=SceneSpec(
                structural_directions=tuple(tuple(d) for d in scene["structural_directions"]),
                lines_per_direction=int(scene["lines_per_direction"]),
                unstructured_lines=int(scene["unstructured_lines"]),
                box_min=tuple(scene["box_min"]),
                box_max=tuple(scene["box_max"]),
            ),
            trajectory=TrajectorySpec(
                kind=str(traj["kind"]),
                num_frames=int(traj["num_frames"]),
                step=float(traj["step"]),
                direction=tuple(traj["direction"]),
                start=tuple(traj["start"]),
                center=tuple(traj["center"]),
                radius=float(traj["radius"]),
            ),
            noise_sigma=float(render["noise_px"]) / F_VIRTUAL,
            fov=math.radians(float(render["fov_deg"])),
            near=float(render["near"]),
            min_length=float(render["min_length"]),
            outlier_rate=float(render["outlier_rate"]),
            pose_trans_sigma=float(config["pose_noise"]["trans_sigma"]),
            pose_rot_sigma=float(config["pose_noise"]["rot_sigma"]),
            solver=SolveOptions(
                max_iterations=int(solver["max_iterations"]),
                initial_damping=float(solver["initial_damping"]),
                damping_up=float(solver["damping_up"]),
                damping_down=float(solver["damping_down"]),
                gradient_tolerance=float(solver["gradient_tolerance"]),
                step_tolerance=float(solver["step_tolerance"]),
                rank_tolerance=float(solver["rank_tolerance"]),
                block_rank_tolerance=float(solver["block_rank_tolerance"]),
                line_loss=RobustLoss(**solver["line_loss"]),
                vp_loss=RobustLoss(**solver["vp_loss"]),
            ),
            sigma_line=sigma,
            sigma_vp=sigma,
            jlinkage=JLinkageParams(
                num_hypotheses=int(jl["num_hypotheses"]),
                consensus_threshold=float(jl["consensus_threshold"]),
                min_cluster_size=int(jl["min_cluster_size"]),
            ),
            window_size=int(config["window_size"]),
            init_depth=float(config["init_depth"]),
            vp_source=str(config["vp_source"]),
            use_vp=bool(config["use_vp"]),
            seeds=tuple(int(s) for s in config["seeds"]),
            workers=max(1, int(config["workers"])),
            output_dir=str(config["output_dir"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"Invalid experiment config: {exc}") from exc
