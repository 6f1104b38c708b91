"""One experiment = load data, split, train, evaluate, write artifacts under a run directory."""

from __future__ import annotations

import json
import logging
import platform
import subprocess
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, save_config
from .dataset import PoseDataset, load_condition_substitute, load_dataset, split
from .evaluation import EvalReport, evaluate, export_trajectory_plot, motion_range_of
from .kinematics import Robot, load_robot
from .model import DirigentModel
from .training import TrainingHistory, build_model, train

log = logging.getLogger(__name__)


@dataclass
class ExperimentResult:
    model: DirigentModel
    history: TrainingHistory | None
    report: EvalReport
    run_dir: Path | None


def git_revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_provenance(out_dir, cfg: ExperimentConfig | None, command: str, extra: dict | None = None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": sys.argv,
        "config_hash": cfg.config_hash() if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "git_revision": git_revision(),
        "python": platform.python_version(),
        "torch": torch.__version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        **(extra or {}),
    }
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, default=str))
    return record


def load_experiment_data(cfg: ExperimentConfig) -> PoseDataset:
    d = cfg.data
    data = load_dataset(cfg.data_root(), condition_size=d.condition_size, overlay_past=d.overlay_past,
                        overlay_opacity=d.overlay_opacity)
    if data.layout_id != d.layout_id:
        raise ValueError(f"dataset layout {data.layout_id!r} does not match config layout {d.layout_id!r}")
    if d.condition_dir:
        data = data.with_conditions(load_condition_substitute(d.condition_dir))
    return data


def split_experiment_data(cfg: ExperimentConfig, data: PoseDataset):
    """(train, val or None, test) according to the data section."""
    d = cfg.data
    train_set, test_set = split(data, d.split, ratio=d.ratio, seed=cfg.seed, held_out=d.held_out,
                                train_task=d.train_task, eval_task=d.eval_task)
    val_set = None
    if d.val_fraction > 0:
        train_set, val_set = split(train_set, "random", ratio=1 - d.val_fraction, seed=cfg.seed + 1)
    return train_set, val_set, test_set


def experiment_robot(cfg: ExperimentConfig, data: PoseDataset) -> Robot:
    robot = load_robot(cfg.data.layout_id)
    if cfg.eval.motion_range is not None:
        mr = tuple(float(v) for v in cfg.eval.motion_range)
    elif robot.motion_range is not None:
        mr = robot.motion_range
    else:
        mr = motion_range_of(robot, data.targets())
    return Robot(robot.layout_id, robot.chains, mr)


def train_experiment(cfg: ExperimentConfig, data: PoseDataset | None = None, run_dir=None,
                     progress: bool = False):
    """Train per ``cfg``; returns (model, history, test_set)."""
    data = data if data is not None else load_experiment_data(cfg)
    robot = experiment_robot(cfg, data)
    net_cfg = replace(cfg.network, joint_dim=robot.joint_dim, cartesian_chains=len(robot.chains),
                      image_size=cfg.data.condition_size, num_timesteps=cfg.train.num_timesteps)
    train_cfg = replace(cfg.train, seed=cfg.seed)
    train_set, val_set, test_set = split_experiment_data(cfg, data)
    model = build_model(net_cfg, robot, train_cfg)
    model, history = train(model, train_set, train_cfg, cfg.loss, val_set=val_set, run_dir=run_dir,
                           progress=progress)
    if run_dir is not None:
        run_dir = Path(run_dir)
        model.save(run_dir / "model.pt", extra={"config": cfg.to_dict(), "training_key": cfg.training_key()})
        save_config(cfg, run_dir / "config.yaml")
        from .plotting import plot_history

        plot_history(history, run_dir / "history.png")
    return model, history, test_set


def evaluate_experiment(cfg: ExperimentConfig, model: DirigentModel, test_set: PoseDataset, run_dir=None) -> EvalReport:
    e = cfg.eval
    report = evaluate(model, test_set, steps=e.steps, seed=cfg.seed, motion_range=model.robot.motion_range,
                      eef_source=e.eef_source, split_name=f"{cfg.data.split} test", batch_size=e.batch_size)
    report.notes["config"] = cfg.name
    if run_dir is not None:
        report.write(run_dir)
        frames = first_run(test_set, e.trajectory_frames)
        if len(frames) >= 2:
            export_trajectory_plot(model, frames, run_dir, steps=e.steps, seed=cfg.seed)
    return report


def first_run(dataset: PoseDataset, limit: int) -> PoseDataset:
    """Leading samples of the first run in ``dataset``, in temporal order."""
    if not len(dataset):
        return dataset
    key = lambda s: (s.participant, s.task, s.run)  # noqa: E731
    k0 = key(dataset[0])
    idx = [i for i, s in enumerate(dataset) if key(s) == k0][:limit]
    return dataset.subset(idx)


def run_experiment(cfg: ExperimentConfig, run_dir=None, data: PoseDataset | None = None,
                   progress: bool = False) -> ExperimentResult:
    model, history, test_set = train_experiment(cfg, data, run_dir, progress)
    report = evaluate_experiment(cfg, model, test_set, run_dir)
    return ExperimentResult(model, history, report, Path(run_dir) if run_dir is not None else None)


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
