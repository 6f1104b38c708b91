"""Composite joint + end-effector loss and the diffusion training loop."""

from __future__ import annotations

import copy
import csv
import logging
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import PoseDataset, split
from .kinematics import Robot
from .model import DirigentModel
from .network import NetworkConfig
from .schedule import add_noise, build_cosine_schedule

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LossConfig:
    omega_joint: float = 1.0
    omega_cartesian: float = 1.0
    consistency_weight: float = 0.0

    def __post_init__(self):
        if min(self.omega_joint, self.omega_cartesian, self.consistency_weight) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.omega_joint == 0 and self.omega_cartesian == 0:
            raise ValueError("at least one of omega_joint / omega_cartesian must be positive")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 6
    lr: float = 2e-4
    num_timesteps: int = 1000
    schedule_offset: float = 0.008
    max_noise_only: bool = False
    seed: int = 0
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1 and lr > 0 are required")


@dataclass
class LossTerms:
    total: torch.Tensor
    joint: torch.Tensor
    cartesian: torch.Tensor
    consistency: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}


def compute_loss(predicted: torch.Tensor, target: torch.Tensor, robot: Robot, cfg: LossConfig,
                 cartesian_target: torch.Tensor | None = None) -> LossTerms:
    """omega_joint * MSE(joints) + omega_cartesian * MSE(FK(joints)) [+ consistency term].

    ``predicted`` holds normalised joints, optionally followed by the direct Cartesian
    values; ``target`` holds the normalised ground-truth joints. Joint MSE is taken in
    normalised space, Cartesian MSE in meters^2 after denormalising both sides and
    running every chain's forward kinematics.
    """
    J = robot.joint_dim
    if target.shape[-1] != J or predicted.shape[-1] < J:
        raise ValueError(f"layout {robot.layout_id} needs {J} joint values; got {predicted.shape[-1]} / {target.shape[-1]}")
    pred_joints = predicted[..., :J]
    target = target.to(predicted.dtype)
    joint = F.mse_loss(pred_joints, target)
    if cfg.omega_cartesian > 0:
        cart = F.mse_loss(robot.eef_positions(robot.denormalize(pred_joints)),
                          robot.eef_positions(robot.denormalize(target)))
    else:
        cart = torch.zeros((), dtype=predicted.dtype)
    total = cfg.omega_joint * joint + cfg.omega_cartesian * cart
    consistency = torch.zeros((), dtype=predicted.dtype)
    if predicted.shape[-1] > J:
        if cartesian_target is None:
            raise ValueError("predicted vector has a Cartesian head but no Cartesian target was given")
        consistency = F.mse_loss(predicted[..., J:], cartesian_target.to(predicted.dtype))
        total = total + cfg.consistency_weight * consistency
    return LossTerms(total, joint, cart, consistency)


@dataclass
class TrainingHistory:
    rows: list[dict] = field(default_factory=list)

    def append(self, row: dict):
        self.rows.append(row)

    def column(self, key: str) -> list[float]:
        return [r[key] for r in self.rows]

    def write_csv(self, path):
        if not self.rows:
            Path(path).write_text("epoch\n")
            return
        keys = list(self.rows[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(self.rows)

    def __eq__(self, other):
        return isinstance(other, TrainingHistory) and self.rows == other.rows


def _prepare(model: DirigentModel, data: PoseDataset):
    conds, targets, _ = data.arrays()
    if not len(conds):
        raise ValueError("training set is empty")
    x0 = model.diffusion_targets(targets)
    return torch.from_numpy(conds), x0


@torch.no_grad()
def validation_loss(model: DirigentModel, conds: torch.Tensor, x0: torch.Tensor, loss_cfg: LossConfig,
                    seed: int = 0, batch_size: int = 64) -> dict[str, float]:
    """Loss of single-step predictions from pure noise, averaged over the set."""
    g = torch.Generator().manual_seed(seed)
    J = model.joint_dim
    sums, n = {}, 0
    for i in range(0, len(conds), batch_size):
        c = conds[i:i + batch_size].float() / 255.0
        pred = model.sample(c, steps=1, generator=g)
        terms = compute_loss(pred, x0[i:i + batch_size, :J], model.robot, loss_cfg, x0[i:i + batch_size, J:])
        for k, v in terms.as_floats().items():
            sums[k] = sums.get(k, 0.0) + v * len(c)
        n += len(c)
    return {k: v / n for k, v in sums.items()}


def train(model: DirigentModel, train_set: PoseDataset, cfg: TrainConfig, loss_cfg: LossConfig,
          val_set: PoseDataset | None = None, run_dir=None, progress: bool = False):
    """Optimise ``model`` in place; returns (model, TrainingHistory).

    With ``val_set`` the parameters with the lowest validation total loss are restored
    at the end.
    """
    torch.manual_seed(cfg.seed)
    g = torch.Generator().manual_seed(cfg.seed)
    conds, x0 = _prepare(model, train_set)
    val = _prepare(model, val_set) if val_set is not None and len(val_set) else None
    J = model.joint_dim
    T = model.schedule.T
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    history = TrainingHistory()
    best = (float("inf"), None)
    n = len(conds)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        t0 = time.time()
        perm = torch.randperm(n, generator=g)
        sums = {"total": 0.0, "joint": 0.0, "cartesian": 0.0, "consistency": 0.0}
        for b in range(0, n, cfg.batch_size):
            idx = perm[b:b + cfg.batch_size]
            target = x0[idx]
            if cfg.max_noise_only:
                t = torch.full((len(idx),), T, dtype=torch.long)
            else:
                t = torch.randint(1, T + 1, (len(idx),), generator=g)
            eps = torch.randn(target.shape, generator=g)
            noisy = add_noise(target, t, eps, model.schedule).x_t.float()
            pred = model(noisy, conds[idx].float() / 255.0, t)
            terms = compute_loss(pred, target[:, :J], model.robot, loss_cfg, target[:, J:])
            if not torch.isfinite(terms.total):
                _dump_divergence(model, run_dir, epoch, b, terms)
                raise TrainingDivergedError(f"loss became {terms.total.item()} at epoch {epoch}, sample offset {b}")
            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            for k, v in terms.as_floats().items():
                sums[k] += v * len(idx)
        row = {"epoch": epoch, **{f"train_{k}": v / n for k, v in sums.items()}}
        if val is not None:
            v = validation_loss(model, *val, loss_cfg, seed=cfg.seed)
            row.update({f"val_{k}": x for k, x in v.items()})
            if v["total"] < best[0]:
                best = (v["total"], copy.deepcopy(model.state_dict()))
        history.append(row)
        msg = f"epoch {epoch}/{cfg.epochs} loss {row['train_total']:.5f} ({time.time() - t0:.1f}s)"
        if val is not None:
            msg += f" val {row['val_total']:.5f}"
        (log.info if not progress else print)(msg)
    if best[1] is not None:
        model.load_state_dict(best[1])
    if run_dir is not None:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        history.write_csv(Path(run_dir) / "history.csv")
    model.eval()
    return model, history


def _dump_divergence(model, run_dir, epoch, offset, terms):
    if run_dir is None:
        return
    path = Path(run_dir) / "divergence_state.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"epoch": epoch, "offset": offset, "terms": terms.as_floats(), "state_dict": model.state_dict()}, path)
    log.error("training diverged; state written to %s", path)


def build_model(net_cfg: NetworkConfig, robot: Robot, train_cfg: TrainConfig, seed: int | None = None) -> DirigentModel:
    torch.manual_seed(train_cfg.seed if seed is None else seed)
    sched = build_cosine_schedule(train_cfg.num_timesteps, train_cfg.schedule_offset)
    return DirigentModel(net_cfg, robot, sched)


def run_cross_validation(dataset: PoseDataset, robot: Robot, net_cfg: NetworkConfig, cfg: TrainConfig,
                         loss_cfg: LossConfig, steps: int = 1, motion_range=None, run_dir=None):
    """Leave-one-participant-out training/evaluation; returns (reports, aggregate)."""
    from .evaluation import aggregate_reports, evaluate

    participants = dataset.participants
    if len(participants) < 2:
        raise ValueError("cross-validation needs at least two participants")
    reports = []
    for p in participants:
        train_set, test_set = split(dataset, "by_participant", held_out=p)
        model = build_model(net_cfg, robot, cfg)
        fold_dir = Path(run_dir) / f"fold_{p}" if run_dir is not None else None
        model, _ = train(model, train_set, cfg, loss_cfg, run_dir=fold_dir)
        report = evaluate(model, test_set, steps=steps, seed=cfg.seed, motion_range=motion_range,
                          split_name=f"fold {p}")
        if fold_dir is not None:
            report.write(fold_dir)
        reports.append(report)
    return reports, aggregate_reports(reports)
