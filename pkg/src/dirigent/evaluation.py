"""Joint / Cartesian error metrics, reports, run comparison tables and trajectory exports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .kinematics import Robot

AXES = ("x", "y", "z")
TABLE_COLUMNS = ("Configuration", "Joint Loss", "Cartesian Loss", "X-axis (m)", "Y-axis (m)", "Z-axis (m)")


@dataclass
class EvalReport:
    joint_mse: float
    cartesian_mse: float
    axis_mae: tuple[float, float, float]
    relative_axis_error: tuple[float, float, float]
    n_samples: int
    split: str = ""
    motion_range: tuple[float, float, float] = (1.0, 1.0, 1.0)
    eef_source: str = "kinematic"
    arms_averaged: int = 1
    steps: int = 1
    axis_std: tuple[float, float, float] | None = None
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("axis_mae", "relative_axis_error", "motion_range", "axis_std"):
            if d[k] is not None:
                d[k] = [float(v) for v in d[k]]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        for k in ("axis_mae", "relative_axis_error", "motion_range", "axis_std"):
            if d.get(k) is not None:
                d[k] = tuple(d[k])
        return cls(**d)

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(self.to_dict(), indent=2))
        with open(out_dir / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "n_samples", "joint_mse", "cartesian_mse", "mae_x", "mae_y", "mae_z",
                        "rel_x", "rel_y", "rel_z", "eef_source", "steps"])
            w.writerow([self.split, self.n_samples, self.joint_mse, self.cartesian_mse, *self.axis_mae,
                        *self.relative_axis_error, self.eef_source, self.steps])

    @classmethod
    def read(cls, out_dir) -> "EvalReport":
        return cls.from_dict(json.loads((Path(out_dir) / "report.json").read_text()))


def motion_range_of(robot: Robot, q: np.ndarray) -> tuple[float, float, float]:
    """Per-axis extent of the end-effector positions reached by configurations ``q``."""
    p = robot.eef_positions(torch.as_tensor(np.asarray(q, dtype=float))).numpy().reshape(-1, 3)
    return tuple(float(v) for v in p.max(0) - p.min(0))


def compute_metrics(pred_q, true_q, robot: Robot, motion_range=None, pred_eef=None, split_name: str = "",
                    steps: int = 1, eef_source: str = "kinematic") -> EvalReport:
    """Metrics for predicted vs ground-truth configurations (radians, shape (N, joint_dim)).

    ``pred_eef`` (N, n_chains, 3) replaces the forward-kinematics positions of the
    predictions, e.g. with the output of the direct Cartesian head. Per-axis errors are
    averaged over all chains.
    """
    pred_q = np.asarray(pred_q, dtype=float)
    true_q = np.asarray(true_q, dtype=float)
    if pred_q.shape != true_q.shape:
        raise ValueError(f"prediction shape {pred_q.shape} != ground truth {true_q.shape}")
    if len(true_q) == 0:
        raise ValueError("cannot evaluate an empty set")
    joint_mse = float(np.mean((robot.normalize(pred_q) - robot.normalize(true_q)) ** 2))
    true_eef = robot.eef_positions(torch.as_tensor(true_q)).numpy()
    if pred_eef is None:
        pred_eef = robot.eef_positions(torch.as_tensor(pred_q)).numpy()
    diff = np.abs(np.asarray(pred_eef, dtype=float) - true_eef)
    axis_mae = tuple(float(v) for v in diff.reshape(-1, 3).mean(0))
    if motion_range is None:
        motion_range = robot.motion_range or motion_range_of(robot, true_q)
    rel = tuple(float(m / r) if r > 0 else float("inf") for m, r in zip(axis_mae, motion_range))
    return EvalReport(
        joint_mse=joint_mse,
        cartesian_mse=float(np.mean(diff ** 2)),
        axis_mae=axis_mae,
        relative_axis_error=rel,
        n_samples=len(true_q),
        split=split_name,
        motion_range=tuple(float(v) for v in motion_range),
        eef_source=eef_source,
        arms_averaged=len(robot.chains),
        steps=steps,
    )


def predict(model, dataset, steps: int = 1, seed: int = 0, batch_size: int = 64):
    """Run inference over ``dataset``; returns (pred_q, true_q, direct_eef or None, kept indices).

    Each sample draws its noise from a generator keyed by (seed, sample id), so the
    predictions do not depend on sample order or batch size.
    """
    from .model import sample_generators

    conds, targets, idx = dataset.arrays()
    if len(conds) == 0:
        raise ValueError("cannot evaluate an empty set")
    gens = sample_generators(seed, [dataset[int(i)].sample_id for i in idx])
    preds, directs = [], []
    for i in range(0, len(conds), batch_size):
        c = torch.from_numpy(conds[i:i + batch_size]).float() / 255.0
        x0 = model.sample(c, steps=steps, generator=gens[i:i + batch_size])
        q = model.robot.clamp(model.denormalize_joints(x0[:, : model.joint_dim].double()))
        preds.append(q.numpy())
        if model.cfg.cartesian_head == "consistency":
            directs.append(model.direct_positions(x0[:, model.joint_dim:]).double().numpy())
    direct = np.concatenate(directs) if directs else None
    return np.concatenate(preds), targets, direct, idx


def evaluate(model, test_set, steps: int = 1, seed: int = 0, motion_range=None, eef_source: str = "kinematic",
             split_name: str = "test", batch_size: int = 64) -> EvalReport:
    """Single-step (or ``steps``-step) inference on every test sample, then compute_metrics."""
    if len(test_set) == 0:
        raise ValueError("cannot evaluate an empty set")
    pred_q, true_q, direct, _ = predict(model, test_set, steps, seed, batch_size)
    pred_eef = None
    if eef_source == "direct":
        if direct is None:
            raise ValueError("eef_source='direct' needs a model with cartesian_head='consistency'")
        pred_eef = direct
    elif eef_source != "kinematic":
        raise ValueError(f"unknown eef_source {eef_source!r}")
    return compute_metrics(pred_q, true_q, model.robot, motion_range, pred_eef, split_name, steps, eef_source)


def aggregate_reports(reports: list[EvalReport], split_name: str = "aggregate") -> EvalReport:
    """Mean of fold metrics, with the per-axis standard deviation across folds."""
    if not reports:
        raise ValueError("nothing to aggregate")
    mae = np.array([r.axis_mae for r in reports])
    rel = np.array([r.relative_axis_error for r in reports])
    return EvalReport(
        joint_mse=float(np.mean([r.joint_mse for r in reports])),
        cartesian_mse=float(np.mean([r.cartesian_mse for r in reports])),
        axis_mae=tuple(float(v) for v in mae.mean(0)),
        relative_axis_error=tuple(float(v) for v in rel.mean(0)),
        n_samples=int(sum(r.n_samples for r in reports)),
        split=split_name,
        motion_range=reports[0].motion_range,
        eef_source=reports[0].eef_source,
        arms_averaged=reports[0].arms_averaged,
        steps=reports[0].steps,
        axis_std=tuple(float(v) for v in mae.std(0)),
        notes={"folds": len(reports)},
    )


def compare_runs(reports: list[EvalReport], labels: list[str] | None = None) -> str:
    """Fixed-width table with one row per report, in the given order."""
    labels = labels or [r.split for r in reports]
    rows = [TABLE_COLUMNS]
    for label, r in zip(labels, reports):
        rows.append((label, f"{r.joint_mse:.4f}", f"{r.cartesian_mse:.4f}",
                     *(f"{v:.3f}" for v in r.axis_mae)))
    widths = [max(len(row[i]) for row in rows) for i in range(len(TABLE_COLUMNS))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
             for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_comparison_csv(path, reports: list[EvalReport], labels: list[str]):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["configuration", "joint_mse", "cartesian_mse", "mae_x", "mae_y", "mae_z", "rel_x", "rel_y", "rel_z"])
        for label, r in zip(labels, reports):
            w.writerow([label, r.joint_mse, r.cartesian_mse, *r.axis_mae, *r.relative_axis_error])


def normalize_series(label: np.ndarray, prediction: np.ndarray):
    """Min-max normalise label and prediction with a shared range; a flat series maps to 0.5."""
    label = np.asarray(label, dtype=float)
    prediction = np.asarray(prediction, dtype=float)
    lo = min(label.min(), prediction.min())
    hi = max(label.max(), prediction.max())
    if hi - lo < 1e-12:
        return np.full_like(label, 0.5), np.full_like(prediction, 0.5)
    return (label - lo) / (hi - lo), (prediction - lo) / (hi - lo)


def trajectory_series(label_eef: np.ndarray, pred_eef: np.ndarray) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-axis normalised (label, prediction) series from (N, 3) end-effector positions."""
    label_eef = np.asarray(label_eef, dtype=float)
    pred_eef = np.asarray(pred_eef, dtype=float)
    if len(label_eef) < 2:
        raise ValueError("a trajectory needs at least two frames")
    return {a: normalize_series(label_eef[:, i], pred_eef[:, i]) for i, a in enumerate(AXES)}


def export_trajectory_plot(model, samples, out_dir, steps: int = 1, seed: int = 0, chain: int = 0,
                           axes=("x", "y")) -> dict:
    """Write trajectory.csv (frame, axis, label, prediction) and trajectory.png for ordered samples."""
    if len(samples) < 2:
        raise ValueError("a trajectory needs at least two frames")
    pred_q, true_q, _, _ = predict(model, samples, steps, seed)
    robot = model.robot
    label = robot.eef_positions(torch.as_tensor(true_q)).numpy()[:, chain]
    pred = robot.eef_positions(torch.as_tensor(pred_q)).numpy()[:, chain]
    series = trajectory_series(label, pred)
    write_trajectory(out_dir, series, axes=axes)
    return series


def write_trajectory(out_dir, series: dict, axes=("x", "y")):
    from .plotting import plot_trajectory

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "axis", "label", "prediction"])
        for axis, (lab, pred) in series.items():
            for k, (a, b) in enumerate(zip(lab, pred)):
                w.writerow([k, axis, f"{a:.6f}", f"{b:.6f}"])
    plot_trajectory({a: series[a] for a in axes}, out_dir / "trajectory.png")
