"""Inference-ready model: network + robot layout + noise schedule, with checkpoint I/O."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .kinematics import JointConfiguration, Robot, load_robot
from .network import CARTESIAN_DIM, Dirigent, NetworkConfig
from .schedule import NoiseSchedule, build_cosine_schedule, denoise_step

CHECKPOINT_FORMAT = "dirigent-checkpoint/1"


@dataclass
class ModelOutput:
    joints: torch.Tensor  # (B, joint_dim) normalised
    eef_positions: torch.Tensor  # (B, n_chains, 3) meters, FK of the denormalised joints
    direct_cartesian: torch.Tensor | None = None  # (B, 7 * n_chains) normalised


def _randn(rows: int, dim: int, generator) -> torch.Tensor:
    if isinstance(generator, (list, tuple)):
        return torch.stack([torch.randn(dim, generator=g) for g in generator])
    return torch.randn(rows, dim, generator=generator)


def sample_generators(seed: int, keys) -> list[torch.Generator]:
    """One generator per sample, keyed by (seed, key), so results do not depend on batch order."""
    return [torch.Generator().manual_seed((seed * 1_000_003 + zlib.crc32(str(k).encode())) % 2**63) for k in keys]


class DirigentModel(nn.Module):
    def __init__(self, cfg: NetworkConfig, robot: Robot, schedule: NoiseSchedule | None = None):
        super().__init__()
        if cfg.joint_dim != robot.joint_dim:
            raise ValueError(f"network joint_dim {cfg.joint_dim} != layout {robot.layout_id} ({robot.joint_dim})")
        if cfg.cartesian_head == "consistency" and cfg.cartesian_chains != len(robot.chains):
            raise ValueError("cartesian_chains must equal the number of chains in the layout")
        self.cfg = cfg
        self.robot = robot
        self.schedule = schedule or build_cosine_schedule(cfg.num_timesteps)
        if self.schedule.T != cfg.num_timesteps:
            raise ValueError("schedule length does not match network num_timesteps")
        self.net = Dirigent(cfg)
        base = np.stack([c.base_frame[:3, 3] for c in robot.chains])
        self.register_buffer("cartesian_center", torch.as_tensor(base, dtype=torch.float32))
        self.cartesian_scale = robot.reach()

    @property
    def joint_dim(self) -> int:
        return self.cfg.joint_dim

    def forward(self, noisy, condition, t):
        return self.net(noisy, condition, t)

    # -- normalisation helpers --------------------------------------------------------

    def normalize_joints(self, q: torch.Tensor) -> torch.Tensor:
        return self.robot.normalize(q)

    def denormalize_joints(self, x: torch.Tensor) -> torch.Tensor:
        return self.robot.denormalize(x)

    def cartesian_targets(self, q) -> torch.Tensor:
        """Normalised 7-value pose per chain for joint configurations ``q`` (radians)."""
        poses = torch.as_tensor(self.robot.eef_poses7(np.asarray(q, dtype=float)), dtype=torch.float32)
        poses = poses.reshape(*poses.shape[:-1], len(self.robot.chains), CARTESIAN_DIM)
        pos = (poses[..., :3] - self.cartesian_center) / self.cartesian_scale
        return torch.cat([pos, poses[..., 3:]], dim=-1).flatten(-2)

    def diffusion_targets(self, q) -> torch.Tensor:
        """Clean diffusion vectors x0 for joint configurations ``q`` (radians)."""
        qt = torch.as_tensor(np.asarray(q, dtype=float))
        x0 = self.normalize_joints(qt).float()
        if self.cfg.cartesian_head == "consistency":
            x0 = torch.cat([x0, self.cartesian_targets(q)], dim=-1)
        return x0

    def direct_positions(self, direct: torch.Tensor) -> torch.Tensor:
        """Meters from the direct Cartesian head, (B, n_chains, 3)."""
        d = direct.reshape(*direct.shape[:-1], len(self.robot.chains), CARTESIAN_DIM)
        return d[..., :3] * self.cartesian_scale + self.cartesian_center

    def output(self, x0_pred: torch.Tensor) -> ModelOutput:
        J = self.joint_dim
        joints = x0_pred[..., :J]
        q = self.denormalize_joints(joints)
        eef = self.robot.eef_positions(q)
        direct = x0_pred[..., J:] if self.cfg.cartesian_head == "consistency" else None
        return ModelOutput(joints, eef, direct)

    # -- inference ---------------------------------------------------------------------

    def _check_condition(self, condition: torch.Tensor) -> torch.Tensor:
        condition = torch.as_tensor(condition, dtype=torch.float32)
        if condition.ndim == 3:
            condition = condition[None]
        if condition.min() < 0 or condition.max() > 1:
            raise ValueError("condition images must be normalised to [0, 1]")
        return condition

    @torch.no_grad()
    def sample(self, condition, steps: int = 1, generator=None) -> torch.Tensor:
        """Normalised diffusion vector predicted from pure noise.

        ``steps == 1`` is a single forward pass at the highest noise level; larger values
        re-noise the prediction to evenly spaced lower levels and predict again.
        ``generator`` is one torch.Generator for the batch or a list with one per row.
        """
        condition = self._check_condition(condition)
        was_training = self.training
        self.eval()
        B = condition.shape[0]
        if isinstance(generator, (list, tuple)) and len(generator) != B:
            raise ValueError(f"{len(generator)} generators for a batch of {B}")
        x = _randn(B, self.cfg.diffusion_dim, generator)
        levels = self.schedule.inference_levels(steps)
        x0 = x
        for i, t in enumerate(levels):
            x0 = self.net(x, condition, torch.full((B,), t, dtype=torch.long)).clamp(-1, 1)
            if i + 1 < len(levels):
                eps = _randn(B, self.cfg.diffusion_dim, generator)
                x = denoise_step(x, x0, t, self.schedule, eps, t_prev=levels[i + 1])
        self.train(was_training)
        return x0

    @torch.no_grad()
    def predict_joints(self, condition, steps: int = 1, generator: torch.Generator | None = None) -> np.ndarray:
        """(B, joint_dim) radians, clamped to the joint limits."""
        x0 = self.sample(condition, steps, generator)
        q = self.denormalize_joints(x0[:, : self.joint_dim].double())
        return self.robot.clamp(q).numpy()

    def predict_x0(self, condition, steps: int = 1, seed: int = 0) -> JointConfiguration:
        """Joint configuration for a single (3, S, S) condition image."""
        g = torch.Generator().manual_seed(seed)
        q = self.predict_joints(condition, steps, g)[0]
        return self.robot.configuration(q, clamp=True)

    # -- checkpoints -------------------------------------------------------------------

    def save(self, path, extra: dict | None = None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "format": CHECKPOINT_FORMAT,
            "network_config": self.cfg.to_dict(),
            "state_dict": self.state_dict(),
            "schedule": {"T": self.schedule.T, "s": self.schedule.s,
                         "alpha_bar": torch.tensor(self.schedule.alpha_bar)},
            "normalization": {"lower": torch.as_tensor(self.robot.lower), "upper": torch.as_tensor(self.robot.upper)},
            "layout_id": self.robot.layout_id,
            "chains": [c.name for c in self.robot.chains],
            "chain_sources": [c.source for c in self.robot.chains],
            "motion_range": self.robot.motion_range,
            "extra": extra or {},
        }, path)

    @classmethod
    def load(cls, path) -> "DirigentModel":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
        cfg = NetworkConfig(**blob["network_config"])
        robot = load_robot(blob["layout_id"], blob["chain_sources"])
        if blob.get("motion_range") is not None:
            robot = Robot(robot.layout_id, robot.chains, tuple(blob["motion_range"]))
        sched = build_cosine_schedule(blob["schedule"]["T"], blob["schedule"]["s"])
        if not np.array_equal(sched.alpha_bar, blob["schedule"]["alpha_bar"].numpy()):
            raise ValueError("stored noise schedule does not match its recorded construction")
        if not (np.array_equal(robot.lower, blob["normalization"]["lower"].numpy())
                and np.array_equal(robot.upper, blob["normalization"]["upper"].numpy())):
            raise ValueError("stored normalisation table does not match the chain limits")
        model = cls(cfg, robot, sched)
        model.load_state_dict(blob["state_dict"])
        model.eval()
        model.checkpoint_extra = blob.get("extra", {})
        return model
