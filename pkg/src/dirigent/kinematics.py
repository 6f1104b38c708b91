"""Serial kinematic chains and differentiable forward kinematics.

Chains are described by small YAML documents (see ``chains/*.chain``)::

    name: synthetic_3dof
    base: {xyz: [0, 0, 0], rpy: [0, 0, 0]}
    eef: {xyz: [0.25, 0, 0]}
    joints:
      - name: yaw
        parent: base
        kind: revolute
        axis: [0, 0, 1]
        origin: {xyz: [0, 0, 0.1], rpy: [0, 0, 0]}
        limits: [-1.0, 1.0]

A joint's ``origin`` is its frame relative to the previous joint frame. Revolute joints
flagged ``drives_eef: false`` (hand/finger joints) occupy a slot in the joint vector but
leave the end-effector point untouched.

All angles are radians, all lengths meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import yaml
from scipy.spatial.transform import Rotation


class ChainError(ValueError):
    """Base class for chain description problems."""


class ChainParseError(ChainError):
    pass


class ChainValidationError(ChainError):
    pass


class UnsupportedTopologyError(ChainError):
    pass


def transform_from_xyz_rpy(xyz=(0.0, 0.0, 0.0), rpy=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Homogeneous transform from a translation and fixed-axis roll/pitch/yaw."""
    T = np.eye(4)
    T[:3, :3] = Rotation.from_euler("xyz", rpy).as_matrix()
    T[:3, 3] = xyz
    return T


def _is_rigid(T: np.ndarray, tol: float = 1e-9) -> bool:
    R = T[:3, :3]
    return (
        T.shape == (4, 4)
        and np.allclose(T[3], [0, 0, 0, 1], atol=tol)
        and np.allclose(R @ R.T, np.eye(3), atol=tol)
        and abs(np.linalg.det(R) - 1.0) < 1e-6
    )


@dataclass(frozen=True)
class JointSpec:
    name: str
    kind: str  # revolute | fixed
    axis: np.ndarray
    origin: np.ndarray
    limits: tuple[float, float] = (-math.pi, math.pi)
    drives_eef: bool = True

    @property
    def movable(self) -> bool:
        return self.kind == "revolute"


@dataclass(frozen=True)
class KinematicChain:
    name: str
    joints: tuple[JointSpec, ...]
    base_frame: np.ndarray = field(default_factory=lambda: np.eye(4))
    eef_offset: np.ndarray = field(default_factory=lambda: np.eye(4))
    source: str = ""

    @property
    def movable_joints(self) -> list[JointSpec]:
        return [j for j in self.joints if j.movable]

    @property
    def n_dof(self) -> int:
        return len(self.movable_joints)

    @property
    def joint_names(self) -> list[str]:
        return [j.name for j in self.movable_joints]

    @property
    def lower(self) -> np.ndarray:
        return np.array([j.limits[0] for j in self.movable_joints])

    @property
    def upper(self) -> np.ndarray:
        return np.array([j.limits[1] for j in self.movable_joints])

    def with_base(self, T: np.ndarray) -> "KinematicChain":
        """Copy of the chain with ``T`` pre-composed onto the base frame."""
        return KinematicChain(self.name, self.joints, T @ self.base_frame, self.eef_offset, self.source)


@dataclass(frozen=True)
class EndEffectorPose:
    position: np.ndarray
    orientation: np.ndarray | None = None  # unit quaternion (w, x, y, z)

    def as_vector(self) -> np.ndarray:
        """7-vector (x, y, z, qw, qx, qy, qz)."""
        if self.orientation is None:
            raise ValueError("pose has no orientation")
        return np.concatenate([self.position, self.orientation])


@dataclass(frozen=True)
class JointConfiguration:
    values: np.ndarray
    layout_id: str
    clamped: bool = False

    def __len__(self):
        return len(self.values)


# -- parsing -------------------------------------------------------------------------

def _line_of(node) -> str:
    mark = getattr(node, "start_mark", None)
    return f"line {mark.line + 1}" if mark is not None else "unknown line"


def _vector(value, n, what):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ChainParseError(f"{what}: expected {n} numbers, got {value!r}") from exc
    if arr.shape != (n,):
        raise ChainParseError(f"{what}: expected {n} numbers, got {value!r}")
    return arr


def _frame(spec, what) -> np.ndarray:
    if spec is None:
        return np.eye(4)
    if not isinstance(spec, dict):
        raise ChainParseError(f"{what}: expected a mapping with xyz/rpy, got {spec!r}")
    unknown = set(spec) - {"xyz", "rpy"}
    if unknown:
        raise ChainParseError(f"{what}: unknown field(s) {sorted(unknown)}")
    xyz = _vector(spec.get("xyz", [0, 0, 0]), 3, f"{what}.xyz")
    rpy = _vector(spec.get("rpy", [0, 0, 0]), 3, f"{what}.rpy")
    return transform_from_xyz_rpy(xyz, rpy)


def parse_chain(text: str) -> KinematicChain:
    """Build a chain from a description document.

    Raises:
        ChainParseError: malformed YAML or missing/ill-typed fields (message names the field).
        ChainValidationError: non-unit axis, bad limits, non-rigid frame.
        UnsupportedTopologyError: joints that do not form a single serial chain.
    """
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise ChainParseError(f"malformed chain document{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(doc, dict):
        raise ChainParseError("chain document must be a mapping")
    for key in ("name", "joints"):
        if key not in doc:
            raise ChainParseError(f"missing required field '{key}'")
    if not isinstance(doc["joints"], list) or not doc["joints"]:
        raise ChainParseError("'joints' must be a non-empty list")

    joints = []
    parents = {}
    for i, jd in enumerate(doc["joints"]):
        where = f"joints[{i}]"
        if not isinstance(jd, dict):
            raise ChainParseError(f"{where}: expected a mapping")
        if "name" not in jd:
            raise ChainParseError(f"{where}: missing 'name'")
        name = str(jd["name"])
        where = f"joints[{i}] ({name})"
        kind = jd.get("kind", "revolute")
        if kind not in ("revolute", "fixed"):
            raise ChainParseError(f"{where}.kind: unsupported joint kind {kind!r}")
        origin = _frame(jd.get("origin"), f"{where}.origin")
        if kind == "revolute":
            if "axis" not in jd:
                raise ChainParseError(f"{where}: revolute joint needs 'axis'")
            axis = _vector(jd["axis"], 3, f"{where}.axis")
            if abs(np.linalg.norm(axis) - 1.0) > 1e-9:
                raise ChainValidationError(f"{where}.axis: {axis.tolist()} is not a unit vector")
            lim = _vector(jd.get("limits", [-math.pi, math.pi]), 2, f"{where}.limits")
            if not lim[0] < lim[1]:
                raise ChainValidationError(f"{where}.limits: lower {lim[0]} must be below upper {lim[1]}")
            limits = (float(lim[0]), float(lim[1]))
        else:
            axis = np.array([0.0, 0.0, 1.0])
            limits = (0.0, 0.0)
        parents.setdefault(jd.get("parent", joints[-1].name if joints else "base"), []).append(name)
        joints.append(JointSpec(name, kind, axis, origin, limits, bool(jd.get("drives_eef", True))))

    names = [j.name for j in joints]
    if len(set(names)) != len(names):
        raise ChainValidationError("joint names must be unique")
    branching = {p: c for p, c in parents.items() if len(c) > 1}
    if branching:
        p, c = next(iter(branching.items()))
        raise UnsupportedTopologyError(f"joint '{p}' has several children {c}; only serial chains are supported")
    expected = ["base"] + names[:-1]
    for parent, name in zip(expected, names):
        if parents.get(parent) != [name]:
            raise UnsupportedTopologyError(f"joint '{name}' is not attached to '{parent}'; joints must be listed in chain order")

    return KinematicChain(
        name=str(doc["name"]),
        joints=tuple(joints),
        base_frame=_frame(doc.get("base"), "base"),
        eef_offset=_frame(doc.get("eef"), "eef"),
        source=text,
    )


def load_chain(description) -> KinematicChain:
    """Load a chain from a path, a bundled chain name (``"synthetic_3dof"``) or document text."""
    if isinstance(description, Path) or (isinstance(description, str) and "\n" not in description):
        path = Path(description)
        if not path.exists():
            bundled = resources.files("dirigent") / "chains" / f"{description}.chain"
            if not bundled.is_file():
                raise FileNotFoundError(f"no chain file or bundled chain named {description!r}")
            return parse_chain(bundled.read_text())
        return parse_chain(path.read_text())
    return parse_chain(description)


# -- forward kinematics ----------------------------------------------------------------

def _axis_angle_matrix(axis: torch.Tensor, angle: torch.Tensor) -> torch.Tensor:
    """Rodrigues rotation, batched over ``angle`` (...,) -> (..., 3, 3)."""
    x, y, z = axis
    zero = torch.zeros((), dtype=axis.dtype)
    K = torch.stack([
        torch.stack([zero, -z, y]),
        torch.stack([z, zero, -x]),
        torch.stack([-y, x, zero]),
    ])
    s = torch.sin(angle)[..., None, None]
    c = torch.cos(angle)[..., None, None]
    eye = torch.eye(3, dtype=axis.dtype)
    return eye + s * K + (1 - c) * (K @ K)


def _check_q(chain: KinematicChain, q: torch.Tensor):
    if q.shape[-1] != chain.n_dof:
        raise ValueError(f"chain '{chain.name}' has {chain.n_dof} joints, got a vector of length {q.shape[-1]}")
    if not torch.isfinite(q).all():
        raise FloatingPointError("joint configuration contains non-finite values")


def frame_transforms(chain: KinematicChain, q: torch.Tensor, include_passive: bool = False) -> list[torch.Tensor]:
    """World transforms of every joint frame followed by the end-effector frame.

    ``q`` has shape (..., n_dof); each returned transform has shape (..., 4, 4). The
    computation only uses differentiable torch ops, so gradients flow back to ``q``.
    """
    _check_q(chain, q)
    dtype = q.dtype
    T = torch.as_tensor(chain.base_frame, dtype=dtype).expand(*q.shape[:-1], 4, 4)
    frames = []
    k = 0
    for joint in chain.joints:
        T = T @ torch.as_tensor(joint.origin, dtype=dtype)
        if joint.movable:
            if joint.drives_eef or include_passive:
                R = _axis_angle_matrix(torch.as_tensor(joint.axis, dtype=dtype), q[..., k])
                top = torch.cat([R, torch.zeros(*R.shape[:-1], 1, dtype=dtype)], dim=-1)
                bottom = torch.tensor([0, 0, 0, 1], dtype=dtype).expand(*R.shape[:-2], 1, 4)
                T = T @ torch.cat([top, bottom], dim=-2)
            k += 1
        frames.append(T)
    frames.append(T @ torch.as_tensor(chain.eef_offset, dtype=dtype))
    return frames


def eef_transform(chain: KinematicChain, q: torch.Tensor) -> torch.Tensor:
    return frame_transforms(chain, q)[-1]


def eef_position(chain: KinematicChain, q: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable end-effector position (..., 3)."""
    return eef_transform(chain, q)[..., :3, 3]


def link_positions(chain: KinematicChain, q) -> np.ndarray:
    """World positions of base, every joint frame and the end effector, shape (n_frames + 2, 3)."""
    q = torch.as_tensor(np.asarray(q, dtype=float), dtype=torch.float64)
    base = torch.as_tensor(chain.base_frame, dtype=torch.float64)[:3, 3]
    pts = [base] + [T[..., :3, 3] for T in frame_transforms(chain, q)]
    return torch.stack(pts, dim=-2).numpy()


def matrix_to_quaternion(R: np.ndarray) -> np.ndarray:
    """(..., 3, 3) rotation -> (..., 4) quaternion (w, x, y, z) with w >= 0."""
    xyzw = Rotation.from_matrix(np.asarray(R).reshape(-1, 3, 3)).as_quat()
    wxyz = np.concatenate([xyzw[:, 3:], xyzw[:, :3]], axis=1)
    wxyz *= np.where(wxyz[:, :1] < 0, -1.0, 1.0)
    return wxyz.reshape(*np.shape(R)[:-2], 4)


def _as_vector(q) -> np.ndarray:
    if isinstance(q, JointConfiguration):
        q = q.values
    return np.asarray(q, dtype=float)


def forward_kinematics(chain: KinematicChain, q, orientation: bool = True) -> EndEffectorPose:
    """End-effector pose for a single configuration (float64)."""
    qt = torch.as_tensor(_as_vector(q), dtype=torch.float64)
    if qt.ndim != 1:
        raise ValueError("forward_kinematics takes a single configuration; use eef_position for batches")
    T = eef_transform(chain, qt).numpy()
    quat = matrix_to_quaternion(T[:3, :3]) if orientation else None
    return EndEffectorPose(T[:3, 3].copy(), quat)


def jacobian(chain: KinematicChain, q) -> np.ndarray:
    """Analytic positional Jacobian (3, n_dof): column j is axis_j x (p_eef - p_j).

    Joints that do not drive the end effector get zero columns.
    """
    qt = torch.as_tensor(_as_vector(q), dtype=torch.float64)
    frames = frame_transforms(chain, qt)
    p_eef = frames[-1][:3, 3].numpy()
    J = np.zeros((3, chain.n_dof))
    k = 0
    for joint, T in zip(chain.joints, frames):
        if not joint.movable:
            continue
        if joint.drives_eef:
            T = T.numpy()
            axis_world = T[:3, :3] @ joint.axis
            J[:, k] = np.cross(axis_world, p_eef - T[:3, 3])
        k += 1
    return J


# -- multi-chain robots -----------------------------------------------------------------

@dataclass(frozen=True)
class Robot:
    """A joint layout made of one or more chains laid out back to back."""

    layout_id: str
    chains: tuple[KinematicChain, ...]
    motion_range: tuple[float, float, float] | None = None

    @property
    def joint_dim(self) -> int:
        return sum(c.n_dof for c in self.chains)

    @property
    def lower(self) -> np.ndarray:
        return np.concatenate([c.lower for c in self.chains])

    @property
    def upper(self) -> np.ndarray:
        return np.concatenate([c.upper for c in self.chains])

    def slices(self) -> list[slice]:
        out, start = [], 0
        for c in self.chains:
            out.append(slice(start, start + c.n_dof))
            start += c.n_dof
        return out

    def normalize(self, q):
        """Affine map of every joint from [lower, upper] to [-1, 1]."""
        lo, hi = self._bounds(q)
        return 2 * (q - lo) / (hi - lo) - 1

    def denormalize(self, x):
        lo, hi = self._bounds(x)
        return lo + (x + 1) * (hi - lo) / 2

    def clamp(self, q):
        lo, hi = self._bounds(q)
        if isinstance(q, torch.Tensor):
            return torch.clamp(q, lo, hi)
        return np.clip(q, lo, hi)

    def _bounds(self, like):
        if isinstance(like, torch.Tensor):
            return (torch.as_tensor(self.lower, dtype=like.dtype, device=like.device),
                    torch.as_tensor(self.upper, dtype=like.dtype, device=like.device))
        return self.lower, self.upper

    def eef_positions(self, q: torch.Tensor) -> torch.Tensor:
        """(..., joint_dim) radians -> (..., n_chains, 3) meters."""
        if q.shape[-1] != self.joint_dim:
            raise ValueError(f"layout {self.layout_id} has {self.joint_dim} joints, got {q.shape[-1]}")
        return torch.stack([eef_position(c, q[..., s]) for c, s in zip(self.chains, self.slices())], dim=-2)

    def eef_poses7(self, q) -> np.ndarray:
        """(..., joint_dim) radians -> (..., n_chains * 7) position + quaternion per chain."""
        q = torch.as_tensor(np.asarray(q, dtype=float), dtype=torch.float64)
        parts = []
        for c, s in zip(self.chains, self.slices()):
            T = eef_transform(c, q[..., s]).numpy()
            parts.append(np.concatenate([T[..., :3, 3], matrix_to_quaternion(T[..., :3, :3])], axis=-1))
        return np.concatenate(parts, axis=-1)

    def reach(self) -> float:
        """Upper bound on the distance of any end effector from its base."""
        r = 0.0
        for c in self.chains:
            lengths = [np.linalg.norm(j.origin[:3, 3]) for j in c.joints]
            r = max(r, sum(lengths) + np.linalg.norm(c.eef_offset[:3, 3]) + np.linalg.norm(c.base_frame[:3, 3]))
        return float(r)

    def configuration(self, values, clamp: bool = False) -> JointConfiguration:
        values = np.asarray(values, dtype=float)
        if values.shape[-1] != self.joint_dim:
            raise ValueError(f"layout {self.layout_id} expects {self.joint_dim} values")
        if clamp:
            values = self.clamp(values)
        return JointConfiguration(values, self.layout_id, clamped=clamp)


NICOL_MOTION_RANGE = (0.40, 0.50, 0.30)

_LAYOUTS = {
    "synthetic-3dof": (("synthetic_3dof",), None),
    "nicol-left-arm-13": (("nicol_left",), NICOL_MOTION_RANGE),
    "nicol-right-arm-13": (("nicol_right",), NICOL_MOTION_RANGE),
    "diri-26": (("nicol_left", "nicol_right"), NICOL_MOTION_RANGE),
}


def available_layouts() -> list[str]:
    return sorted(_LAYOUTS)


def load_robot(layout_id: str, chain_sources: list[str] | None = None) -> Robot:
    """Robot for a known layout id; ``chain_sources`` overrides the bundled documents."""
    if chain_sources is not None:
        chains = tuple(parse_chain(src) for src in chain_sources)
        motion = _LAYOUTS.get(layout_id, (None, None))[1]
        return Robot(layout_id, chains, motion)
    if layout_id not in _LAYOUTS:
        raise KeyError(f"unknown joint layout {layout_id!r}; known: {available_layouts()}")
    names, motion = _LAYOUTS[layout_id]
    return Robot(layout_id, tuple(load_chain(n) for n in names), motion)
