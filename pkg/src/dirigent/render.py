"""Deterministic stick-figure rendering of robot arms seen from a fixed pinhole camera."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kinematics import Robot, link_positions

BACKGROUND = (236, 233, 226)
EEF_COLOR = (220, 30, 30)
JOINT_COLOR = (40, 40, 40)
LINK_COLORS = [
    (31, 119, 180),
    (44, 160, 44),
    (255, 127, 14),
    (148, 103, 189),
    (23, 190, 207),
    (188, 189, 34),
    (140, 86, 75),
    (227, 119, 194),
]


@dataclass(frozen=True)
class PinholeCamera:
    position: tuple[float, float, float]
    target: tuple[float, float, float]
    fov_deg: float = 55.0
    up: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def extrinsics(self) -> np.ndarray:
        """World-to-camera rotation rows (right, down, forward)."""
        eye = np.asarray(self.position, float)
        fwd = np.asarray(self.target, float) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, float))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        return np.stack([right, down, fwd])

    def focal(self, size: int) -> float:
        return 0.5 * size / math.tan(math.radians(self.fov_deg) / 2)

    def project(self, points: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray]:
        """World points (N, 3) -> pixel coordinates (N, 2) as (col, row) and depth (N,)."""
        R = self.extrinsics()
        cam = (np.asarray(points, float) - np.asarray(self.position, float)) @ R.T
        f = self.focal(size)
        c = (size - 1) / 2
        uv = f * cam[:, :2] / cam[:, 2:3] + c
        return uv, cam[:, 2]


DEFAULT_CAMERAS = {
    "synthetic-3dof": PinholeCamera(position=(1.0, -0.81, 0.76), target=(0.25, 0.0, 0.2), fov_deg=55.0),
    "diri-26": PinholeCamera(position=(2.0, -0.7, 1.6), target=(0.3, 0.0, 0.9), fov_deg=75.0),
    "nicol-left-arm-13": PinholeCamera(position=(2.0, -0.7, 1.6), target=(0.3, 0.0, 0.9), fov_deg=75.0),
    "nicol-right-arm-13": PinholeCamera(position=(2.0, -0.7, 1.6), target=(0.3, 0.0, 0.9), fov_deg=75.0),
}


def default_camera(layout_id: str) -> PinholeCamera:
    return DEFAULT_CAMERAS.get(layout_id, DEFAULT_CAMERAS["synthetic-3dof"])


def _paint(img, cov, color):
    cov = cov[..., None]
    img *= 1 - cov
    img += cov * np.asarray(color, np.float64)


def _bbox(lo, hi, pad, size):
    r0 = max(int(math.floor(lo[1] - pad)), 0)
    r1 = min(int(math.ceil(hi[1] + pad)) + 1, size)
    c0 = max(int(math.floor(lo[0] - pad)), 0)
    c1 = min(int(math.ceil(hi[0] + pad)) + 1, size)
    return r0, r1, c0, c1


def _draw_capsule(img, a, b, radius, color):
    size = img.shape[0]
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    r0, r1, c0, c1 = _bbox(lo, hi, radius + 1, size)
    if r0 >= r1 or c0 >= c1:
        return
    rows, cols = np.mgrid[r0:r1, c0:c1]
    p = np.stack([cols, rows], axis=-1).astype(np.float64)
    d = b - a
    denom = float(d @ d)
    if denom < 1e-12:
        dist = np.linalg.norm(p - a, axis=-1)
    else:
        h = np.clip(((p - a) @ d) / denom, 0.0, 1.0)
        dist = np.linalg.norm(p - (a + h[..., None] * d), axis=-1)
    cov = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    _paint(img[r0:r1, c0:c1], cov, color)


def render_arm(robot: Robot, q, size: int = 256, camera: PinholeCamera | None = None,
               link_radius: float = 0.03, joint_radius: float = 0.036, eef_radius: float = 0.045) -> np.ndarray:
    """Render every chain of ``robot`` at configuration ``q`` to a (size, size, 3) uint8 image.

    Link thickness follows perspective, so depth is visible. Primitives are painted far to
    near; the end-effector marker is always painted last.
    """
    camera = camera or default_camera(robot.layout_id)
    q = np.asarray(q, dtype=float)
    img = np.empty((size, size, 3), np.float64)
    img[:] = BACKGROUND
    f = camera.focal(size)
    prims = []
    eefs = []
    for chain, sl in zip(robot.chains, robot.slices()):
        pts = link_positions(chain, q[sl])
        uv, depth = camera.project(pts, size)
        for i in range(len(pts) - 1):
            if np.linalg.norm(pts[i + 1] - pts[i]) < 1e-9:
                continue
            z = 0.5 * (depth[i] + depth[i + 1])
            prims.append((z, "link", uv[i], uv[i + 1], f * link_radius / z, LINK_COLORS[i % len(LINK_COLORS)]))
        for i in range(len(pts) - 1):
            prims.append((depth[i], "joint", uv[i], uv[i], f * joint_radius / depth[i], JOINT_COLOR))
        eefs.append((uv[-1], f * eef_radius / depth[-1]))
    prims.sort(key=lambda p: -p[0])
    for _, _, a, b, r, color in prims:
        _draw_capsule(img, a, b, r, color)
    for uv, r in eefs:
        _draw_capsule(img, uv, uv, r, EEF_COLOR)
    return np.round(img).astype(np.uint8)
