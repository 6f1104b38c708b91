"""Paired (condition image, joint configuration) datasets.

On-disk layout (DIRI profile; EMIL uses ``task_<name>/recording_YY`` instead)::

    root/manifest.yaml
    root/participant_01/run_1/frames/000000.png   8-bit RGB
    root/participant_01/run_1/frames.csv          frame,t
    root/participant_01/run_1/joints.csv          t,j00,...,jNN   (radians)

Images and joint records are paired by nearest timestamp inside a tolerance when the
dataset is loaded.
"""

from __future__ import annotations

import bisect
import csv
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import yaml
from PIL import Image, UnidentifiedImageError

from .kinematics import load_robot
from .render import render_arm

log = logging.getLogger(__name__)

DIRI_FULL_SAMPLES = 110_000
EMIL_FULL_SAMPLES = 59_500
EMIL_TASKS = ("lift", "push", "pull", "scoot")
MANIFEST_NAME = "manifest.yaml"


class ManifestError(RuntimeError):
    pass


class CorruptImageError(RuntimeError):
    pass


class CoverageError(RuntimeError):
    pass


@dataclass
class PoseSample:
    sample_id: str
    condition: object  # image path, or (H, W, 3) uint8 array
    target_joints: np.ndarray
    image_timestamp: float
    joint_timestamp: float
    participant: str | None = None
    task: str | None = None
    run: str | None = None


def synchronize_streams(images, joints, tolerance: float = 0.05, group: dict | None = None):
    """Pair every image with the nearest-in-time joint record.

    Args:
        images: sorted list of (timestamp, image_ref).
        joints: sorted list of (timestamp, joint_vector).
        tolerance: maximum allowed |t_image - t_joint| in seconds.
        group: extra PoseSample fields (participant, task, run) copied onto each sample.

    Returns:
        (samples, dropped) where dropped counts images without a record inside tolerance.
        Ties go to the earlier joint record.
    """
    it = [float(t) for t, _ in images]
    jt = [float(t) for t, _ in joints]
    if any(b < a for a, b in zip(it, it[1:])) or any(b < a for a, b in zip(jt, jt[1:])):
        raise ValueError("image and joint streams must be sorted by timestamp")
    group = group or {}
    if not images or not joints:
        if images or joints:
            log.warning("synchronize_streams: one stream is empty, %d images dropped", len(images))
        return [], len(images)
    samples, dropped = [], 0
    for t_img, (_, ref) in zip(it, images):
        k = bisect.bisect_left(jt, t_img)
        candidates = [i for i in (k - 1, k) if 0 <= i < len(jt)]
        best = min(candidates, key=lambda i: (abs(jt[i] - t_img), i))
        if abs(jt[best] - t_img) > tolerance:
            dropped += 1
            continue
        sid = _sample_id(group, ref, len(samples))
        samples.append(PoseSample(sid, ref, np.asarray(joints[best][1], dtype=float), t_img, jt[best], **group))
    return samples, dropped


def _sample_id(group, ref, index):
    stem = Path(ref).stem if isinstance(ref, (str, Path)) else f"{index:06d}"
    parts = [group.get("participant") or group.get("task"), group.get("run"), stem]
    return "_".join(str(p) for p in parts if p)


# -- manifest --------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: Path
    layout_id: str
    profile: str = "diri"  # diri | emil
    joint_dim: int = 26
    participants: list[str] = field(default_factory=list)
    tasks: list[str] = field(default_factory=list)
    recordings: list[str] = field(default_factory=list)
    sample_count: int = 0
    image_size: int = 256
    image_format: str = "png"
    joint_format: str = "csv"
    sync_tolerance: float = 0.05
    source: str = "recorded"

    def save(self):
        data = asdict(self)
        data.pop("root")
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / MANIFEST_NAME).write_text(yaml.safe_dump(data, sort_keys=False))

    @classmethod
    def load(cls, root) -> "DatasetManifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        if not path.is_file():
            raise ManifestError(f"no {MANIFEST_NAME} in {root}")
        data = yaml.safe_load(path.read_text()) or {}
        unknown = set(data) - {f for f in cls.__dataclass_fields__ if f != "root"}
        if unknown:
            raise ManifestError(f"unknown manifest keys {sorted(unknown)}")
        return cls(root=root, **data)


def _read_csv(path: Path, n_cols: int | None = None):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [[float(v) for v in row] for row in reader if row]
    if n_cols is not None and len(header) != n_cols:
        raise ManifestError(f"{path}: expected {n_cols} columns, found {len(header)}")
    return header, rows


def joints_header(joint_dim: int) -> list[str]:
    return ["t"] + [f"j{i:02d}" for i in range(joint_dim)]


# -- dataset ---------------------------------------------------------------------------

def load_image(path, size: int | None = None) -> np.ndarray:
    """Read an RGB image as (H, W, 3) uint8, optionally area-resized to ``size``."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if size is not None and im.size != (size, size):
                im = im.resize((size, size), Image.BOX)
            return np.asarray(im, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise CorruptImageError(f"cannot read image {path}: {exc}") from exc


def overlay_past_frames(window: Sequence[np.ndarray], opacity: float = 0.5) -> np.ndarray:
    """Blend frames ordered oldest -> current: acc <- (1 - opacity) * acc + opacity * frame.

    Inputs are float images in [0, 1]; the result is clipped to [0, 1].
    """
    if not window:
        raise ValueError("empty frame window")
    shape = np.shape(window[0])
    acc = np.asarray(window[0], dtype=np.float64)
    for frame in window[1:]:
        if np.shape(frame) != shape:
            raise ValueError(f"frame shape {np.shape(frame)} does not match {shape}")
        acc = (1 - opacity) * acc + opacity * np.asarray(frame, dtype=np.float64)
    return np.clip(acc, 0.0, 1.0)


class PoseDataset(Sequence):
    """Ordered collection of PoseSamples with lazy image access.

    Order is (group, run, timestamp). ``condition_size`` is the resolution fed to the
    network; ``overlay_past`` > 0 blends that many preceding frames of the same run
    into each condition.
    """

    def __init__(self, samples: list[PoseSample], layout_id: str, condition_size: int = 64,
                 overlay_past: int = 0, overlay_opacity: float = 0.5, manifest: DatasetManifest | None = None):
        self.samples = samples
        self.layout_id = layout_id
        self.condition_size = condition_size
        self.overlay_past = overlay_past
        self.overlay_opacity = overlay_opacity
        self.manifest = manifest
        self.errors: list[str] = []
        self._run_start = self._index_runs()

    def _index_runs(self):
        starts, start = [], 0
        for i, s in enumerate(self.samples):
            if i and (s.participant, s.task, s.run) != (self.samples[i - 1].participant,
                                                         self.samples[i - 1].task, self.samples[i - 1].run):
                start = i
            starts.append(start)
        return starts

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return self.subset(range(*i.indices(len(self))))
        return self.samples[i]

    @property
    def participants(self) -> list[str]:
        return sorted({s.participant for s in self.samples if s.participant is not None})

    @property
    def tasks(self) -> list[str]:
        return sorted({s.task for s in self.samples if s.task is not None})

    def targets(self) -> np.ndarray:
        return np.stack([s.target_joints for s in self.samples]) if self.samples else np.zeros((0, 0))

    def subset(self, indices) -> "PoseDataset":
        return PoseDataset([self.samples[i] for i in indices], self.layout_id, self.condition_size,
                           self.overlay_past, self.overlay_opacity, self.manifest)

    def _raw(self, sample: PoseSample) -> np.ndarray:
        if isinstance(sample.condition, np.ndarray):
            img = sample.condition
            if img.shape[:2] != (self.condition_size,) * 2:
                img = np.asarray(Image.fromarray(img).resize((self.condition_size,) * 2, Image.BOX))
            return img
        return load_image(sample.condition, self.condition_size)

    def condition(self, i: int) -> np.ndarray:
        """Condition image for sample ``i`` as float32 (3, S, S) in [0, 1]."""
        sample = self.samples[i]
        img = self._raw(sample).astype(np.float64) / 255.0
        if self.overlay_past:
            first = max(self._run_start[i], i - self.overlay_past)
            past = [self._raw(self.samples[k]).astype(np.float64) / 255.0 for k in range(first, i)]
            past = [past[0]] * (self.overlay_past - len(past)) + past if past else [img] * self.overlay_past
            img = overlay_past_frames(past + [img], self.overlay_opacity)
        return img.transpose(2, 0, 1).astype(np.float32)

    def __iter__(self) -> Iterator[PoseSample]:
        return iter(self.samples)

    def iter_conditions(self) -> Iterator[tuple[int, PoseSample, np.ndarray]]:
        """Yield (index, sample, condition) lazily, skipping and recording unreadable images."""
        for i, s in enumerate(self.samples):
            try:
                yield i, s, self.condition(i)
            except CorruptImageError as exc:
                self.errors.append(str(exc))
                log.warning("%s", exc)

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(conditions uint8 (N, 3, S, S), targets (N, D), kept indices); corrupt samples are skipped."""
        conds, idx = [], []
        for i, _, c in self.iter_conditions():
            conds.append(np.round(c * 255).astype(np.uint8))
            idx.append(i)
        idx = np.asarray(idx, dtype=int)
        S = self.condition_size
        conds = np.stack(conds) if conds else np.zeros((0, 3, S, S), np.uint8)
        targets = self.targets()[idx] if len(idx) else np.zeros((0, 0))
        return conds, targets, idx

    def with_conditions(self, substitutes: dict[str, Path]) -> "PoseDataset":
        """Same samples with condition payloads swapped for ``substitutes[sample_id]``."""
        missing = [s.sample_id for s in self.samples if s.sample_id not in substitutes]
        if missing:
            raise CoverageError(f"{len(missing)} sample(s) lack a substitute condition: {missing[:20]}")
        new = [replace(s, condition=substitutes[s.sample_id]) for s in self.samples]
        return PoseDataset(new, self.layout_id, self.condition_size, self.overlay_past,
                           self.overlay_opacity, self.manifest)


def _recording_group(manifest: DatasetManifest, rec: str) -> dict:
    group_dir, run_dir = rec.split("/")
    if manifest.profile == "emil":
        return {"participant": None, "task": group_dir.removeprefix("task_"), "run": run_dir}
    return {"participant": group_dir, "task": None, "run": run_dir}


def load_dataset(manifest, condition_size: int = 64, overlay_past: int = 0,
                 overlay_opacity: float = 0.5, check_count: bool = True) -> PoseDataset:
    """Index a dataset directory (or manifest) into a PoseDataset; images load lazily.

    Raises:
        ManifestError: missing manifest, missing recording files, or a sample count that
            disagrees with the manifest declaration.
    """
    if not isinstance(manifest, DatasetManifest):
        manifest = DatasetManifest.load(manifest)
    root = manifest.root
    if not manifest.recordings:
        raise ManifestError(f"manifest in {root} declares no recordings")
    gaps = []
    for rec in manifest.recordings:
        for name in ("frames.csv", "joints.csv", "frames"):
            if not (root / rec / name).exists():
                gaps.append(f"{rec}/{name}")
    if gaps:
        raise ManifestError(f"dataset at {root} is incomplete; missing: {gaps}")

    samples, dropped = [], 0
    for rec in manifest.recordings:
        _, frame_rows = _read_csv(root / rec / "frames.csv", 2)
        _, joint_rows = _read_csv(root / rec / "joints.csv", manifest.joint_dim + 1)
        images = [(t, root / rec / "frames" / f"{int(k):06d}.{manifest.image_format}") for k, t in frame_rows]
        missing = [str(p) for _, p in images if not p.is_file()]
        if missing:
            raise ManifestError(f"{len(missing)} frame file(s) missing, e.g. {missing[:5]}")
        joints = [(row[0], row[1:]) for row in joint_rows]
        got, d = synchronize_streams(images, joints, manifest.sync_tolerance, _recording_group(manifest, rec))
        samples.extend(got)
        dropped += d
    if dropped:
        log.info("dropped %d frame(s) without a joint record inside %.3fs", dropped, manifest.sync_tolerance)
    if check_count and manifest.sample_count and len(samples) != manifest.sample_count:
        raise ManifestError(f"manifest declares {manifest.sample_count} samples, found {len(samples)}")
    return PoseDataset(samples, manifest.layout_id, condition_size, overlay_past, overlay_opacity, manifest)


def load_condition_substitute(directory) -> dict[str, Path]:
    """Map sample ids to pre-rendered pose images (``<sample_id>.png``) in ``directory``."""
    directory = Path(directory)
    if not directory.is_dir():
        raise CoverageError(f"{directory} is not a directory")
    return {p.stem: p for p in sorted(directory.glob("*.png"))}


# -- splits ----------------------------------------------------------------------------

def split(dataset: PoseDataset, strategy: str = "random", *, ratio: float = 0.9, seed: int = 0,
          held_out: str | None = None, train_task: str | None = None,
          eval_task: str | None = None) -> tuple[PoseDataset, PoseDataset]:
    """Partition ``dataset`` into (train, test).

    Strategies:
        random: seeded permutation, ``round(ratio * n)`` training samples.
        by_participant: every sample of ``held_out`` goes to test, the rest to train.
        by_task: train on ``train_task`` only, test on ``eval_task`` only (samples of
            other tasks belong to neither side).
    """
    n = len(dataset)
    if strategy == "random":
        if not 0 < ratio < 1:
            raise ValueError(f"ratio must be in (0, 1), got {ratio}")
        perm = np.random.default_rng(seed).permutation(n)
        k = int(round(ratio * n))
        return dataset.subset(sorted(perm[:k])), dataset.subset(sorted(perm[k:]))
    if strategy == "by_participant":
        if held_out not in dataset.participants:
            raise ValueError(f"unknown participant {held_out!r}; have {dataset.participants}")
        test = [i for i, s in enumerate(dataset) if s.participant == held_out]
        train = [i for i, s in enumerate(dataset) if s.participant != held_out]
        return dataset.subset(train), dataset.subset(test)
    if strategy == "by_task":
        for t in (train_task, eval_task):
            if t not in dataset.tasks:
                raise ValueError(f"unknown task {t!r}; have {dataset.tasks}")
        train = [i for i, s in enumerate(dataset) if s.task == train_task]
        test = [i for i, s in enumerate(dataset) if s.task == eval_task]
        return dataset.subset(train), dataset.subset(test)
    raise ValueError(f"unknown split strategy {strategy!r}")


# -- synthetic data --------------------------------------------------------------------

@dataclass
class SyntheticConfig:
    layout_id: str = "synthetic-3dof"
    count: int = 5000
    image_size: int = 256
    profile: str = "diri"  # diri: participants x runs; emil: tasks x recordings
    participants: int = 2
    runs: int = 3
    tasks: tuple[str, ...] = EMIL_TASKS
    joint_rate: float = 100.0
    image_rate: float = 30.0
    timestamp_jitter: float = 0.002
    speed: tuple[float, float] = (0.05, 0.5)  # rad/s per joint
    segment: tuple[float, float] = (0.5, 3.0)  # seconds of constant velocity
    sync_tolerance: float = 0.05


def _trajectory(rng, lower, upper, n_ticks, dt, speed, segment):
    """Piecewise-constant joint velocities with reflection at the limits."""
    margin = 0.02 * (upper - lower)
    q = rng.uniform(lower + margin, upper - margin)
    out = np.empty((n_ticks, len(lower)))
    remaining = 0
    v = np.zeros_like(q)
    for k in range(n_ticks):
        if remaining <= 0:
            v = rng.uniform(*speed, size=len(q)) * rng.choice([-1.0, 1.0], size=len(q))
            remaining = int(rng.uniform(*segment) / dt)
        out[k] = q
        q = q + v * dt
        hit_lo, hit_hi = q < lower, q > upper
        q = np.where(hit_lo, 2 * lower - q, np.where(hit_hi, 2 * upper - q, q))
        v = np.where(hit_lo | hit_hi, -v, v)
        q = np.clip(q, lower, upper)
        remaining -= 1
    return out


def _task_box(robot, task_index, n_tasks):
    """Each synthetic task sweeps its own slab of the first joint's range."""
    lo, hi = robot.lower.copy(), robot.upper.copy()
    width = (hi[0] - lo[0]) / n_tasks
    lo[0], hi[0] = lo[0] + task_index * width * 0.75, lo[0] + task_index * width * 0.75 + 1.75 * width
    hi[0] = min(hi[0], robot.upper[0])
    return lo, hi


def generate_synthetic(cfg: SyntheticConfig, root, seed: int = 0) -> DatasetManifest:
    """Render a synthetic dataset in the on-disk layout and return its manifest.

    Every image is a deterministic rendering of the arm at the joint record it is paired
    with, so ground truth pairing is exact.
    """
    root = Path(root)
    robot = load_robot(cfg.layout_id)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset root {root}: {exc}") from exc
    if cfg.profile == "emil":
        groups = [(f"task_{t}", f"recording_{r + 1:02d}", i) for i, t in enumerate(cfg.tasks) for r in range(cfg.runs)]
        participants, tasks = [], list(cfg.tasks)
    else:
        groups = [(f"participant_{p + 1:02d}", f"run_{r + 1}", None) for p in range(cfg.participants) for r in range(cfg.runs)]
        participants, tasks = [f"participant_{p + 1:02d}" for p in range(cfg.participants)], []
    n_rec = len(groups)
    counts = [cfg.count // n_rec + (1 if i < cfg.count % n_rec else 0) for i in range(n_rec)]
    seeds = np.random.SeedSequence(seed).spawn(n_rec)
    dt = 1.0 / cfg.joint_rate
    recordings = []
    for (group, run, task_idx), n_img, ss in zip(groups, counts, seeds):
        rng = np.random.default_rng(ss)
        rec_dir = root / group / run
        (rec_dir / "frames").mkdir(parents=True, exist_ok=True)
        n_ticks = int(np.ceil((n_img + 1) / cfg.image_rate * cfg.joint_rate)) + 2
        lo, hi = (robot.lower, robot.upper) if task_idx is None else _task_box(robot, task_idx, len(cfg.tasks))
        traj = _trajectory(rng, lo, hi, n_ticks, dt, cfg.speed, cfg.segment)
        t_joint = np.arange(n_ticks) * dt
        jitter = rng.uniform(-cfg.timestamp_jitter, cfg.timestamp_jitter, size=n_img)
        t_img = np.arange(n_img) / cfg.image_rate + jitter + 2 * cfg.timestamp_jitter
        with open(rec_dir / "joints.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(joints_header(robot.joint_dim))
            for t, q in zip(t_joint, traj):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in q])
        with open(rec_dir / "frames.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "t"])
            for k, t in enumerate(t_img):
                w.writerow([k, repr(float(t))])
        for k, t in enumerate(t_img):
            q = traj[int(np.argmin(np.abs(t_joint - t)))]
            img = render_arm(robot, q, size=cfg.image_size)
            Image.fromarray(img).save(rec_dir / "frames" / f"{k:06d}.png")
        recordings.append(f"{group}/{run}")
    manifest = DatasetManifest(
        root=root, layout_id=cfg.layout_id, profile=cfg.profile, joint_dim=robot.joint_dim,
        participants=participants, tasks=tasks, recordings=recordings, sample_count=int(sum(counts)),
        image_size=cfg.image_size, sync_tolerance=cfg.sync_tolerance, source=f"synthetic(seed={seed})",
    )
    manifest.save()
    return manifest
