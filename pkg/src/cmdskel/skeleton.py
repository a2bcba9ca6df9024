"""Skeleton sequences: storage, modality derivation, augmentation, synthesis.

Frames are stored as a ``T x A x J x 3`` float array with ``A = 2`` actors;
a missing second actor is all zeros.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DegenerateInputError, ParameterError, ParseError, SchemaError

ACTORS = 2
FORMAT_NAME = "cmd-skel"
FORMAT_VERSION = 1
MODALITIES = ("joint", "motion", "bone")

# 25-joint layout following the NTU Kinect v2 ordering; joint 20 (spine
# shoulder) is the root.
NTU_PARENTS = (
    1, 20, 20, 2, 20, 4, 5, 6, 20, 8, 9, 10, 0,
    12, 13, 14, 0, 16, 17, 18, 20, 22, 7, 24, 11,
)  # fmt: skip
NTU_NAMES = (
    "spine_base", "spine_mid", "neck", "head",
    "shoulder_l", "elbow_l", "wrist_l", "hand_l",
    "shoulder_r", "elbow_r", "wrist_r", "hand_r",
    "hip_l", "knee_l", "ankle_l", "foot_l",
    "hip_r", "knee_r", "ankle_r", "foot_r",
    "spine_shoulder", "handtip_l", "thumb_l", "handtip_r", "thumb_r",
)  # fmt: skip


@dataclass
class SkeletonSequence:
    frames: np.ndarray
    label: int | None = None
    subject: int | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[1] != ACTORS or self.frames.shape[3] != 3:
            raise SchemaError(f"frames must be T x {ACTORS} x J x 3, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise SchemaError("frames contain non-finite coordinates")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_joints(self) -> int:
        return self.frames.shape[2]

    def features(self) -> np.ndarray:
        """Per-frame flattened coordinates, ``T x (2*J*3)``."""
        return self.frames.reshape(self.num_frames, -1)


@dataclass(frozen=True)
class SkeletonTopology:
    """Parent table of a joint forest; a root is its own parent."""

    parent: tuple[int, ...]
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        parent = tuple(int(p) for p in self.parent)
        object.__setattr__(self, "parent", parent)
        n = len(parent)
        if any(not 0 <= p < n for p in parent):
            raise SchemaError("parent index out of range")
        if self.names is not None and len(self.names) != n:
            raise SchemaError("names and parent table differ in length")
        # every joint must reach a root without revisiting a node
        for j in range(n):
            seen = set()
            k = j
            while parent[k] != k:
                if k in seen:
                    raise SchemaError(f"parent table has a cycle through joint {j}")
                seen.add(k)
                k = parent[k]

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    @property
    def roots(self) -> list[int]:
        return [j for j, p in enumerate(self.parent) if p == j]

    @classmethod
    def ntu25(cls) -> "SkeletonTopology":
        return cls(NTU_PARENTS, NTU_NAMES)

    @classmethod
    def chain(cls, n: int) -> "SkeletonTopology":
        return cls(tuple([0] + list(range(n - 1))))


def default_topology(joints: int) -> SkeletonTopology:
    return SkeletonTopology.ntu25() if joints == 25 else SkeletonTopology.chain(joints)


# -- modalities -------------------------------------------------------------


def motion_array(frames: np.ndarray, axis: int = 0) -> np.ndarray:
    """Forward difference along ``axis``; the last frame is zero."""
    n = frames.shape[axis]
    if n < 2:
        raise DegenerateInputError(f"motion needs at least 2 frames, got {n}")
    out = np.zeros_like(frames)
    body = np.diff(frames, axis=axis)
    index = [slice(None)] * frames.ndim
    index[axis] = slice(0, n - 1)
    out[tuple(index)] = body
    return out


def bone_array(frames: np.ndarray, topo: SkeletonTopology, joint_axis: int = -2) -> np.ndarray:
    """Child-minus-parent offsets; root joints map to zero."""
    if frames.shape[joint_axis] != topo.joint_count:
        raise SchemaError(
            f"topology has {topo.joint_count} joints, data has {frames.shape[joint_axis]}"
        )
    return frames - np.take(frames, topo.parent, axis=joint_axis)


def to_motion(seq: SkeletonSequence) -> SkeletonSequence:
    return replace(seq, frames=motion_array(seq.frames))


def to_bone(seq: SkeletonSequence, topo: SkeletonTopology) -> SkeletonSequence:
    return replace(seq, frames=bone_array(seq.frames, topo))


def derive(frames: np.ndarray, modality: str, topo: SkeletonTopology, time_axis: int = 0) -> np.ndarray:
    """Map joint coordinates to ``modality`` (``joint``, ``motion`` or ``bone``).

    ``frames`` may carry leading batch axes; joints are always the
    second-to-last axis.
    """
    if modality == "joint":
        return frames
    if modality == "motion":
        return motion_array(frames, axis=time_axis)
    if modality == "bone":
        return bone_array(frames, topo)
    raise ParameterError(f"unknown modality {modality!r}; expected one of {MODALITIES}")


# -- temporal resize and augmentation ---------------------------------------


def resize_array(frames: np.ndarray, target: int) -> np.ndarray:
    if target < 1:
        raise ParameterError(f"target length must be >= 1, got {target}")
    n = frames.shape[0]
    if n < 1:
        raise DegenerateInputError("cannot resize an empty sequence")
    if n == target:
        return frames.copy()
    if n == 1:
        return np.repeat(frames, target, axis=0)
    pos = np.linspace(0.0, n - 1, target) if target > 1 else np.zeros(1)
    lo = np.floor(pos).astype(int)
    lo = np.minimum(lo, n - 1)
    hi = np.minimum(lo + 1, n - 1)
    frac = (pos - lo).reshape((-1,) + (1,) * (frames.ndim - 1))
    out = frames[lo] * (1.0 - frac) + frames[hi] * frac
    # endpoints copied verbatim so they survive rounding
    out[0] = frames[0]
    if target > 1:
        out[-1] = frames[-1]
    return out


def resize_temporal(seq: SkeletonSequence, target_T: int) -> SkeletonSequence:
    return replace(seq, frames=resize_array(seq.frames, target_T))


@dataclass(frozen=True)
class AugmentConfig:
    """Augmentation ranges.

    Crop-and-resize is always applied; rotation, jitter and shear each fire
    with their own probability.  Angles are in degrees, jitter in meters.
    """

    target_frames: int = 64
    crop_min: float = 0.5
    crop_max: float = 1.0
    rotate_prob: float = 0.5
    rotate_deg: float = 17.0
    jitter_prob: float = 0.5
    jitter_std: float = 0.01
    shear_prob: float = 0.5
    shear: float = 0.3

    def __post_init__(self):
        if self.target_frames < 1:
            raise ParameterError("target_frames must be >= 1")
        if not 0 < self.crop_min <= self.crop_max <= 1:
            raise ParameterError("need 0 < crop_min <= crop_max <= 1")
        for name in ("rotate_prob", "jitter_prob", "shear_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ParameterError(f"{name} must lie in [0, 1]")
        if self.rotate_deg < 0 or self.jitter_std < 0 or self.shear < 0:
            raise ParameterError("augmentation magnitudes must be non-negative")

    @classmethod
    def identity(cls, target_frames: int = 64) -> "AugmentConfig":
        return cls(
            target_frames=target_frames, crop_min=1.0, crop_max=1.0,
            rotate_prob=0.0, jitter_prob=0.0, shear_prob=0.0,
        )  # fmt: skip


def rotation_matrix(angles: Sequence[float]) -> np.ndarray:
    """Rotation about x, then y, then z (radians)."""
    ax, ay, az = angles
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def augment_array(frames: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    n = frames.shape[0]
    frac = rng.uniform(cfg.crop_min, cfg.crop_max)
    length = min(n, max(1, int(round(frac * n))))
    start = int(rng.integers(0, n - length + 1))
    out = resize_array(frames[start : start + length], cfg.target_frames)

    present = np.any(out != 0, axis=(0, 2, 3))  # per actor
    if rng.uniform() < cfg.rotate_prob:
        angles = np.deg2rad(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg, size=3))
        out = out @ rotation_matrix(angles).T
    if rng.uniform() < cfg.shear_prob:
        s = rng.uniform(-cfg.shear, cfg.shear, size=6)
        shear = np.array([[1, s[0], s[1]], [s[2], 1, s[3]], [s[4], s[5], 1]])
        out = out @ shear.T
    if rng.uniform() < cfg.jitter_prob:
        noise = rng.normal(0.0, cfg.jitter_std, size=out.shape)
        # an absent actor stays exactly zero
        out = out + noise * present[None, :, None, None]
    return out


def augment(seq: SkeletonSequence, rng_seed: int, cfg: AugmentConfig) -> SkeletonSequence:
    rng = np.random.default_rng(rng_seed)
    return replace(seq, frames=augment_array(seq.frames, rng, cfg))


# -- synthetic data -----------------------------------------------------------


def rest_pose(topo: SkeletonTopology, rng: np.random.Generator) -> np.ndarray:
    """Place joints by walking bones of random length (0.1-0.3 m) down the tree."""
    n = topo.joint_count
    pose = np.zeros((n, 3))
    placed = [False] * n
    for r in topo.roots:
        placed[r] = True
    while not all(placed):
        for j in range(n):
            p = topo.parent[j]
            if not placed[j] and placed[p]:
                direction = rng.normal(size=3)
                direction /= np.linalg.norm(direction)
                pose[j] = pose[p] + direction * rng.uniform(0.1, 0.3)
                placed[j] = True
    return pose


def synth_generate(
    classes: int,
    per_class: int,
    T: int = 64,
    J: int = 25,
    noise: float = 0.05,
    rng_seed: int = 0,
    topology: SkeletonTopology | None = None,
    motion_amplitude: float = 0.15,
    pose_offset: float = 0.08,
) -> list[SkeletonSequence]:
    """Labelled synthetic clips, one parametric motion pattern per class.

    Class ``c`` owns per-joint, per-axis sinusoid frequencies (1-3 cycles per
    clip), phases and amplitudes plus a static pose offset.  Each sample
    draws a global phase shift, then Gaussian noise of std ``noise`` is added
    to every coordinate of the first actor.  The second actor is absent.
    Samples are ordered class by class.
    """
    if min(classes, per_class, T, J) < 1:
        raise ParameterError("classes, per_class, T and J must all be >= 1")
    topo = topology or default_topology(J)
    if topo.joint_count != J:
        raise SchemaError(f"topology has {topo.joint_count} joints, expected {J}")
    rng = np.random.default_rng(rng_seed)
    base = rest_pose(topo, rng)
    t = np.arange(T)[:, None, None] / T

    patterns = []
    for _ in range(classes):
        patterns.append(
            dict(
                freq=rng.uniform(1.0, 3.0, size=(J, 3)),
                phase=rng.uniform(0.0, 2 * np.pi, size=(J, 3)),
                amp=rng.uniform(0.2, 1.0, size=(J, 3)) * motion_amplitude,
                offset=rng.normal(0.0, pose_offset, size=(J, 3)),
            )
        )

    out = []
    for c, pat in enumerate(patterns):
        for _ in range(per_class):
            shift = rng.uniform(0.0, 2 * np.pi)
            actor = base + pat["offset"] + pat["amp"] * np.sin(
                2 * np.pi * pat["freq"] * t + pat["phase"] + shift
            )
            if noise > 0:
                actor = actor + rng.normal(0.0, noise, size=actor.shape)
            frames = np.zeros((T, ACTORS, J, 3))
            frames[:, 0] = actor
            out.append(SkeletonSequence(frames, label=c))
    return out


def split_dataset(
    seqs: Sequence[SkeletonSequence], test_per_class: int, rng_seed: int = 0
) -> tuple[list[SkeletonSequence], list[SkeletonSequence]]:
    """Hold out ``test_per_class`` samples of every label, shuffled per class."""
    rng = np.random.default_rng(rng_seed)
    by_label: dict[int | None, list[int]] = {}
    for i, s in enumerate(seqs):
        by_label.setdefault(s.label, []).append(i)
    test_idx: set[int] = set()
    for idx in by_label.values():
        picked = rng.permutation(idx)[:test_per_class]
        test_idx.update(int(i) for i in picked)
    train = [s for i, s in enumerate(seqs) if i not in test_idx]
    test = [s for i, s in enumerate(seqs) if i in test_idx]
    return train, test


# -- file format ---------------------------------------------------------------


def save_dataset(path: str | Path, seqs: Iterable[SkeletonSequence], joints: int | None = None) -> None:
    seqs = list(seqs)
    if joints is None:
        if not seqs:
            raise SchemaError("joint count needed to write an empty dataset")
        joints = seqs[0].num_joints
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "joints": joints, "actors": ACTORS}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for s in seqs:
            if s.num_joints != joints:
                raise SchemaError(f"sequence has {s.num_joints} joints, file declares {joints}")
            rec = {"label": s.label, "subject": s.subject, "frames": s.frames.tolist()}
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path: str | Path) -> list[SkeletonSequence]:
    """Read a ``cmd-skel`` JSON-lines file.

    An empty file yields an empty list.  Otherwise the first line must be the
    format header and each following non-blank line one record.
    """
    seqs: list[SkeletonSequence] = []
    joints = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("record is not a JSON object", line=lineno)
            if joints is None:
                if obj.get("format") != FORMAT_NAME:
                    raise ParseError(f"expected {FORMAT_NAME!r} header", line=lineno)
                if obj.get("version") != FORMAT_VERSION:
                    raise ParseError(f"unsupported version {obj.get('version')!r}", line=lineno)
                if obj.get("actors", ACTORS) != ACTORS:
                    raise SchemaError(f"line {lineno}: only {ACTORS}-actor data is supported")
                joints = int(obj["joints"])
                continue
            if "frames" not in obj:
                raise ParseError("record has no 'frames'", line=lineno)
            try:
                frames = np.asarray(obj["frames"], dtype=np.float64)
            except (ValueError, TypeError):
                raise ParseError("frames are not a rectangular numeric array", line=lineno) from None
            if frames.ndim != 4 or frames.shape[1] != ACTORS or frames.shape[3] != 3:
                raise SchemaError(f"line {lineno}: frames must be T x {ACTORS} x J x 3, got {frames.shape}")
            if frames.shape[2] != joints:
                raise SchemaError(f"line {lineno}: {frames.shape[2]} joints, header declares {joints}")
            label = obj.get("label")
            subject = obj.get("subject")
            seqs.append(
                SkeletonSequence(
                    frames,
                    label=None if label is None else int(label),
                    subject=None if subject is None else int(subject),
                )
            )
    return seqs


def batch_frames(seqs: Sequence[SkeletonSequence]) -> np.ndarray:
    """Stack equal-length sequences into ``B x T x A x J x 3``."""
    return np.stack([s.frames for s in seqs])
