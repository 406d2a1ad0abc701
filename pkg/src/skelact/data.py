"""Dataset ingestion, preprocessing, and the synthetic benchmark generator.

File formats (little-endian throughout):
  SKL1  magic "SKL1", u32 frames/joints/subjects/spine_index/label, then
        frames*subjects*joints*3 float64 joint coordinates, row-major.
  FTR1  magic "FTR1", u32 frames/width/label, then frames*width float64
        per-frame feature values, row-major. Width is fixed at 1536.

Preprocessing follows the recipe: pick 20 equally spaced frames, move every
subject's joints to spine-centered coordinates, and divide by the sequence
mean joint-to-spine distance so scale is normalized too.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ParseError

FEATURE_WIDTH = 1536
TARGET_FRAMES = 20

_SKL_MAGIC = b"SKL1"
_FTR_MAGIC = b"FTR1"


@dataclass
class RawSkeletonSample:
    positions: np.ndarray  # [T_raw, subjects, J, 3]
    joints_per_subject: int
    subjects: int
    spine_index: int
    label: int

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        expected = (self.positions.shape[0], self.subjects, self.joints_per_subject, 3)
        if self.positions.shape != expected:
            raise ContractError(
                f"skeleton positions shape {self.positions.shape} does not match {expected}"
            )
        if not 0 <= self.spine_index < self.joints_per_subject:
            raise ContractError(f"spine index {self.spine_index} outside joint range")
        if self.label < 0:
            raise ContractError(f"negative label {self.label}")


@dataclass
class FrameFeatureSequence:
    features: np.ndarray  # [T_raw, 1536]
    label: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[1] != FEATURE_WIDTH:
            raise ContractError(
                f"feature width must be {FEATURE_WIDTH}, got shape {self.features.shape}"
            )
        if not np.isfinite(self.features).all():
            raise ContractError("feature sequence contains non-finite values")


@dataclass
class SyntheticSpec:
    num_classes: int = 4
    samples_per_class: int = 50
    joints: int = 25
    frames: int = 32
    spine_index: int = 1
    base_frequency: float = 1.0
    frequency_gap: float = 0.75
    amplitude: float = 0.35
    noise_sigma: float = 0.04
    rgb_noise_sigma: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractError("synthetic benchmark needs at least 2 classes")
        if self.samples_per_class < 1 or self.joints < 2 or self.frames < 2:
            raise ContractError("synthetic spec sizes must be positive")
        if not 0 <= self.spine_index < self.joints:
            raise ContractError(f"spine index {self.spine_index} outside joint range")


@dataclass
class Sample:
    """One preprocessed dataset item; features may be absent for pose-only data."""
    pose: np.ndarray            # [20, J_eff, 3]
    features: np.ndarray | None  # [20, 1536]
    label: int


# ---------------------------------------------------------------------------
# preprocessing


def sample_frames(length, target=TARGET_FRAMES):
    """Equally spaced frame indices, nearest-frame duplication when short."""
    if length < 1:
        raise ContractError("cannot sample frames from an empty sequence")
    if target < 1:
        raise ContractError("target frame count must be positive")
    if target == 1:
        return [0]
    step = (length - 1) / (target - 1)
    return [int(np.floor(i * step + 0.5)) for i in range(target)]


def normalize_positions(positions, spine_index):
    """Spine-centered, scale-normalized coordinates for one subject [T, J, 3]."""
    spine = positions[:, spine_index:spine_index + 1, :]
    centered = positions - spine
    scale = np.sqrt((centered ** 2).sum(axis=2)).mean()
    if scale <= 0.0:
        raise ContractError("degenerate skeleton: every joint coincides with the spine, scale undefined")
    return centered / scale


def normalize_spine(sample):
    """Per-subject normalization; subjects are concatenated on the joint axis.

    Returns [T_raw, subjects*J, 3].
    """
    parts = [
        normalize_positions(sample.positions[:, s], sample.spine_index)
        for s in range(sample.subjects)
    ]
    return np.concatenate(parts, axis=1)


def preprocess_skeleton(sample, target=TARGET_FRAMES):
    """Frame sampling then normalization; yields the network's [target, J_eff, 3] pose."""
    indices = sample_frames(sample.positions.shape[0], target)
    clipped = RawSkeletonSample(
        sample.positions[indices],
        sample.joints_per_subject,
        sample.subjects,
        sample.spine_index,
        sample.label,
    )
    return normalize_spine(clipped)


def preprocess_features(fseq, target=TARGET_FRAMES):
    indices = sample_frames(fseq.features.shape[0], target)
    return fseq.features[indices]


# ---------------------------------------------------------------------------
# synthetic benchmark


def _synthetic_layout(spec):
    """Base skeleton and per-class motion parameters, all drawn from one stream."""
    rng = np.random.default_rng(spec.seed)
    base = rng.normal(size=(spec.joints, 3))
    classes = []
    for _ in range(spec.num_classes):
        amplitude = rng.uniform(0.5, 1.0, size=(spec.joints, 3)) * spec.amplitude
        amplitude[spec.spine_index] = 0.0  # keep the reference joint steady
        phase = rng.uniform(0.0, 2.0 * np.pi, size=(spec.joints, 3))
        centroid = rng.normal(size=FEATURE_WIDTH)
        classes.append((amplitude, phase, centroid))
    return rng, base, classes


def generate_raw(spec):
    """Raw (skeleton, features) pairs for writing to disk; deterministic in seed."""
    rng, base, classes = _synthetic_layout(spec)
    t_axis = np.arange(spec.frames) / spec.frames
    out = []
    for label in range(spec.num_classes):
        amplitude, phase, centroid = classes[label]
        freq = spec.base_frequency + label * spec.frequency_gap
        angle = 2.0 * np.pi * freq * t_axis[:, None, None] + phase[None]
        clean = base[None] + amplitude[None] * np.sin(angle)
        for _ in range(spec.samples_per_class):
            noise = rng.normal(scale=spec.noise_sigma, size=clean.shape) if spec.noise_sigma > 0 else 0.0
            positions = (clean + noise)[:, None, :, :]  # single subject
            skeleton = RawSkeletonSample(positions, spec.joints, 1, spec.spine_index, label)
            feat_noise = (
                rng.normal(scale=spec.rgb_noise_sigma, size=(spec.frames, FEATURE_WIDTH))
                if spec.rgb_noise_sigma > 0
                else np.zeros((spec.frames, FEATURE_WIDTH))
            )
            features = FrameFeatureSequence(centroid[None] + feat_noise, label)
            out.append((skeleton, features))
    return out


def generate_synthetic(spec, target=TARGET_FRAMES):
    """Preprocessed dataset of Sample items, samples_per_class per class."""
    return [
        Sample(preprocess_skeleton(skeleton, target), preprocess_features(features, target), label=skeleton.label)
        for skeleton, features in generate_raw(spec)
    ]


# ---------------------------------------------------------------------------
# binary formats


def write_skeleton_file(path, sample):
    frames = sample.positions.shape[0]
    header = struct.pack(
        "<5I", frames, sample.joints_per_subject, sample.subjects, sample.spine_index, sample.label
    )
    with open(path, "wb") as fh:
        fh.write(_SKL_MAGIC)
        fh.write(header)
        fh.write(np.ascontiguousarray(sample.positions, dtype="<f8").tobytes())


def _check_payload_finite(payload, payload_offset):
    bad = np.flatnonzero(~np.isfinite(payload))
    if bad.size:
        raise ParseError(f"non-finite value at byte offset {payload_offset + int(bad[0]) * 8}")


def load_skeleton_file(path):
    blob = open(path, "rb").read()
    if blob[:4] != _SKL_MAGIC:
        raise ParseError(f"{path}: bad magic at byte offset 0, expected SKL1")
    if len(blob) < 24:
        raise ParseError(f"{path}: truncated header at byte offset {len(blob)}")
    frames, joints, subjects, spine_index, label = struct.unpack("<5I", blob[4:24])
    if frames < 1 or joints < 1 or subjects < 1:
        raise ParseError(f"{path}: empty dimensions in header at byte offset 4")
    if spine_index >= joints:
        raise ParseError(f"{path}: spine index out of range at byte offset 16")
    count = frames * subjects * joints * 3
    expected = 24 + count * 8
    if len(blob) != expected:
        raise ParseError(
            f"{path}: payload ends at byte offset {len(blob)}, expected {expected}"
        )
    payload = np.frombuffer(blob, dtype="<f8", count=count, offset=24)
    _check_payload_finite(payload, 24)
    positions = payload.reshape(frames, subjects, joints, 3).copy()
    return RawSkeletonSample(positions, joints, subjects, spine_index, label)


def write_feature_file(path, fseq):
    frames = fseq.features.shape[0]
    header = struct.pack("<3I", frames, FEATURE_WIDTH, fseq.label)
    with open(path, "wb") as fh:
        fh.write(_FTR_MAGIC)
        fh.write(header)
        fh.write(np.ascontiguousarray(fseq.features, dtype="<f8").tobytes())


def load_feature_file(path):
    blob = open(path, "rb").read()
    if blob[:4] != _FTR_MAGIC:
        raise ParseError(f"{path}: bad magic at byte offset 0, expected FTR1")
    if len(blob) < 16:
        raise ParseError(f"{path}: truncated header at byte offset {len(blob)}")
    frames, width, label = struct.unpack("<3I", blob[4:16])
    if width != FEATURE_WIDTH:
        raise ParseError(f"{path}: feature width {width} at byte offset 8, must be {FEATURE_WIDTH}")
    if frames < 1:
        raise ParseError(f"{path}: empty frame count at byte offset 4")
    count = frames * width
    expected = 16 + count * 8
    if len(blob) != expected:
        raise ParseError(
            f"{path}: payload ends at byte offset {len(blob)}, expected {expected}"
        )
    payload = np.frombuffer(blob, dtype="<f8", count=count, offset=16)
    _check_payload_finite(payload, 16)
    return FrameFeatureSequence(payload.reshape(frames, width).copy(), label)


# ---------------------------------------------------------------------------
# NTU text import

_NTU_LABEL = re.compile(r"A(\d{3})")


def load_ntu_skeleton(path, joints=25, spine_index=1, max_subjects=2):
    """Import the NTU text layout; label comes from the A### tag in the name."""
    with open(path, "r") as fh:
        tokens = fh.read().split()
    cursor = 0

    def take(n):
        nonlocal cursor
        if cursor + n > len(tokens):
            raise ParseError(f"{path}: unexpected end of file at token {cursor}")
        chunk = tokens[cursor:cursor + n]
        cursor += n
        return chunk

    def take_int():
        token = take(1)[0]
        try:
            return int(token)
        except ValueError:
            raise ParseError(f"{path}: expected integer at token {cursor - 1}, got {token!r}") from None

    frame_count = take_int()
    if frame_count < 1:
        raise ParseError(f"{path}: no frames")
    positions = np.zeros((frame_count, max_subjects, joints, 3))
    seen_subjects = 1
    for t in range(frame_count):
        bodies = take_int()
        for b in range(bodies):
            take(10)  # body id and tracking fields
            joint_count = take_int()
            if joint_count != joints:
                raise ParseError(
                    f"{path}: frame {t} body {b} lists {joint_count} joints, expected {joints}"
                )
            for j in range(joints):
                values = take(12)  # x y z, depth/color coords, orientation, state
                if b < max_subjects:
                    try:
                        positions[t, b, j] = [float(v) for v in values[:3]]
                    except ValueError:
                        raise ParseError(f"{path}: bad coordinate near token {cursor}") from None
        seen_subjects = max(seen_subjects, min(bodies, max_subjects))
    match = _NTU_LABEL.search(str(path))
    label = int(match.group(1)) - 1 if match else 0
    return RawSkeletonSample(
        positions[:, :seen_subjects], joints, seen_subjects, spine_index, label
    )
