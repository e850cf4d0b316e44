"""Gesture data model: skeletons, sequences, windowing, stitching, and file IO.

Motion is stored as per-joint axis-angle rotations, one (x, y, z) triple per
joint per frame, so a sequence is an N x J x 3 float64 array.  Audio features
ride alongside as an N x D array aligned frame-for-frame with the motion.

The on-disk container is deliberately dumb: a short ASCII header (version,
shape, fps, joint names, parents) terminated by ``end_header``, followed by a
raw little-endian float64 blob.  Anything can parse it, and round-trips are
lossless at 64-bit precision.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, ConfigError, ParseError

_FINGERS = ("thumb", "index", "middle", "ring", "pinky")

JOINT_GROUPS = ("none", "all", "body", "left_hand", "right_hand", "hands")


@dataclass(frozen=True)
class SkeletonSpec:
    """Joint names plus parent indices (-1 marks a root)."""

    joint_names: tuple
    parent_index: tuple

    def __post_init__(self):
        names = tuple(self.joint_names)
        parents = tuple(int(p) for p in self.parent_index)
        object.__setattr__(self, "joint_names", names)
        object.__setattr__(self, "parent_index", parents)
        if len(names) != len(set(names)):
            raise ConfigError("skeleton joint names must be unique")
        if len(parents) != len(names):
            raise ConfigError(
                f"skeleton has {len(names)} names but {len(parents)} parent entries"
            )
        for i, p in enumerate(parents):
            if p != -1 and not (0 <= p < i):
                # parents must precede children, which also rules out cycles
                raise ConfigError(
                    f"joint {i} ({names[i]!r}) has invalid parent index {p}"
                )

    @property
    def joint_count(self):
        return len(self.joint_names)


def _hand_joints(side):
    names, parents = [], []
    for finger in _FINGERS:
        segments = 3 if finger == "thumb" else 4
        for k in range(1, segments + 1):
            names.append(f"{side}_{finger}_{k}")
            parents.append(f"{side}_{finger}_{k - 1}" if k > 1 else f"{side}_forearm")
    return names, parents


def default_skeleton() -> SkeletonSpec:
    """47-joint upper body: 9 body joints plus 19 joints per hand."""
    names = [
        "spine",
        "neck",
        "head",
        "left_shoulder",
        "left_upper_arm",
        "left_forearm",
        "right_shoulder",
        "right_upper_arm",
        "right_forearm",
    ]
    parent_name = {
        "spine": None,
        "neck": "spine",
        "head": "neck",
        "left_shoulder": "spine",
        "left_upper_arm": "left_shoulder",
        "left_forearm": "left_upper_arm",
        "right_shoulder": "spine",
        "right_upper_arm": "right_shoulder",
        "right_forearm": "right_upper_arm",
    }
    for side in ("left", "right"):
        hand_names, hand_parents = _hand_joints(side)
        names.extend(hand_names)
        parent_name.update(zip(hand_names, hand_parents))
    index = {n: i for i, n in enumerate(names)}
    parents = [-1 if parent_name[n] is None else index[parent_name[n]] for n in names]
    return SkeletonSpec(tuple(names), tuple(parents))


def generic_skeleton(joint_count: int) -> SkeletonSpec:
    """Unnamed chain skeleton for reduced-size experiments."""
    if joint_count < 1:
        raise ConfigError(f"skeleton needs at least one joint, got {joint_count}")
    names = tuple(f"joint_{i}" for i in range(joint_count))
    parents = tuple(i - 1 for i in range(joint_count))
    return SkeletonSpec(names, parents)


def joint_group_mask(skeleton: SkeletonSpec, group: str) -> np.ndarray:
    """Boolean mask of length J selecting a named joint group.

    Hands are recognized by name convention (side prefix plus a finger
    segment), so the groups work for any skeleton that follows it.
    """
    if group not in JOINT_GROUPS:
        raise ConfigError(f"unknown joint group {group!r}; expected one of {JOINT_GROUPS}")
    names = skeleton.joint_names
    def is_hand(name, side):
        return name.startswith(side + "_") and any(f"_{f}_" in name for f in _FINGERS)

    left = np.array([is_hand(n, "left") for n in names])
    right = np.array([is_hand(n, "right") for n in names])
    if group == "none":
        return np.zeros(len(names), dtype=bool)
    if group == "all":
        return np.ones(len(names), dtype=bool)
    if group == "left_hand":
        return left
    if group == "right_hand":
        return right
    if group == "hands":
        return left | right
    return ~(left | right)  # body


@dataclass
class GestureSequence:
    """N x J x 3 axis-angle rotations at a fixed frame rate."""

    frames: np.ndarray
    fps: float = 15.0
    skeleton: SkeletonSpec = field(default_factory=default_skeleton)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise DimensionError(
                f"gesture frames must be (N, J, 3), got {self.frames.shape}"
            )
        if self.frames.shape[0] < 1:
            raise DimensionError("gesture sequence needs at least one frame")
        if self.frames.shape[1] != self.skeleton.joint_count:
            raise DimensionError(
                f"frames have {self.frames.shape[1]} joints but skeleton defines "
                f"{self.skeleton.joint_count}"
            )
        if not np.all(np.isfinite(self.frames)):
            raise DimensionError("gesture frames contain non-finite values")
        self.fps = float(self.fps)

    @property
    def n_frames(self):
        return self.frames.shape[0]

    @property
    def n_joints(self):
        return self.frames.shape[1]

    def channels(self) -> np.ndarray:
        """View the sequence as (N, J*3) flat channels."""
        return self.frames.reshape(self.n_frames, -1)

    def with_frames(self, frames) -> "GestureSequence":
        return GestureSequence(frames, fps=self.fps, skeleton=self.skeleton)


@dataclass
class AudioFeatureSequence:
    """N x D audio feature matrix aligned with a gesture sequence."""

    features: np.ndarray
    source_rate_hz: float = 15.0

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DimensionError(
                f"audio features must be (N, D), got {self.features.shape}"
            )
        if self.features.shape[0] < 1:
            raise DimensionError("audio feature sequence needs at least one frame")
        if not np.all(np.isfinite(self.features)):
            raise DimensionError("audio features contain non-finite values")
        self.source_rate_hz = float(self.source_rate_hz)

    @property
    def n_frames(self):
        return self.features.shape[0]

    @property
    def n_channels(self):
        return self.features.shape[1]


def canonicalize_rotations(frames: np.ndarray) -> np.ndarray:
    """Wrap axis-angle rotations to angle in (-pi, pi]; identity when already there."""
    v = np.asarray(frames, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    wrapped = np.mod(theta, 2.0 * np.pi)
    wrapped = np.where(wrapped > np.pi, wrapped - 2.0 * np.pi, wrapped)
    scale = np.divide(wrapped, theta, out=np.ones_like(theta), where=theta > 0)
    return v * scale


# ---------------------------------------------------------------------------
# container IO
# ---------------------------------------------------------------------------

_MOTION_MAGIC = "GSYNMOT"
_AUDIO_MAGIC = "GSYNAUD"
_VERSION = "v1"


class _HeaderReader:
    """Line reader over raw bytes that remembers byte offsets for errors."""

    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.offset = 0

    def fail(self, message, at=None):
        where = self.offset if at is None else at
        raise ParseError(f"{self.path}: {message}", offset=where)

    def line(self):
        start = self.offset
        end = self.data.find(b"\n", start)
        if end < 0:
            self.fail("truncated header (missing newline)", at=start)
        raw = self.data[start:end]
        self.offset = end + 1
        try:
            return raw.decode("ascii"), start
        except UnicodeDecodeError:
            self.fail("header is not ASCII", at=start)

    def expect_fields(self, spec):
        """Parse a line like 'frames 10 joints 47' against [(key, conv), ...]."""
        text, start = self.line()
        parts = text.split()
        if len(parts) != 2 * len(spec):
            self.fail(f"malformed header line {text!r}", at=start)
        out = []
        for i, (key, conv) in enumerate(spec):
            if parts[2 * i] != key:
                self.fail(f"expected field {key!r}, found {parts[2 * i]!r}", at=start)
            try:
                out.append(conv(parts[2 * i + 1]))
            except ValueError:
                self.fail(f"bad value for {key!r}: {parts[2 * i + 1]!r}", at=start)
        return out


def _read_blob(reader, count):
    text, start = reader.line()
    parts = text.split()
    if len(parts) != 4 or parts[:3] != ["data", "float64", "le"]:
        reader.fail(f"malformed data line {text!r}", at=start)
    try:
        nbytes = int(parts[3])
    except ValueError:
        reader.fail(f"bad byte count {parts[3]!r}", at=start)
    text, start = reader.line()
    if text != "end_header":
        reader.fail(f"expected end_header, found {text!r}", at=start)
    blob_start = reader.offset
    blob = reader.data[blob_start:]
    if nbytes != count * 8:
        reader.fail(
            f"header declares {nbytes} data bytes but shape needs {count * 8}",
            at=blob_start,
        )
    if len(blob) != nbytes:
        reader.fail(
            f"expected {nbytes} data bytes, file holds {len(blob)}", at=blob_start
        )
    return np.frombuffer(blob, dtype="<f8")


def _check_magic(reader, magic):
    text, start = reader.line()
    parts = text.split()
    if len(parts) != 2 or parts[0] != magic:
        reader.fail(f"not a {magic} container (header {text!r})", at=start)
    if parts[1] != _VERSION:
        reader.fail(f"unsupported container version {parts[1]!r}", at=start)


def save_motion(seq: GestureSequence, path) -> None:
    """Write a gesture sequence to the self-describing motion container."""
    n, j = seq.n_frames, seq.n_joints
    blob = np.ascontiguousarray(seq.frames, dtype="<f8").tobytes()
    header = "\n".join(
        [
            f"{_MOTION_MAGIC} {_VERSION}",
            f"frames {n} joints {j} fps {seq.fps!r}",
            "names " + " ".join(seq.skeleton.joint_names),
            "parents " + " ".join(str(p) for p in seq.skeleton.parent_index),
            f"data float64 le {len(blob)}",
            "end_header",
            "",
        ]
    )
    Path(path).write_bytes(header.encode("ascii") + blob)


def load_motion(path) -> GestureSequence:
    """Read a motion container; malformed input raises ParseError with a byte offset."""
    reader = _HeaderReader(Path(path).read_bytes(), path)
    _check_magic(reader, _MOTION_MAGIC)
    n, j, fps = reader.expect_fields([("frames", int), ("joints", int), ("fps", float)])
    if n < 1:
        reader.fail("frame count must be at least 1", at=0)
    names_text, start = reader.line()
    if not names_text.startswith("names "):
        reader.fail(f"expected names line, found {names_text!r}", at=start)
    names = tuple(names_text.split()[1:])
    if len(names) != j:
        reader.fail(f"header declares {j} joints but lists {len(names)} names", at=start)
    parents_text, start = reader.line()
    if not parents_text.startswith("parents "):
        reader.fail(f"expected parents line, found {parents_text!r}", at=start)
    try:
        parents = tuple(int(p) for p in parents_text.split()[1:])
    except ValueError:
        reader.fail("parent indices must be integers", at=start)
    if len(parents) != j:
        reader.fail(
            f"header declares {j} joints but lists {len(parents)} parents", at=start
        )
    flat = _read_blob(reader, n * j * 3)
    try:
        skeleton = SkeletonSpec(names, parents)
    except ConfigError as exc:
        reader.fail(str(exc), at=0)
    return GestureSequence(flat.reshape(n, j, 3).copy(), fps=fps, skeleton=skeleton)


def save_audio(seq: AudioFeatureSequence, path) -> None:
    """Write audio features to the companion container format."""
    n, d = seq.features.shape
    blob = np.ascontiguousarray(seq.features, dtype="<f8").tobytes()
    header = "\n".join(
        [
            f"{_AUDIO_MAGIC} {_VERSION}",
            f"frames {n} channels {d} rate {seq.source_rate_hz!r}",
            f"data float64 le {len(blob)}",
            "end_header",
            "",
        ]
    )
    Path(path).write_bytes(header.encode("ascii") + blob)


def load_audio(path) -> AudioFeatureSequence:
    reader = _HeaderReader(Path(path).read_bytes(), path)
    _check_magic(reader, _AUDIO_MAGIC)
    n, d, rate = reader.expect_fields(
        [("frames", int), ("channels", int), ("rate", float)]
    )
    flat = _read_blob(reader, n * d)
    return AudioFeatureSequence(flat.reshape(n, d).copy(), source_rate_hz=rate)


def export_motion_csv(seq: GestureSequence, path) -> None:
    """One row per frame, columns <joint>_x, <joint>_y, <joint>_z."""
    header = [
        f"{name}_{axis}" for name in seq.skeleton.joint_names for axis in "xyz"
    ]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame"] + header)
        for i, row in enumerate(seq.channels()):
            writer.writerow([i] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# windowing / stitching
# ---------------------------------------------------------------------------


def window_starts(length: int, n_clip: int, stride: int):
    """Clip start offsets 0, stride, 2*stride, ... with the remainder dropped."""
    if length < n_clip:
        return []
    return list(range(0, length - n_clip + 1, stride))


def window(seq: GestureSequence, n_clip: int = 34, stride: int = 10):
    """Cut a sequence into fixed-length clips; short input warns and yields []."""
    if stride < 1 or n_clip < 1:
        raise ConfigError(f"n_clip and stride must be positive, got {n_clip}, {stride}")
    starts = window_starts(seq.n_frames, n_clip, stride)
    if not starts:
        warnings.warn(
            f"sequence of {seq.n_frames} frames is shorter than the "
            f"{n_clip}-frame clip window; no clips produced",
            stacklevel=2,
        )
        return []
    return [seq.with_frames(seq.frames[s : s + n_clip].copy()) for s in starts]


def crossfade_weights(overlap: int) -> np.ndarray:
    """Incoming-clip blend weights (i+1)/(overlap+1) for i in [0, overlap)."""
    return (np.arange(overlap, dtype=np.float64) + 1.0) / (overlap + 1.0)


def stitch(clips, overlap: int = 4) -> GestureSequence:
    """Concatenate clips, linearly crossfading each overlap-frame seam."""
    if not clips:
        raise ConfigError("stitch needs at least one clip")
    if overlap < 0:
        raise ConfigError(f"overlap must be non-negative, got {overlap}")
    for clip in clips:
        if overlap >= clip.n_frames:
            raise ConfigError(
                f"overlap {overlap} must be smaller than every clip "
                f"(found a {clip.n_frames}-frame clip)"
            )
    first = clips[0]
    out = first.frames.copy()
    w = crossfade_weights(overlap).reshape(-1, 1, 1)
    for clip in clips[1:]:
        if clip.n_joints != first.n_joints:
            raise DimensionError(
                f"cannot stitch clips with {first.n_joints} and {clip.n_joints} joints"
            )
        if overlap:
            out[-overlap:] = out[-overlap:] * (1.0 - w) + clip.frames[:overlap] * w
        out = np.concatenate([out, clip.frames[overlap:]], axis=0)
    return first.with_frames(out)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


@dataclass
class DatasetStats:
    """Per-channel mean and standard deviation over a training corpus."""

    mean: np.ndarray
    std: np.ndarray

    STD_FLOOR = 1e-6

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if std.shape != self.mean.shape:
            raise DimensionError(
                f"stats mean has {self.mean.shape[0]} channels, std {std.shape[0]}"
            )
        self.std = np.maximum(std, self.STD_FLOOR)

    @classmethod
    def compute(cls, arrays) -> "DatasetStats":
        """Fit stats over a list of (N_i, C) arrays stacked along time."""
        stacked = np.concatenate([np.asarray(a, dtype=np.float64) for a in arrays], axis=0)
        return cls(stacked.mean(axis=0), stacked.std(axis=0))

    @property
    def n_channels(self):
        return self.mean.shape[0]

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))


def _apply_channelwise(x, n_channels, fn):
    arr = np.asarray(x, dtype=np.float64)
    flat = arr.reshape(arr.shape[0], -1) if arr.ndim != 2 else arr
    if flat.shape[1] != n_channels:
        raise DimensionError(
            f"data has {flat.shape[1]} channels but stats were fit on {n_channels}"
        )
    return fn(flat).reshape(arr.shape)


def normalize(seq, stats: DatasetStats):
    """Map data to zero mean / unit variance per channel under `stats`."""
    fn = lambda flat: (flat - stats.mean) / stats.std
    if isinstance(seq, GestureSequence):
        return seq.with_frames(_apply_channelwise(seq.frames, stats.n_channels, fn))
    if isinstance(seq, AudioFeatureSequence):
        return AudioFeatureSequence(
            _apply_channelwise(seq.features, stats.n_channels, fn),
            source_rate_hz=seq.source_rate_hz,
        )
    return _apply_channelwise(seq, stats.n_channels, fn)


def denormalize(seq, stats: DatasetStats):
    """Inverse of :func:`normalize`."""
    fn = lambda flat: flat * stats.std + stats.mean
    if isinstance(seq, GestureSequence):
        return seq.with_frames(_apply_channelwise(seq.frames, stats.n_channels, fn))
    if isinstance(seq, AudioFeatureSequence):
        return AudioFeatureSequence(
            _apply_channelwise(seq.features, stats.n_channels, fn),
            source_rate_hz=seq.source_rate_hz,
        )
    return _apply_channelwise(seq, stats.n_channels, fn)


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------


def random_proportional_mask(n, ratio_range, rng, mode: str = "suffix") -> np.ndarray:
    """Mark round(ratio * n) frames masked, ratio drawn uniformly from ratio_range.

    `suffix` masks a contiguous tail (emulating shorter sequences); `scatter`
    masks a uniform random subset.  True means masked.
    """
    lo, hi = float(ratio_range[0]), float(ratio_range[1])
    if not (0.0 <= lo <= hi < 1.0):
        raise ConfigError(f"mask ratio range must lie within [0, 1), got ({lo}, {hi})")
    if mode not in ("suffix", "scatter"):
        raise ConfigError(f"unknown mask mode {mode!r}")
    ratio = lo if lo == hi else float(rng.uniform(lo, hi))
    count = int(round(ratio * n))
    mask = np.zeros(n, dtype=bool)
    if count == 0:
        return mask
    if mode == "suffix":
        mask[n - count :] = True
    else:
        mask[rng.choice(n, size=count, replace=False)] = True
    return mask
