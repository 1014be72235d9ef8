"""Core data types, the SEMB embedding file format, and dataset manifests.

All numeric payloads are float64 in memory and float32 on disk. Types are
immutable after construction; invariants are checked when objects are built.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SEMB_MAGIC = b"SEMB"
SEMB_VERSION = 1
SEMB_HEADER = struct.Struct("<4sHHII")  # magic, version, kind, length, dim

KINDS = ("video", "phrases", "step_texts", "slots")
BACKGROUND = -1


class StepalignError(Exception):
    """Base class for all package errors."""


class DataError(StepalignError):
    """Malformed inputs: files, manifests, shapes, invariant violations."""


class BadMagicError(DataError):
    pass


class UnsupportedVersionError(DataError):
    pass


class TruncatedPayloadError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class EmptyShapeError(DataError):
    pass


class NumericalError(StepalignError):
    """Non-finite values produced during computation."""


def _as_float64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"expected a 2-d array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class EmbeddingSequence:
    """An ordered sequence of d-dimensional vectors, shape (length, dim)."""

    data: np.ndarray
    kind: str

    def __post_init__(self):
        arr = _as_float64(self.data)
        if self.kind not in KINDS:
            raise DataError(f"unknown kind {self.kind!r}, expected one of {KINDS}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise EmptyShapeError(f"embedding sequence needs length>=1 and dim>=1, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("embedding sequence contains NaN or Inf")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def length(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def scaled(self, factor: float) -> "EmbeddingSequence":
        return EmbeddingSequence(self.data * factor, self.kind)


def write_embedding_file(seq: EmbeddingSequence, path) -> None:
    """Serialize `seq` to the SEMB binary format (float32 payload)."""
    if not isinstance(seq, EmbeddingSequence):
        raise DataError("write_embedding_file expects an EmbeddingSequence")
    if not np.isfinite(seq.data).all():
        # construction already forbids this; re-check so nothing is written
        raise NonFiniteError("refusing to write non-finite values")
    header = SEMB_HEADER.pack(SEMB_MAGIC, SEMB_VERSION, KINDS.index(seq.kind), seq.length, seq.dim)
    payload = seq.data.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_embedding_file(path) -> EmbeddingSequence:
    """Read a SEMB file back into a float64 EmbeddingSequence."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < SEMB_HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the 16-byte header")
    magic, version, kind_code, length, dim = SEMB_HEADER.unpack_from(raw, 0)
    if magic != SEMB_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != SEMB_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    if kind_code >= len(KINDS):
        raise DataError(f"{path}: unknown kind code {kind_code}")
    if length == 0 or dim == 0:
        raise EmptyShapeError(f"{path}: zero length or dim in header")
    expected = SEMB_HEADER.size + 4 * length * dim
    if len(raw) != expected:
        raise TruncatedPayloadError(f"{path}: expected {expected} bytes, found {len(raw)}")
    values = np.frombuffer(raw, dtype="<f4", offset=SEMB_HEADER.size).astype(np.float64)
    values = values.reshape(length, dim)
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{path}: payload contains NaN or Inf")
    return EmbeddingSequence(values, KINDS[kind_code])


@dataclass(frozen=True)
class DatasetSample:
    """One video with its phrase sequence and optional planted ground truth.

    gt_segments are inclusive frame ranges (step_id, start, end), sorted and
    non-overlapping. gt_step_texts follow the temporal order of the segments.
    """

    id: str
    video: EmbeddingSequence
    phrases: EmbeddingSequence
    gt_segments: tuple | None = None
    gt_step_texts: EmbeddingSequence | None = None
    phrase_relevance: tuple | None = None
    task: str | None = None

    def __post_init__(self):
        if self.video.kind != "video" or self.phrases.kind != "phrases":
            raise DataError("sample requires video/phrases kinds")
        if self.gt_segments is not None:
            segs = tuple((int(s), int(a), int(b)) for s, a, b in self.gt_segments)
            prev_end = -1
            for step_id, start, end in segs:
                if not (0 <= start <= end < self.video.length):
                    raise DataError(f"{self.id}: segment ({step_id},{start},{end}) out of range")
                if start <= prev_end:
                    raise DataError(f"{self.id}: segments overlap or are unsorted")
                prev_end = end
            object.__setattr__(self, "gt_segments", segs)
        if self.gt_step_texts is not None and self.gt_step_texts.kind != "step_texts":
            raise DataError("gt_step_texts must have kind=step_texts")
        if self.phrase_relevance is not None:
            mask = tuple(bool(b) for b in self.phrase_relevance)
            if len(mask) != self.phrases.length:
                raise DataError(f"{self.id}: phrase_relevance length mismatch")
            object.__setattr__(self, "phrase_relevance", mask)


@dataclass(frozen=True)
class Correspondence:
    """Binary alignment between K row elements and N column elements.

    match_matrix[i, j] == 1 means row i matches column j. Rows/columns in the
    drop sets are all-zero; every other row/column has at least one match.
    """

    match_matrix: np.ndarray
    total_cost: float
    dropped_rows: frozenset
    dropped_cols: frozenset
    mode: str

    def __post_init__(self):
        m = np.asarray(self.match_matrix)
        if m.ndim != 2:
            raise DataError("match_matrix must be 2-d")
        if not np.isin(m, (0, 1)).all():
            raise DataError("match_matrix entries must be 0/1")
        m = m.astype(np.int8)
        m.flags.writeable = False
        object.__setattr__(self, "match_matrix", m)
        object.__setattr__(self, "dropped_rows", frozenset(int(i) for i in self.dropped_rows))
        object.__setattr__(self, "dropped_cols", frozenset(int(j) for j in self.dropped_cols))
        object.__setattr__(self, "total_cost", float(self.total_cost))
        _check_correspondence(m, self.dropped_rows, self.dropped_cols, self.mode)

    @property
    def matches(self) -> list[tuple[int, int]]:
        """Matched (row, col) pairs in row-major order."""
        rows, cols = np.nonzero(self.match_matrix)
        return list(zip(rows.tolist(), cols.tolist()))

    @property
    def num_matches(self) -> int:
        return int(self.match_matrix.sum())


def _check_correspondence(m, dropped_rows, dropped_cols, mode):
    if mode not in ("one_to_one", "many_to_one", "many_to_many"):
        raise DataError(f"unknown correspondence mode {mode!r}")
    K, N = m.shape
    row_sums = m.sum(axis=1)
    col_sums = m.sum(axis=0)
    for i in range(K):
        if (i in dropped_rows) != (row_sums[i] == 0):
            raise DataError(f"row {i}: drop flag and match count disagree")
    for j in range(N):
        if (j in dropped_cols) != (col_sums[j] == 0):
            raise DataError(f"col {j}: drop flag and match count disagree")
    if mode == "one_to_one" and (row_sums > 1).any():
        raise DataError("one_to_one forbids multiple matches per row")
    if mode in ("one_to_one", "many_to_one") and (col_sums > 1).any():
        raise DataError(f"{mode} forbids multiple matches per column")
    # non-crossing: matched column blocks of successive matched rows must not
    # interleave; equality is allowed only in many_to_many (shared columns)
    strict = mode != "many_to_many"
    prev_max = -1
    for i in range(K):
        cols = np.nonzero(m[i])[0]
        if cols.size == 0:
            continue
        lo, hi = int(cols[0]), int(cols[-1])
        if lo < prev_max or (strict and lo == prev_max):
            raise DataError(f"row {i}: matches cross a previous row")
        prev_max = hi


@dataclass(frozen=True)
class SegmentLabeling:
    """Per-frame labels plus (label, start, end) segments, background = -1."""

    frame_labels: tuple
    segments: tuple

    def __post_init__(self):
        labels = tuple(int(v) for v in self.frame_labels)
        segs = tuple((int(l), int(s), int(e)) for l, s, e in self.segments)
        n = len(labels)
        prev_end = -1
        for label, start, end in segs:
            if label == BACKGROUND:
                raise DataError("segments cannot carry the background label")
            if not (0 <= start <= end < n):
                raise DataError(f"segment ({label},{start},{end}) outside 0..{n - 1}")
            if start <= prev_end:
                raise DataError("segments overlap or are unsorted")
            prev_end = end
        covering = [BACKGROUND] * n
        for label, start, end in segs:
            for j in range(start, end + 1):
                covering[j] = label
        for j, label in enumerate(labels):
            if label != BACKGROUND and covering[j] != label:
                raise DataError(f"frame {j} labeled {label} outside its segment")
        object.__setattr__(self, "frame_labels", labels)
        object.__setattr__(self, "segments", segs)

    @property
    def num_frames(self) -> int:
        return len(self.frame_labels)

    @staticmethod
    def from_frame_labels(labels) -> "SegmentLabeling":
        """Build a labeling whose segments are the maximal same-label runs."""
        labels = [int(v) for v in labels]
        segs = frame_labels_to_segments(labels)
        return SegmentLabeling(tuple(labels), tuple(segs))

    @staticmethod
    def from_segments(segments, num_frames: int) -> "SegmentLabeling":
        labels = segments_to_frame_labels(segments, num_frames)
        return SegmentLabeling(tuple(labels), tuple(segments))


def frame_labels_to_segments(labels) -> list[tuple[int, int, int]]:
    """Maximal contiguous runs of equal non-background labels."""
    segs = []
    start = None
    current = BACKGROUND
    for j, label in enumerate(labels):
        if label != current:
            if current != BACKGROUND:
                segs.append((current, start, j - 1))
            start = j
            current = label
    if current != BACKGROUND:
        segs.append((current, start, len(labels) - 1))
    return segs


def segments_to_frame_labels(segments, num_frames: int) -> list[int]:
    labels = [BACKGROUND] * num_frames
    for label, start, end in segments:
        for j in range(start, end + 1):
            labels[j] = label
    return labels


# --- dataset manifests ------------------------------------------------------

@dataclass(frozen=True)
class TaskInfo:
    name: str
    num_steps: int
    prototypes: str | None = None  # relative path to a step_texts SEMB file


@dataclass(frozen=True)
class Manifest:
    samples: tuple
    tasks: dict = field(default_factory=dict)


def save_manifest(manifest_path, entries: list[dict], tasks: dict | None = None) -> None:
    """Write the dataset manifest. `entries` hold relative paths and inline
    ground-truth arrays; `tasks` maps task name -> {num_steps, prototypes}."""
    doc = {"samples": entries}
    if tasks:
        doc["tasks"] = tasks
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_manifest(manifest_path) -> Manifest:
    path = Path(manifest_path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    root = path.parent
    samples = []
    for entry in doc.get("samples", []):
        video = read_embedding_file(root / entry["video"])
        phrases = read_embedding_file(root / entry["phrases"])
        texts = None
        if entry.get("gt_step_texts"):
            texts = read_embedding_file(root / entry["gt_step_texts"])
        samples.append(
            DatasetSample(
                id=entry["id"],
                video=video,
                phrases=phrases,
                gt_segments=tuple(tuple(seg) for seg in entry["gt_segments"]) if entry.get("gt_segments") else None,
                gt_step_texts=texts,
                phrase_relevance=tuple(entry["phrase_relevance"]) if entry.get("phrase_relevance") else None,
                task=entry.get("task"),
            )
        )
    tasks = {}
    for name, info in doc.get("tasks", {}).items():
        tasks[name] = TaskInfo(name=name, num_steps=int(info["num_steps"]), prototypes=info.get("prototypes"))
    return Manifest(samples=tuple(samples), tasks=tasks)


def gt_labeling(sample: DatasetSample) -> SegmentLabeling:
    """Ground-truth frame labeling from a sample's segments (task-level step ids)."""
    if sample.gt_segments is None:
        raise DataError(f"{sample.id}: no ground-truth segments")
    segs = [(step_id, start, end) for step_id, start, end in sample.gt_segments]
    return SegmentLabeling.from_segments(segs, sample.video.length)
