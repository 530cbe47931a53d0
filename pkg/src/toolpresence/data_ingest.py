"""Annotation parsing, dataset manifests and class statistics.

Tool annotation files are tab separated with a fixed header::

    Frame\tGrasper\tBipolar\tHook\tScissors\tClipper\tIrrigator\tSpecimenBag
    25\t1\t0\t1\t0\t0\t0\t0

Phase files use the header ``Frame\tPhase``. Frame indices refer to the
source video; sampling at 1 fps is the producer's job and is not checked.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from toolpresence.errors import (
    AnnotationFormatError,
    AnnotationValueError,
    ConfigurationError,
    EmptyInputError,
    JoinError,
    OrderingError,
    UnknownVideoError,
)

TOOLS = ("Grasper", "Bipolar", "Hook", "Scissors", "Clipper", "Irrigator", "SpecimenBag")
NUM_TOOLS = len(TOOLS)

TOOL_HEADER = "\t".join(("Frame",) + TOOLS)
PHASE_HEADER = "Frame\tPhase"
MANIFEST_HEADER = "\t".join(("Video", "Frame") + TOOLS + ("Phase",))


class ToolId(enum.IntEnum):
    GRASPER = 0
    BIPOLAR = 1
    HOOK = 2
    SCISSORS = 3
    CLIPPER = 4
    IRRIGATOR = 5
    SPECIMEN_BAG = 6

    @property
    def label(self) -> str:
        return TOOLS[self.value]

    @classmethod
    def from_name(cls, name: str) -> "ToolId":
        try:
            return cls(TOOLS.index(name))
        except ValueError:
            raise KeyError(f"unknown tool {name!r}") from None


@dataclass(frozen=True)
class FrameRecord:
    video_id: str
    frame_index: int
    tools: tuple
    phase: Optional[int] = None

    def __post_init__(self):
        tools = tuple(int(t) for t in self.tools)
        if len(tools) != NUM_TOOLS:
            raise AnnotationValueError(f"expected {NUM_TOOLS} tool bits, got {len(tools)}")
        if any(t not in (0, 1) for t in tools):
            raise AnnotationValueError(f"tool bits must be 0/1, got {tools}")
        if self.frame_index < 0:
            raise AnnotationValueError(f"negative frame index {self.frame_index}")
        if self.phase is not None and self.phase < 0:
            raise AnnotationValueError(f"negative phase label {self.phase}")
        object.__setattr__(self, "tools", tools)

    @property
    def key(self):
        return (self.video_id, self.frame_index)


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple
    videos: tuple
    phase_count: Optional[int] = None
    sampling_fps: Fraction = Fraction(1)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "videos", tuple(self.videos))
        object.__setattr__(self, "sampling_fps", Fraction(self.sampling_fps))
        if self.sampling_fps <= 0:
            raise ConfigurationError("sampling_fps must be positive")
        known = set(self.videos)
        if len(known) != len(self.videos):
            raise ConfigurationError("duplicate video ids in manifest")
        labels = []
        for rec in self.records:
            if rec.video_id not in known:
                raise UnknownVideoError(f"record references unlisted video {rec.video_id!r}")
            if rec.phase is not None:
                labels.append(rec.phase)
        if labels:
            if self.phase_count is None:
                raise ConfigurationError("records carry phase labels but phase_count is unset")
            if max(labels) >= self.phase_count:
                raise ConfigurationError(
                    f"phase label {max(labels)} out of range for phase_count={self.phase_count}"
                )
        if self.phase_count is not None and self.phase_count < 1:
            raise ConfigurationError("phase_count must be positive")

    def __len__(self):
        return len(self.records)

    def tool_matrix(self) -> np.ndarray:
        """(N, 7) uint8 presence matrix in record order."""
        if not self.records:
            return np.zeros((0, NUM_TOOLS), dtype=np.uint8)
        return np.array([r.tools for r in self.records], dtype=np.uint8)

    def phase_vector(self) -> np.ndarray:
        """(N,) int64 phase labels, -1 where a record has none."""
        return np.array([-1 if r.phase is None else r.phase for r in self.records], dtype=np.int64)

    @property
    def has_phases(self) -> bool:
        return all(r.phase is not None for r in self.records) and bool(self.records)

    def records_for(self, video_id: str) -> list:
        return [r for r in self.records if r.video_id == video_id]


@dataclass(frozen=True)
class ClassFrequency:
    counts: tuple
    fractions: tuple
    total: int

    def as_rows(self):
        return [(name, c, f) for name, c, f in zip(TOOLS, self.counts, self.fractions)]

    def render(self) -> str:
        lines = [f"{'Tool':<12}{'count':>8}{'fraction':>10}"]
        for name, c, f in self.as_rows():
            lines.append(f"{name:<12}{c:>8}{f:>10.4f}")
        lines.append(f"{'frames':<12}{self.total:>8}")
        return "\n".join(lines)


def _read_lines(path) -> list:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _check_header(line: str, expected: str, path) -> None:
    got = line.rstrip("\r").split("\t")
    want = expected.split("\t")
    for i, token in enumerate(want):
        if i >= len(got):
            raise AnnotationFormatError(f"{path}: header is missing column {token!r}")
        if got[i] != token:
            raise AnnotationFormatError(
                f"{path}: header token {got[i]!r} at column {i + 1}, expected {token!r}"
            )
    if len(got) > len(want):
        raise AnnotationFormatError(f"{path}: unexpected header token {got[len(want)]!r}")


def _parse_int(token: str, path, lineno: int, what: str) -> int:
    try:
        value = int(token)
    except ValueError:
        raise AnnotationValueError(f"{path}:{lineno}: {what} {token!r} is not an integer") from None
    return value


def parse_annotation_file(path, video_id: str) -> list:
    """Parse a tool annotation file into records, in file order."""
    lines = _read_lines(path)
    if not lines:
        raise AnnotationFormatError(f"{path}: empty file, missing header")
    _check_header(lines[0], TOOL_HEADER, path)
    records = []
    prev = -1
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.rstrip("\r").split("\t")
        if len(cells) != NUM_TOOLS + 1:
            raise AnnotationFormatError(
                f"{path}:{lineno}: expected {NUM_TOOLS + 1} columns, got {len(cells)}"
            )
        frame = _parse_int(cells[0], path, lineno, "frame index")
        if frame < 0:
            raise AnnotationValueError(f"{path}:{lineno}: negative frame index {frame}")
        bits = []
        for col, token in enumerate(cells[1:]):
            if token not in ("0", "1"):
                raise AnnotationValueError(
                    f"{path}:{lineno}: {TOOLS[col]} value {token!r} is not binary"
                )
            bits.append(int(token))
        if frame <= prev:
            raise OrderingError(
                f"{path}:{lineno}: frame index {frame} does not increase (previous {prev})"
            )
        prev = frame
        records.append(FrameRecord(video_id, frame, tuple(bits)))
    return records


def parse_phase_file(path) -> list:
    """Parse a phase file into ``(frame_index, phase)`` pairs."""
    lines = _read_lines(path)
    if not lines:
        raise AnnotationFormatError(f"{path}: empty file, missing header")
    _check_header(lines[0], PHASE_HEADER, path)
    out = []
    prev = -1
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.rstrip("\r").split("\t")
        if len(cells) != 2:
            raise AnnotationFormatError(f"{path}:{lineno}: expected 2 columns, got {len(cells)}")
        frame = _parse_int(cells[0], path, lineno, "frame index")
        phase = _parse_int(cells[1], path, lineno, "phase")
        if phase < 0:
            raise AnnotationValueError(f"{path}:{lineno}: negative phase {phase}")
        if frame <= prev:
            raise OrderingError(
                f"{path}:{lineno}: frame index {frame} does not increase (previous {prev})"
            )
        prev = frame
        out.append((frame, phase))
    return out


def serialize_annotation(records: Iterable[FrameRecord]) -> str:
    lines = [TOOL_HEADER]
    for r in records:
        lines.append("\t".join([str(r.frame_index)] + [str(b) for b in r.tools]))
    return "\n".join(lines) + "\n"


def serialize_phases(records: Iterable[FrameRecord]) -> str:
    lines = [PHASE_HEADER]
    for r in records:
        if r.phase is None:
            raise ConfigurationError(f"record {r.key} has no phase label")
        lines.append(f"{r.frame_index}\t{r.phase}")
    return "\n".join(lines) + "\n"


def write_annotation_file(path, records) -> None:
    Path(path).write_bytes(serialize_annotation(records).encode("utf-8"))


def write_phase_file(path, records) -> None:
    Path(path).write_bytes(serialize_phases(records).encode("utf-8"))


def build_manifest(
    annotation_files: Sequence,
    phase_files: Optional[Sequence] = None,
    sampling_fps=Fraction(1),
) -> DatasetManifest:
    """Assemble a manifest from ``(path, video_id)`` pairs.

    Phase files, also given as ``(path, video_id)``, are joined on
    ``(video_id, frame_index)``. ``phase_count`` is inferred as the largest
    label plus one.
    """
    videos = [vid for _, vid in annotation_files]
    seen = set()
    for vid in videos:
        if vid in seen:
            raise ConfigurationError(f"duplicate video id {vid!r}")
        seen.add(vid)

    per_video = {vid: parse_annotation_file(path, vid) for path, vid in annotation_files}

    phase_count = None
    if phase_files:
        max_label = -1
        for path, vid in phase_files:
            if vid not in per_video:
                raise JoinError(f"{path}: phase file for unknown video {vid!r}")
            by_frame = {r.frame_index: i for i, r in enumerate(per_video[vid])}
            recs = per_video[vid]
            for frame, phase in parse_phase_file(path):
                if frame not in by_frame:
                    raise JoinError(
                        f"{path}: phase label for frame {frame} of video {vid!r} has no tool record"
                    )
                i = by_frame[frame]
                recs[i] = FrameRecord(vid, frame, recs[i].tools, phase)
                max_label = max(max_label, phase)
        if max_label >= 0:
            phase_count = max_label + 1

    records = [r for vid in videos for r in per_video[vid]]
    return DatasetManifest(records, videos, phase_count, Fraction(sampling_fps))


def class_frequency(manifest: DatasetManifest) -> ClassFrequency:
    if len(manifest) == 0:
        raise EmptyInputError("class frequency of an empty manifest")
    counts = manifest.tool_matrix().sum(axis=0, dtype=np.int64)
    total = len(manifest)
    return ClassFrequency(
        tuple(int(c) for c in counts),
        tuple(float(c) / total for c in counts),
        total,
    )


def split_manifest(manifest: DatasetManifest, video_ids_train, video_ids_test):
    """Partition a manifest by whole videos into ``(train, test)``."""
    train, test = set(video_ids_train), set(video_ids_test)
    overlap = train & test
    if overlap:
        raise ConfigurationError(f"videos in both train and test: {sorted(overlap)}")
    unknown = (train | test) - set(manifest.videos)
    if unknown:
        raise UnknownVideoError(f"unknown video ids: {sorted(unknown)}")

    def subset(keep):
        vids = [v for v in manifest.videos if v in keep]
        recs = [r for r in manifest.records if r.video_id in keep]
        return DatasetManifest(recs, vids, manifest.phase_count, manifest.sampling_fps)

    return subset(train), subset(test)


# -- manifest files ---------------------------------------------------------
#
# A manifest is a single TSV: two ``#key=value`` lines, the header, then one
# row per record with ``-`` in the Phase column when unlabeled.


def serialize_manifest(manifest: DatasetManifest) -> str:
    lines = [
        f"#sampling_fps={manifest.sampling_fps}",
        f"#phase_count={'' if manifest.phase_count is None else manifest.phase_count}",
        f"#videos={','.join(manifest.videos)}",
        MANIFEST_HEADER,
    ]
    for r in manifest.records:
        phase = "-" if r.phase is None else str(r.phase)
        lines.append("\t".join([r.video_id, str(r.frame_index)] + [str(b) for b in r.tools] + [phase]))
    return "\n".join(lines) + "\n"


def write_manifest(path, manifest: DatasetManifest) -> None:
    Path(path).write_bytes(serialize_manifest(manifest).encode("utf-8"))


def read_manifest(path) -> DatasetManifest:
    lines = _read_lines(path)
    meta = {}
    i = 0
    while i < len(lines) and lines[i].startswith("#"):
        key, _, value = lines[i][1:].partition("=")
        meta[key] = value
        i += 1
    if i >= len(lines):
        raise AnnotationFormatError(f"{path}: missing manifest header")
    _check_header(lines[i], MANIFEST_HEADER, path)
    records = []
    for lineno, line in enumerate(lines[i + 1:], start=i + 2):
        cells = line.split("\t")
        if len(cells) != NUM_TOOLS + 3:
            raise AnnotationFormatError(f"{path}:{lineno}: expected {NUM_TOOLS + 3} columns")
        bits = []
        for token in cells[2:-1]:
            if token not in ("0", "1"):
                raise AnnotationValueError(f"{path}:{lineno}: tool value {token!r} is not binary")
            bits.append(int(token))
        phase = None if cells[-1] == "-" else _parse_int(cells[-1], path, lineno, "phase")
        frame = _parse_int(cells[1], path, lineno, "frame index")
        records.append(FrameRecord(cells[0], frame, tuple(bits), phase))
    videos = [v for v in meta.get("videos", "").split(",") if v]
    if not videos:
        videos = list(dict.fromkeys(r.video_id for r in records))
    phase_count = int(meta["phase_count"]) if meta.get("phase_count") else None
    fps = Fraction(meta.get("sampling_fps") or 1)
    return DatasetManifest(records, videos, phase_count, fps)


# -- frame images -----------------------------------------------------------


def frame_path(root, video_id: str, frame_index: int) -> Path:
    return Path(root) / video_id / f"{frame_index:06d}.png"


@dataclass
class FrameStore:
    """Loads frame PNGs laid out as ``<root>/<video_id>/<frame:06d>.png``."""

    root: Path
    size: Optional[tuple] = None  # (H, W); frames are resized when set
    _cache: dict = field(default_factory=dict, repr=False)

    def load(self, record: FrameRecord) -> np.ndarray:
        key = record.key
        if key not in self._cache:
            from PIL import Image

            path = frame_path(self.root, record.video_id, record.frame_index)
            with Image.open(path) as im:
                im = im.convert("RGB")
                if self.size is not None and im.size != (self.size[1], self.size[0]):
                    im = im.resize((self.size[1], self.size[0]), Image.BILINEAR)
                self._cache[key] = np.asarray(im, dtype=np.uint8).copy()
        return self._cache[key]

    def load_all(self, manifest: DatasetManifest) -> np.ndarray:
        """(N, H, W, 3) uint8 stack aligned with ``manifest.records``."""
        return np.stack([self.load(r) for r in manifest.records])
