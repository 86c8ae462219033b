"""Feature cuboid files (``.fcub``), dataset manifests and the synthetic planted-anomaly generator."""
from __future__ import annotations

import enum
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    DimOverflowError,
    FormatError,
    ManifestError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)

FCUB_MAGIC = b"FCUB"
FCUB_VERSION = 1
_HEADER = struct.Struct("<4sI4I")  # 24 bytes
# Refuse headers whose payload could not be addressed by a 64-bit offset.
_MAX_ELEMENTS = (2**63 - 1) // 4

DEFAULT_DIMS = (528, 4, 14, 14)


class Label(enum.Enum):
    NORMAL = "NORMAL"
    ANOMALOUS = "ANOMALOUS"


class Split(enum.Enum):
    TRAIN = "TRAIN"
    TEST = "TEST"


@dataclass
class FeatureCuboid:
    """One segment's (C, T, H, W) feature tensor."""

    video_id: str
    segment_index: int
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 4:
            raise FormatError(f"cuboid must be rank 4, got shape {self.data.shape}")
        if any(d <= 0 for d in self.data.shape):
            raise FormatError(f"cuboid dims must be positive, got {self.data.shape}")
        if self.segment_index < 0:
            raise FormatError(f"negative segment index {self.segment_index}")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(d) for d in self.data.shape)


def write_cuboid(cuboid: FeatureCuboid, path) -> None:
    data = np.ascontiguousarray(cuboid.data, dtype="<f4")
    if not np.isfinite(data).all():
        bad = np.argwhere(~np.isfinite(data))[0]
        raise FormatError(
            f"cuboid {cuboid.video_id}:{cuboid.segment_index} has non-finite value at index {tuple(bad)}"
        )
    header = _HEADER.pack(FCUB_MAGIC, FCUB_VERSION, *data.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes(order="C"))


def read_cuboid(path, video_id: str = "", segment_index: int = 0) -> FeatureCuboid:
    """Inverse of :func:`write_cuboid`. Identity fields come from the caller (the manifest)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != FCUB_MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}, expected {FCUB_MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: truncated header ({len(raw)} bytes)")
    _, version, *dims = _HEADER.unpack_from(raw)
    if version != FCUB_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported version {version}")
    n = 1
    for d in dims:
        n *= d
    if n > _MAX_ELEMENTS:
        raise DimOverflowError(f"{path}: dims {tuple(dims)} overflow the element count")
    if n == 0:
        raise FormatError(f"{path}: zero dimension in {tuple(dims)}")
    expected = _HEADER.size + 4 * n
    if len(raw) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(raw) - _HEADER.size} bytes, header {tuple(dims)} needs {4 * n}"
        )
    if len(raw) > expected:
        raise FormatError(f"{path}: {len(raw) - expected} trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=_HEADER.size).reshape(dims)
    return FeatureCuboid(video_id, segment_index, data.astype(np.float32))


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestEntry:
    cuboid_path: str
    video_id: str
    segment_index: int
    label: Label


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    split: Split = Split.TRAIN
    root: Path | None = None  # base directory for relative cuboid paths

    def __post_init__(self):
        labels: dict[str, Label] = {}
        seen = set()
        for e in self.entries:
            if labels.setdefault(e.video_id, e.label) is not e.label:
                raise ManifestError(f"video {e.video_id} carries both NORMAL and ANOMALOUS labels")
            key = (e.video_id, e.segment_index)
            if key in seen:
                raise ManifestError(f"duplicate entry for video {e.video_id} segment {e.segment_index}")
            seen.add(key)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.cuboid_path)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def with_label(self, label: Label) -> list[ManifestEntry]:
        return [e for e in self.entries if e.label is label]

    def video_ids(self) -> list[str]:
        return list(dict.fromkeys(e.video_id for e in self.entries))


def load_manifest(path, split: Split = Split.TRAIN, root=None) -> DatasetManifest:
    """Parse ``<cuboid_path> <video_id> <segment_index> <NORMAL|ANOMALOUS>`` lines.

    Relative cuboid paths resolve against ``root`` (default: the manifest's directory).
    """
    path = Path(path)
    entries = []
    labels: dict[str, tuple[Label, int]] = {}
    seen: dict[tuple[str, int], int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 4:
                raise ManifestError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            cpath, vid, seg, lab = parts
            try:
                seg_i = int(seg)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: segment index {seg!r} is not an integer") from None
            if seg_i < 0:
                raise ManifestError(f"{path}:{lineno}: negative segment index {seg_i}")
            try:
                label = Label(lab)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: unknown label {lab!r}") from None
            prev = labels.setdefault(vid, (label, lineno))
            if prev[0] is not label:
                raise ManifestError(
                    f"{path}:{lineno}: video {vid} labeled {label.value}, but {prev[0].value} at line {prev[1]}"
                )
            if (vid, seg_i) in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate ({vid}, {seg_i}), first at line {seen[(vid, seg_i)]}"
                )
            seen[(vid, seg_i)] = lineno
            entries.append(ManifestEntry(cpath, vid, seg_i, label))
    return DatasetManifest(entries, split, Path(root) if root is not None else path.parent)


def format_manifest(manifest: DatasetManifest) -> str:
    lines = [f"# split {manifest.split.value}"]
    for e in manifest.entries:
        lines.append(f"{e.cuboid_path} {e.video_id} {e.segment_index} {e.label.value}")
    return "\n".join(lines) + "\n"


def write_manifest(manifest: DatasetManifest, path) -> None:
    _atomic_write(Path(path), format_manifest(manifest).encode("utf-8"))


def _atomic_write(path: Path, payload: bytes) -> bool:
    """Write ``payload`` unless the file already holds it. Returns True if written."""
    if path.exists() and path.read_bytes() == payload:
        return False
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)
    return True


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    n_normal_videos: int = 20
    n_anomalous_videos: int = 20
    segments_per_video: int = 4
    dims: tuple[int, int, int, int] = DEFAULT_DIMS
    cell_size: int = 2
    delta: float = 4.0
    anomaly_cell_count: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.n_normal_videos < 1 or self.n_anomalous_videos < 1:
            raise ValueError("need at least one normal and one anomalous video")
        if self.segments_per_video < 1:
            raise ValueError("segments_per_video must be positive")
        if len(self.dims) != 4 or any(d <= 0 for d in self.dims):
            raise ValueError(f"dims must be 4 positive integers, got {self.dims}")
        if self.cell_size < 1:
            raise ValueError("cell_size must be positive")
        _, _, H, W = self.dims
        if H % self.cell_size or W % self.cell_size:
            raise ValueError(f"H={H} and W={W} must be divisible by cell_size={self.cell_size}")
        if not self.delta >= 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if not 1 <= self.anomaly_cell_count <= self.n_cells:
            raise ValueError(f"anomaly_cell_count must be in [1, {self.n_cells}]")

    @property
    def grid(self) -> tuple[int, int]:
        return self.dims[2] // self.cell_size, self.dims[3] // self.cell_size

    @property
    def n_cells(self) -> int:
        gh, gw = self.grid
        return gh * gw


@dataclass(frozen=True)
class PlantedVideo:
    video_id: str
    first_segment: int
    last_segment: int  # inclusive
    cells: tuple[int, ...]


@dataclass
class PlantedTruth:
    videos: dict[str, PlantedVideo] = field(default_factory=dict)

    def is_anomalous(self, video_id: str, segment_index: int) -> bool:
        v = self.videos.get(video_id)
        return v is not None and v.first_segment <= segment_index <= v.last_segment


def format_planted_truth(truth: PlantedTruth) -> str:
    return "".join(
        f"{v.video_id} {v.first_segment} {v.last_segment} {','.join(map(str, v.cells))}\n"
        for v in truth.videos.values()
    )


def write_planted_truth(truth: PlantedTruth, path) -> None:
    _atomic_write(Path(path), format_planted_truth(truth).encode("utf-8"))


def load_planted_truth(path) -> PlantedTruth:
    truth = PlantedTruth()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            try:
                vid, first, last, cells = parts
                v = PlantedVideo(vid, int(first), int(last), tuple(int(c) for c in cells.split(",")))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: malformed planted-truth line {text!r}") from None
            if v.first_segment < 0 or v.last_segment < v.first_segment:
                raise FormatError(f"{path}:{lineno}: bad segment range {first}..{last}")
            truth.videos[vid] = v
    return truth


def _video_ids(spec: SyntheticSpec):
    return (
        [f"normal_{i:03d}" for i in range(spec.n_normal_videos)],
        [f"anomaly_{i:03d}" for i in range(spec.n_anomalous_videos)],
    )


def iter_synthetic(spec: SyntheticSpec):
    """Return ``(truth, segments)``; ``segments`` lazily yields ``(FeatureCuboid, Label)``.

    All randomness comes from one generator seeded by ``spec.seed``; the
    draw order is fixed, so the output is a pure function of ``spec``.
    """
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    normal_ids, anomalous_ids = _video_ids(spec)
    S = spec.segments_per_video
    truth = PlantedTruth()
    min_run = (S + 1) // 2
    for vid in anomalous_ids:
        run = int(rng.integers(min_run, S + 1))
        first = int(rng.integers(0, S - run + 1))
        cells = np.sort(rng.choice(spec.n_cells, size=spec.anomaly_cell_count, replace=False))
        truth.videos[vid] = PlantedVideo(vid, first, first + run - 1, tuple(int(c) for c in cells))

    C, T, H, W = spec.dims
    gh, gw = spec.grid
    cs = spec.cell_size

    def segments():
        for vid, label in [(v, Label.NORMAL) for v in normal_ids] + [(v, Label.ANOMALOUS) for v in anomalous_ids]:
            for seg in range(S):
                data = rng.standard_normal((C, T, H, W), dtype=np.float32)
                if truth.is_anomalous(vid, seg) and spec.delta != 0:
                    for c in truth.videos[vid].cells:
                        r, q = divmod(c, gw)
                        data[:, :, r * cs:(r + 1) * cs, q * cs:(q + 1) * cs] += np.float32(spec.delta)
                yield FeatureCuboid(vid, seg, data), label

    return truth, segments()


def generate_synthetic(spec: SyntheticSpec, out_dir, split: Split = Split.TRAIN):
    """Write a planted-anomaly dataset under ``out_dir``.

    Layout: ``features/<video>_<seg>.fcub``, ``manifest.txt``, ``planted.txt``
    and ``annotations.txt`` (temporal intervals plus per-frame boxes derived
    from the planted truth). The manifest is written last and atomically.
    Returns ``(manifest, truth, n_changed_files)``.
    """
    from .evalkit import planted_annotations, format_annotations

    out_dir = Path(out_dir)
    feat_dir = out_dir / "features"
    feat_dir.mkdir(parents=True, exist_ok=True)
    truth, segments = iter_synthetic(spec)
    entries = []
    changed = 0
    for cub, label in segments:
        rel = f"features/{cub.video_id}_{cub.segment_index}.fcub"
        target = out_dir / rel
        tmp = target.with_name(target.name + ".tmp")
        write_cuboid(cub, tmp)
        if target.exists() and target.read_bytes() == tmp.read_bytes():
            tmp.unlink()
        else:
            os.replace(tmp, target)
            changed += 1
        entries.append(ManifestEntry(rel, cub.video_id, cub.segment_index, label))
    manifest = DatasetManifest(entries, split, out_dir)
    tracks = planted_annotations(truth, spec)
    changed += _atomic_write(out_dir / "planted.txt", format_planted_truth(truth).encode())
    changed += _atomic_write(out_dir / "annotations.txt", format_annotations(tracks).encode())
    changed += _atomic_write(out_dir / "manifest.txt", format_manifest(manifest).encode())
    return manifest, truth, changed
