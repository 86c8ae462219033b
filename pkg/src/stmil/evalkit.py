"""Annotations, frame-level scoring, ROC/AUC, localization hit rate and curve export."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bagging import GridGeometry, cell_to_pixel_region
from .errors import AnnotationError, FormatError
from .kernels import roc_sweep

FRAMES_PER_SEGMENT = 64


@dataclass
class AnnotationTrack:
    video_id: str
    intervals: list[tuple[int, int]] = field(default_factory=list)  # half-open frame ranges
    boxes: list[tuple[int, int, int, int, int]] = field(default_factory=list)  # frame, x0, y0, x1, y1

    def normalize(self) -> None:
        """Sort and merge overlapping intervals."""
        merged: list[list[int]] = []
        for s, e in sorted(self.intervals):
            if merged and s < merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], e)
            else:
                merged.append([s, e])
        self.intervals = [(s, e) for s, e in merged]


def parse_annotations(path, frame_size: int | None = None) -> list[AnnotationTrack]:
    """Read ``T <vid> <start> <end>`` and ``B <vid> <frame> <x0> <y0> <x1> <y1>`` lines.

    Tracks come back in order of first appearance with intervals merged.
    Videos absent from the file have no track and count as fully normal.
    """
    tracks: dict[str, AnnotationTrack] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            where = f"{path}:{lineno}"
            kind = parts[0]
            if kind == "T" and len(parts) == 4:
                start, end = _ints(parts[2:], where)
                if start < 0 or end <= start:
                    raise AnnotationError(f"{where}: interval end {end} must exceed start {start} >= 0")
                tracks.setdefault(parts[1], AnnotationTrack(parts[1])).intervals.append((start, end))
            elif kind == "B" and len(parts) == 7:
                frame, x0, y0, x1, y1 = _ints(parts[2:], where)
                if frame < 0 or x0 < 0 or y0 < 0 or x1 <= x0 or y1 <= y0:
                    raise AnnotationError(f"{where}: degenerate box {(x0, y0, x1, y1)} at frame {frame}")
                if frame_size is not None and (x1 > frame_size or y1 > frame_size):
                    raise AnnotationError(f"{where}: box {(x0, y0, x1, y1)} exceeds frame size {frame_size}")
                tracks.setdefault(parts[1], AnnotationTrack(parts[1])).boxes.append((frame, x0, y0, x1, y1))
            else:
                raise AnnotationError(f"{where}: malformed annotation line {text!r}")
    for t in tracks.values():
        t.normalize()
    return list(tracks.values())


def _ints(fields, where):
    try:
        return [int(f) for f in fields]
    except ValueError:
        raise AnnotationError(f"{where}: non-integer field in {fields}") from None


def format_annotations(tracks) -> str:
    lines = []
    for t in tracks:
        lines += [f"T {t.video_id} {s} {e}" for s, e in t.intervals]
        lines += [f"B {t.video_id} {f} {x0} {y0} {x1} {y1}" for f, x0, y0, x1, y1 in t.boxes]
    return "".join(line + "\n" for line in lines)


def write_annotations(tracks, path) -> None:
    Path(path).write_text(format_annotations(tracks), encoding="utf-8")


def planted_annotations(truth, spec, frames_per_segment: int = FRAMES_PER_SEGMENT) -> list[AnnotationTrack]:
    """Ground truth implied by a synthetic dataset: anomalous segment frames plus one box per planted cell per frame."""
    geom = synthetic_geometry(spec)
    tracks = []
    for v in truth.videos.values():
        start = v.first_segment * frames_per_segment
        end = (v.last_segment + 1) * frames_per_segment
        boxes = []
        for f in range(start, end):
            for c in v.cells:
                boxes.append((f, *cell_to_pixel_region(*divmod(c, geom.grid_side), geom)))
        tracks.append(AnnotationTrack(v.video_id, [(start, end)], boxes))
    return tracks


def synthetic_geometry(spec) -> GridGeometry:
    # 16 pixels per feature unit, the ratio of the default 224-pixel frame to a 14-wide feature map.
    H = spec.dims[2]
    return GridGeometry(frame_size=16 * H, feature_spatial=H, cell_size=spec.cell_size)


# ---------------------------------------------------------------- score maps


@dataclass
class ScoreMap:
    """Per-segment cell scores of one video, row-major cell order."""

    video_id: str
    segments: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_segments(self) -> int:
        return len(self.segments)

    def _ordered(self):
        n = self.n_segments
        if set(self.segments) != set(range(n)):
            missing = sorted(set(range(max(self.segments, default=-1) + 1)) - set(self.segments))
            raise FormatError(f"video {self.video_id}: missing segment index {missing[0] if missing else n}")
        return [self.segments[i] for i in range(n)]

    def segment_scores(self) -> np.ndarray:
        return np.array([float(np.max(s)) for s in self._ordered()])

    def argmax_cells(self) -> np.ndarray:
        return np.array([int(np.argmax(s)) for s in self._ordered()])


def format_scores(score_map: ScoreMap) -> str:
    # 9 significant digits round-trip float32 exactly.
    lines = []
    for seg in sorted(score_map.segments):
        vals = " ".join(f"{float(v):.9g}" for v in np.asarray(score_map.segments[seg], dtype=np.float32))
        lines.append(f"{seg} {vals}\n")
    return "".join(lines)


def write_scores(score_map: ScoreMap, path) -> None:
    Path(path).write_text(format_scores(score_map), encoding="utf-8")


def read_scores(path, video_id: str | None = None, n_cells: int | None = None) -> ScoreMap:
    path = Path(path)
    sm = ScoreMap(video_id if video_id is not None else path.stem)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                seg = int(parts[0])
                vals = np.array([float(v) for v in parts[1:]], dtype=np.float32)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric score line") from None
            if n_cells is not None and len(vals) != n_cells:
                raise FormatError(f"{path}:{lineno}: expected {n_cells} scores, got {len(vals)}")
            if len(vals) == 0 or seg < 0 or seg in sm.segments:
                raise FormatError(f"{path}:{lineno}: bad or duplicate segment {parts[0]}")
            if not ((vals >= 0) & (vals <= 1)).all():
                raise FormatError(f"{path}:{lineno}: score outside [0, 1]")
            sm.segments[seg] = vals
    return sm


def load_score_dir(directory) -> dict[str, ScoreMap]:
    maps = {}
    for p in sorted(Path(directory).glob("*.scores")):
        maps[p.stem] = read_scores(p)
    return maps


def frame_scores(score_map: ScoreMap, frames_per_segment: int = FRAMES_PER_SEGMENT,
                 n_frames: int | None = None) -> np.ndarray:
    """Repeat each segment's max cell score over its frames.

    Frames past the last full segment (when ``n_frames`` is larger) take the last segment's score.
    """
    seg = score_map.segment_scores()
    out = np.repeat(seg, frames_per_segment)
    if n_frames is not None:
        if n_frames > out.size:
            out = np.concatenate((out, np.full(n_frames - out.size, seg[-1])))
        else:
            out = out[:n_frames]
    return out


def frame_ground_truth(track: AnnotationTrack | None, n_frames: int) -> np.ndarray:
    gt = np.zeros(n_frames, dtype=np.int8)
    if track is None:
        return gt
    for s, e in track.intervals:
        if e > n_frames:
            warnings.warn(f"video {track.video_id}: interval [{s}, {e}) clipped to {n_frames} frames")
        gt[min(s, n_frames):min(e, n_frames)] = 1
    return gt


# ---------------------------------------------------------------- ROC / AUC


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # one per point after the origin, descending
    auc: float


def roc_auc(scores, labels) -> RocCurve:
    """ROC over every distinct threshold; trapezoidal AUC (ties get half credit)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not np.isfinite(scores).all():
        raise ValueError("scores contain non-finite values")
    lab = (labels != 0).astype(np.int8)
    P = int(lab.sum())
    N = lab.size - P
    if P == 0 or N == 0:
        raise ValueError(f"ROC needs both classes, got {P} positive and {N} negative")
    fps, tps, thr = roc_sweep(scores, lab)
    # Integer trapezoid: every term is a count product, so the sum is exact.
    area2 = int(np.sum(np.diff(fps) * (tps[1:] + tps[:-1])))
    return RocCurve(fps / N, tps / P, thr, area2 / (2 * P * N))


def format_roc(curve: RocCurve) -> str:
    rows = ["fpr,tpr"] + [f"{f:.17g},{t:.17g}" for f, t in zip(curve.fpr, curve.tpr)]
    return "\n".join(rows) + "\n"


# ---------------------------------------------------------------- localization


def _intersects(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def localization_hit_rate(score_maps, tracks, geom: GridGeometry = GridGeometry(),
                          frames_per_segment: int = FRAMES_PER_SEGMENT) -> float:
    """Fraction of box-annotated frames whose segment argmax cell overlaps a ground-truth box.

    ``score_maps`` and ``tracks`` are mappings (or iterables) keyed by video id.
    """
    score_maps = _by_id(score_maps)
    hits = total = 0
    for track in _by_id(tracks).values():
        sm = score_maps.get(track.video_id)
        if sm is None or not track.boxes:
            continue
        by_frame: dict[int, list] = {}
        for f, *box in track.boxes:
            by_frame.setdefault(f, []).append(box)
        arg = sm.argmax_cells()
        for f, boxes in by_frame.items():
            seg = f // frames_per_segment
            if seg >= len(arg):
                continue
            region = cell_to_pixel_region(*divmod(int(arg[seg]), geom.grid_side), geom)
            total += 1
            hits += any(_intersects(region, b) for b in boxes)
    if total == 0:
        raise ValueError("no box-annotated frames fall inside scored segments")
    return hits / total


def _by_id(items):
    if isinstance(items, dict):
        return items
    return {x.video_id: x for x in items}


# ---------------------------------------------------------------- evaluation & export


@dataclass
class EvalResult:
    roc: RocCurve
    hit_rate: float | None
    n_videos: int
    n_frames: int

    @property
    def auc(self) -> float:
        return self.roc.auc


def evaluate(score_maps, tracks, geom: GridGeometry = GridGeometry(),
             frames_per_segment: int = FRAMES_PER_SEGMENT) -> EvalResult:
    """Frame-level AUC over all scored videos; hit rate when any track has boxes."""
    score_maps = _by_id(score_maps)
    tracks = _by_id(tracks)
    if tracks and not set(tracks) & set(score_maps):
        raise FormatError("no video id is shared between scores and annotations")
    s_all, y_all = [], []
    for vid in sorted(score_maps):
        sm = score_maps[vid]
        fs = frame_scores(sm, frames_per_segment)
        s_all.append(fs)
        y_all.append(frame_ground_truth(tracks.get(vid), fs.size))
    scores = np.concatenate(s_all)
    labels = np.concatenate(y_all)
    curve = roc_auc(scores, labels)
    hit = None
    if any(t.boxes for t in tracks.values()):
        hit = localization_hit_rate(score_maps, tracks, geom, frames_per_segment)
    return EvalResult(curve, hit, len(score_maps), int(scores.size))


def format_curves(score_map: ScoreMap, track: AnnotationTrack | None,
                  frames_per_segment: int = FRAMES_PER_SEGMENT) -> str:
    fs = frame_scores(score_map, frames_per_segment)
    gt = frame_ground_truth(track, fs.size)
    rows = ["frame,ground_truth,score"] + [f"{i},{g},{s:.6g}" for i, (g, s) in enumerate(zip(gt, fs))]
    return "\n".join(rows) + "\n"


def export_curves(score_map: ScoreMap, track: AnnotationTrack | None, path,
                  frames_per_segment: int = FRAMES_PER_SEGMENT) -> None:
    Path(path).write_text(format_curves(score_map, track, frames_per_segment), encoding="utf-8")


def read_curves(path):
    """Parse an exported curve file into ``(frames, ground_truth, scores)`` arrays."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != "frame,ground_truth,score":
        raise FormatError(f"{path}: missing curve header")
    try:
        rows = [line.split(",") for line in lines[1:]]
        frames = np.array([int(r[0]) for r in rows], dtype=np.int64)
        gt = np.array([int(r[1]) for r in rows], dtype=np.int8)
        sc = np.array([float(r[2]) for r in rows], dtype=np.float64)
    except (ValueError, IndexError):
        raise FormatError(f"{path}: malformed curve row") from None
    return frames, gt, sc
