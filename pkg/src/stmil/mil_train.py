"""Multiple-instance ranking loss over bag maxima, pair sampling, optimizers and the training loop."""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import net
from .bagging import Bag
from .errors import FormatError, NumericalError, ShapeError
from .evalkit import ScoreMap, evaluate
from .feature_store import DatasetManifest, Label, ManifestEntry, read_cuboid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RankingLossConfig:
    margin: float = 1.0
    sparsity: float = 0.0
    smoothness: float = 0.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.margin > 0:
            raise ValueError(f"margin must be positive, got {self.margin}")
        for name in ("sparsity", "smoothness", "weight_decay"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")


class Optimizer(enum.Enum):
    SGD = "sgd"
    ADAGRAD = "adagrad"


@dataclass(frozen=True)
class TrainConfig:
    pairs_per_batch: int = 30
    learning_rate: float = 0.001
    optimizer: Optimizer = Optimizer.ADAGRAD
    epochs: int = 10
    iterations_per_epoch: int = 100
    seed: int = 0
    eval_every: int = 0  # 0: evaluate only after the last iteration
    precision: str = "float32"
    cell_size: int = 2
    widths: tuple[int, ...] = net.DEFAULT_WIDTHS
    dropout: float = 0.6
    bn_momentum: float = 0.1
    record_pairs: bool = False

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.pairs_per_batch < 1:
            raise ValueError("pairs_per_batch must be >= 1")
        if self.epochs < 0 or self.iterations_per_epoch < 1:
            raise ValueError("epochs must be >= 0 and iterations_per_epoch >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision}")
        object.__setattr__(self, "optimizer", Optimizer(self.optimizer))

    @property
    def iterations(self) -> int:
        return self.epochs * self.iterations_per_epoch


@dataclass
class BagScores:
    scores: np.ndarray
    max_score: float
    argmax_index: int

    @classmethod
    def from_scores(cls, scores) -> "BagScores":
        scores = np.asarray(scores)
        i = int(np.argmax(scores))  # first index attaining the max
        return cls(scores, float(scores[i]), i)


def score_bag(params: net.ClassifierParams, bag: Bag) -> BagScores:
    """EVAL-mode score of every instance; scores are placed by cell tag in row-major order."""
    if not bag.instances:
        raise ShapeError("empty bag")
    gw = max(i.cell_col for i in bag.instances) + 1
    pooled = np.stack([net.pool(i.data) for i in bag.instances])
    if pooled.shape[1] != params.widths[0]:
        raise ShapeError(f"pooled width {pooled.shape[1]} != classifier input {params.widths[0]}")
    s, _ = net.forward(params, pooled, net.Mode.EVAL)
    out = np.empty(len(bag.instances), dtype=s.dtype)
    seen = np.zeros(len(bag.instances), dtype=bool)
    for inst, v in zip(bag.instances, s):
        idx = inst.cell_row * gw + inst.cell_col
        if idx >= out.size or seen[idx]:
            raise ShapeError(f"bag instance tags do not tile a grid (cell {inst.cell_row}, {inst.cell_col})")
        seen[idx] = True
        out[idx] = v
    return BagScores.from_scores(out)


def grid_adjacency(n_cells: int, grid_shape=None) -> np.ndarray:
    """4-neighbour pairs (a, b), a < b, of a row-major grid; each adjacency listed once."""
    if grid_shape is None:
        side = int(round(np.sqrt(n_cells)))
        if side * side != n_cells:
            raise ShapeError(f"{n_cells} cells do not form a square grid; pass grid_shape")
        grid_shape = (side, side)
    gh, gw = grid_shape
    idx = np.arange(gh * gw).reshape(gh, gw)
    horiz = np.stack((idx[:, :-1].ravel(), idx[:, 1:].ravel()), axis=1)
    vert = np.stack((idx[:-1, :].ravel(), idx[1:, :].ravel()), axis=1)
    return np.concatenate((horiz, vert))


def ranking_loss(pos: BagScores, neg: BagScores, cfg: RankingLossConfig = RankingLossConfig(), grid_shape=None):
    """Hinge on bag maxima plus optional sparsity and spatial-smoothness terms on the positive bag.

    Returns ``(loss, d_loss/d_pos_scores, d_loss/d_neg_scores)``. The hinge
    subgradient goes only to the two argmax cells.
    """
    ps = np.asarray(pos.scores, dtype=np.float64)
    ns = np.asarray(neg.scores, dtype=np.float64)
    gp = np.zeros_like(ps)
    gn = np.zeros_like(ns)
    # Correctly rounded, so e.g. m=1, maxima 0.9/0.2 give exactly 0.3.
    hinge = math.fsum((cfg.margin, -pos.max_score, neg.max_score))
    loss = 0.0
    if hinge > 0:
        loss = hinge
        gp[pos.argmax_index] -= 1.0
        gn[neg.argmax_index] += 1.0
    if cfg.sparsity:
        loss += cfg.sparsity * ps.sum()
        gp += cfg.sparsity
    if cfg.smoothness:
        adj = grid_adjacency(ps.size, grid_shape)
        d = ps[adj[:, 0]] - ps[adj[:, 1]]
        loss += cfg.smoothness * float(np.sum(d * d))
        g = 2.0 * cfg.smoothness * d
        np.add.at(gp, adj[:, 0], g)
        np.add.at(gp, adj[:, 1], -g)
    return float(loss), gp, gn


def sample_pairs(manifest: DatasetManifest, n_pairs: int, rng: np.random.Generator):
    """Draw ``n_pairs`` (anomalous segment, normal segment) pairs uniformly with replacement."""
    pos = manifest.with_label(Label.ANOMALOUS)
    neg = manifest.with_label(Label.NORMAL)
    if not pos or not neg:
        raise FormatError(
            f"manifest needs both classes to form pairs ({len(pos)} anomalous, {len(neg)} normal segments)")
    pi = rng.integers(0, len(pos), size=n_pairs)
    ni = rng.integers(0, len(neg), size=n_pairs)
    return [(pos[a], neg[b]) for a, b in zip(pi, ni)]


class PooledFeatures:
    """Loads cuboids on first use and caches their pooled (n_cells, C) cell matrices.

    Pooling has no parameters, so caching it is exact.
    """

    def __init__(self, manifest: DatasetManifest, cell_size: int = 2, dtype=np.float32, loader=None):
        self.manifest = manifest
        self.cell_size = cell_size
        self.dtype = np.dtype(dtype)
        self.loader = loader
        self._cache: dict[tuple[str, int], np.ndarray] = {}

    def load(self, entry: ManifestEntry):
        if self.loader is not None:
            return self.loader(entry)
        path = self.manifest.resolve(entry)
        if not path.exists():
            raise FormatError(f"missing feature file {path} (video {entry.video_id}, segment {entry.segment_index})")
        return read_cuboid(path, entry.video_id, entry.segment_index)

    def __getitem__(self, entry: ManifestEntry) -> np.ndarray:
        key = (entry.video_id, entry.segment_index)
        got = self._cache.get(key)
        if got is None:
            cub = self.load(entry)
            got = net.pool_cuboid(cub.data, self.cell_size).astype(self.dtype)
            self._cache[key] = got
        return got


def score_manifest(params: net.ClassifierParams, features: PooledFeatures) -> dict[str, ScoreMap]:
    """EVAL-mode cell scores for every segment, batched one video at a time."""
    by_video: dict[str, list[ManifestEntry]] = {}
    for e in features.manifest.entries:
        by_video.setdefault(e.video_id, []).append(e)
    out = {}
    for vid, entries in by_video.items():
        entries = sorted(entries, key=lambda e: e.segment_index)
        X = np.stack([features[e] for e in entries])
        if X.shape[-1] != params.widths[0]:
            raise ShapeError(f"features of {vid} have {X.shape[-1]} channels, checkpoint expects {params.widths[0]}")
        s, _ = net.forward(params, X, net.Mode.EVAL)
        out[vid] = ScoreMap(vid, {e.segment_index: s[i].copy() for i, e in enumerate(entries)})
    return out


@dataclass
class TrainingLog:
    records: list[tuple[int, float, float | None]] = field(default_factory=list)
    pairs: list[tuple[int, str, int, str, int, float]] = field(default_factory=list)

    def format(self) -> str:
        lines = []
        for it, loss, auc in self.records:
            lines.append(f"{it} {loss:.17g}" + ("" if auc is None else f" {auc:.17g}"))
        return "".join(line + "\n" for line in lines)

    def format_pairs(self) -> str:
        return "".join(f"{it} {pv}:{ps} {nv}:{ns} {loss:.17g}\n" for it, pv, ps, nv, ns, loss in self.pairs)

    def write(self, path) -> None:
        Path(path).write_text(self.format(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "TrainingLog":
        out = cls()
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if len(parts) not in (2, 3):
                    raise ValueError
                auc = float(parts[2]) if len(parts) == 3 else None
                out.records.append((int(parts[0]), float(parts[1]), auc))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: malformed training-log line") from None
        return out

    @property
    def losses(self) -> np.ndarray:
        return np.array([r[1] for r in self.records])

    @property
    def final_auc(self) -> float | None:
        aucs = [r[2] for r in self.records if r[2] is not None]
        return aucs[-1] if aucs else None


def _apply_step(params, grads, state, cfg: TrainConfig):
    lr = params.dtype.type(cfg.learning_rate)
    for k, (p, g) in enumerate(zip(params.trainable(), grads.arrays())):
        if cfg.optimizer is Optimizer.ADAGRAD:
            state[k] += g * g
            p -= lr * g / np.sqrt(state[k] + params.dtype.type(1e-8))
        else:
            p -= lr * g


def train(manifest: DatasetManifest, train_cfg: TrainConfig = TrainConfig(),
          loss_cfg: RankingLossConfig = RankingLossConfig(), *,
          features: PooledFeatures | None = None, eval_features: PooledFeatures | None = None,
          eval_tracks=None, eval_geom=None, params: net.ClassifierParams | None = None):
    """Train the classifier with the MIL ranking objective.

    Each iteration samples ``pairs_per_batch`` (positive, negative) bags and
    runs one TRAIN forward over all of them stacked as ``(2 * B_p, n_cells, C)``;
    batch norm therefore normalises within each bag. Ranking-loss gradients are
    averaged over pairs before one optimizer step.

    Returns ``(params, TrainingLog)``. Output is a pure function of the inputs and ``train_cfg.seed``.
    """
    dtype = np.dtype(train_cfg.precision)
    if features is None:
        features = PooledFeatures(manifest, train_cfg.cell_size, dtype)
    if params is None:
        params = net.init(train_cfg.seed, train_cfg.widths, train_cfg.dropout, train_cfg.bn_momentum, dtype)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([train_cfg.seed, 1])))
    state = [np.zeros_like(p) for p in params.trainable()]
    B = train_cfg.pairs_per_batch
    total = train_cfg.iterations
    history = TrainingLog()
    # Fail early on a single-class manifest, even for zero iterations.
    sample_pairs(manifest, 1, np.random.Generator(np.random.PCG64(0)))

    for it in range(1, total + 1):
        pairs = sample_pairs(manifest, B, rng)
        X = np.stack([features[p] for p, _ in pairs] + [features[n] for _, n in pairs])
        try:
            scores, tape = net.forward(params, X, net.Mode.TRAIN, rng)
        except NumericalError as exc:
            ids = ", ".join(f"{p.video_id}:{p.segment_index}/{n.video_id}:{n.segment_index}" for p, n in pairs)
            raise NumericalError(f"iteration {it}: {exc}; bags {ids}") from exc
        upstream = np.zeros(scores.shape, dtype=np.float64)
        losses = np.empty(B)
        for i, (p, n) in enumerate(pairs):
            loss, gp, gn = ranking_loss(BagScores.from_scores(scores[i]),
                                        BagScores.from_scores(scores[B + i]), loss_cfg)
            if not np.isfinite(loss):
                raise NumericalError(f"iteration {it}: non-finite loss for pair "
                                     f"{p.video_id}:{p.segment_index} / {n.video_id}:{n.segment_index}")
            losses[i] = loss
            upstream[i] += gp
            upstream[B + i] += gn
            if train_cfg.record_pairs:
                history.pairs.append((it, p.video_id, p.segment_index, n.video_id, n.segment_index, loss))
        grads, _ = net.backward(tape, upstream / B, input_grad=False)
        if loss_cfg.weight_decay:
            wd = dtype.type(loss_cfg.weight_decay)
            for g, w in zip(grads.weights, params.weights):
                g += wd * w
        _apply_step(params, grads, state, train_cfg)

        auc = None
        if eval_features is not None and (
                it == total or (train_cfg.eval_every and it % train_cfg.eval_every == 0)):
            kwargs = {} if eval_geom is None else {"geom": eval_geom}
            auc = evaluate(score_manifest(params, eval_features), eval_tracks or [], **kwargs).auc
        history.records.append((it, float(losses.mean()), auc))
        if it == 1 or it % 100 == 0 or it == total:
            log.info("iter %d loss %.4f%s", it, losses.mean(), "" if auc is None else f" auc {auc:.4f}")
    return params, history
