"""Command line entry point: ``stmil synth|train|score|eval``.

Every numeric flag may also be given in a ``key = value`` config file passed
with ``--config``; flags on the command line win. Exit codes: 0 success,
1 usage error, 2 data/format error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import net
from .bagging import GridGeometry
from .errors import FormatError, StmilError, UsageError
from .evalkit import (
    FRAMES_PER_SEGMENT,
    evaluate,
    format_curves,
    format_roc,
    load_score_dir,
    parse_annotations,
    write_scores,
)
from .feature_store import SyntheticSpec, Split, generate_synthetic, load_manifest
from .mil_train import PooledFeatures, RankingLossConfig, TrainConfig, score_manifest, train

log = logging.getLogger("stmil")


def _ints(text):
    return tuple(int(v) for v in str(text).split(","))


def _bool(text):
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# name -> (type, default, help). Defaults mirror the component configs.
SYNTH_OPTS = {
    "n_normal_videos": (int, 20, "normal videos"),
    "n_anomalous_videos": (int, 20, "anomalous videos"),
    "segments_per_video": (int, 4, "64-frame segments per video"),
    "dims": (_ints, (528, 4, 14, 14), "cuboid dims C,T,H,W"),
    "cell_size": (int, 2, "spatial cell side in feature units"),
    "delta": (float, 4.0, "mean shift of planted anomalous cells"),
    "anomaly_cell_count": (int, 1, "planted cells per anomalous video"),
    "split": (str, "TRAIN", "split tag written to the manifest"),
}
TRAIN_OPTS = {
    "pairs_per_batch": (int, 30, "positive/negative bag pairs per iteration"),
    "learning_rate": (float, 0.001, "step size"),
    "optimizer": (str, "adagrad", "adagrad or sgd"),
    "epochs": (int, 10, "epochs"),
    "iterations_per_epoch": (int, 100, "iterations per epoch"),
    "eval_every": (int, 0, "held-out AUC every N iterations (0: at the end only)"),
    "precision": (str, "float32", "float32 or float64"),
    "cell_size": (int, 2, "spatial cell side in feature units"),
    "widths": (_ints, net.DEFAULT_WIDTHS, "layer widths, comma separated"),
    "dropout": (float, 0.6, "dropout rate"),
    "bn_momentum": (float, 0.1, "batch-norm running-stat momentum"),
    "margin": (float, 1.0, "ranking hinge margin"),
    "sparsity": (float, 0.0, "sparsity weight on positive-bag scores"),
    "smoothness": (float, 0.0, "spatial smoothness weight on positive-bag scores"),
    "weight_decay": (float, 0.0, "L2 weight decay on weight matrices"),
    "pair_log": (_bool, False, "also write per-pair losses to train_pairs.log"),
}
SCORE_OPTS = {
    "cell_size": (int, 2, "spatial cell side in feature units"),
}
EVAL_OPTS = {
    "frame_size": (int, 224, "frame side in pixels"),
    "feature_spatial": (int, 14, "feature map side H"),
    "cell_size": (int, 2, "spatial cell side in feature units"),
    "frames_per_segment": (int, FRAMES_PER_SEGMENT, "frames per segment"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stmil", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, opts):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
        for name, (typ, _, text) in opts.items():
            p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None, help=text)

    p = sub.add_parser("synth", help="generate a synthetic planted-anomaly dataset")
    common(p, SYNTH_OPTS)

    p = sub.add_parser("train", help="train the classifier with the MIL ranking loss")
    common(p, TRAIN_OPTS)
    p.add_argument("--manifest")
    p.add_argument("--features", help="root for relative cuboid paths (default: manifest dir)")
    p.add_argument("--checkpoint")
    p.add_argument("--eval-manifest")
    p.add_argument("--eval-annotations")

    p = sub.add_parser("score", help="score every manifest segment with a checkpoint")
    common(p, SCORE_OPTS)
    p.add_argument("--manifest")
    p.add_argument("--features")
    p.add_argument("--checkpoint")

    p = sub.add_parser("eval", help="frame-level ROC/AUC, hit rate and curve export")
    common(p, EVAL_OPTS)
    p.add_argument("--scores", help="directory of <video_id>.scores files")
    p.add_argument("--annotations")
    return parser


def read_config(path) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in text.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _resolve(args, opts, extra=()):
    """Merge defaults < config file < flags into a plain dict."""
    file_cfg = read_config(args.config) if args.config else {}
    known = set(opts) | set(extra) | {"seed", "out"}
    unknown = set(file_cfg) - known
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cfg = {}
    for name, (typ, default, _) in opts.items():
        flag = getattr(args, name)
        if flag is not None:
            cfg[name] = flag
        elif name in file_cfg:
            try:
                cfg[name] = typ(file_cfg[name])
            except ValueError as exc:
                raise UsageError(f"config key {name}: {exc}") from None
        else:
            cfg[name] = default
    for name in ("seed", "out", *extra):
        flag = getattr(args, name, None)
        if flag is None and name in file_cfg:
            flag = int(file_cfg[name]) if name == "seed" else file_cfg[name]
        cfg[name] = flag
    if cfg["seed"] is None:
        cfg["seed"] = 0
    return cfg


def _require(cfg, *names):
    for n in names:
        if not cfg.get(n):
            raise UsageError(f"--{n.replace('_', '-')} is required")


def cmd_synth(args) -> int:
    cfg = _resolve(args, SYNTH_OPTS)
    _require(cfg, "out")
    try:
        split = Split(cfg["split"].upper())
        spec = SyntheticSpec(cfg["n_normal_videos"], cfg["n_anomalous_videos"], cfg["segments_per_video"],
                             tuple(cfg["dims"]), cfg["cell_size"], cfg["delta"], cfg["anomaly_cell_count"],
                             cfg["seed"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest, truth, changed = generate_synthetic(spec, cfg["out"], split)
    print(f"videos: {spec.n_normal_videos} normal, {spec.n_anomalous_videos} anomalous; "
          f"segments/video: {spec.segments_per_video}; entries: {len(manifest.entries)}; "
          f"dims: {'x'.join(map(str, spec.dims))}; cells/segment: {spec.n_cells}")
    print("unchanged" if changed == 0 else f"wrote {changed} files to {cfg['out']}")
    return 0


def _manifest(path, split, root=None):
    if not Path(path).exists():
        raise FormatError(f"manifest not found: {path}")
    return load_manifest(path, split, root)


def cmd_train(args) -> int:
    extra = ("manifest", "features", "checkpoint", "eval_manifest", "eval_annotations")
    cfg = _resolve(args, TRAIN_OPTS, extra)
    _require(cfg, "manifest", "checkpoint")
    try:
        tcfg = TrainConfig(cfg["pairs_per_batch"], cfg["learning_rate"], cfg["optimizer"].lower(), cfg["epochs"],
                           cfg["iterations_per_epoch"], cfg["seed"], cfg["eval_every"], cfg["precision"],
                           cfg["cell_size"], tuple(cfg["widths"]), cfg["dropout"], cfg["bn_momentum"],
                           cfg["pair_log"])
        lcfg = RankingLossConfig(cfg["margin"], cfg["sparsity"], cfg["smoothness"], cfg["weight_decay"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = _manifest(cfg["manifest"], Split.TRAIN, cfg["features"])
    eval_features = tracks = None
    if cfg["eval_manifest"]:
        em = _manifest(cfg["eval_manifest"], Split.TEST)
        eval_features = PooledFeatures(em, tcfg.cell_size, tcfg.precision)
        ann = cfg["eval_annotations"] or Path(cfg["eval_manifest"]).parent / "annotations.txt"
        tracks = parse_annotations(ann) if Path(ann).exists() else []
    params, history = train(manifest, tcfg, lcfg, eval_features=eval_features, eval_tracks=tracks)
    ckpt = Path(cfg["checkpoint"])
    out = Path(cfg["out"]) if cfg["out"] else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    net.save_checkpoint(params, ckpt)
    history.write(out / "train.log")
    if tcfg.record_pairs:
        (out / "train_pairs.log").write_text(history.format_pairs(), encoding="utf-8")
    losses = history.losses
    if losses.size:
        print(f"iterations: {losses.size}; loss first {losses[0]:.4f} last {losses[-1]:.4f}")
    if history.final_auc is not None:
        print(f"held-out frame AUC: {history.final_auc:.4f}")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_score(args) -> int:
    cfg = _resolve(args, SCORE_OPTS, ("manifest", "features", "checkpoint"))
    _require(cfg, "manifest", "checkpoint", "out")
    params = net.load_checkpoint(cfg["checkpoint"])
    manifest = _manifest(cfg["manifest"], Split.TEST, cfg["features"])
    maps = score_manifest(params, PooledFeatures(manifest, cfg["cell_size"], params.dtype))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    for vid, sm in maps.items():
        write_scores(sm, out / f"{vid}.scores")
    print(f"scored {sum(m.n_segments for m in maps.values())} segments of {len(maps)} videos into {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args, EVAL_OPTS, ("scores", "annotations"))
    _require(cfg, "scores", "annotations", "out")
    try:
        geom = GridGeometry(cfg["frame_size"], cfg["feature_spatial"], cfg["cell_size"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    maps = load_score_dir(cfg["scores"])
    if not maps:
        raise FormatError(f"no .scores files in {cfg['scores']}")
    tracks = {t.video_id: t for t in parse_annotations(cfg["annotations"])}
    if not set(tracks) & set(maps):
        raise FormatError("no video id is shared between scores and annotations")
    fps = cfg["frames_per_segment"]
    try:
        result = evaluate(maps, tracks, geom, fps)
    except ValueError as exc:
        raise FormatError(str(exc)) from None
    out = Path(cfg["out"])
    (out / "curves").mkdir(parents=True, exist_ok=True)
    (out / "roc.csv").write_text(format_roc(result.roc), encoding="utf-8")
    for vid, sm in sorted(maps.items()):
        (out / "curves" / f"{vid}.csv").write_text(format_curves(sm, tracks.get(vid), fps), encoding="utf-8")
    lines = [f"frame_auc {result.auc:.17g}", f"videos {result.n_videos}", f"frames {result.n_frames}"]
    if result.hit_rate is not None:
        lines.append(f"hit_rate {result.hit_rate:.17g}")
    (out / "metrics.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"frame-level AUC: {result.auc:.4f}")
    if result.hit_rate is not None:
        print(f"localization hit rate: {result.hit_rate:.4f}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "score": cmd_score, "eval": cmd_eval}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except StmilError as exc:
        print(f"stmil {args.command}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"stmil {args.command}: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:  # pragma: no cover
        print(f"stmil {args.command}: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
