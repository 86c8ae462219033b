import numpy as np
import pytest

from stmil import net
from stmil.cli import main, read_config
from stmil.errors import UsageError
from stmil.evalkit import ScoreMap, read_scores, write_scores
from stmil.feature_store import (
    DatasetManifest,
    FeatureCuboid,
    Label,
    ManifestEntry,
    load_planted_truth,
    write_cuboid,
    write_manifest,
)

SMALL = ["--n-normal-videos", "3", "--n-anomalous-videos", "3", "--segments-per-video", "3",
         "--dims", "8,2,6,6"]
NET = ["--widths", "8,16,1", "--pairs-per-batch", "4"]


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", *SMALL, "--seed", "0", "--out", str(root / "train")]) == 0
    assert main(["synth", *SMALL, "--seed", "1", "--split", "test", "--out", str(root / "test")]) == 0
    return root


def test_synth_writes_manifest(synth, capsys):
    lines = [ln for ln in (synth / "train" / "manifest.txt").read_text().splitlines() if not ln.startswith("#")]
    assert len(lines) == 18
    assert (synth / "train" / "planted.txt").exists() and (synth / "train" / "annotations.txt").exists()
    assert main(["synth", *SMALL, "--seed", "0", "--out", str(synth / "train")]) == 0
    assert capsys.readouterr().out.strip().endswith("unchanged")


def test_synth_unwritable_destination(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["synth", *SMALL, "--out", str(blocker / "ds")]) != 0
    assert not (blocker / "ds" / "manifest.txt").exists()


def test_synth_bad_geometry_is_usage_error(tmp_path):
    assert main(["synth", "--dims", "8,2,5,6", "--out", str(tmp_path)]) == 1


def test_train_zero_epochs_matches_init(synth, tmp_path):
    ck = tmp_path / "m.milc"
    assert main(["train", *NET, "--epochs", "0", "--seed", "4", "--manifest", str(synth / "train" / "manifest.txt"),
                 "--checkpoint", str(ck)]) == 0
    got, ref = net.load_checkpoint(ck), net.init(4, (8, 16, 1))
    assert all(np.array_equal(a, b) for a, b in zip(got.arrays(), ref.arrays()))


def test_train_score_eval_pipeline(synth, tmp_path, capsys):
    ck = tmp_path / "m.milc"
    rc = main(["train", *NET, "--epochs", "2", "--iterations-per-epoch", "10", "--pair-log", "yes",
               "--manifest", str(synth / "train" / "manifest.txt"), "--checkpoint", str(ck),
               "--eval-manifest", str(synth / "test" / "manifest.txt"), "--out", str(tmp_path / "run")])
    assert rc == 0
    log_lines = (tmp_path / "run" / "train.log").read_text().splitlines()
    assert log_lines[0].startswith("1 ") and len(log_lines[-1].split()) == 3
    assert len((tmp_path / "run" / "train_pairs.log").read_text().splitlines()) == 80
    assert "held-out frame AUC" in capsys.readouterr().out

    scores = tmp_path / "scores"
    for _ in range(2):
        assert main(["score", "--checkpoint", str(ck), "--manifest", str(synth / "test" / "manifest.txt"),
                     "--out", str(scores)]) == 0
        snapshot = {p.name: p.read_bytes() for p in scores.iterdir()}
        if _ == 0:
            first = snapshot
    assert first == snapshot and len(first) == 6
    line = (scores / "normal_000.scores").read_text().splitlines()[0].split()
    assert len(line) == 1 + 9

    out = tmp_path / "eval"
    assert main(["eval", "--scores", str(scores), "--annotations", str(synth / "test" / "annotations.txt"),
                 "--frame-size", "96", "--feature-spatial", "6", "--out", str(out)]) == 0
    metrics = dict(ln.split() for ln in (out / "metrics.txt").read_text().splitlines())
    assert set(metrics) == {"frame_auc", "videos", "frames", "hit_rate"}
    assert metrics["frames"] == str(6 * 3 * 64)
    assert len(list((out / "curves").glob("*.csv"))) == 6


def test_zero_checkpoint_scores_half(synth, tmp_path):
    ck = tmp_path / "zero.milc"
    net.save_checkpoint(net.zero_params((8, 16, 1)), ck)
    assert main(["score", "--checkpoint", str(ck), "--manifest", str(synth / "test" / "manifest.txt"),
                 "--out", str(tmp_path / "s")]) == 0
    for p in (tmp_path / "s").glob("*.scores"):
        sm = read_scores(p)
        assert all(np.all(v == 0.5) for v in sm.segments.values())


def _oracle_scores(synth, out, constant=None):
    truth = load_planted_truth(synth / "test" / "planted.txt")
    out.mkdir()
    for i in range(3):
        for kind in ("normal", "anomaly"):
            vid = f"{kind}_{i:03d}"
            segs = {}
            for s in range(3):
                v = np.zeros(9, np.float32)
                pv = truth.videos.get(vid)
                if pv and pv.first_segment <= s <= pv.last_segment:
                    v[list(pv.cells)] = 1.0
                segs[s] = np.full(9, constant, np.float32) if constant is not None else v
            write_scores(ScoreMap(vid, segs), out / f"{vid}.scores")


@pytest.mark.parametrize("constant, auc", [(None, 1.0), (0.3, 0.5)])
def test_eval_reference_scores(synth, tmp_path, constant, auc):
    _oracle_scores(synth, tmp_path / "s", constant)
    assert main(["eval", "--scores", str(tmp_path / "s"), "--annotations", str(synth / "test" / "annotations.txt"),
                 "--frame-size", "96", "--feature-spatial", "6", "--out", str(tmp_path / "e")]) == 0
    metrics = dict(ln.split() for ln in (tmp_path / "e" / "metrics.txt").read_text().splitlines())
    assert float(metrics["frame_auc"]) == auc
    if constant is None:
        assert float(metrics["hit_rate"]) == 1.0


def test_missing_feature_names_path(tmp_path, capsys):
    m = DatasetManifest([ManifestEntry("feat/a.fcub", "a", 0, Label.ANOMALOUS),
                         ManifestEntry("feat/b.fcub", "b", 0, Label.NORMAL)])
    write_manifest(m, tmp_path / "manifest.txt")
    rc = main(["train", *NET, "--epochs", "1", "--manifest", str(tmp_path / "manifest.txt"),
               "--checkpoint", str(tmp_path / "m.milc")])
    assert rc == 2
    assert "a.fcub" in capsys.readouterr().err
    assert not (tmp_path / "m.milc").exists()


def test_non_finite_training_exits_3(tmp_path):
    entries = []
    for vid, label in (("a", Label.ANOMALOUS), ("b", Label.NORMAL)):
        write_cuboid(FeatureCuboid(vid, 0, np.full((8, 2, 6, 6), 3e38, np.float32)), tmp_path / f"{vid}.fcub")
        entries.append(ManifestEntry(f"{vid}.fcub", vid, 0, label))
    write_manifest(DatasetManifest(entries), tmp_path / "manifest.txt")
    rc = main(["train", *NET, "--epochs", "1", "--iterations-per-epoch", "1", "--manifest",
               str(tmp_path / "manifest.txt"), "--checkpoint", str(tmp_path / "m.milc")])
    assert rc == 3


def test_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 1
    assert main(["train", "--manifest", "x"]) == 1  # no checkpoint
    assert main(["train", "--optimizer", "adam", "--manifest", "x", "--checkpoint", "y"]) == 1
    assert main(["score", "--manifest", str(tmp_path / "nope.txt"), "--checkpoint", str(tmp_path / "c"),
                 "--out", str(tmp_path)]) == 2


def test_config_file_and_flag_precedence(synth, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# run\nwidths = 8,16,1\nepochs = 0\nseed = 9\n")
    ck = tmp_path / "m.milc"
    assert main(["train", "--config", str(cfg), "--manifest", str(synth / "train" / "manifest.txt"),
                 "--checkpoint", str(ck)]) == 0
    assert np.array_equal(net.load_checkpoint(ck).weights[0], net.init(9, (8, 16, 1)).weights[0])
    assert main(["train", "--config", str(cfg), "--seed", "10", "--manifest",
                 str(synth / "train" / "manifest.txt"), "--checkpoint", str(ck)]) == 0
    assert np.array_equal(net.load_checkpoint(ck).weights[0], net.init(10, (8, 16, 1)).weights[0])
    cfg.write_text("colour = blue\n")
    assert main(["train", "--config", str(cfg), "--manifest", "x", "--checkpoint", "y"]) == 1
    cfg.write_text("no equals sign\n")
    with pytest.raises(UsageError):
        read_config(cfg)
