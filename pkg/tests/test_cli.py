import json

import numpy as np
import pytest

from hetbip.cli import main
from hetbip.vectors import read_vectors

DIMS = ["--text-dim", "16", "--image-dim", "8"]
WALKS = ["--walks-per-node", "2"]


def run(*argv):
    return main([str(a) for a in argv])


def test_gradcheck(capsys, tmp_path):
    assert run("gradcheck", "--seed", 7, "--out", tmp_path) == 0
    out = capsys.readouterr().out
    err = float(out.split()[-1])
    assert err <= 1e-4
    assert json.loads((tmp_path / "gradcheck.json").read_text())["max_rel_err"] == pytest.approx(err, rel=1e-3)
    assert (tmp_path / "manifest.json").exists()
    # a grossly wrong step size fails the tolerance: numerical exit code
    assert run("gradcheck", "--seed", 7, "--h", 1.0) == 3


def test_usage_errors(capsys, tmp_path):
    assert run("gradcheck", "--bogus") == 1
    assert "usage" in capsys.readouterr().err
    assert run("nope") == 1
    assert run("evaluate", "--out", tmp_path) == 1
    assert run("gradcheck", "--threads", 0) == 1
    assert run("baseline", "--data", tmp_path, "--out", tmp_path / "o", "--variant", "svm") == 1


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# run settings\nseed = 3\nd = 6\n")
    assert run("gradcheck", "--config", cfg, "--out", tmp_path / "a") == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 3 and man["config"]["d"] == 6
    assert str(cfg) in man["inputs"]
    # flags win over the file
    assert run("gradcheck", "--config", cfg, "--seed", 4, "--out", tmp_path / "b") == 0
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["seed"] == 4
    cfg.write_text("seed = 3\nwalk-length = 9\n")
    assert run("gradcheck", "--config", cfg) == 1
    assert "unknown config keys" in capsys.readouterr().err
    cfg.write_text("model = svm\n")
    assert run("evaluate", "--config", cfg, "--out", tmp_path, "--embeddings", "x", "--labels", "y") == 1
    cfg.write_text("seed = 1\nseed = 2\n")
    assert run("gradcheck", "--config", cfg) == 1
    assert run("gradcheck", "--config", tmp_path / "missing.cfg") == 1


def test_data_errors(tmp_path, capsys):
    assert run("ingest", "--data", tmp_path / "none", "--out", tmp_path / "o") == 2
    d = tmp_path / "bad"
    d.mkdir()
    (d / "users.jsonl").write_text('{"id": "u1"}\n')
    (d / "tweets.jsonl").write_text('{"id": "t1", "author_id": "zz", "text": "x"}\n')
    (d / "edges.jsonl").write_text("")
    assert run("ingest", "--data", d, "--out", tmp_path / "o") == 2
    assert "data error" in capsys.readouterr().err


def test_synth_ingest_sample(tmp_path, capsys):
    assert run("synth", "--profile", "small", "--seed", 1, "--out", tmp_path / "d") == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["users"] == 200 and summary["tweets"] == 600
    assert run("ingest", "--data", tmp_path / "d", "--out", tmp_path / "i") == 0
    assert json.loads(capsys.readouterr().out)["edges"] == summary["edges"]
    man = json.loads((tmp_path / "i" / "manifest.json").read_text())
    assert len(man["inputs"]) == 7 and all(len(h) == 64 for h in man["inputs"].values())
    assert run("sample", "--data", tmp_path / "d", "--out", tmp_path / "s", *WALKS, "--walk-length", 10,
               "--window", 3) == 0
    walks = (tmp_path / "s" / "walks.txt").read_text().splitlines()
    assert len(walks) == 2 * 800 and all(len(w.split()) == 10 for w in walks)
    first = json.loads((tmp_path / "s" / "neighbors.jsonl").read_text().splitlines()[0])
    assert first["id"] == "u00000" and len(first["users"]) <= 10


def test_train_embed_evaluate_analyze(small_synth, tmp_path, capsys):
    m = tmp_path / "m"
    assert run("train", "--data", small_synth, "--out", m, *DIMS, *WALKS, "--epochs", 1, "--pairs-per-epoch", 128,
               "--seed", 2) == 0
    ids, E = read_vectors(m / "embeddings.tsv")
    assert (m / "embeddings.tsv").read_text().splitlines()[0] == f"{len(ids)} 128"
    assert len(json.loads((m / "losses.json").read_text())) == 1
    att = np.loadtxt(m / "attention.tsv", skiprows=1, usecols=(1, 2, 3))
    assert np.allclose(att.sum(axis=1), 1.0)
    man = json.loads((m / "manifest.json").read_text())
    assert man["command"] == "train" and man["config"]["pairs_per_epoch"] == 128

    assert run("embed", "--data", small_synth, "--checkpoint", m / "checkpoint.npz", "--out", tmp_path / "e",
               *DIMS) == 0
    assert (tmp_path / "e" / "embeddings.tsv").read_bytes() == (m / "embeddings.tsv").read_bytes()

    ev = tmp_path / "ev"
    assert run("evaluate", "--embeddings", m / "embeddings.tsv", "--labels", small_synth / "labels.jsonl",
               "--out", ev, "--k", 3) == 0
    metrics = json.loads((ev / "metrics.json").read_text())
    assert metrics["k"] == 3 and 0 <= metrics["mean"]["auroc"] <= 1
    assert "auroc" in (ev / "metrics.txt").read_text()
    assert run("evaluate", "--embeddings", m / "embeddings.tsv", "--labels", small_synth / "labels.jsonl",
               "--out", tmp_path / "ev2", "--k", 3, "--model", "rf", "--trees", 5) == 0

    an = tmp_path / "an"
    assert run("analyze", "--embeddings", m / "embeddings.tsv", "--graph", small_synth, "--labels",
               small_synth / "labels.jsonl", "--out", an, "--k-max", 4, *DIMS) == 0
    clusters = json.loads((an / "clusters.json").read_text())
    assert 2 <= clusters["k"] <= 4 and len(clusters["assignments"]) == 60
    coords = (an / "coords.tsv").read_text().splitlines()
    assert coords[0] == "id\tx\ty\tscore" and len(coords) == 61
    xy = np.array([[float(v) for v in row.split("\t")[1:3]] for row in coords[1:]])
    assert np.isfinite(xy).all()
    assert (an / "activity.tsv").exists() and (an / "wordfreq.tsv").exists()
    assert run("analyze", "--embeddings", m / "embeddings.tsv", "--graph", small_synth, "--out", an,
               "--k-min", 1, *DIMS) == 1


def test_embed_rejects_mismatched_checkpoint(small_synth, tmp_path):
    m = tmp_path / "m"
    assert run("train", "--data", small_synth, "--out", m, *DIMS, *WALKS, "--epochs", 0, "--dim", 8) == 0
    assert run("embed", "--data", small_synth, "--checkpoint", m / "checkpoint.npz", "--out", tmp_path / "e",
               "--text-dim", 16, "--image-dim", 8, "--hash-seed", 0) == 0
    other = tmp_path / "x.npz"
    other.write_bytes(b"junk")
    assert run("embed", "--data", small_synth, "--checkpoint", other, "--out", tmp_path / "e2", *DIMS) in (1, 2)


def test_baselines_cli(small_synth, tmp_path):
    b = tmp_path / "b"
    assert run("baseline", "--data", small_synth, "--variant", "utv", "--out", b, "--k", 3, "--pca-dim", 8, *DIMS) == 0
    rows = [json.loads(x) for x in (b / "predictions.jsonl").read_text().splitlines()]
    assert len(rows) == 60 and set(rows[0]) == {"user_id", "score", "probability"}
    assert all(r["score"] in (-1.0, 1.0) and 0 <= r["probability"] <= 1 for r in rows)
    assert json.loads((b / "metrics.json").read_text())["n"] == 60
    g = tmp_path / "g"
    assert run("baseline", "--data", small_synth, "--variant", "gcn", "--out", g, "--gcn-steps", 5, *DIMS, *WALKS) == 0
    ids, Z = read_vectors(g / "embeddings.tsv")
    assert Z.shape == (180, 128)
