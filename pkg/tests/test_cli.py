import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mispdpo import io, sae
from mispdpo.cli import main


@pytest.fixture(autouse=True)
def no_seed_env(monkeypatch):
    monkeypatch.delenv("MISP_SEED", raising=False)


def run(*argv):
    return main([str(a) for a in argv])


def write_pair(tmp_path, img_ids, txt_ids, dv=3, dt=2, seed=0):
    rng = np.random.default_rng(seed)
    io.write_jsonl(tmp_path / "img.jsonl", img_ids, rng.normal(size=(len(img_ids), dv)))
    io.write_jsonl(tmp_path / "txt.jsonl", txt_ids, rng.normal(size=(len(txt_ids), dt)))
    return tmp_path / "img.jsonl", tmp_path / "txt.jsonl"


def test_fuse_single_row(tmp_path):
    io.write_jsonl(tmp_path / "i.jsonl", ["a"], [[1.0, 2.0]])
    io.write_jsonl(tmp_path / "t.jsonl", ["a"], [[3.0, 4.0, 5.0]])
    assert run("fuse", "--image", tmp_path / "i.jsonl", "--text", tmp_path / "t.jsonl", "--output",
               tmp_path / "f.bin") == 0
    table = io.read_binary(tmp_path / "f.bin")
    assert table.ids == ["a"]
    np.testing.assert_array_equal(table.matrix, [[3, 4, 5, 6, 8, 10]])
    record = json.loads((tmp_path / "f.bin.run.json").read_text())
    assert record["command"] == "fuse" and len(record["input_digests"]) == 2


def test_fuse_byte_length(tmp_path):
    ids = [f"r{i}" for i in range(100)]
    img, txt = write_pair(tmp_path, ids, ids[::-1], dv=5, dt=7)
    assert run("fuse", "--image", img, "--text", txt, "--output", tmp_path / "f.bin") == 0
    assert (tmp_path / "f.bin").stat().st_size == 24 + 100 * 5 * 7 * 4


def test_fuse_disjoint_ids(tmp_path, capsys):
    img, txt = write_pair(tmp_path, ["a", "b"], ["c", "d"])
    assert run("fuse", "--image", img, "--text", txt, "--output", tmp_path / "f.bin", "--allow-partial") == 3
    assert not (tmp_path / "f.bin").exists()
    assert "image-only" in capsys.readouterr().err


def test_fuse_partial_overlap(tmp_path):
    img, txt = write_pair(tmp_path, ["a", "b", "c"], ["b", "c", "d"])
    assert run("fuse", "--image", img, "--text", txt, "--output", tmp_path / "f.bin") == 3
    assert not (tmp_path / "f.bin").exists()
    assert run("fuse", "--image", img, "--text", txt, "--output", tmp_path / "f.bin", "--allow-partial") == 0
    assert io.read_binary(tmp_path / "f.bin").ids == ["b", "c"]


def test_fuse_missing_input(tmp_path):
    assert run("fuse", "--image", tmp_path / "none", "--text", tmp_path / "none2", "--output", tmp_path / "o") == 3


@pytest.fixture
def sparse_dir(tmp_path):
    assert run("synth", "--kind", "sparse", "--rows", 200, "--dim", 24, "--out-dir", tmp_path, "--seed", 3) == 0
    return tmp_path


def test_train_sae_zero_epochs_is_init(sparse_dir):
    ckpt = sparse_dir / "sae.json"
    assert run("train-sae", "--diffs", sparse_dir / "diffs.bin", "--checkpoint", ckpt, "--epochs", 0,
               "--hidden-dim", 16, "--seed", 9, "--no-plot") == 0
    model = sae.load_checkpoint(ckpt)
    init = sae.init_model(model.config)
    for a, b in zip(model.params(), init.params()):
        np.testing.assert_array_equal(a, b)
    assert json.loads((sparse_dir / "sae.json.history.json").read_text())["epoch_loss"] == []


def test_train_sae_reduces_loss_and_is_reproducible(sparse_dir):
    args = ["train-sae", "--diffs", sparse_dir / "diffs.bin", "--epochs", 5, "--hidden-dim", 16]
    assert run(*args, "--checkpoint", sparse_dir / "a.json") == 0
    assert run(*args, "--checkpoint", sparse_dir / "b.json") == 0
    for suffix in ("", ".history.json", ".loss.png"):
        assert (sparse_dir / f"a.json{suffix}").read_bytes() == (sparse_dir / f"b.json{suffix}").read_bytes()
    hist = json.loads((sparse_dir / "a.json.history.json").read_text())
    assert hist["epoch_loss"][-1] < hist["initial_loss"]


def test_train_sae_rejects_non_finite_rows(tmp_path):
    (tmp_path / "d.jsonl").write_text('{"id": "a", "vec": [1.0, Infinity]}\n{"id": "b", "vec": [0.0, 1.0]}\n')
    assert run("train-sae", "--diffs", tmp_path / "d.jsonl", "--checkpoint", tmp_path / "c.json") == 3
    assert not (tmp_path / "c.json").exists()


def test_train_sae_empty_and_bad_config(tmp_path):
    io.write_binary(tmp_path / "e.bin", np.zeros((0, 4)), [])
    assert run("train-sae", "--diffs", tmp_path / "e.bin", "--checkpoint", tmp_path / "c.json") == 3
    io.write_binary(tmp_path / "d.bin", np.ones((3, 4)), ["a", "b", "c"])
    assert run("train-sae", "--diffs", tmp_path / "d.bin", "--checkpoint", tmp_path / "c.json",
               "--target-activation", 1.5) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_sae_divergence_exit_code(tmp_path):
    io.write_binary(tmp_path / "d.bin", np.ones((4, 3)), list("abcd"))
    code = run("train-sae", "--diffs", tmp_path / "d.bin", "--checkpoint", tmp_path / "c.json", "--epochs", 200,
               "--optimizer", "sgd", "--learning-rate", 1e3, "--batch-size", 4, "--hidden-dim", 4, "--no-plot")
    assert code == 4
    assert not (tmp_path / "c.json").exists()


def planted_run(root, seed, *extra):
    d = root / f"s{seed}"
    assert run("synth", "--kind", "planted", "--out-dir", d, "--seed", seed) == 0
    assert run("train-sae", "--diffs", d / "diffs.bin", "--checkpoint", d / "sae.json", "--no-plot",
               "--seed", seed) == 0
    assert run("select", "--positives", d / "positives.bin", "--candidates", d / "candidates.bin", "--checkpoint",
               d / "sae.json", "--output", d / "sel.jsonl", "--labels", d / "labels.jsonl", *extra) == 0
    return d, json.loads((d / "sel.jsonl").read_text().splitlines()[0])


@pytest.mark.slow
def test_select_planted_coverage(tmp_path):
    hits = [planted_run(tmp_path, s, "--diversity-weight", 1)[1]["coverage"] >= 3 for s in range(20)]
    assert np.mean(hits) >= 0.95


def test_select_k_larger_than_pool_and_top_k(tmp_path):
    d, m = planted_run(tmp_path, 0, "--k", 20)
    assert len(m["selected"]) == 12 and len(set(s["id"] for s in m["selected"])) == 12
    assert run("select", "--positives", d / "positives.bin", "--candidates", d / "candidates.bin", "--checkpoint",
               d / "sae.json", "--output", d / "top.jsonl", "--diversity-weight", 0, "--k", 4) == 0
    top = json.loads((d / "top.jsonl").read_text())
    pos = io.read_binary(d / "positives.bin").matrix[0]
    cand = io.read_binary(d / "candidates.bin")
    from mispdpo import negselect

    scores = negselect.score_candidates(sae.load_checkpoint(d / "sae.json"), pos - cand.matrix, cand.ids)
    order = sorted(range(12), key=lambda i: (-scores[i].score, i))[:4]
    assert [s["id"] for s in top["selected"]] == [cand.ids[i] for i in order]


def test_select_dimension_mismatch(tmp_path):
    d, _ = planted_run(tmp_path, 1)
    io.write_binary(d / "wide.bin", np.ones((2, 5)), ["x", "y"])
    assert run("select", "--positives", d / "wide.bin", "--candidates", d / "candidates.bin", "--checkpoint",
               d / "sae.json", "--output", d / "o.jsonl") == 3


def test_export_viz(tmp_path):
    d = tmp_path / "v"
    assert run("synth", "--kind", "planted", "--out-dir", d, "--per-factor", 5) == 0
    assert run("train-sae", "--diffs", d / "diffs.bin", "--checkpoint", d / "sae.json", "--epochs", 3,
               "--no-plot") == 0
    assert run("select", "--positives", d / "positives.bin", "--candidates", d / "candidates.bin", "--checkpoint",
               d / "sae.json", "--output", d / "sel.jsonl") == 0
    assert run("export-viz", "--manifest", d / "sel.jsonl", "--candidates", d / "candidates.bin", "--positives",
               d / "positives.bin", "--checkpoint", d / "sae.json", "--output", d / "viz.csv") == 0
    with open(d / "viz.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 20
    assert sum(int(r["selected"]) for r in rows) == 3
    assert sorted(int(r["rank"]) for r in rows if r["rank"]) == [1, 2, 3]
    assert (d / "viz.csv.png").read_bytes()[:4] == b"\x89PNG"
    assert run("export-viz", "--manifest", d / "sel.jsonl", "--candidates", d / "candidates.bin",
               "--positive-id", "nobody", "--output", d / "x.csv") == 3


def test_train_toy_zero_steps(tmp_path):
    out = tmp_path / "trace.jsonl"
    assert run("train-toy", "--output", out, "--steps", 0, "--seed", 2) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 1 and json.loads(lines[0])["step"] == 0
    assert (tmp_path / "trace.jsonl.png").exists()


def test_train_toy_bad_sampler_config(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("toy:\n  sampler: hardest\n")
    assert run("train-toy", "--output", tmp_path / "t.jsonl", "--config", cfg) == 2


def test_grad_check(capsys):
    assert run("grad-check", "--scope", "all") == 0
    out = capsys.readouterr().out
    assert out.count("PASS") == 3


def test_unknown_scope_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        run("grad-check", "--scope", "everything")
    assert exc.value.code == 2


def test_env_seed_and_flag(tmp_path, monkeypatch):
    monkeypatch.setenv("MISP_SEED", "5")
    assert run("train-toy", "--output", tmp_path / "a.jsonl", "--steps", 0, "--no-plot") == 0
    assert run("train-toy", "--output", tmp_path / "b.jsonl", "--steps", 0, "--no-plot", "--seed", 5) == 0
    assert run("train-toy", "--output", tmp_path / "c.jsonl", "--steps", 0, "--no-plot", "--seed", 6) == 0
    a, b, c = ((tmp_path / f"{n}.jsonl").read_bytes() for n in "abc")
    assert a == b != c


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "mispdpo.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "exit codes" in proc.stdout
