import csv
import hashlib
import json

import numpy as np
import pytest

from lens_lab import cli, corpus, subspace
from lens_lab.corpus import EmbeddingDump
from lens_lab.model import load_checkpoint

ENV = {}


def _run(*argv, env=ENV):
    return cli.main([str(a) for a in argv], env=env)


@pytest.fixture
def cfg_path(tmp_path, tiny_doc):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_doc))
    return path


@pytest.fixture
def pretrained_ckpt(tmp_path, cfg_path):
    out = tmp_path / "pre"
    assert _run("pretrain", "--config", cfg_path, "--out", out) == 0
    return out / "pretrained.ckpt"


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_is_idempotent_and_manifest_hashes_match(tmp_path, cfg_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _run("gen", "--config", cfg_path, "--out", a) == 0
    assert _run("gen", "--config", cfg_path, "--out", b) == 0
    manifest = json.loads((a / "manifest.json").read_text())
    assert set(manifest["files"]) == {"probing.json", "manipulation.json", "heldout.json"}
    for name, digest in manifest["files"].items():
        assert _sha(a / name) == digest == _sha(b / name)
    assert manifest["counts"]["probing_per_lang"] == 20
    assert json.loads((a / "config.json").read_text())["corpus"]["probe_n"] == 20


def test_every_command_echoes_its_config(tmp_path, cfg_path):
    out = tmp_path / "g"
    assert _run("gen", "--config", cfg_path, "--out", out, "--seed", 4, "--set", "lens.lambda1=0.25") == 0
    echo = json.loads((out / "config.json").read_text())
    assert echo["seed"] == 4 and echo["lens"]["lambda1"] == 0.25 and echo["lens"]["rank"] == 2


def test_env_seed_wins(tmp_path, cfg_path):
    out = tmp_path / "g"
    assert _run("gen", "--config", cfg_path, "--out", out, "--seed", 4, env={"LENS_SEED": "9"}) == 0
    assert json.loads((out / "config.json").read_text())["seed"] == 9


def test_exit_codes(tmp_path, cfg_path, capsys):
    assert _run("frobnicate") == 1
    assert _run("gen", "--config", cfg_path) == 1  # --out missing
    assert _run("gen", "--out", tmp_path / "x", "--set", "lens.lambda_l={\"l1\": 1}") == 1
    assert "'l2'" in capsys.readouterr().err
    assert _run("gen", "--out", tmp_path / "x", "--set", "nodot=1") == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert _run("gen", "--config", bad, "--out", tmp_path / "x") == 1
    assert _run("enhance", "--config", cfg_path, "--out", tmp_path / "x", "--checkpoint", tmp_path / "nope.ckpt") == 3
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"LENSCKPT garbage")
    assert _run("eval", "--config", cfg_path, "--out", tmp_path / "x", "--checkpoint", junk) == 3
    assert _run("sweep", "--config", cfg_path, "--out", tmp_path / "x", "--checkpoint", junk, "--axis", "lambda1",
                "--grid", "1", "--parallel", "0") == 1


def test_numerical_failure_exit_code(tmp_path, cfg_path):
    out = tmp_path / "boom"
    code = _run("pretrain", "--config", cfg_path, "--out", out, "--set", "train.pretrain_lr=1e30",
                "--set", "train.pretrain_steps=40")
    assert code == 2


def test_enhance_eval_and_export(tmp_path, cfg_path, pretrained_ckpt):
    data = tmp_path / "data"
    assert _run("gen", "--config", cfg_path, "--out", data) == 0
    run = tmp_path / "run1"
    assert _run("enhance", "--config", cfg_path, "--out", run, "--checkpoint", pretrained_ckpt, "--data", data) == 0
    for name in ("metrics.csv", "enhanced.ckpt", "subspaces.json", "manifest.json", "eval_run1_seed0.json"):
        assert (run / name).exists(), name
    ev = json.loads((run / "eval_run1_seed0.json").read_text())
    assert set(ev["fidelity"]) == {"l0", "l1", "l2"}

    # evaluating the enhanced model against its backbone with the run's subspaces
    ev_dir = tmp_path / "ev"
    assert _run("eval", "--config", cfg_path, "--out", ev_dir, "--checkpoint", run / "enhanced.ckpt",
                "--reference", pretrained_ckpt, "--subspaces", run / "subspaces.json") == 0
    again = json.loads((ev_dir / "eval_ev_seed0.json").read_text())
    assert again["fidelity"] == ev["fidelity"] and again["central_drift"] == ev["central_drift"]

    pca = tmp_path / "pca"
    assert _run("export-pca", "--config", cfg_path, "--out", pca, "--checkpoint", run / "enhanced.ckpt",
                "--subspaces", run / "subspaces.json") == 0
    with open(pca / "pca_pca_seed0.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2 * 3 * 12  # layers x subspaces x languages x sentences


def test_eval_of_untrained_checkpoint_has_chance_retrieval(tmp_path, cfg_path):
    pre = tmp_path / "pre0"
    assert _run("pretrain", "--config", cfg_path, "--out", pre, "--set", "train.pretrain_steps=0",
                "--set", "eval.n_eval=60", "--set", "eval.retrieval_len=8") == 0
    out = tmp_path / "ev"
    assert _run("eval", "--config", pre / "config.json", "--out", out, "--checkpoint", pre / "pretrained.ckpt") == 0
    ev = json.loads((out / "eval_ev_seed0.json").read_text())
    accs = [a for per in ev["retrieval"].values() for a in per.values()]
    assert max(accs) <= 0.1
    assert all(v == 0.0 for v in ev["central_drift"].values())


def test_sweep_writes_one_dir_per_point(tmp_path, cfg_path, pretrained_ckpt):
    out = tmp_path / "sw"
    assert _run("sweep", "--config", cfg_path, "--out", out, "--checkpoint", pretrained_ckpt,
                "--axis", "lambda_l", "--grid", "0,0.5,1") == 0
    dirs = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert dirs == ["lambda_l_00_0", "lambda_l_01_0.5", "lambda_l_02_1"]
    with open(out / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["status"] for r in rows] == ["ok"] * 3


def test_probe_checkpoint_default_rank(tmp_path, cfg_path, pretrained_ckpt):
    out = tmp_path / "pr"
    assert _run("probe", "--config", cfg_path, "--out", out, "--input", pretrained_ckpt) == 0
    subs = subspace.load_subspaces(out / "subspaces.json")
    assert [s.layer for s in subs] == [1, 2] and all(s.r == 2 for s in subs)
    out2 = tmp_path / "pr2"
    assert _run("probe", "--config", cfg_path, "--out", out2, "--input", pretrained_ckpt, "--layer", 0,
                "--rank", 1) == 0
    (one,) = subspace.load_subspaces(out2 / "subspaces.json")
    assert one.layer == 0 and one.r == 1
    assert load_checkpoint(pretrained_ckpt).config.n_layers == 3


def test_probe_dump_round_trip_and_degenerate_warning(tmp_path):
    rng = np.random.default_rng(0)
    d, langs = 6, ["en", "fr", "de", "zh"]
    centers = rng.normal(size=(4, d)) * 3
    labels = np.repeat(np.arange(4), 50)
    dump = EmbeddingDump(d, langs, labels, centers[labels] + rng.normal(scale=0.1, size=(200, d)))
    path = tmp_path / "emb.bin"
    corpus.write_embedding_dump(dump, path)
    out = tmp_path / "pd"
    assert _run("probe", "--out", out, "--input", path, "--central", "fr") == 0
    (sub,) = subspace.load_subspaces(out / "subspaces.json")
    assert sub.r == 3 and sub.language_set.languages == tuple(langs)
    assert sub.language_set.central_index == 1
    assert np.abs(sub.m_s.T @ sub.m_s - np.eye(3)).max() < 1e-10
    assert abs(sub.u_a @ sub.m_s).max() < 1e-8

    # two identical language means leave a degenerate specific direction
    same = EmbeddingDump(d, langs, labels, np.vstack([centers[[0, 0, 1, 2]][labels]]))
    corpus.write_embedding_dump(same, path)
    with pytest.warns(subspace.DegenerateSubspaceWarning):
        assert _run("probe", "--out", tmp_path / "pdeg", "--input", path) == 0
