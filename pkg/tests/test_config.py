import json

import pytest

from mispdpo import config as C
from mispdpo.errors import ConfigError


@pytest.fixture(autouse=True)
def no_seed_env(monkeypatch):
    monkeypatch.delenv(C.SEED_ENV, raising=False)


def test_defaults_snapshot():
    cfg = C.default_config()
    assert cfg.to_dict() == {
        "sae": {"hidden_dim": 128, "sparsity_weight": 1.0, "target_activation": 0.05, "learning_rate": 1e-3,
                "batch_size": 64, "epochs": 50, "optimizer": "adam"},
        "selection": {"k": 3, "diversity_weight": 0.5},
        "dpo": {"beta": 0.5, "lam": 1.0},
        "toy": {"sampler": "diverse", "steps": 500, "toy_learning_rate": 0.05, "vocab_size": 16, "num_features": 8,
                "response_length": 4, "n_train": 16, "n_heldout": 64, "variants_per_factor": 2,
                "context_noise": 0.05, "init_scale": 0.01},
        "paths": {},
        "seed": 0,
    }


def test_published_hyperparameters():
    cfg = C.default_config()
    got = {"hidden_dim": cfg.sae.hidden_dim, "sparsity_weight": cfg.sae.sparsity_weight, "k": cfg.selection.k,
           "beta": cfg.dpo.beta, "lam": cfg.dpo.lam}
    assert got == C.REFERENCE_HYPERPARAMETERS


def test_env_seed(monkeypatch):
    monkeypatch.setenv(C.SEED_ENV, "41")
    assert C.default_config().seed == 41
    assert C.load_config(overrides={"seed": 7}).seed == 7
    monkeypatch.setenv(C.SEED_ENV, "abc")
    with pytest.raises(ConfigError):
        C.default_config()


def test_file_then_flags(tmp_path, monkeypatch):
    monkeypatch.setenv(C.SEED_ENV, "3")
    path = tmp_path / "cfg.yaml"
    path.write_text("seed: 11\nsae:\n  hidden_dim: 32\n  epochs: 5\ndpo:\n  beta: 0.2\nk: 4\npaths:\n  out: runs\n")
    cfg = C.load_config(path)
    assert (cfg.seed, cfg.sae.hidden_dim, cfg.sae.epochs, cfg.dpo.beta, cfg.selection.k) == (11, 32, 5, 0.2, 4)
    assert cfg.paths == {"out": "runs"}
    cfg = C.load_config(path, {"hidden-dim": 64, "seed": 1, "beta": None})
    assert (cfg.seed, cfg.sae.hidden_dim, cfg.dpo.beta) == (1, 64, 0.2)


def test_json_file(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"selection": {"k": 5, "diversity_weight": 2.0}}))
    cfg = C.load_config(path)
    assert cfg.selection.k == 5 and cfg.selection.diversity_weight == 2.0


@pytest.mark.parametrize("text", ["[1, 2]", "bogus_field: 1", "sae: 3", "dpo:\n  beta: -1\n", "k: [\n"])
def test_bad_files(tmp_path, text):
    path = tmp_path / "bad.yaml"
    path.write_text(text)
    with pytest.raises(ConfigError):
        C.load_config(path)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        C.load_config(tmp_path / "nope.yaml")


def test_derived_configs():
    cfg = C.load_config(overrides={"seed": 5, "k": 2, "toy_learning_rate": 0.1})
    sc = cfg.sae_config(12)
    assert (sc.input_dim, sc.hidden_dim, sc.seed) == (12, 128, 5)
    tc = cfg.toy_config()
    assert (tc.k, tc.learning_rate, tc.seed, tc.dpo) == (2, 0.1, 5, cfg.dpo)
