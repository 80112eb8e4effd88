import dataclasses

import pytest

from ncgmm import config as cf
from ncgmm.errors import ConfigError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


def test_default_file_matches_dataclass_defaults():
    assert cf.load_config(cf.DEFAULT_CONFIG_PATH) == cf.Config()
    assert cf.load_config(None) == cf.Config()


def test_defaults():
    c = cf.Config()
    assert c.scenarios.n_train == 2000 and c.scenarios.n_dev == 200 and c.scenarios.horizon == 100
    assert (c.policy.hidden, c.policy.depth, c.policy.activation) == (32, 2, "gelu")
    assert (c.eval.steps, c.eval.band_dwell, c.eval.transient) == (3000, 500, 200)
    m = c.model()
    assert (m.A[0, 0], m.B[0, 0], m.C[0, 0], m.E[0, 0]) == (0.95, -0.5, 1.0, 0.3)
    w = c.loss
    assert (w.q_track, w.q_du, w.q_con, w.q_terminal) == (0.01, 0.1, 0.02, 0.01)


def test_train_config_carries_weights_and_seed():
    c = cf.parse_config({"seed": 4, "loss": {"q_du": 0.5}})
    tc = c.train_config()
    assert tc.seed == 4 and tc.weights.q_du == 0.5
    assert c.train_config(seed=9).seed == 9
    assert c.with_seed(11).seed == 11 and c.seed == 4


def test_partial_override(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text("[trainer]\nlr = 0.01\nepochs = 100\n[plant]\nA = [[0.9]]\n")
    c = cf.load_config(p)
    assert c.trainer.lr == 0.01 and c.trainer.epochs == 100 and c.trainer.batch_size == 64
    assert c.model().A[0, 0] == 0.9


def test_int_accepted_for_float():
    assert cf.parse_config({"trainer": {"lr": 1}}).trainer.lr == 1.0


@pytest.mark.parametrize("data,match", [
    ({"trainer": {"lr": -1.0}}, "trainer.lr"),
    ({"trainer": {"lr": "fast"}}, "trainer.lr: expected a number"),
    ({"trainer": {"epochs": 1.5}}, "trainer.epochs: expected an integer"),
    ({"trainer": {"lr_warmup": 1}}, "trainer.lr_warmup: expected true/false"),
    ({"trainer": {"seed": 3}}, "trainer.seed: unknown key"),
    ({"trainer": {"weights": 3}}, "trainer.weights: unknown key"),
    ({"trainer": {"learning_rate": 3}}, "trainer.learning_rate: unknown key"),
    ({"optimizer": {}}, "optimizer: unknown section"),
    ({"plant": {"A": [[1.0, 2.0]]}}, "plant"),
    ({"plant": {"A": [[0.9], [1.0, 2.0]]}}, "plant.A"),
    ({"plant": {"u_min": [6.0]}}, "plant"),
    ({"plant": "x"}, "plant: expected a table"),
    ({"loss": {"q_con": -0.1}}, "q_con"),
    ({"policy": {"hidden": 0}}, "policy.hidden"),
    ({"policy": {"activation": "relu"}}, "policy.activation"),
    ({"eval": {"steps": 0}}, "eval.steps"),
    ({"scenarios": {"n_train": 0}}, "scenarios.n_train"),
    ({"seed": -1}, "seed"),
])
def test_invalid(data, match):
    with pytest.raises(ConfigError, match=match.replace(".", r"\.")):
        cf.parse_config(data)


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        cf.load_config(tmp_path / "nope.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[trainer\nlr = 1\n")
    with pytest.raises(ConfigError):
        cf.load_config(bad)


def test_default_file_documents_every_key():
    data = tomllib.loads(cf.DEFAULT_CONFIG_PATH.read_text())
    assert set(data) == set(cf._SECTIONS) | {"seed"}
    for name, cls in cf._SECTIONS.items():
        keys = {f.name for f in dataclasses.fields(cls) if f.init} - cf._HIDDEN.get(name, set())
        assert set(data[name]) == keys, name
