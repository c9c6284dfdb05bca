import numpy as np
import pytest

from ivmqr.errors import ConfigError
from ivmqr.nodes.identification_nodes import CheckIdentification
from ivmqr.nodes.simulation_nodes import SimulateSample
from ivmqr.utils.config_parser import ModelConfig, build_model, load_config, parse_config

VALID = """{
  "schema_version": 1,
  "command": "check-identification",
  "seed": 7,
  "model": {"kind": "identity", "compliance": 0.9, "eigen_bounds": [0.75, 1.5]},
  "pair_resolution": 20
}
"""


def parse(text, name="check-identification", cls=CheckIdentification):
    return parse_config(text, name, cls)


def test_valid_config_fills_defaults():
    config = parse(VALID)
    assert config.seed == 7
    assert config.model.kind == "identity"
    assert config.options["pair_resolution"] == 20
    assert config.options["densities"] == "exact"
    assert config.options["grid_resolution"] == 16
    resolved = config.resolved()
    assert resolved["schema_version"] == 1
    assert resolved["model"]["eigen_bounds"] == [0.75, 1.5]
    assert config.with_seed(3).seed == 3


def test_invalid_json_reports_line():
    text = '{\n  "schema_version": 1,\n}\n'
    with pytest.raises(ConfigError) as info:
        parse(text)
    assert info.value.line == 3
    assert str(info.value).startswith("line 3: invalid JSON")


def test_unknown_key_reports_line():
    text = VALID.replace('"pair_resolution": 20', '"pair_resolution": 20,\n  "resolution": 5')
    with pytest.raises(ConfigError) as info:
        parse(text)
    assert info.value.line == 7
    assert "resolution" in str(info.value)


@pytest.mark.parametrize(
    "old, new",
    [
        ('"schema_version": 1', '"schema_version": 2'),
        ('"pair_resolution": 20', '"pair_resolution": 1'),
        ('"compliance": 0.9', '"compliance": 1.5'),
        ('"kind": "identity"', '"kind": "spline"'),
        ('"seed": 7', '"seed": -1'),
    ],
)
def test_schema_violations(old, new):
    with pytest.raises(ConfigError):
        parse(VALID.replace(old, new))


def test_eigen_bounds_must_be_ordered():
    with pytest.raises(ConfigError) as info:
        parse(VALID.replace("[0.75, 1.5]", "[1.5, 0.75]"))
    assert info.value.line == 5


def test_missing_model():
    with pytest.raises(ConfigError):
        parse('{"schema_version": 1, "n": 10}', "simulate", SimulateSample)


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json", "simulate", SimulateSample)


# ============== Model building ==============

def test_identity_shares_from_compliance():
    model = build_model(ModelConfig(kind="identity", compliance=0.7))
    np.testing.assert_allclose(model.share_matrix(), [[0.7, 0.3], [0.3, 0.7]])
    three = build_model(ModelConfig(kind="identity", treatments=3, compliance=0.8))
    np.testing.assert_allclose(three.share_matrix().sum(axis=0), 1.0)
    np.testing.assert_allclose(np.diag(three.share_matrix()), 0.8)


def test_example1_from_config():
    model = build_model(ModelConfig(kind="example1", A1=[[1.0, 0.0], [0.0, 1.25]], eigen_bounds=[0.7, 1.3]))
    assert model.family == "affine"
    assert model.eigen_bounds == (0.7, 1.3)
    np.testing.assert_allclose(model.maps[1].jacobians([[0.5, 0.5]])[0], np.diag([1.0, 0.8]))


def test_example2_default_utilities():
    model = build_model(ModelConfig(kind="example2"))
    assert model.treatments == 2
    assert model.dimension == 2


def test_degenerate_from_config():
    model = build_model(ModelConfig(kind="degenerate"))
    np.testing.assert_allclose(model.share_matrix(), 0.5)


def test_custom_model_round_trip(example1):
    model = build_model(ModelConfig(kind="custom", payload=example1.to_dict()))
    np.testing.assert_allclose(model.share_matrix(), example1.share_matrix())


def test_custom_model_needs_payload():
    with pytest.raises(ConfigError):
        build_model(ModelConfig(kind="custom"))
