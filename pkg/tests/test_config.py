import logging
from pathlib import Path

import pytest
import yaml

from ehr_rag import config
from ehr_rag.errors import ConfigError

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def test_defaults_match_bundled_file():
    assert config.load_run_config(str(CONFIGS / "default.yaml")) == config.RunConfig()
    assert config.load_run_config(None) == config.RunConfig()


def test_planted_run_config_points_at_the_scenario():
    run_config = config.load_run_config(str(CONFIGS / "planted_run.yaml"))
    assert run_config.gateway.scenario_path == "scenarios/planted_binary.yaml"
    assert run_config.ether == config.EtherConfig()


@pytest.mark.parametrize("data,field", [
    ({"ether": {"alpha": 1.5}}, "ether.alpha"),
    ({"ether": {"k_cand": 3, "k_final": 5}}, "ether"),
    ({"ether": {"tau_recent_days": 0}}, "ether.tau_recent_days"),
    ({"chunking": {"chunk_size": 10, "overlap": 10}}, "chunking"),
    ({"air": {"max_iterations": 0}}, "air.max_iterations"),
    ({"gateway": {"provider": "http"}}, "gateway"),
    ({"retrieval": {}}, "retrieval"),
    ({"workers": 0}, "workers"),
])
def test_invalid_configs_name_the_field(data, field):
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        config.build_run_config(data)


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        config.load_run_config(str(tmp_path / "missing.yaml"))

    broken = tmp_path / "broken.yaml"
    broken.write_text("ether:\n  alpha: [0.5\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="line"):
        config.load_run_config(str(broken))

    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("42\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="mapping"):
        config.load_run_config(str(scalar))


def test_overrides_win_and_conflicts_are_logged(caplog):
    file_config = config.build_run_config({"ether": {"alpha": 0.6}})
    with caplog.at_level(logging.INFO, logger="ehr_rag.config"):
        merged = config.apply_overrides(file_config, {"ether.alpha": 0.5, "air.max_iterations": None}, file_config)

    assert merged.ether.alpha == 0.5
    assert merged.air.max_iterations == config.DEFAULT_MAX_ITERATIONS
    assert any("overrides config file value" in record.message for record in caplog.records)
    assert file_config.ether.alpha == 0.6


def test_override_errors():
    base = config.RunConfig()
    with pytest.raises(ConfigError):
        config.apply_overrides(base, {"ether.alpha": 2.0})
    with pytest.raises(ConfigError, match="Unknown"):
        config.apply_overrides(base, {"ether.beta": 1})
    with pytest.raises(ConfigError, match="Unknown"):
        config.apply_overrides(base, {"nowhere.alpha": 1})


def test_snapshot_round_trip(tmp_path):
    run_config = config.apply_overrides(config.RunConfig(), {"ether.k_final": 7, "seed": 11})
    snapshot = config.write_config_snapshot(run_config, str(tmp_path / "run"))

    assert snapshot.name == config.RESOLVED_CONFIG_FILENAME
    assert yaml.safe_load(snapshot.read_text(encoding="utf-8")) == config.config_to_dict(run_config)
    assert config.load_run_config(str(snapshot)) == run_config


def test_method_registry():
    assert config.ALL_METHODS == config.EHR_RAG_METHODS + config.BASELINE_METHODS
    assert len(set(config.ALL_METHODS)) == 9


def test_override_of_an_explicit_default_is_logged(caplog):
    file_config = config.build_run_config({"ether": {"alpha": config.DEFAULT_ALPHA}})
    with caplog.at_level(logging.INFO, logger="ehr_rag.config"):
        merged = config.apply_overrides(file_config, {"ether.alpha": 0.5, "ether.k_final": 4, "seed": 9},
                                        file_config)

    assert (merged.ether.alpha, merged.ether.k_final, merged.seed) == (0.5, 4, 9)
    noted = [record.field for record in caplog.records if "overrides config file value" in record.message]
    assert noted == ["ether.alpha"]
