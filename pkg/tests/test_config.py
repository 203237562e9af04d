#!/usr/bin/env python3
"""配置加载、覆盖、哈希"""

from pathlib import Path

import pytest
from pydantic import ValidationError

from config import ConfigManager, I2NConfig, config_hash
from utils.errors import ConfigError


def test_defaults():
    cfg = I2NConfig()
    assert cfg.seed == 42
    assert cfg.retain_fraction == 1.0
    assert cfg.bins == 0
    assert cfg.sector_tol == 0.05
    assert (cfg.firm_band, cfg.weight_sector_band, cfg.self_mean_cap, cfg.self_sq_cap) == (0.1, 0.1, 0.1, 0.1)
    assert cfg.include_self_loops is False


@pytest.mark.parametrize('field, value', [
    ('retain_fraction', 0.0),
    ('retain_fraction', 1.5),
    ('theta', 1.0),
    ('firm_band', 0.0),
    ('weight_floor', 1.0),
    ('draws', 0),
    ('log_level', 'LOUD'),
    ('target_links', -3.0),
])
def test_field_validation(field, value):
    with pytest.raises(ValidationError):
        I2NConfig(**{field: value})


def test_parameter_boxes_must_be_ordered():
    with pytest.raises(ValidationError):
        I2NConfig(alpha_min=0.6, alpha_max=0.4)
    with pytest.raises(ValidationError):
        I2NConfig(kappa_max=1.2)


def test_env_prefix(monkeypatch):
    monkeypatch.setenv('I2N_SEED', '7')
    assert I2NConfig().seed == 7


def test_sections_are_flattened_and_paths_resolved(tmp_path):
    path = tmp_path / 'conf' / 'config.toml'
    path.parent.mkdir()
    path.write_text(
        'seed = 3\n'
        '[ingest]\nio_table = "inputs/io.csv"\n'
        '[gravity]\nsector_tol = 0.02\ntarget_links = 120\n',
        encoding='utf-8',
    )
    cfg = ConfigManager(str(path)).load()
    assert cfg.seed == 3
    assert cfg.sector_tol == 0.02
    assert cfg.target_links == 120
    assert Path(cfg.io_table) == (path.parent / 'inputs' / 'io.csv').resolve()


def test_missing_file_gives_defaults(tmp_path):
    cfg = ConfigManager(str(tmp_path / 'absent.toml')).load()
    assert cfg == I2NConfig()


def test_overrides_ignore_unset_values(tmp_path):
    path = tmp_path / 'config.toml'
    path.write_text('seed = 5\nbins = 8\n', encoding='utf-8')
    manager = ConfigManager(str(path))
    cfg = manager.with_overrides({'seed': 11, 'bins': None, 'theta': 0.3})
    assert cfg.seed == 11
    assert cfg.bins == 8
    assert cfg.theta == 0.3


def test_corrupt_toml_is_config_error(tmp_path):
    path = tmp_path / 'config.toml'
    path.write_text('seed = = 3\n', encoding='utf-8')
    with pytest.raises(ConfigError) as exc:
        ConfigManager(str(path)).load()
    assert exc.value.code == 'InvalidConfig'
    assert exc.value.stage == 'config'


def test_invalid_value_in_file_is_config_error(tmp_path):
    path = tmp_path / 'config.toml'
    path.write_text('retain_fraction = 2.0\n', encoding='utf-8')
    with pytest.raises(ConfigError):
        ConfigManager(str(path)).load()


def test_invalid_override_is_config_error(tmp_path):
    manager = ConfigManager(str(tmp_path / 'absent.toml'))
    with pytest.raises(ConfigError):
        manager.with_overrides({'eta': -1.0})


def test_save_then_load(tmp_path):
    path = tmp_path / 'config.toml'
    manager = ConfigManager(str(path))
    original = I2NConfig(seed=9, target_links=250.0, bench_sizes=[100, 200])
    manager.save(original)
    text = path.read_text(encoding='utf-8')
    assert '# io_table = ' in text
    reloaded = ConfigManager(str(path)).load()
    assert reloaded == original


def test_ensure_config_file_writes_defaults(tmp_path):
    path = tmp_path / 'nested' / 'config.toml'
    cfg = ConfigManager(str(path)).ensure_config_file()
    assert path.exists()
    assert cfg == I2NConfig()


def test_hash_ignores_runtime_fields():
    base = I2NConfig()
    assert config_hash(base) == config_hash(I2NConfig(threads=8, output_dir='elsewhere', log_level='DEBUG'))
    assert config_hash(base) != config_hash(I2NConfig(seed=1))
    assert config_hash(base) != config_hash(I2NConfig(firm_band=0.2))
    assert len(config_hash(base)) == 16


def test_target_resolution():
    assert I2NConfig(target_links=40).resolve_target_links(10) == 40.0
    assert I2NConfig(target_density=0.1).resolve_target_links(11) == pytest.approx(11.0)
    with pytest.raises(ConfigError) as exc:
        I2NConfig().resolve_target_links(10)
    assert exc.value.code == 'MissingTarget'
    assert exc.value.stage == 'fit'
