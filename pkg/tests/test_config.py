import json

import pytest

from mvlatent.config import DEFAULT_OUT, RunConfig, apply_override, build_run_config, load_run_config, parse_value, write_resolved
from mvlatent.utils import ConfigError


def test_defaults():
    run_cfg = load_run_config()
    assert run_cfg.out == DEFAULT_OUT
    assert run_cfg.model.objective_kind == 'vcca'
    assert run_cfg.model.obs_x.kind == 'bernoulli'
    assert run_cfg.train.L == 1 and run_cfg.eval.features == ['z_from_x']


def test_file_and_overrides(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'model': {'objective_kind': 'vcca_private', 'd_z': 4}, 'train': {'epochs': 3}}))
    run_cfg = load_run_config(path, ['train.mu=0.2', 'model.obs_y.kind="gaussian_fixed"', 'model.hidden_widths=[16]'])
    assert run_cfg.model.kind.value == 'vcca_private' and run_cfg.model.d_z == 4
    assert run_cfg.train.epochs == 3 and run_cfg.train.mu == 0.2
    assert run_cfg.model.obs_y.kind == 'gaussian_fixed' and run_cfg.model.obs_y.sigma == 1.0
    assert run_cfg.model.hidden_widths == [16]


def test_seed_and_out_win_over_the_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'train': {'seed': 1}, 'out': 'elsewhere'}))
    run_cfg = load_run_config(path, seed=9, out=tmp_path / 'run')
    assert run_cfg.train.seed == 9 and run_cfg.data.seed == 9
    assert run_cfg.out == str(tmp_path / 'run')


@pytest.mark.parametrize(
    'document, key',
    [
        ({'model': {'d_q': 3}}, 'model.d_q'),
        ({'model': {'obs_x': {'scale': 1}}}, 'model.obs_x.scale'),
        ({'trian': {}}, 'trian'),
        ({'out': 3}, 'out'),
    ],
)
def test_unknown_keys_name_their_path(document, key):
    with pytest.raises(ConfigError) as e:
        build_run_config(document)
    assert e.value.key == key
    assert str(e.value).startswith(f'{key}: ')


def test_invalid_values_become_config_errors():
    with pytest.raises(ConfigError) as e:
        build_run_config({'train': {'mu': 1.5}})
    assert e.value.key == 'train'
    with pytest.raises(ConfigError):
        build_run_config({'model': {'objective_kind': 'dcca'}})
    with pytest.raises(ConfigError):
        build_run_config([1, 2])


def test_invalid_json(tmp_path):
    path = tmp_path / 'broken.json'
    path.write_text('{"train": ')
    with pytest.raises(ConfigError):
        load_run_config(path)


def test_parse_value():
    assert parse_value('0.5') == 0.5
    assert parse_value('true') is True
    assert parse_value('[1, 2]') == [1, 2]
    assert parse_value('vcca') == 'vcca'


def test_apply_override():
    document = apply_override({}, 'data.class_count=5')
    assert document == {'data': {'class_count': 5}}
    assert apply_override(document, 'out=runs/x')['out'] == 'runs/x'
    with pytest.raises(ConfigError):
        apply_override({}, 'train.mu')
    with pytest.raises(ConfigError):
        apply_override({}, 'optim.lr=1')
    with pytest.raises(ConfigError):
        apply_override({}, 'train=1')
    with pytest.raises(ConfigError):
        apply_override({'train': {'mu': 1}}, 'train.mu.x=2')


def test_write_resolved_is_reproducible(tmp_path):
    run_cfg = load_run_config(overrides=['model.objective_kind=bi_vcca', 'train.mu=0.8'])
    first = write_resolved(run_cfg, tmp_path).read_bytes()
    resolved = json.loads(first)
    assert resolved['model']['objective_kind'] == 'bi_vcca' and resolved['train']['mu'] == 0.8

    reloaded = build_run_config(resolved)
    second = write_resolved(reloaded, tmp_path).read_bytes()
    assert first == second
    assert isinstance(reloaded, RunConfig)
