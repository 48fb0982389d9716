import json

import pytest

from splitting_sampler import analysis, config
from splitting_sampler.exceptions import ConfigError
from splitting_sampler.integrators import SchemeSpec


def test_minimal_config_is_fully_defaulted():
    cfg = config.config_from_dict({'preset': 'cifar10', 'scheme': 'ROBA', 'N': 100})
    assert (cfg.params.beta, cfg.params.gamma_cap, cfg.params.nu) == (8.0, 0.01, 4.01)
    assert (cfg.params.m_inv, cfg.params.gamma_init, cfg.params.eps_cutoff) == (4.0, 0.04, 1e-3)
    assert cfg.schemes == (SchemeSpec('ROBA', lambda_s=0.37, denoise_last=True),)
    assert cfg.steps == (100,)
    assert cfg.data.mu0_x == (0.5, 0.5)
    assert cfg.data.var0_x == (0.25, 0.25)
    assert cfg.experiment == 'sample'
    assert cfg.seeds == (0,)


def test_celeba_preset():
    cfg = config.config_from_dict({'preset': 'celeba64'})
    assert (cfg.params.gamma_cap, cfg.params.nu) == (0.005, 4.005)


def test_params_override_preset():
    cfg = config.config_from_dict({'preset': 'celeba64', 'params': {'nu': 3.0, 'beta': 4}})
    assert cfg.params.nu == 3.0
    assert cfg.params.beta == 4
    assert cfg.params.gamma_cap == 0.005


@pytest.mark.parametrize('raw,field', [
    ({'foo': 1}, 'foo'),
    ({'params': {'bar': 1}}, 'params.bar'),
    ({'data': {'mean': 1}}, 'data.mean'),
    ({'scheme': [{'scheme': 'ROBA', 'lam': 0.2}]}, 'scheme.lam'),
])
def test_unknown_keys(raw, field):
    with pytest.raises(ConfigError) as exc:
        config.config_from_dict(raw)
    assert exc.value.field == field


@pytest.mark.parametrize('raw,field', [
    ({'preset': 'imagenet'}, 'preset'),
    ({'params': {'gamma_cap': 0}}, 'params.gamma_cap'),
    ({'params': {'eps_cutoff': 2.0}}, 'params.eps_cutoff'),
    ({'scheme': 'SSCS'}, 'scheme'),
    ({'scheme': 'NOBA', 'lambda_s': 'big'}, 'lambda_s'),
    ({'scheme': [{'scheme': 'NOBA', 'lambda_s': 0.3}]}, 'scheme'),
    ({'N': 1}, 'N'),
    ({'N': []}, 'N'),
    ({'n_chains': 1}, 'n_chains'),
    ({'seeds': -1}, 'seeds'),
    ({'experiment': 'fid'}, 'experiment'),
    ({'experiment': 'lambda_sweep', 'scheme': ['ROBA', 'NOBA']}, 'scheme'),
    ({'striding': 'cubic'}, 'striding'),
    ({'metric': 'fid'}, 'metric'),
    ({'provider': 'torch'}, 'provider'),
    ({'provider': 'external:'}, 'provider'),
    ({'provider': 'external:score.sh', 'experiment': 'truncation'}, 'provider'),
    ({'provider': 'external:score.sh', 'exact_moments': True}, 'exact_moments'),
    ({'exact_moments': 'yes'}, 'exact_moments'),
    ({'denoise': 1}, 'denoise'),
    ({'workers': 0}, 'workers'),
    ({'h_values': [0.1, -0.1]}, 'h_values'),
    ({'h_values': [0.01, 0.02]}, 'h_values'),
    ({'h_values': [0.02, 0.02, 0.01]}, 'h_values'),
    ({'experiment': 'truncation', 't0': 0.99}, 't0'),
    ({'params': {'dim': 3}, 'data': {'mu0_x': [0, 0]}}, 'data.dim'),
    ({'data': {'var0_x': [1.0, 0.0]}}, 'data.var0_x'),
])
def test_invalid_values(raw, field):
    with pytest.raises(ConfigError) as exc:
        config.config_from_dict(raw)
    assert exc.value.field == field


def test_global_lambda_applies_to_reduced_schemes_only():
    cfg = config.config_from_dict(
        {'scheme': ['NOBA', 'ROBA', {'scheme': 'RBAO', 'lambda_s': 0.2}],
         'lambda_s': 0.5, 'N': [50, 100]})
    assert [s.lambda_s for s in cfg.schemes] == [None, 0.5, 0.2]


def test_lambda_left_open_for_several_budgets():
    cfg = config.config_from_dict({'scheme': 'ROBA', 'N': [200, 50, 100, 50]})
    assert cfg.steps == (50, 100, 200)
    assert cfg.schemes[0].lambda_s is None


def test_denoise_flag():
    cfg = config.config_from_dict(
        {'scheme': ['EM', {'scheme': 'NOBA', 'denoise_last': True}], 'denoise': False})
    assert [s.denoise_last for s in cfg.schemes] == [False, True]


def test_data_dimension_from_lists():
    cfg = config.config_from_dict({'data': {'mu0_x': [1.0, 2.0, 3.0], 'var0_x': 0.5}})
    assert cfg.params.dim == 3
    assert cfg.data.var0_x == (0.5, 0.5, 0.5)


def test_round_trip():
    cfg = config.config_from_dict({
        'preset': 'celeba64', 'scheme': ['ROBAB', 'EM'], 'N': [50, 100],
        'seeds': [1, 2], 'experiment': 'error_curve', 'lambda_grid': [0.1, 0.2],
        'params': {'dim': 1}, 'exact_moments': True, 'metric': 'mean_abs',
    })
    assert config.loads_config(config.serialize_config(cfg)) == cfg
    assert config.config_from_dict(cfg.to_json()).config_hash() == cfg.config_hash()


def test_to_json_envelope():
    out = config.config_from_dict({}).to_json()
    assert out['version'] == config.CONFIG_VERSION
    assert out['type'] == 'ExperimentConfig'
    assert out['scheme'] == [{'scheme': 'ROBA', 'lambda_s': 0.37, 'denoise_last': True}]


def test_config_hash_changes_with_content():
    a = config.config_from_dict({'seeds': 1})
    b = config.config_from_dict({'seeds': 2})
    assert a.config_hash() != b.config_hash()
    assert a.config_hash() == config.config_from_dict({'seeds': [1]}).config_hash()


def test_syntax_error_reports_line():
    text = '{\n  "scheme": "ROBA",\n  "N": 100,\n}\n'
    with pytest.raises(ConfigError) as exc:
        config.loads_config(text)
    assert exc.value.line == 4


def test_config_must_be_object():
    with pytest.raises(ConfigError):
        config.loads_config('[1, 2]')


def test_load_and_save(tmp_path):
    path = tmp_path / 'exp.json'
    path.write_text(json.dumps({'scheme': 'NBAO', 'N': 70, 'seeds': [3]}))
    cfg = config.load_config(str(path))
    assert cfg.schemes == (SchemeSpec('NBAO', denoise_last=True),)

    out = tmp_path / 'saved.json'
    config.save_config(cfg, str(out))
    assert config.load_config(str(out)) == cfg


def test_load_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        config.load_config(str(tmp_path / 'missing.json'))


def test_metric_names_shared_with_analysis():
    assert config.METRICS is analysis.METRICS
    for metric in analysis.METRICS:
        assert config.config_from_dict({'metric': metric}).metric == metric
