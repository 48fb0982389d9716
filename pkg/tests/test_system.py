import csv
import json
import pathlib

import pytest

from splitting_sampler import cli, experiment
from splitting_sampler.experiment import MANIFEST_FILENAME, verify_manifest


@pytest.fixture
def setup(tmp_path: pathlib.Path):
    config_path = tmp_path / 'exp.json'
    with open(config_path, 'w') as f:
        f.write(json.dumps({
            'preset': 'cifar10',
            'params': {'dim': 1},
            'scheme': ['NOBA', 'ROBA'],
            'N': [20, 40],
            'n_chains': 300,
            'seeds': [5],
        }, indent=2))

    return tmp_path, config_path


def _rows(path: pathlib.Path):
    with open(path, newline='') as f:
        return list(csv.DictReader(f))


def test_sample_from_flags(setup):
    base_path, _ = setup
    out = base_path / 'roba'
    assert cli.main(['sample', '--scheme', 'ROBA', '--steps', '20', '--seed', '7',
                     '--chains', '200', '--out', str(out)]) == cli.EXIT_OK

    assert (out / 'sample_ROBA_N20_seed7.npy').is_file()
    assert (out / cli.LOG_FILENAME).is_file()
    rows = _rows(out / 'results.csv')
    assert {r['metric'] for r in rows} == {'w2', 'mean_abs', 'cov_fro'}
    assert all(r['nfe'] == '21' for r in rows)
    assert verify_manifest(str(out)) == []


def test_curve_from_config_with_overrides(setup):
    base_path, config_path = setup
    out = base_path / 'curve'
    assert cli.main(['curve', '--config', str(config_path), '--out', str(out),
                     '--seed', '1', '2', '--no-denoise', '--exact']) == cli.EXIT_OK

    rows = _rows(out / 'results.csv')
    assert len(rows) == 2 * 2 * 2
    assert {r['seed'] for r in rows} == {'1', '2'}
    noba = [r['nfe'] for r in rows if r['scheme'] == 'NOBA' and r['seed'] == '1']
    assert noba == ['40', '80']

    with open(out / MANIFEST_FILENAME) as f:
        manifest = json.load(f)
    assert manifest['experiment'] == 'error_curve'
    assert manifest['status'] == 'ok'


def test_scheme_flag_replaces_config_schemes(setup):
    _, config_path = setup
    args = cli.build_parser().parse_args(
        ['sample', '--config', str(config_path), '--scheme', 'RBAO', '--steps', '100',
         '--lambda-s', '0.25'])
    cfg = cli.build_config(args)
    assert [s.scheme for s in cfg.schemes] == ['RBAO']
    assert cfg.schemes[0].lambda_s == 0.25
    assert cfg.steps == (100,)
    assert cfg.n_chains == 300


def test_sweep_and_truncation_subcommands(setup):
    base_path, _ = setup
    sweep_out = base_path / 'sweep'
    assert cli.main(['sweep', '--scheme', 'ROBAB', '--steps', '20', '--exact',
                     '--lambda-grid', '0.1', '0.2', '--out', str(sweep_out)]) == cli.EXIT_OK
    assert [r['lambda_s'] for r in _rows(sweep_out / 'results.csv')] == ['0.1', '0.2']

    trunc_out = base_path / 'trunc'
    assert cli.main(['truncation', '--scheme', 'NBAO', '--chains', '200',
                     '--t0', '0.3', '--h', '0.02', '0.01', '--out', str(trunc_out)]) == cli.EXIT_OK
    assert len(_rows(trunc_out / 'truncation.csv')) == 2
    assert (trunc_out / 'truncation_NBAO_seed0.json').is_file()


@pytest.mark.parametrize('args', [
    ['sample', '--scheme', 'SSCS'],
    ['sample', '--steps', '1'],
    ['sample', '--scheme', 'NOBA', '--lambda-s', '0.3'],
    ['sweep', '--scheme', 'NOBA'],
    ['truncation', '--provider', 'external:score.sh'],
    ['truncation', '--h', '0.01', '0.02'],
    ['validate-config'],
    [],
])
def test_validation_errors_exit_1(setup, args):
    base_path, _ = setup
    if args:
        args = args + ['--out', str(base_path / 'invalid')]
    assert cli.main(args) == cli.EXIT_VALIDATION


def test_config_syntax_error_exit_1(setup):
    base_path, _ = setup
    broken = base_path / 'broken.json'
    broken.write_text('{\n  "N": 100,\n')
    assert cli.main(['validate-config', '--config', str(broken)]) == cli.EXIT_VALIDATION


def test_failed_provider_exit_2(setup):
    base_path, _ = setup
    out = base_path / 'failed'
    missing = base_path / 'no_such_provider'
    assert cli.main(['sample', '--scheme', 'EM', '--steps', '10', '--chains', '10',
                     '--provider', f'external:{missing}', '--out', str(out)]) == cli.EXIT_RUNTIME

    with open(out / MANIFEST_FILENAME) as f:
        manifest = json.load(f)
    assert manifest['status'] == 'failed'


def test_validate_config_prints_expanded_config(setup, capsys):
    _, config_path = setup
    assert cli.main(['validate-config', '--config', str(config_path)]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert 'n_chains = 300' in out
    expanded = json.loads(out[out.index('{'):])
    assert expanded['type'] == 'ExperimentConfig'
    assert expanded['params']['beta'] == 8.0
    assert [s['scheme'] for s in expanded['scheme']] == ['NOBA', 'ROBA']


def test_unexpected_runtime_error_exit_2(setup, monkeypatch, capsys):
    base_path, _ = setup
    out = base_path / 'disk_full'

    def no_space(*args, **kwargs):
        raise OSError("No space left on device")

    monkeypatch.setattr(experiment, 'write_rows', no_space)
    assert cli.main(['sample', '--scheme', 'ROBA', '--steps', '10', '--chains', '10',
                     '--out', str(out)]) == cli.EXIT_RUNTIME
    logged = capsys.readouterr().out
    assert "Unexpected error while running 'sample'" in logged
    assert 'OSError: No space left on device' in logged

    with open(out / 'manifest_crash.json') as f:
        crash = json.load(f)
    assert crash['status'] == 'crashed'
    assert crash['errors'][0]['error'] == "OSError: No space left on device"
