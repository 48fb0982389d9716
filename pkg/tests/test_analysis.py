import math

import numpy as np
import pytest

from scipy.linalg import sqrtm

from splitting_sampler import analysis, psld
from splitting_sampler.exceptions import ContractError, InvalidParams
from splitting_sampler.integrators import SchemeSpec, build_time_grid, total_nfe
from splitting_sampler.score import GaussianScoreProvider, ZeroScoreProvider


def _moments(mu, sigma):
    return psld.GaussianMoments(np.array(mu, dtype=float), np.array(sigma, dtype=float))


@pytest.fixture
def setup_1d():
    p = psld.preset_params('cifar10', dim=1)
    data = psld.GaussianDataSpec((0.5,), (0.25,))
    return p, data


def test_empirical_moments_constant_samples():
    state = psld.JointState(np.full((10, 2), 3.0), np.full((10, 2), -1.0), 0.0)
    moments = analysis.empirical_moments(state)
    np.testing.assert_array_equal(moments.mu, [[3.0, -1.0], [3.0, -1.0]])
    np.testing.assert_array_equal(moments.sigma, np.zeros((2, 2, 2)))


def test_empirical_moments_two_chains():
    state = psld.JointState(np.array([[0.0], [2.0]]), np.array([[0.0], [0.0]]), 0.0)
    moments = analysis.empirical_moments(state)
    np.testing.assert_array_equal(moments.mu, [[1.0, 0.0]])
    assert moments.sigma[0, 0, 0] == 2.0
    assert moments.sigma[0, 1, 1] == 0.0


def test_empirical_moments_needs_two_chains():
    with pytest.raises(InvalidParams):
        analysis.empirical_moments(psld.JointState(np.zeros((1, 1)), np.zeros((1, 1)), 0.0))


def test_empirical_moments_of_stationary_draws():
    p = psld.preset_params('cifar10', dim=1)
    n = 1_000_000
    moments = analysis.empirical_moments(
        psld.stationary_sample(p, n, np.random.default_rng(2)))
    variances = np.array([1.0, p.mass])
    assert np.all(np.abs(moments.mu[0]) <= 4 * np.sqrt(variances / n))
    assert np.all(np.abs(np.diag(moments.sigma[0]) - variances)
                  <= 4 * variances * math.sqrt(2 / n))


def test_sqrtm_psd_matches_scipy():
    rng = np.random.default_rng(8)
    a = rng.standard_normal((50, 2, 2))
    mats = a @ a.transpose(0, 2, 1) + 0.01 * np.eye(2)
    roots = analysis.sqrtm_psd_2x2(mats)
    for mat, root in zip(mats, roots):
        np.testing.assert_allclose(root, np.real(sqrtm(mat)), rtol=1e-8, atol=1e-10)
    assert not analysis.sqrtm_psd_2x2(np.zeros((1, 2, 2))).any()


def test_w2_examples():
    a = _moments([[0.3, -0.2]], [[[1.0, 0.2], [0.2, 0.5]]])
    assert analysis.gaussian_w2(a, a) == pytest.approx(0.0, abs=1e-6)

    shifted = _moments([[0.3 + 3.0, -0.2 + 4.0]], a.sigma)
    assert analysis.gaussian_w2(a, shifted) == pytest.approx(5.0, rel=1e-9)

    b = _moments([[0.0, 0.0]], [np.eye(2)])
    c = _moments([[0.0, 0.0]], [np.diag([4.0, 1.0])])
    assert analysis.gaussian_w2(b, c) == pytest.approx(1.0, rel=1e-12)


def test_w2_is_a_metric():
    rng = np.random.default_rng(3)

    def random_moments():
        a = rng.standard_normal((2, 2, 2))
        return _moments(rng.standard_normal((2, 2)), a @ a.transpose(0, 2, 1) + 0.1 * np.eye(2))

    for _ in range(100):
        x, y, z = random_moments(), random_moments(), random_moments()
        xy = analysis.gaussian_w2(x, y)
        assert xy == pytest.approx(analysis.gaussian_w2(y, x), rel=1e-8)
        assert xy <= analysis.gaussian_w2(x, z) + analysis.gaussian_w2(z, y) + 1e-9


def test_w2_dimension_mismatch():
    with pytest.raises(ContractError):
        analysis.gaussian_w2(_moments([[0, 0]], [np.eye(2)]),
                             _moments([[0, 0], [0, 0]], [np.eye(2)] * 2))


def test_distribution_error_metrics():
    a = _moments([[1.0, 0.0], [0.0, 0.0]], [np.eye(2)] * 2)
    b = _moments([[0.0, 5.0], [0.0, 0.0]], [np.eye(2), 2 * np.eye(2)])
    assert analysis.distribution_error('mean_abs', a, b) == 1.0
    assert analysis.distribution_error('cov_fro', a, b) == pytest.approx(math.sqrt(2))
    with pytest.raises(InvalidParams):
        analysis.distribution_error('fid', a, b)


def test_target_moments(setup_1d):
    p, data = setup_1d
    at_zero = analysis.target_moments(p, data, SchemeSpec('ROBA', denoise_last=True))
    np.testing.assert_allclose(at_zero.mu, [[0.5, 0.0]])
    at_eps = analysis.target_moments(p, data, SchemeSpec('ROBA'))
    expected = psld.forward_moments(p, data, p.eps_cutoff)
    np.testing.assert_array_equal(at_eps.sigma, expected.sigma)


@pytest.mark.parametrize('spec', [
    SchemeSpec('EM'),
    SchemeSpec('NOBA', denoise_last=True),
    SchemeSpec('ROBAB', lambda_s=0.14, denoise_last=True),
])
def test_propagate_moments_matches_sampling(setup_1d, spec):
    p, data = setup_1d
    provider = GaussianScoreProvider(p, data)
    grid = build_time_grid(p.t_max, p.eps_cutoff, 20)
    exact = analysis.propagate_moments(p, provider, spec, grid)

    n = 100_000
    empirical, nfe = analysis.terminal_moments(p, provider, spec, grid, n, seed=4)
    assert nfe == total_nfe(spec, 20)
    variances = np.diag(exact.sigma[0])
    assert np.all(np.abs(empirical.mu[0] - exact.mu[0]) <= 4 * np.sqrt(variances / n))
    assert np.all(np.abs(np.diag(empirical.sigma[0]) - variances)
                  <= 4 * variances * math.sqrt(2 / n))


def test_propagate_moments_counts_nfe(setup_1d):
    p, data = setup_1d
    spec = SchemeSpec('NOBAB', denoise_last=True)
    grid = build_time_grid(p.t_max, p.eps_cutoff, 10)
    _, nfe = analysis.terminal_moments(
        p, GaussianScoreProvider(p, data), spec, grid, 0, seed=0, exact=True)
    assert nfe == 31


class _OpaqueProvider:
    affine = False

    def score(self, state, t_cond):
        return psld.ScoreEval(np.zeros_like(state.x), np.zeros_like(state.m), t_cond)


def test_propagate_moments_needs_affine_provider(setup_1d):
    p, _ = setup_1d
    grid = build_time_grid(p.t_max, p.eps_cutoff, 10)
    with pytest.raises(ContractError):
        analysis.propagate_moments(p, _OpaqueProvider(), SchemeSpec('EM'), grid)


def test_em_weak_order(setup_1d):
    p, data = setup_1d
    budgets = [25, 50, 100, 200, 400]
    curve = analysis.weak_error_curve(
        p, data, SchemeSpec('EM'), budgets, n_chains=0, seed=0,
        metric='mean_abs', exact=True)
    assert curve.xs == budgets
    assert analysis.fit_loglog_slope(budgets, curve.errors) <= -0.9


def test_em_error_shrinks_with_budget(setup_1d):
    p, data = setup_1d
    curve = analysis.weak_error_curve(
        p, data, SchemeSpec('EM'), [50, 1000], n_chains=0, seed=0, exact=True)
    assert curve.errors[1] < curve.errors[0]


def test_weak_error_curve_reproducible(setup_1d):
    p, data = setup_1d
    spec = SchemeSpec('ROBA', lambda_s=0.37)
    a = analysis.weak_error_curve(p, data, spec, [10, 20], n_chains=2000, seed=3)
    b = analysis.weak_error_curve(p, data, spec, [10, 20], n_chains=2000, seed=3)
    assert a.points == b.points
    assert a.xs == [10, 20]
    assert a.to_json()['axis'] == 'nfe'


def test_weak_error_curve_budget_lambda(setup_1d):
    p, data = setup_1d
    plain = analysis.weak_error_curve(
        p, data, SchemeSpec('ROBA'), [50, 100], n_chains=0, seed=0, exact=True)
    tuned = analysis.weak_error_curve(
        p, data, SchemeSpec('ROBA'), [50, 100], n_chains=0, seed=0, exact=True,
        budget_lambda=True)
    assert plain.points != tuned.points


@pytest.mark.parametrize('budgets', [[], [100, 50], [50, 50]])
def test_weak_error_curve_rejects_budgets(setup_1d, budgets):
    p, data = setup_1d
    with pytest.raises(InvalidParams):
        analysis.weak_error_curve(p, data, SchemeSpec('EM'), budgets, 10, 0)


def test_error_curve_needs_increasing_axis():
    with pytest.raises(ContractError):
        analysis.ErrorCurve([(2, 0.1), (2, 0.05)], SchemeSpec('EM'), 'w2')


def test_lambda_sweep_single_value(setup_1d):
    p, data = setup_1d
    best, curve = analysis.lambda_sweep(
        p, data, SchemeSpec('ROBA'), 20, [0.5], n_chains=0, seed=0, exact=True)
    assert best == 0.5
    assert curve.axis == 'lambda_s'
    assert curve.xs == [0.5]


def test_lambda_sweep_ties_go_to_smaller(monkeypatch, setup_1d):
    p, data = setup_1d
    monkeypatch.setattr(analysis, 'distribution_error', lambda *args: 0.25)
    best, curve = analysis.lambda_sweep(
        p, data, SchemeSpec('RBAO'), 20, [0.9, 0.3, 0.6, 0.3], n_chains=0, seed=0, exact=True)
    assert best == 0.3
    assert curve.xs == [0.3, 0.6, 0.9]


def test_lambda_sweep_picks_minimum(monkeypatch, setup_1d):
    p, data = setup_1d
    errors = iter([0.3, 0.1, 0.2])
    monkeypatch.setattr(analysis, 'distribution_error', lambda *args: next(errors))
    best, _ = analysis.lambda_sweep(
        p, data, SchemeSpec('ROBA'), 20, [0.1, 0.2, 0.4], n_chains=0, seed=0, exact=True)
    assert best == 0.2


def test_lambda_sweep_needs_reduced_scheme(setup_1d):
    p, data = setup_1d
    with pytest.raises(InvalidParams):
        analysis.lambda_sweep(p, data, SchemeSpec('NOBA'), 20, [0.5], 10, 0)
    with pytest.raises(InvalidParams):
        analysis.lambda_sweep(p, data, SchemeSpec('ROBA'), 20, [], 10, 0)


@pytest.fixture
def setup_2d():
    return psld.preset_params('cifar10'), psld.GaussianDataSpec.isotropic(2)


def _naive_w2(p, data, scheme, n_steps):
    curve = analysis.weak_error_curve(
        p, data, SchemeSpec(scheme), [n_steps], n_chains=0, seed=0, exact=True)
    return curve.errors[0]


def _swept_w2(p, data, scheme, n_steps, lambdas):
    best, curve = analysis.lambda_sweep(
        p, data, SchemeSpec(scheme), n_steps, lambdas, n_chains=0, seed=0, exact=True)
    return dict(curve.points)[best]


SWEEP_GRID = tuple(np.geomspace(0.01, 10.0, 31))


@pytest.mark.parametrize('nfe', [50, 100])
@pytest.mark.parametrize('naive,reduced', [('NOBA', 'ROBA'), ('NBAO', 'RBAO')])
def test_reduced_scheme_beats_naive_at_equal_nfe(setup_2d, nfe, naive, reduced):
    p, data = setup_2d
    naive_error = _naive_w2(p, data, naive, nfe // 2)
    reduced_error = _swept_w2(p, data, reduced, nfe, SWEEP_GRID)
    assert reduced_error < naive_error


@pytest.mark.parametrize('nfe,nobab_steps', [(50, 17), (100, 33)])
def test_robab_trails_nobab_on_gaussian_data(setup_2d, nfe, nobab_steps):
    p, data = setup_2d
    nobab_error = _naive_w2(p, data, 'NOBAB', nobab_steps)
    robab_error = _swept_w2(p, data, 'ROBAB', nfe // 2, SWEEP_GRID)
    assert robab_error > nobab_error


def test_swept_roba_is_accurate_at_eps(setup_2d):
    p, data = setup_2d
    lambdas = tuple(np.round(np.arange(0.04, 0.41, 0.02), 2))
    best, curve = analysis.lambda_sweep(
        p, data, SchemeSpec('ROBA'), 200, lambdas, n_chains=0, seed=0, exact=True)
    assert dict(curve.points)[best] < 0.02

    spec = SchemeSpec('ROBA', lambda_s=best)
    grid = build_time_grid(p.t_max, p.eps_cutoff, 200)
    provider = GaussianScoreProvider(p, data)
    empirical, nfe = analysis.terminal_moments(p, provider, spec, grid, 200_000, seed=6)
    assert nfe == 200
    at_eps = psld.forward_moments(p, data, p.eps_cutoff)
    assert analysis.gaussian_w2(empirical, at_eps) < 0.02


def test_default_lambda_grid():
    grid = analysis.default_lambda_grid('ROBA', 100)
    assert 0.37 in grid
    assert list(grid) == sorted(grid)
    with pytest.raises(InvalidParams):
        analysis.default_lambda_grid('EM', 100)


def test_fit_loglog_slope():
    xs = [1.0, 2.0, 4.0, 8.0]
    assert analysis.fit_loglog_slope(xs, [3 * x ** 2 for x in xs]) == pytest.approx(2.0)
    assert analysis.fit_loglog_slope(xs, [1 / x for x in xs]) == pytest.approx(-1.0)
    assert math.isnan(analysis.fit_loglog_slope(xs, [1.0, 0.0, 1.0, 1.0]))
    assert math.isnan(analysis.fit_loglog_slope([1.0], [1.0]))


H_VALUES = (0.04, 0.02, 0.01, 0.005)


@pytest.mark.parametrize('scheme', ['NOBAB', 'ROBAB'])
def test_truncation_zero_score_symmetric_schemes_are_third_order(setup_1d, scheme):
    # without friction the B-A-B kicks are a Verlet step: exact through h^2
    _, data = setup_1d
    p = psld.validate_params(psld.PsldParams(gamma_cap=1e-12, nu=1e-12, dim=1))
    report = analysis.truncation_residual(
        p, data, SchemeSpec(scheme), 0.5, H_VALUES, n_chains=1000, seed=0,
        provider=ZeroScoreProvider())
    assert report.fitted_slope_m >= 2.7
    assert max(report.residual_x) < 1e-12


def test_truncation_zero_score_em_is_second_order(setup_1d):
    p, data = setup_1d
    report = analysis.truncation_residual(
        p, data, SchemeSpec('EM'), 0.5, H_VALUES, n_chains=1000, seed=0,
        provider=ZeroScoreProvider())
    assert report.fitted_slope_x >= 1.9
    assert report.fitted_slope_m >= 1.9


@pytest.mark.parametrize('scheme', ['NBAO', 'RBAO', 'NOBA', 'ROBA'])
def test_truncation_residual_vanishes_with_h(setup_1d, scheme):
    p, data = setup_1d
    report = analysis.truncation_residual(
        p, data, SchemeSpec(scheme), 0.5, H_VALUES, n_chains=2000, seed=1)
    assert report.h_values == H_VALUES
    assert report.residual_x[0] + report.residual_m[0] > \
        report.residual_x[-1] + report.residual_m[-1]
    assert len(report.cov_residual) == len(H_VALUES)
    assert all(math.isfinite(v) for v in report.residual_x + report.cov_residual)


@pytest.mark.parametrize('h_values,t0', [
    ((0.01, 0.02), 0.5),
    ((0.02, -0.01), 0.5),
    ((), 0.5),
    ((0.1,), 0.95),
])
def test_truncation_residual_rejects_inputs(setup_1d, h_values, t0):
    p, data = setup_1d
    with pytest.raises(InvalidParams):
        analysis.truncation_residual(p, data, SchemeSpec('EM'), t0, h_values, 10, 0)


def test_truncation_report_json_maps_nan_to_none():
    report = analysis.TruncationReport(
        'ROBA', 0.5, (0.02, 0.01), (0.0, 0.0), (1e-3, 2e-4), (0.1, 0.1),
        float('nan'), 2.3)
    out = report.to_json()
    assert out['fitted_slope_x'] is None
    assert out['fitted_slope_m'] == 2.3
    assert out['h_values'] == [0.02, 0.01]


@pytest.mark.parametrize('h', [0.04, 0.02, 0.01])
def test_score_reuse_gap_matches_closed_form(setup_1d, h):
    p, data = setup_1d
    gap = analysis.score_reuse_gap(p, data, 0.5, h, n_chains=100_000, seed=6)
    assert np.all(np.abs(gap.measured - gap.analytic) <= 3 * gap.stderr)
    assert np.all(gap.analytic != 0)
