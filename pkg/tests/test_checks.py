import pytest

from worker import checks


def test_oracle_checks_pass():
    for outcome in [checks.check_shapley(), checks.check_gradients(), checks.check_normalization()]:
        assert outcome.passed, outcome.detail


@pytest.mark.parametrize('values,expected', [
    ([0.1, 0.2, 0.3], True),
    ([0.1, 0.2, 0.195, 0.3], True),
    ([0.1, 0.2, 0.15, 0.3], False),
    ([0.3, 0.295, 0.4, 0.395], False),
])
def test_nondecreasing(values, expected):
    assert checks.nondecreasing(values) == expected


def test_majority():
    assert checks.majority([True, True, True, True, False])
    assert not checks.majority([True, True, True, False, False])


@pytest.mark.slow
def test_determinism_check(tiny_config):
    outcome = checks.check_determinism(tiny_config)
    assert outcome.passed, outcome.detail
    assert outcome.detail['files'] >= 8


@pytest.mark.slow
def test_scenario_checks_report_every_property(tiny_config):
    runs = [checks.run_seed(tiny_config, seed) for seed in (0, 1)]
    assert all(run.zero_identical for run in runs)
    outcomes = list(checks.scenario_checks(runs))
    assert [o.name for o in outcomes] == ['attack_effect', 'utility_preservation', 'intensity', 'target_rank',
        'stealth', 'loo_robustness']
    intensity = next(o for o in outcomes if o.name == 'intensity')
    assert intensity.detail['zero_identical']
