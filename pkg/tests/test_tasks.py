import pytest
import torch

from common import config, history, settings
from common.errors import ConfigError, RunError
from worker import attacks, attribution, flcore, tasks


pytestmark = pytest.mark.slow


@pytest.fixture
def baseline(tiny_config):
    return tasks.run_baseline(tiny_config)


def test_scenario_matches_config(tiny_config):
    scenario = tasks.build_scenario(tiny_config)
    assert len(scenario.shards) == 4
    assert all(s.n == 40 for s in scenario.shards)
    assert scenario.spec.num_params == 4 * 4 + 4
    assert scenario.decoder.latent_dim == 3


def test_select_malicious(baseline):
    report = baseline.reports['fedsv_exact']
    assert tasks.select_malicious(report, 'lowest_rank') == report.client_with_rank(4)
    assert tasks.select_malicious(report, 'rank_k', 1) == report.client_with_rank(1)
    assert baseline.malicious == report.client_with_rank(4)
    with pytest.raises(ConfigError):
        tasks.select_malicious(report, 'rank_k', 5)


def test_kappa_calibration(baseline):
    norms = sorted(torch.linalg.vector_norm(u).item() for r in baseline.log.rounds for u in r.updates)
    assert len(norms) == 12
    assert baseline.kappa == pytest.approx(1.5 * (norms[5] + norms[6]))
    assert baseline.kappa == 3.0 * tasks.benign_norm_median(baseline.log)


def test_attacked_phase_keeps_benign_rounds(baseline, tiny_config):
    attacked = tasks.run_attacked(baseline, tiny_config.with_values(attack='free_rider'))
    malicious = attacked.malicious
    first_clean, first_attacked = baseline.log.rounds[0], attacked.log.rounds[0]
    for i in range(4):
        if i != malicious:
            assert torch.equal(first_clean.updates[i], first_attacked.updates[i])
    assert torch.count_nonzero(first_attacked.updates[malicious]) == 0


def test_latent_updates_respect_kappa(baseline, tiny_config):
    cfg = tiny_config.with_values(kappa=0.05)
    attacked = tasks.run_attacked(baseline, cfg)
    for record in attacked.log.rounds:
        assert attacks.norm(record.updates[attacked.malicious]).item() <= 0.05 + 1e-12
    assert [d['t'] for d in attacked.diagnostics] == [1, 2, 3]


def test_report_contents(baseline, tiny_config):
    cfg = tiny_config.with_values(defense='enforce', evaluator='fedsv_exact,loo_round')
    report = tasks.run_experiment(cfg, baseline=tasks.run_baseline(cfg))
    payload = report.to_dict()
    assert payload['run_id'] == settings.config_hash(cfg)[:12]
    assert payload['evaluators'] == ['fedsv_exact', 'loo_round']
    assert payload['utility']['verdict'] == ('pass' if abs(report.utility_gap) <= 0.02 else 'fail')
    assert set(payload['detection']) == {'precision', 'recall', 'f1', 'rounds', 'random_guess_f1'}
    assert payload['detection']['random_guess_f1'] == pytest.approx(0.25)
    assert 0 <= payload['plausibility_flag_rate'] <= 1
    assert len(payload['marginal_utility']['attacked']) == 3
    assert sum(payload['attribution']['loo_round']['attacked']['shares']) == pytest.approx(1.0)
    assert payload['config']['num_clients'] == 4
    assert 'out' not in payload['config']


def test_run_experiment_outputs(tiny_config, tmp_path):
    cfg = tiny_config.with_values(intensity=0)
    report = tasks.run_experiment(cfg, tmp_path)
    for name in [config.CONFIG_FILE, config.REPORT_FILE, config.ATTRIBUTION_CSV, config.DIAGNOSTICS_LOG,
            'training_attack_free.jsonl', 'training_attacked.jsonl', 'shares.svg', 'marginal.svg']:
        assert (tmp_path / name).is_file(), name
    assert not (tmp_path / config.DETECTION_CSV).exists()
    # with no synthetic samples the attacked run reproduces the attack-free run
    clean = (tmp_path / 'training_attack_free.jsonl').read_bytes()
    assert (tmp_path / 'training_attacked.jsonl').read_bytes() == clean
    assert report.share_after() == report.share_before()
    rows = history.read_attribution_csv(tmp_path / config.ATTRIBUTION_CSV)
    assert {row['phase'] for row in rows} == {'attack_free', 'attacked'}
    assert all(row['run_id'] == report.run_id for row in rows)
    header, *_ = history.read_jsonl(tmp_path / 'training_attacked.jsonl')
    assert header['fingerprint'] == report.config_hash
    assert settings.load_config(tmp_path / config.CONFIG_FILE) == cfg


def test_runs_are_byte_identical(tiny_config, tmp_path):
    tasks.run_experiment(tiny_config, tmp_path / 'a')
    tasks.run_experiment(tiny_config, tmp_path / 'b')
    names = sorted(p.name for p in (tmp_path / 'a').iterdir())
    assert names == sorted(p.name for p in (tmp_path / 'b').iterdir())
    for name in names:
        assert (tmp_path / 'a' / name).read_bytes() == (tmp_path / 'b' / name).read_bytes(), name


def test_sweep_intensity(tiny_config, tmp_path):
    reports = tasks.sweep(tiny_config, 'intensity', [0.0, 1.0], tmp_path)
    assert [r.attack for r in reports] == ['latent_opt', 'latent_opt']
    summary = history.read_json(tmp_path / config.SWEEP_FILE)
    assert summary['values'] == [0.0, 1.0]
    assert (tmp_path / 'sweep_intensity.svg').is_file()
    assert (tmp_path / 'intensity=1.0' / config.REPORT_FILE).is_file()
    rows = history.read_csv(tmp_path / config.SWEEP_CSV)
    assert [row['value'] for row in rows] == ['0.0', '1.0']


def test_sweep_target_rank(tiny_config):
    reports = tasks.sweep(tiny_config, 'target_rank', [1, 4])
    assert reports[0].rank_before() == 1
    assert reports[1].rank_before() == 4


def test_sweep_rejects_unknown_axis(tiny_config):
    with pytest.raises(ConfigError):
        tasks.sweep(tiny_config, 'rounds', [1])
    with pytest.raises(ConfigError):
        tasks.sweep(tiny_config, 'method', ['backdoor'])


def test_failures_carry_phase(baseline, tiny_config, monkeypatch):
    def explode(*args, **kwargs):
        raise FloatingPointError('overflow')

    monkeypatch.setattr(flcore, 'run_training', explode)
    with pytest.raises(RunError) as e:
        tasks.run_attacked(baseline, tiny_config)
    assert e.value.phase == 'attacked'


def test_retraining_evaluator_keeps_attack_diagnostics(baseline, tiny_config):
    plain = tasks.run_attacked(baseline, tiny_config)
    retrained = tasks.run_attacked(baseline, tiny_config.with_values(evaluator='fedsv_exact,loo_retrain'))
    assert list(plain.log.to_records())[1:] == list(retrained.log.to_records())[1:]
    assert retrained.diagnostics == plain.diagnostics
    assert [d['t'] for d in retrained.diagnostics] == [1, 2, 3]
    # the full coalition is the logged run, so the evaluator does not retrain it
    full = retrained.log.final_utility
    for i, raw in enumerate(retrained.reports['loo_retrain'].raw):
        reduced = flcore.run_training(attribution.without_client(retrained.training, i)).final_utility
        assert raw == full - reduced
