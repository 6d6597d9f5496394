import json
from pathlib import Path
from typing import Any

import pytest

from hydrasim.cli import main, parse_seeds
from hydrasim.coin import RewardKind
from hydrasim.harness import Candidate, JobRejectedError, run_scenario, select_machine_pool
from hydrasim.metrics import METRICS_FILE, SUMMARY_FILE
from hydrasim.scenario import PoolCriteria, ScenarioError, load_scenario, validate_scenario


def equal_candidates(n: int, compute_ms: float = 1.0) -> list[Candidate]:
    return [Candidate(address=a, peer_id=a, latency_ms=10.0, compute_ms=compute_ms) for a in range(1, n + 1)]


class TestSelectMachinePool:
    def test_homogeneous_peers_rank_by_closeness(self):
        # ten samples at t_b=2ms and 1ms per sample are just over five units per machine
        pool = select_machine_pool(0, equal_candidates(4), 12.0, needed=2, samples=10, t_b=2.0)
        assert pool == [1, 2, 3]

    def test_slow_machine_drops_to_the_back(self):
        candidates = [
            Candidate(address=1, peer_id=1, latency_ms=10.0, compute_ms=10.0),
            Candidate(address=2, peer_id=2, latency_ms=10.0, compute_ms=1.0),
            Candidate(address=3, peer_id=3, latency_ms=10.0, compute_ms=1.0),
        ]
        pool = select_machine_pool(0, candidates, 100.0, needed=3, samples=10, t_b=2.0)
        assert pool == [2, 3, 1]

    def test_latency_outweighs_closeness(self):
        candidates = [
            Candidate(address=1, peer_id=1, latency_ms=80.0, compute_ms=1.0),
            Candidate(address=2, peer_id=6, latency_ms=5.0, compute_ms=1.0),
        ]
        assert select_machine_pool(0, candidates, 100.0, needed=1, samples=4, t_b=2.0) == [2, 1]
        closeness_only = PoolCriteria(latency_weight=0.0, compute_weight=0.0, closeness_weight=1.0)
        assert select_machine_pool(
            0, candidates, 100.0, needed=1, samples=4, t_b=2.0, criteria=closeness_only
        ) == [1, 2]

    def test_zero_budget_is_rejected(self):
        with pytest.raises(JobRejectedError, match="not spendable"):
            select_machine_pool(0, equal_candidates(4), 0.0, needed=1, samples=10, t_b=2.0)

    def test_too_few_candidates(self):
        with pytest.raises(JobRejectedError, match="needs 5"):
            select_machine_pool(0, equal_candidates(4), 50.0, needed=5, samples=10, t_b=2.0)

    def test_small_budget_cannot_cover_the_job(self):
        with pytest.raises(JobRejectedError, match="covers 1 machines"):
            select_machine_pool(0, equal_candidates(4), 1.0, needed=2, samples=10, t_b=2.0)


def scenario_data(**overrides: Any) -> dict[str, Any]:
    data: dict[str, Any] = {
        "name": "tiny",
        "seed": 5,
        "duration": 20_000,
        "topology": {
            "peers": 5,
            "latency": {"kind": "constant", "ms": 10.0},
            "compute": {"compute_ms_min": 1.0, "compute_ms_max": 1.0, "memory_min": 64, "memory_max": 64},
        },
        "datasets": [
            {"at": 1_000, "op": "create", "peer": 2, "title": "mnist"},
            {"at": 2_000, "op": "contribute", "peer": 2, "title": "mnist", "files": [["a.bin", 2_000_000]]},
        ],
        "jobs": [
            {
                "name": "toy",
                "coordinator": 1,
                "budget": 15.0,
                "ranks": 2,
                "start_at": 3_000,
                "config": {"global_batch": 8, "max_steps": 3, "dataset_size": 32, "widths": [3, 4, 1]},
            }
        ],
        "balances": {"1": 50.0},
        "assertions": [
            {"check": "no_safety_violations"},
            {"check": "ledger_audit"},
            {"check": "epoch_audit"},
            {"check": "all_jobs_completed"},
            {"check": "dataset_recovered", "dataset": "mnist"},
        ],
    }
    data.update(overrides)
    return data


class TestValidation:
    def test_good_scenario(self):
        scenario, errors = validate_scenario(scenario_data())
        assert errors == []
        assert scenario.topology.size == 6
        assert [p.compute_ms for p in scenario.profiles()] == [1.0] * 5

    def test_faulting_the_bootstrap_server(self):
        faults = [{"time": 100, "action": {"op": "crash", "node": 0}}]
        _, errors = validate_scenario(scenario_data(faults=faults))
        assert errors == ["faults.0: bootstrap server 0 cannot be faulted"]

    def test_action_on_an_undefined_dataset(self):
        datasets = [{"at": 10, "op": "download", "peer": 3, "title": "cifar"}]
        _, errors = validate_scenario(scenario_data(datasets=datasets))
        assert errors == ["datasets.0: download on undefined dataset 'cifar'"]

    def test_duplicate_jobs_and_oversized_jobs(self):
        job = scenario_data()["jobs"][0]
        big = {**job, "name": "big", "ranks": 3, "replicas": 2}
        _, errors = validate_scenario(scenario_data(jobs=[job, job, big]))
        assert "jobs.1: duplicate job name 'toy'" in errors
        assert "jobs.2: needs 6 machines, only 4 besides the coordinator" in errors

    def test_min_elections_needs_a_value(self):
        _, errors = validate_scenario(scenario_data(assertions=[{"check": "min_elections"}]))
        assert errors == ["assertions.0: min_elections needs a value"]

    def test_schema_errors_are_listed(self):
        scenario, errors = validate_scenario(scenario_data(duration=0, topology={"peers": 0}))
        assert scenario is None
        assert any(e.startswith("duration") for e in errors)
        assert any(e.startswith("topology.peers") for e in errors)

    def test_load_reports_missing_and_broken_files(self, tmp_path):
        with pytest.raises(ScenarioError, match="no such file"):
            load_scenario(tmp_path / "absent.json")
        broken = tmp_path / "broken.json"
        broken.write_text("{ not json")
        with pytest.raises(ScenarioError, match="invalid JSON"):
            load_scenario(broken)
        good = tmp_path / "good.json"
        good.write_text(json.dumps(scenario_data()))
        assert load_scenario(good).name == "tiny"


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    scenario, _ = validate_scenario(scenario_data())
    out_dir = tmp_path_factory.mktemp("tiny")
    return run_scenario(scenario, out_dir=out_dir)


def test_scenario_run_passes_its_assertions(tiny_run):
    assert tiny_run.failures == []
    report = tiny_run.reports["toy"]
    assert report.ok and report.steps == 3
    assert tiny_run.network.ledger.total(RewardKind.SPEND, 1) == -15


def test_same_seed_same_metrics(tiny_run):
    scenario, _ = validate_scenario(scenario_data())
    again = run_scenario(scenario)
    assert list(again.metrics.lines()) == list(tiny_run.metrics.lines())


def test_outputs_are_written(tiny_run):
    out_dir = tiny_run.out_dir
    for name in [METRICS_FILE, SUMMARY_FILE, "loss_curve.csv", "step_latency.csv", "balances.csv", "ledger.csv"]:
        assert (out_dir / name).is_file()
    summary = (out_dir / SUMMARY_FILE).read_text()
    assert "scenario: tiny" in summary and "assertions: passed" in summary
    assert len((out_dir / METRICS_FILE).read_text().splitlines()) == len(tiny_run.metrics)


def test_failed_assertion_is_reported():
    data = scenario_data(assertions=[{"check": "min_elections", "value": 10_000}])
    scenario, _ = validate_scenario(data)
    result = run_scenario(scenario)
    assert not result.ok
    assert "expected at least 10000" in result.failures[0]


def test_parse_seeds():
    assert parse_seeds("7") == [7]
    assert parse_seeds("0-3") == [0, 1, 2, 3]
    assert parse_seeds("1,4,9") == [1, 4, 9]


def test_cli_validate(tmp_path, capsys):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(scenario_data()))
    assert main(["validate", str(path)]) == 0
    assert "tiny: 5 peers" in capsys.readouterr().out
    path.write_text(json.dumps(scenario_data(faults=[{"time": 1, "action": {"op": "crash", "node": 0}}])))
    assert main(["validate", str(path)]) == 2
    assert "cannot be faulted" in capsys.readouterr().err


@pytest.mark.parametrize("name", ["minimal", "chaos"])
def test_bundled_scenarios_validate(name):
    scenario = load_scenario(Path(__file__).parent.parent / "scenarios" / f"{name}.json")
    assert scenario.name == name


def test_coordinator_crash_aborts_the_job():
    faults = [{"time": 3_100, "action": {"op": "crash", "node": 1}}]
    scenario, errors = validate_scenario(scenario_data(faults=faults, assertions=[{"check": "all_jobs_completed"}]))
    assert errors == []
    result = run_scenario(scenario)
    assert result.reports["toy"].status == "aborted"
    assert result.failures == ["job toy aborted: coordinator lost"]
