"""Discrete-event serving engine: timing formulas and end-to-end traces.

The latency oracles below are hand-derived from the cost model with default
constants (prefill 80 + 0.15/token ms, decode gap 12 + 0.6/streaming-sequence
ms, adapter switch 0.1 ms, remote adapter fetch 2000 + 200 + 5 ms):

* one request, 100 in / 5 out: prefill 95.0, first gap 12.6 -> ttft 107.6,
  four more gaps of 12.6 -> streaming 50.4, total 158.0;
* two simultaneous such requests: both prefill until 95.0 and see an empty
  streaming set, so both first tokens land at 107.6; afterwards each prices
  its gaps against the streaming set at schedule time, giving last tokens at
  159.8 and 160.4;
* a cold adapter must travel remote->disk->cpu->gpu (2205 ms) before its
  request can be admitted, shifting the whole timeline by 2205 ms.
"""

from __future__ import annotations

import pytest

from adapterd.core import EngineConfig, Request, WorkloadConfig
from adapterd.engine import (
    EngineCore,
    prefill_time,
    run,
    single_request_timeline,
    step_duration,
)

TOL = 1e-9


def _workload(**overrides) -> WorkloadConfig:
    base = dict(
        n_adapters=0,
        users=1,
        duration_ms=1.0,
        input_tokens_min=100,
        input_tokens_max=100,
        output_tokens_min=5,
        output_tokens_max=5,
        seed=5,
    )
    base.update(overrides)
    return WorkloadConfig(**base)


def test_prefill_time_reference():
    config = EngineConfig()
    assert prefill_time(config, 100) == pytest.approx(95.0, abs=TOL)
    assert prefill_time(config, 1) == pytest.approx(80.15, abs=TOL)
    with pytest.raises(ValueError):
        prefill_time(config, 0)


def test_step_duration_reference():
    config = EngineConfig()
    assert step_duration(config, 1, [100], 0) == pytest.approx(107.6, abs=TOL)
    assert step_duration(config, 4, [], 0) == pytest.approx(14.4, abs=TOL)
    assert step_duration(config, 2, [10, 20], 2) == pytest.approx(177.9, abs=TOL)
    with pytest.raises(ValueError):
        step_duration(config, 0, [], 0)


def test_single_request_timeline_reference():
    config = EngineConfig()
    ttft, streaming, total = single_request_timeline(config, 100, 5)
    assert ttft == pytest.approx(107.6, abs=TOL)
    assert streaming == pytest.approx(50.4, abs=TOL)
    assert total == pytest.approx(158.0, abs=TOL)


def test_single_request_timeline_one_token():
    config = EngineConfig()
    ttft, streaming, total = single_request_timeline(config, 1, 1)
    assert ttft == pytest.approx(92.75, abs=TOL)
    assert streaming == 0.0
    assert total == ttft
    with pytest.raises(ValueError):
        single_request_timeline(config, 1, 0)


def test_run_single_request_matches_timeline():
    report = run(EngineConfig(), _workload())
    assert len(report.records) == 1
    record = report.records[0]
    ttft, streaming, total = single_request_timeline(EngineConfig(), 100, 5)
    assert record.submit_ms == 0.0
    assert abs((record.first_token_ms - record.submit_ms) - ttft) < TOL
    assert abs((record.last_token_ms - record.first_token_ms) - streaming) < TOL
    assert abs((record.last_token_ms - record.submit_ms) - total) < TOL


def test_run_single_one_token_request():
    workload = _workload(input_tokens_min=1, input_tokens_max=1,
                         output_tokens_min=1, output_tokens_max=1)
    report = run(EngineConfig(), workload)
    record = report.records[0]
    assert abs(record.first_token_ms - 92.75) < TOL
    assert record.last_token_ms == record.first_token_ms


def test_run_sequential_requests_back_to_back():
    """Closed loop: the second request is submitted the instant the first ends."""
    report = run(EngineConfig(), _workload(duration_ms=200.0))
    assert [r.request_id for r in report.records] == ["r000001", "r000002"]
    first, second = report.records
    assert abs(first.last_token_ms - 158.0) < TOL
    assert second.submit_ms == first.last_token_ms
    assert abs(second.first_token_ms - 265.6) < TOL
    assert abs(second.last_token_ms - 316.0) < TOL


def test_run_two_concurrent_users_batch_pricing():
    report = run(EngineConfig(), _workload(users=2))
    records = sorted(report.records, key=lambda r: r.last_token_ms)
    assert len(records) == 2
    assert abs(records[0].first_token_ms - 107.6) < TOL
    assert abs(records[1].first_token_ms - 107.6) < TOL
    assert abs(records[0].last_token_ms - 159.8) < TOL
    assert abs(records[1].last_token_ms - 160.4) < TOL


def test_run_cold_adapter_waits_for_full_fetch():
    workload = _workload(n_adapters=1, duration_ms=2500.0)
    report = run(EngineConfig(), workload)
    assert report.summary["completed"] == 2
    cold, warm = report.records
    assert cold.adapter == "adapter-00"
    assert abs(cold.first_token_ms - 2312.6) < TOL
    assert abs(cold.last_token_ms - 2363.0) < TOL
    # The follow-up request reuses the now-resident adapter: no fetch delay.
    assert warm.submit_ms == cold.last_token_ms
    assert abs(warm.first_token_ms - 2470.6) < TOL
    assert report.cache["gpu"] == 1


def test_run_cold_adapter_discarded_when_deadline_precedes_fetch():
    report = run(EngineConfig(), _workload(n_adapters=1, duration_ms=1.0))
    assert report.summary == {"request_count": 0, "submitted": 1,
                              "completed": 0, "discarded": 1}


def test_run_prewarmed_adapter_has_no_fetch_delay():
    workload = _workload(n_adapters=1)
    report = run(EngineConfig(), workload, prewarm_adapters=True)
    record = report.records[0]
    assert abs(record.first_token_ms - 107.6) < TOL


def test_switch_overhead_charged_only_on_adapter_transition():
    config = EngineConfig()
    core = EngineCore(config, ["adapter-00", "adapter-01"], prewarm=True)
    core.schedule_submit(Request("a", "adapter-00", 100, 10, 0.0), 0.0)
    core.schedule_submit(Request("b", "adapter-01", 100, 5, 50.0), 50.0)
    core.schedule_submit(Request("c", "adapter-00", 100, 5, 60.0), 60.0)
    core.schedule_submit(Request("d", "base", 100, 5, 70.0), 70.0)
    core.run_until_idle()
    first = {r.request_id: r.first_token_ms for r in core.records}
    # b lands while adapter-00 streams: gap 12 + 0.6*2 plus the 0.1 switch.
    assert abs(first["b"] - 158.3) < TOL
    # c joins an adapter that is already streaming: no switch charge.
    assert abs(first["c"] - 168.2) < TOL
    # d is a base-model request: never charged, only batch-priced.
    assert abs(first["d"] - 178.8) < TOL


def test_run_zero_duration_produces_empty_report():
    report = run(EngineConfig(), _workload(duration_ms=0.0))
    assert report.summary == {"request_count": 0, "submitted": 0,
                              "completed": 0, "discarded": 0}
    assert report.records == ()


def test_run_seed_determinism():
    workload = _workload(
        users=5, duration_ms=3000.0, n_adapters=3, seed=42,
        input_tokens_min=30, input_tokens_max=500,
        output_tokens_min=1, output_tokens_max=120,
    )
    first = run(EngineConfig(), workload).to_json_str(include_records=True)
    second = run(EngineConfig(), workload).to_json_str(include_records=True)
    assert first == second
    other = run(EngineConfig(), _workload(
        users=5, duration_ms=3000.0, n_adapters=3, seed=43,
        input_tokens_min=30, input_tokens_max=500,
        output_tokens_min=1, output_tokens_max=120,
    )).to_json_str(include_records=True)
    assert other != first


def test_run_conservation_and_accounting():
    workload = _workload(
        users=8, duration_ms=2000.0, n_adapters=4, seed=9,
        input_tokens_min=30, input_tokens_max=500,
        output_tokens_min=1, output_tokens_max=120,
    )
    report = run(EngineConfig(), workload)
    summary = report.summary
    assert summary["submitted"] == summary["completed"] + summary["discarded"]
    assert summary["completed"] == len(report.records)
    assert sum(report.per_adapter.values()) == len(report.records)
    ids = [r.request_id for r in report.records]
    assert len(ids) == len(set(ids))
    for record in report.records:
        assert record.output_tokens_emitted >= 1
        assert record.submit_ms <= record.first_token_ms <= record.last_token_ms


def test_run_batch_cap_defers_and_deadline_discards():
    config = EngineConfig(max_batch_size=2)
    report = run(config, _workload(users=5))
    assert report.summary["submitted"] == 5
    assert report.summary["completed"] == 2
    assert report.summary["discarded"] == 3
    for record in report.records:
        assert abs(record.first_token_ms - 107.6) < TOL


def test_run_queue_wait_shows_in_ttft():
    config = EngineConfig(max_batch_size=1)
    report = run(config, _workload(users=2, duration_ms=200.0))
    ttfts = sorted(r.first_token_ms - r.submit_ms for r in report.records)
    assert abs(ttfts[0] - 107.6) < TOL
    assert abs(ttfts[1] - 265.6) < TOL
    assert report.summary["discarded"] == 1


def test_run_user_offset_and_id_prefix():
    workload = _workload(users=2, duration_ms=50.0,
                         input_tokens_min=30, input_tokens_max=500)
    base_ids = [r.request_id for r in run(EngineConfig(), workload).records]
    shifted = run(EngineConfig(), workload, user_index_offset=2,
                  request_id_prefix="x")
    assert all(r.request_id.startswith("x") for r in shifted.records)
    assert base_ids and all(i.startswith("r") for i in base_ids)
    base_shapes = {(r.input_tokens, r.output_tokens_emitted)
                   for r in run(EngineConfig(), workload).records}
    shifted_shapes = {(r.input_tokens, r.output_tokens_emitted)
                      for r in shifted.records}
    assert base_shapes != shifted_shapes


def test_report_config_echo_round_trips():
    workload = _workload()
    report = run(EngineConfig(), workload)
    assert report.config["engine"] == EngineConfig().to_dict()
    assert report.config["workload"] == workload.to_dict()
