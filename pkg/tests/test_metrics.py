from __future__ import annotations

import json

import pytest

from src.models.models import MetricChannel
from src.telemetry.metrics import MetricsLog


def test_records_are_written_sorted_and_untimed(tmp_path):
    log = MetricsLog(tmp_path / "m.jsonl")
    log.record_step(step=0, focal=1.25, dom=0.5)
    log.record_epoch(epoch=0, disc_acc=0.75)

    lines = (tmp_path / "m.jsonl").read_text().splitlines()
    assert lines[0] == json.dumps({"channel": "step", "dom": 0.5, "focal": 1.25, "step": 0}, sort_keys=True)
    assert all("time" not in json.loads(line) for line in lines)


def test_append_mode_keeps_existing_lines(tmp_path):
    path = tmp_path / "m.jsonl"
    MetricsLog(path).record_eval(overall_acc=0.5)
    MetricsLog(path, append=True).record_eval(overall_acc=0.6)
    assert len(path.read_text().splitlines()) == 2

    MetricsLog(path).record_eval(overall_acc=0.7)
    assert len(path.read_text().splitlines()) == 1


def test_listeners_receive_their_channel_only():
    log = MetricsLog()
    seen = []
    log.subscribe(MetricChannel.EPOCH, seen.append)
    log.record_step(step=1)
    log.record_epoch(epoch=1)
    log.unsubscribe(MetricChannel.EPOCH, seen.append)
    log.record_epoch(epoch=2)
    assert [e["epoch"] for e in seen] == [1]


def test_failing_listener_does_not_stop_recording():
    log = MetricsLog()

    def boom(_):
        raise RuntimeError("listener down")

    log.subscribe("step", boom)
    log.record_step(step=3)
    assert log.get_recent_events(channel="step")[-1]["step"] == 3


def test_recent_events_filter_and_limit():
    log = MetricsLog()
    for i in range(5):
        log.record_step(step=i)
    log.record_curriculum(epoch=0, active=10)
    assert [e["step"] for e in log.get_recent_events(limit=2, channel="step")] == [3, 4]
    assert log.get_recent_events(limit=1)[0]["channel"] == "curriculum"


def test_non_finite_values_are_stringified(tmp_path):
    log = MetricsLog(tmp_path / "m.jsonl")
    log.record_step(focal=float("nan"))
    assert json.loads((tmp_path / "m.jsonl").read_text())["focal"] == "nan"


def test_unknown_channel_is_rejected():
    with pytest.raises(ValueError):
        MetricsLog().record("weather", {})
