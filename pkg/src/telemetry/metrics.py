"""Channel-tagged run metrics: in-memory log, listeners and a JSON-Lines sink."""

import json
import logging
import math
from pathlib import Path
from typing import Any, Callable, Optional

from src.models.models import MetricChannel

logger = logging.getLogger(__name__)

Listener = Callable[[dict], None]


def _clean(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    return value


class MetricsLog:
    """Records metric events and fans them out to subscribers.

    Records carry no wall-clock timestamps, so two runs with the same seed
    write byte-identical files.
    """

    def __init__(self, path: Optional[str | Path] = None, append: bool = False):
        self._path = Path(path) if path else None
        self._listeners: dict[str, list[Listener]] = {ch.value: [] for ch in MetricChannel}
        self._event_log: list[dict] = []
        self._max_log_size = 10000
        if self._path is not None:
            self._path.parent.mkdir(parents=True, exist_ok=True)
            if not append:
                self._path.write_text("", encoding="utf-8")

    def subscribe(self, channel: MetricChannel | str, listener: Listener):
        self._listeners[MetricChannel(channel).value].append(listener)

    def unsubscribe(self, channel: MetricChannel | str, listener: Listener):
        listeners = self._listeners[MetricChannel(channel).value]
        if listener in listeners:
            listeners.remove(listener)

    def record(self, channel: MetricChannel | str, data: dict):
        """Append one event on *channel*."""
        channel = MetricChannel(channel).value
        message = {"channel": channel, **{k: _clean(v) for k, v in data.items()}}

        self._event_log.append(message)
        if len(self._event_log) > self._max_log_size:
            self._event_log = self._event_log[-self._max_log_size:]

        if self._path is not None:
            with self._path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(message, sort_keys=True) + "\n")

        for listener in list(self._listeners[channel]):
            try:
                listener(message)
            except Exception:
                logger.exception("Metrics listener failed on channel %s", channel)

    # ── Convenience record methods ─────────────────────────────────────────────

    def record_step(self, **fields):
        self.record(MetricChannel.STEP, fields)

    def record_epoch(self, **fields):
        self.record(MetricChannel.EPOCH, fields)

    def record_curriculum(self, **fields):
        self.record(MetricChannel.CURRICULUM, fields)

    def record_eval(self, **fields):
        self.record(MetricChannel.EVAL, fields)

    # ── Event log access ───────────────────────────────────────────────────────

    def get_recent_events(self, limit: int = 100, channel: str = None) -> list[dict]:
        """Get recent events from the log, optionally filtered by channel."""
        events = self._event_log
        if channel:
            events = [e for e in events if e.get("channel") == MetricChannel(channel).value]
        return events[-limit:]

    @property
    def path(self) -> Optional[Path]:
        return self._path
