"""Watchdog that stops long-running loops that stall or overrun their budget."""

import logging
import threading
import time
from typing import Callable, Optional

logger = logging.getLogger(__name__)


class Watchdog:
    """Monitor heartbeats from an optimisation loop and trip a stop flag."""

    def __init__(
        self,
        name: str,
        *,
        interval_s: float = 1.0,
        timeout_s: float = 60.0,
        budget_s: float = 0.0,
        on_trip: Optional[Callable[[str], None]] = None,
    ):
        self.name = name
        self.interval_s = max(0.05, interval_s)
        self.timeout_s = max(self.interval_s, timeout_s)
        self.budget_s = max(0.0, budget_s)
        self.on_trip = on_trip
        self.tripped = threading.Event()
        self.reason = ""
        self._started_at = time.monotonic()
        self._last_heartbeat = self._started_at
        self._stop_event = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def beat(self) -> None:
        """Record a heartbeat from the monitored loop."""

        self._last_heartbeat = time.monotonic()

    def start(self) -> "Watchdog":
        if self._thread and self._thread.is_alive():
            return self

        if self._stop_event.is_set():
            self._stop_event = threading.Event()

        self._started_at = time.monotonic()
        self._last_heartbeat = self._started_at
        self._thread = threading.Thread(
            target=self._run, name=f"{self.name}-watchdog", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._stop_event.set()
        if self._thread and self._thread is not threading.current_thread():
            self._thread.join(timeout=self.interval_s * 4)

    def __enter__(self) -> "Watchdog":
        return self.start()

    def __exit__(self, exc_type, exc, tb) -> None:
        self.stop()

    def _run(self) -> None:
        while not self._stop_event.wait(self.interval_s):
            now = time.monotonic()
            if now - self._last_heartbeat > self.timeout_s:
                self._trip(f"no heartbeat for {now - self._last_heartbeat:.1f} s")
                return
            if self.budget_s and now - self._started_at > self.budget_s:
                self._trip(f"time budget of {self.budget_s:.1f} s exhausted")
                return

    def _trip(self, reason: str) -> None:
        self.reason = reason
        self.tripped.set()
        logger.warning("[Watchdog:%s] %s", self.name, reason)
        try:
            if self.on_trip:
                self.on_trip(reason)
        except Exception as exc:  # noqa: PERF203
            logger.error("[Watchdog:%s] Trip callback failed: %s", self.name, exc)


__all__ = ["Watchdog"]
