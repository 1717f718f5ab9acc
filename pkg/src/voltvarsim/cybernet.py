"""Feeder RTU communication layer: a deterministic D/D/m/K FIFO queue.

Field nodes push one measurement packet per control step toward the control
center; attackers push greeting floods under a spoofed source identity. The
queue admits packets up to capacity K, services them with m deterministic
servers, and keeps per-source accounting so the control center can apply the
occupancy-share rule (a source using more than 60 % of RTU capacity inside
the accounting window is treated as a flood).

Time advances in the caller's control steps: all of a step's arrivals are
enqueued first, then ``service_step`` drains up to the accumulated service
credit. Fractional credit carries across steps but idle servers do not bank
capacity (credit resets when the buffer empties).
"""

from __future__ import annotations

from collections import Counter, deque
from dataclasses import dataclass, field

from .grid_model import Phase


@dataclass(frozen=True)
class MeasurementPacket:
    """One telemetry or greeting packet.

    ``payload`` maps Phase -> (P kW, Q kVAr) for measurement packets and is
    None for greetings. ``seq`` is monotone per (source, kind) stream; a
    spoofing flood runs its own counter, so streams stay individually ordered
    even when an attacker forges a legitimate node's identity.
    """

    source: str
    kind: str  # "measurement" | "greeting"
    timestamp: float
    seq: int
    payload: dict[Phase, tuple[float, float]] | None = None


@dataclass
class QueueEvent:
    time: float
    event: str  # admit | drop | deliver | purge | disconnect
    source: str
    kind: str
    occupancy: int


class RtuQueue:
    """D/D/m/K FIFO queue with per-source accounting and disconnect control."""

    def __init__(
        self,
        m: int = 2,
        service_time: float = 0.005,
        capacity: int = 50,
        window: float = 0.5,
        log_events: bool = True,
    ):
        if m < 1 or service_time <= 0 or capacity < 1 or window <= 0:
            raise ValueError("m >= 1, service_time > 0, capacity >= 1, window > 0")
        self.m = m
        self.service_time = service_time
        self.capacity = capacity
        self.window = window
        self.now = 0.0
        self.buffer: deque[tuple[MeasurementPacket, float]] = deque()
        self.admissions: deque[tuple[float, str]] = deque()  # (admit time, source)
        self.disconnected: set[str] = set()
        self.drops = 0
        self.service_credit = 0.0
        self.admitted_by_source: Counter[str] = Counter()
        self.delivered_by_source: Counter[str] = Counter()
        self.purged_by_source: Counter[str] = Counter()
        self.dropped_by_source: Counter[str] = Counter()
        self.events: list[QueueEvent] | None = [] if log_events else None

    def _log(self, event: str, source: str, kind: str) -> None:
        if self.events is not None:
            self.events.append(
                QueueEvent(self.now, event, source, kind, len(self.buffer))
            )

    def _advance(self, now: float) -> None:
        if now < self.now:
            raise ValueError(f"time went backwards: {now} < {self.now}")
        self.now = now
        cutoff = now - self.window
        while self.admissions and self.admissions[0][0] < cutoff:
            self.admissions.popleft()

    def enqueue(self, packet: MeasurementPacket, now: float) -> bool:
        """Admit ``packet`` if the source is connected and a slot is free."""
        self._advance(now)
        if packet.source in self.disconnected or len(self.buffer) >= self.capacity:
            self.drops += 1
            self.dropped_by_source[packet.source] += 1
            self._log("drop", packet.source, packet.kind)
            return False
        self.buffer.append((packet, now))
        self.admissions.append((now, packet.source))
        self.admitted_by_source[packet.source] += 1
        self._log("admit", packet.source, packet.kind)
        return True

    def service_step(self, dt: float) -> list[MeasurementPacket]:
        """Deliver up to floor(m*dt/service_time + carried credit) packets."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.service_credit += self.m * dt / self.service_time
        delivered = []
        while self.service_credit >= 1.0 and self.buffer:
            packet, _ = self.buffer.popleft()
            self.service_credit -= 1.0
            delivered.append(packet)
            self.delivered_by_source[packet.source] += 1
            self._log("deliver", packet.source, packet.kind)
        if not self.buffer:
            self.service_credit = 0.0  # idle servers do not bank capacity
        return delivered

    def utilization_by_source(self, window: float | None = None) -> dict[str, float]:
        """Fraction of K used per source: buffered plus window admissions.

        A packet both admitted inside the window and still buffered counts
        once. History is retained for the configured accounting window, so
        ``window`` larger than the configured one is clamped to it.
        """
        window = self.window if window is None else min(window, self.window)
        if window <= 0:
            raise ValueError("window must be positive")
        cutoff = self.now - window
        counts: Counter[str] = Counter()
        for t_adm, source in self.admissions:
            if t_adm >= cutoff:
                counts[source] += 1
        for packet, t_adm in self.buffer:
            if t_adm < cutoff:
                counts[packet.source] += 1
        return {src: n / self.capacity for src, n in counts.items()}

    def disconnect_source(self, source: str) -> None:
        """Purge the source's buffered packets and reject its future traffic."""
        kept: deque[tuple[MeasurementPacket, float]] = deque()
        purged = []
        for packet, t_adm in self.buffer:
            if packet.source == source:
                purged.append(packet)
            else:
                kept.append((packet, t_adm))
        self.buffer = kept
        for packet in purged:
            self.purged_by_source[source] += 1
            self._log("purge", packet.source, packet.kind)
        self.disconnected.add(source)
        self._log("disconnect", source, "-")

    def reconnect_source(self, source: str) -> None:
        self.disconnected.discard(source)

    def occupancy(self) -> int:
        return len(self.buffer)

    def conservation_holds(self) -> bool:
        """admitted == delivered + buffered + purged, per source and total."""
        buffered: Counter[str] = Counter(p.source for p, _ in self.buffer)
        sources = (
            set(self.admitted_by_source)
            | set(self.delivered_by_source)
            | set(self.purged_by_source)
            | set(buffered)
        )
        return all(
            self.admitted_by_source[s]
            == self.delivered_by_source[s] + buffered[s] + self.purged_by_source[s]
            for s in sources
        )
