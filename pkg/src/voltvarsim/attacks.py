"""Hybrid FDI / DoS attack generation against the telemetry path.

FDI entries tamper measurement packets in flight (after field emission,
before RTU enqueue); DoS entries pump greeting packets into the RTU queue
under a spoofed source identity. Both activate once simulation time reaches
the spec's start_time and stay active afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .cybernet import MeasurementPacket, RtuQueue
from .grid_model import NetworkModel, Phase, parse_phases


class AttackError(ValueError):
    """An attack spec is malformed or references unknown buses."""


@dataclass(frozen=True)
class FdiEntry:
    """Falsify one node's measurements.

    set_absolute: payload on the listed phases becomes (p_value kW, q_value
    kVAr). scale: payload is multiplied by the (positive, dimensionless)
    factors. Phases absent from a packet are left alone.
    """

    bus: str
    phases: frozenset[Phase]
    mode: str  # "set_absolute" | "scale"
    p_value: float
    q_value: float


@dataclass(frozen=True)
class DosEntry:
    """Greeting flood against the RTU, spoofing a field node's identity.

    The attacker is a separate entity that forges ``spoofed_source``; the
    occupancy rule therefore fingers that identity, and disconnecting it
    also silences the victim's legitimate telemetry (the loss the estimator
    subsequently fills).
    """

    spoofed_source: str
    flood_rate: float = 200.0


@dataclass(frozen=True)
class AttackSpec:
    start_time: float = 3.0
    fdi: tuple[FdiEntry, ...] = ()
    dos: tuple[DosEntry, ...] = ()

    def active(self, now: float) -> bool:
        return now >= self.start_time


def validate_attack(spec: AttackSpec, model: NetworkModel) -> None:
    """Check spec invariants against a model; raise AttackError on violation."""
    if spec.start_time < 0:
        raise AttackError("start_time must be nonnegative")
    by_id = model.bus_by_id
    for entry in spec.fdi:
        if entry.bus not in by_id:
            raise AttackError(f"fdi entry references unknown bus {entry.bus!r}")
        if entry.mode not in ("set_absolute", "scale"):
            raise AttackError(f"fdi {entry.bus}: unknown mode {entry.mode!r}")
        if not entry.phases:
            raise AttackError(f"fdi {entry.bus}: empty phase set")
        if entry.mode == "scale" and (entry.p_value <= 0 or entry.q_value <= 0):
            raise AttackError(f"fdi {entry.bus}: scale factors must be positive")
        if not (math.isfinite(entry.p_value) and math.isfinite(entry.q_value)):
            raise AttackError(f"fdi {entry.bus}: non-finite values")
    for entry in spec.dos:
        if entry.spoofed_source not in by_id:
            raise AttackError(
                f"dos entry references unknown bus {entry.spoofed_source!r}"
            )
        if entry.flood_rate <= 0:
            raise AttackError("flood_rate must be positive")


def apply_fdi(
    packets: list[MeasurementPacket], spec: AttackSpec, now: float
) -> list[MeasurementPacket]:
    """Return packets with matching payloads falsified; others pass untouched."""
    if not spec.active(now) or not spec.fdi:
        return list(packets)
    by_bus: dict[str, list[FdiEntry]] = {}
    for entry in spec.fdi:
        by_bus.setdefault(entry.bus, []).append(entry)
    out = []
    for packet in packets:
        entries = by_bus.get(packet.source)
        if packet.kind != "measurement" or not entries or packet.payload is None:
            out.append(packet)
            continue
        payload = dict(packet.payload)
        for entry in entries:
            for ph in entry.phases:
                if ph not in payload:
                    continue
                if entry.mode == "set_absolute":
                    payload[ph] = (entry.p_value, entry.q_value)
                else:
                    p, q = payload[ph]
                    payload[ph] = (p * entry.p_value, q * entry.q_value)
        out.append(replace(packet, payload=payload))
    return out


def dos_flood(
    queue: RtuQueue,
    spec: AttackSpec,
    now: float,
    dt: float,
    state: dict | None = None,
) -> dict:
    """Pump floor(flood_rate * dt) greetings per DoS entry into the queue.

    Fractional packet counts carry between calls through ``state`` (pass the
    returned mapping back in); dropped floods still consume their count.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    state = {} if state is None else state
    if not spec.active(now):
        return state
    for idx, entry in enumerate(spec.dos):
        carry, seq = state.get(idx, (0.0, 0))
        raw = entry.flood_rate * dt + carry
        count = int(math.floor(raw + 1e-12))
        carry = raw - count
        for _ in range(count):
            seq += 1
            queue.enqueue(
                MeasurementPacket(
                    source=entry.spoofed_source,
                    kind="greeting",
                    timestamp=now,
                    seq=seq,
                ),
                now,
            )
        state[idx] = (carry, seq)
    return state


def scenario_one() -> AttackSpec:
    """Hybrid attack: falsify nodes 680 and 671, flood the RTU as node 652."""
    return AttackSpec(
        start_time=3.0,
        fdi=(
            FdiEntry("680", parse_phases("abc"), "set_absolute", 500.0, 500.0),
            FdiEntry("671", parse_phases("abc"), "scale", 1.6, 1.6),
        ),
        dos=(DosEntry("652", 200.0),),
    )


def scenario_two() -> AttackSpec:
    """Hybrid attack: falsify 680, 692 and 632, flood the RTU as node 633.

    The node-632 entry ships inert (scale 1.0) and exists so configurations
    can override its factors; the published magnitudes cover only 680/692.
    """
    return AttackSpec(
        start_time=3.0,
        fdi=(
            FdiEntry("680", parse_phases("abc"), "set_absolute", 500.0, 500.0),
            FdiEntry("692", parse_phases("ac"), "set_absolute", 100.0, 100.0),
            FdiEntry("632", parse_phases("abc"), "scale", 1.0, 1.0),
        ),
        dos=(DosEntry("633", 200.0),),
    )


BUILTIN_ATTACKS = {
    "scenario1": scenario_one,
    "scenario2": scenario_two,
}
