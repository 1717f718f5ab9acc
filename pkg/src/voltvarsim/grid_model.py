"""Radial feeder model: buses, lines, regulators, capacitors, and DG units.

A network is loaded from a TOML document, validated, and then treated as
immutable: every mutating operation (scaling loads, swapping believed loads)
returns a new model. Impedances are stored in ohms on the model and converted
to per-unit by consumers via ``z_base``.
"""

from __future__ import annotations

import enum
import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - Python < 3.11
    import tomli as tomllib


class ModelError(ValueError):
    """A feeder document is malformed or violates a structural invariant."""


class Phase(enum.IntEnum):
    """Phase label; the integer value doubles as an array index."""

    a = 0
    b = 1
    c = 2


PHASES = (Phase.a, Phase.b, Phase.c)

# 32-position regulator ladder, 0.90 .. 1.10 inclusive. Tap indices are
# 1-based; index 16 is the nearest-to-unity ratio.
DEFAULT_TAP_RATIOS = tuple(0.90 + (i - 1) * 0.2 / 31 for i in range(1, 33))
NOMINAL_TAP = 16

FEET_PER_MILE = 5280.0


def parse_phases(text: str) -> frozenset[Phase]:
    """Parse a phase string like "abc" or "bc" into a phase set."""
    if not text:
        raise ModelError("empty phase specification")
    out = set()
    for ch in text:
        try:
            out.add(Phase[ch])
        except KeyError:
            raise ModelError(f"unknown phase letter {ch!r} in {text!r}") from None
    return frozenset(out)


def phases_str(phases: frozenset[Phase]) -> str:
    return "".join(p.name for p in sorted(phases))


def _phase_map(raw: dict | None, phases: frozenset[Phase], where: str) -> dict[Phase, float]:
    """Convert a {"a": 1.0, ...} table into a Phase-keyed map, checking keys."""
    out: dict[Phase, float] = {}
    if raw is None:
        return out
    for key, val in raw.items():
        try:
            ph = Phase[key]
        except KeyError:
            raise ModelError(f"{where}: unknown phase key {key!r}") from None
        if ph not in phases:
            raise ModelError(f"{where}: value given for absent phase {key!r}")
        if not isinstance(val, (int, float)) or not math.isfinite(val):
            raise ModelError(f"{where}: phase {key!r} value must be a finite number")
        out[ph] = float(val)
    return out


@dataclass(frozen=True)
class Bus:
    """A feeder node. Loads are in kW / kVAr on the phases present."""

    id: str
    phases: frozenset[Phase]
    load_p: dict[Phase, float] = field(default_factory=dict)
    load_q: dict[Phase, float] = field(default_factory=dict)

    def load_array(self) -> np.ndarray:
        """Complex (3,) load in kW + j kVAr; zero on absent phases."""
        out = np.zeros(3, dtype=complex)
        for ph in self.phases:
            out[ph] = self.load_p.get(ph, 0.0) + 1j * self.load_q.get(ph, 0.0)
        return out


@dataclass(frozen=True, eq=False)
class Line:
    """A series element between two buses. z is a 3x3 complex matrix in ohms.

    Rows/columns of phases the line does not carry are zero. The matrix must
    be symmetric with nonnegative real diagonal on carried phases.
    """

    from_bus: str
    to_bus: str
    phases: frozenset[Phase]
    z: np.ndarray

    @property
    def id(self) -> str:
        return f"{self.from_bus}-{self.to_bus}"


@dataclass(frozen=True)
class Oltc:
    """On-load tap changer regulating the voltage at ``bus``.

    The ratio applies on the line feeding ``bus``: in squared-magnitude form
    v_bus = ratio**2 * (v_parent - series drop). ``tap`` holds the initial
    1-based tap index per phase; ganged regulators move all phases together.
    """

    bus: str
    tap: tuple[int, int, int] = (NOMINAL_TAP,) * 3
    ganged: bool = True
    ratios: tuple[float, ...] = DEFAULT_TAP_RATIOS

    def ratio(self, phase: Phase) -> float:
        return self.ratios[self.tap[phase] - 1]


@dataclass(frozen=True)
class CapacitorBank:
    """Switched shunt capacitor. q_rated is kVAr per phase at 1 pu voltage."""

    bus: str
    q_rated: dict[Phase, float]
    switch: int = 0


@dataclass(frozen=True)
class Dg:
    """Inverter-based distributed generator with dispatchable reactive power.

    Ratings are per phase: s_rated in kVA, p_out in kW, q_set in kVAr.
    """

    bus: str
    s_rated: dict[Phase, float]
    p_out: dict[Phase, float]
    q_set: dict[Phase, float] = field(default_factory=dict)
    connected: int = 1


@dataclass(frozen=True, eq=False)
class NetworkModel:
    """Validated radial feeder. Instances are immutable; hash by identity."""

    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    oltcs: tuple[Oltc, ...]
    capacitors: tuple[CapacitorBank, ...]
    dgs: tuple[Dg, ...]
    substation: str
    base_kv: float = 4.16
    base_mva: float = 5.0
    v_min: float = 0.95
    v_max: float = 1.05
    source_v: float = 1.0

    @property
    def bus_by_id(self) -> dict[str, Bus]:
        return {b.id: b for b in self.buses}

    @property
    def z_base(self) -> float:
        """Impedance base in ohms (line-to-line kV squared over total MVA)."""
        return self.base_kv**2 / self.base_mva

    @property
    def phase_base_kva(self) -> float:
        """Per-phase power base in kVA (total MVA split over three phases)."""
        return self.base_mva * 1e3 / 3.0

    def total_load(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-phase (P kW, Q kVAr) sums over all buses."""
        s = np.zeros(3, dtype=complex)
        for bus in self.buses:
            s += bus.load_array()
        return s.real.copy(), s.imag.copy()


def _check_line_matrix(line: Line) -> None:
    z = line.z
    if z.shape != (3, 3):
        raise ModelError(f"line {line.id}: impedance must be 3x3")
    if not np.all(np.isfinite(z.view(float))):
        raise ModelError(f"line {line.id}: impedance has non-finite entries")
    if not np.allclose(z, z.T, rtol=0, atol=0):
        raise ModelError(f"line {line.id}: impedance matrix must be symmetric")
    mask = np.zeros(3, dtype=bool)
    for ph in line.phases:
        mask[ph] = True
    if np.any(z[~mask, :] != 0) or np.any(z[:, ~mask] != 0):
        raise ModelError(f"line {line.id}: nonzero impedance on absent phase")
    diag = np.real(np.diag(z))
    if np.any(diag[mask] < 0):
        raise ModelError(f"line {line.id}: negative series resistance")


def validate_network(model: NetworkModel) -> None:
    """Raise ModelError on any structural violation; silent when valid."""
    ids = [b.id for b in model.buses]
    if len(set(ids)) != len(ids):
        dup = sorted({i for i in ids if ids.count(i) > 1})
        raise ModelError(f"duplicate bus id(s): {', '.join(dup)}")
    by_id = model.bus_by_id
    if model.substation not in by_id:
        raise ModelError(f"substation {model.substation!r} is not a bus")
    if not (0 < model.v_min < 1.0 < model.v_max):
        raise ModelError("voltage band must satisfy 0 < v_min < 1 < v_max")
    if model.base_kv <= 0 or model.base_mva <= 0 or model.source_v <= 0:
        raise ModelError("base_kv, base_mva and source_v must be positive")

    for bus in model.buses:
        if not bus.phases:
            raise ModelError(f"bus {bus.id}: no phases")
        for ph in bus.load_p:
            if ph not in bus.phases:
                raise ModelError(f"bus {bus.id}: load on absent phase {ph.name}")
        for ph in bus.load_q:
            if ph not in bus.phases:
                raise ModelError(f"bus {bus.id}: load on absent phase {ph.name}")

    # Topology: every line endpoint exists, the graph is a tree on all buses.
    adjacency: dict[str, list[str]] = {b.id: [] for b in model.buses}
    for line in model.lines:
        for end in (line.from_bus, line.to_bus):
            if end not in by_id:
                raise ModelError(f"line {line.id}: unknown bus {end!r}")
        if line.from_bus == line.to_bus:
            raise ModelError(f"line {line.id}: self-loop")
        _check_line_matrix(line)
        if not line.phases <= by_id[line.from_bus].phases:
            raise ModelError(
                f"line {line.id}: carries phases absent at {line.from_bus}"
            )
        if not by_id[line.to_bus].phases <= line.phases:
            raise ModelError(
                f"line {line.id}: bus {line.to_bus} has phases the line does not carry"
            )
        adjacency[line.from_bus].append(line.to_bus)
        adjacency[line.to_bus].append(line.from_bus)
    if len(model.lines) != len(model.buses) - 1:
        raise ModelError(
            f"{len(model.lines)} lines for {len(model.buses)} buses: not a tree"
        )
    seen = {model.substation}
    frontier = deque([model.substation])
    while frontier:
        node = frontier.popleft()
        for nxt in adjacency[node]:
            if nxt not in seen:
                seen.add(nxt)
                frontier.append(nxt)
    if len(seen) != len(model.buses):
        missing = sorted(set(ids) - seen)
        raise ModelError(f"unreachable bus(es): {', '.join(missing)}")

    for oltc in model.oltcs:
        if oltc.bus not in by_id:
            raise ModelError(f"oltc at unknown bus {oltc.bus!r}")
        if oltc.bus == model.substation:
            raise ModelError("oltc cannot regulate the substation bus itself")
        n = len(oltc.ratios)
        if n < 2:
            raise ModelError(f"oltc {oltc.bus}: ratio table too short")
        if any(not 0 < r <= 2 for r in oltc.ratios):
            raise ModelError(f"oltc {oltc.bus}: ratios out of (0, 2]")
        if any(b >= a for a, b in zip(oltc.ratios[1:], oltc.ratios)):
            raise ModelError(f"oltc {oltc.bus}: ratios must strictly increase")
        for t in oltc.tap:
            if not 1 <= t <= n:
                raise ModelError(f"oltc {oltc.bus}: tap {t} outside 1..{n}")
        if oltc.ganged and len(set(oltc.tap)) != 1:
            raise ModelError(f"oltc {oltc.bus}: ganged but per-phase taps differ")
    if len({o.bus for o in model.oltcs}) != len(model.oltcs):
        raise ModelError("multiple oltcs on one bus")

    for cap in model.capacitors:
        if cap.bus not in by_id:
            raise ModelError(f"capacitor at unknown bus {cap.bus!r}")
        if cap.switch not in (0, 1):
            raise ModelError(f"capacitor {cap.bus}: switch must be 0 or 1")
        for ph, q in cap.q_rated.items():
            if ph not in by_id[cap.bus].phases:
                raise ModelError(f"capacitor {cap.bus}: rating on absent phase {ph.name}")
            if q < 0 or not math.isfinite(q):
                raise ModelError(f"capacitor {cap.bus}: negative rating on {ph.name}")

    for dg in model.dgs:
        if dg.bus not in by_id:
            raise ModelError(f"dg at unknown bus {dg.bus!r}")
        if dg.connected not in (0, 1):
            raise ModelError(f"dg {dg.bus}: connected must be 0 or 1")
        for ph in set(dg.s_rated) | set(dg.p_out) | set(dg.q_set):
            if ph not in by_id[dg.bus].phases:
                raise ModelError(f"dg {dg.bus}: rating on absent phase {ph.name}")
        for ph, s in dg.s_rated.items():
            if s < 0:
                raise ModelError(f"dg {dg.bus}: negative s_rated on {ph.name}")
            p = dg.p_out.get(ph, 0.0)
            if abs(p) > s + 1e-9:
                raise ModelError(
                    f"dg {dg.bus}: p_out {p} exceeds s_rated {s} on phase {ph.name}"
                )


def topology_order(model: NetworkModel) -> tuple[list[str], dict[str, list[str]]]:
    """Breadth-first bus order from the substation plus a children map.

    The order is deterministic: children are visited in the order their lines
    appear in the document. Returns (ordered bus ids, parent -> children).
    """
    children: dict[str, list[str]] = {b.id: [] for b in model.buses}
    neighbors: dict[str, list[str]] = {b.id: [] for b in model.buses}
    for line in model.lines:
        neighbors[line.from_bus].append(line.to_bus)
        neighbors[line.to_bus].append(line.from_bus)
    order = [model.substation]
    seen = {model.substation}
    frontier = deque([model.substation])
    while frontier:
        node = frontier.popleft()
        for nxt in neighbors[node]:
            if nxt not in seen:
                seen.add(nxt)
                children[node].append(nxt)
                order.append(nxt)
                frontier.append(nxt)
    return order, children


def scale_loads(model: NetworkModel, factor: float) -> NetworkModel:
    """Return a copy with every load multiplied by ``factor`` (> 0)."""
    if not (isinstance(factor, (int, float)) and math.isfinite(factor) and factor > 0):
        raise ModelError(f"loading factor must be finite and positive, got {factor!r}")
    buses = tuple(
        replace(
            bus,
            load_p={ph: v * factor for ph, v in bus.load_p.items()},
            load_q={ph: v * factor for ph, v in bus.load_q.items()},
        )
        for bus in model.buses
    )
    return replace(model, buses=buses)


def with_loads(
    model: NetworkModel,
    loads: dict[str, tuple[dict[Phase, float], dict[Phase, float]]],
) -> NetworkModel:
    """Return a copy whose loads are replaced by ``loads``.

    ``loads`` maps bus id -> (P map, Q map) in kW/kVAr. Buses not listed keep
    zero load: the mapping is a complete statement of believed demand.
    """
    by_id = model.bus_by_id
    for bus_id, (p_map, q_map) in loads.items():
        if bus_id not in by_id:
            raise ModelError(f"loads reference unknown bus {bus_id!r}")
        for ph in set(p_map) | set(q_map):
            if ph not in by_id[bus_id].phases:
                raise ModelError(f"loads: bus {bus_id} has no phase {ph.name}")
    buses = []
    for bus in model.buses:
        if bus.id in loads:
            p_map, q_map = loads[bus.id]
            buses.append(replace(bus, load_p=dict(p_map), load_q=dict(q_map)))
        else:
            buses.append(replace(bus, load_p={}, load_q={}))
    return replace(model, buses=tuple(buses))


# --- TOML document handling -------------------------------------------------

# Upper-triangle entry order for 3x3 impedance matrices in documents.
_TRIU = ((0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2))


def _matrix_from_triu(r: list, x: list, where: str) -> np.ndarray:
    if len(r) != 6 or len(x) != 6:
        raise ModelError(f"{where}: impedance needs 6 real and 6 imaginary entries")
    z = np.zeros((3, 3), dtype=complex)
    for (i, j), re_v, im_v in zip(_TRIU, r, x):
        z[i, j] = z[j, i] = float(re_v) + 1j * float(im_v)
    return z


def _triu_from_matrix(z: np.ndarray) -> tuple[list[float], list[float]]:
    r = [float(z[i, j].real) for i, j in _TRIU]
    x = [float(z[i, j].imag) for i, j in _TRIU]
    return r, x


def _parse_line(table: dict, index: int) -> Line:
    where = f"[[line]] #{index + 1}"
    try:
        from_bus = str(table["from"])
        to_bus = str(table["to"])
        phases = parse_phases(str(table["phases"]))
    except KeyError as exc:
        raise ModelError(f"{where}: missing key {exc.args[0]!r}") from None
    where = f"line {from_bus}-{to_bus}"
    if "r_ohm" in table:
        z = _matrix_from_triu(table["r_ohm"], table.get("x_ohm", [0.0] * 6), where)
    elif "r_per_mile" in table:
        if "length_ft" not in table:
            raise ModelError(f"{where}: per-mile impedance needs length_ft")
        scale = float(table["length_ft"]) / FEET_PER_MILE
        z = scale * _matrix_from_triu(
            table["r_per_mile"], table.get("x_per_mile", [0.0] * 6), where
        )
    else:
        raise ModelError(f"{where}: need r_ohm or r_per_mile impedance data")
    return Line(from_bus=from_bus, to_bus=to_bus, phases=phases, z=z)


def load_network(text: str) -> NetworkModel:
    """Parse and validate a feeder document. Raises ModelError on problems."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ModelError(f"document is not valid TOML: {exc}") from None

    system = doc.get("system", {})
    if "substation" not in system:
        raise ModelError("[system] must name the substation bus")

    buses = []
    for i, table in enumerate(doc.get("bus", [])):
        if "id" not in table:
            raise ModelError(f"[[bus]] #{i + 1}: missing id")
        bus_id = str(table["id"])
        phases = parse_phases(str(table.get("phases", "abc")))
        buses.append(
            Bus(
                id=bus_id,
                phases=phases,
                load_p=_phase_map(table.get("load_p"), phases, f"bus {bus_id} load_p"),
                load_q=_phase_map(table.get("load_q"), phases, f"bus {bus_id} load_q"),
            )
        )
    if not buses:
        raise ModelError("document defines no buses")

    lines = tuple(_parse_line(t, i) for i, t in enumerate(doc.get("line", [])))

    oltcs = []
    for table in doc.get("oltc", []):
        bus = str(table.get("bus", ""))
        ratios = tuple(float(r) for r in table.get("ratios", DEFAULT_TAP_RATIOS))
        tap_raw = table.get("tap", NOMINAL_TAP)
        if isinstance(tap_raw, list):
            if len(tap_raw) != 3:
                raise ModelError(f"oltc {bus}: tap list must have 3 entries")
            tap = tuple(int(t) for t in tap_raw)
        else:
            tap = (int(tap_raw),) * 3
        oltcs.append(
            Oltc(bus=bus, tap=tap, ganged=bool(table.get("ganged", True)), ratios=ratios)
        )

    bus_phase = {b.id: b.phases for b in buses}
    caps = []
    for table in doc.get("capacitor", []):
        bus = str(table.get("bus", ""))
        phases = bus_phase.get(bus, frozenset(PHASES))
        caps.append(
            CapacitorBank(
                bus=bus,
                q_rated=_phase_map(table.get("q_rated"), phases, f"capacitor {bus}"),
                switch=int(table.get("switch", 0)),
            )
        )

    dgs = []
    for table in doc.get("dg", []):
        bus = str(table.get("bus", ""))
        phases = bus_phase.get(bus, frozenset(PHASES))
        where = f"dg {bus}"
        dgs.append(
            Dg(
                bus=bus,
                s_rated=_phase_map(table.get("s_rated"), phases, where),
                p_out=_phase_map(table.get("p_out"), phases, where),
                q_set=_phase_map(table.get("q_set"), phases, where),
                connected=int(table.get("connected", 1)),
            )
        )

    model = NetworkModel(
        buses=tuple(buses),
        lines=lines,
        oltcs=tuple(oltcs),
        capacitors=tuple(caps),
        dgs=tuple(dgs),
        substation=str(system["substation"]),
        base_kv=float(system.get("base_kv", 4.16)),
        base_mva=float(system.get("base_mva", 5.0)),
        v_min=float(system.get("v_min", 0.95)),
        v_max=float(system.get("v_max", 1.05)),
        source_v=float(system.get("source_v", 1.0)),
    )
    validate_network(model)
    return model


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, dict):
        inner = ", ".join(f"{k} = {_toml_value(v)}" for k, v in value.items())
        return "{ " + inner + " }"
    raise TypeError(f"cannot emit {type(value).__name__} as TOML")


def _emit_table(name: str, pairs: list[tuple[str, object]], array: bool) -> list[str]:
    head = f"[[{name}]]" if array else f"[{name}]"
    out = [head]
    for key, value in pairs:
        out.append(f"{key} = {_toml_value(value)}")
    out.append("")
    return out


def serialize_network(model: NetworkModel) -> str:
    """Emit a TOML document that load_network() parses back to an equal model.

    Output is deterministic: table order follows the model, floats use their
    shortest round-trip form, impedances are written as direct ohms.
    """
    lines_out: list[str] = []
    lines_out += _emit_table(
        "system",
        [
            ("substation", model.substation),
            ("base_kv", model.base_kv),
            ("base_mva", model.base_mva),
            ("v_min", model.v_min),
            ("v_max", model.v_max),
            ("source_v", model.source_v),
        ],
        array=False,
    )
    for bus in model.buses:
        pairs: list[tuple[str, object]] = [
            ("id", bus.id),
            ("phases", phases_str(bus.phases)),
        ]
        if bus.load_p:
            pairs.append(("load_p", {p.name: bus.load_p[p] for p in sorted(bus.load_p)}))
        if bus.load_q:
            pairs.append(("load_q", {p.name: bus.load_q[p] for p in sorted(bus.load_q)}))
        lines_out += _emit_table("bus", pairs, array=True)
    for line in model.lines:
        r, x = _triu_from_matrix(line.z)
        lines_out += _emit_table(
            "line",
            [
                ("from", line.from_bus),
                ("to", line.to_bus),
                ("phases", phases_str(line.phases)),
                ("r_ohm", r),
                ("x_ohm", x),
            ],
            array=True,
        )
    for oltc in model.oltcs:
        pairs = [("bus", oltc.bus), ("ganged", oltc.ganged), ("tap", list(oltc.tap))]
        if oltc.ratios != DEFAULT_TAP_RATIOS:
            pairs.append(("ratios", list(oltc.ratios)))
        lines_out += _emit_table("oltc", pairs, array=True)
    for cap in model.capacitors:
        lines_out += _emit_table(
            "capacitor",
            [
                ("bus", cap.bus),
                ("q_rated", {p.name: cap.q_rated[p] for p in sorted(cap.q_rated)}),
                ("switch", cap.switch),
            ],
            array=True,
        )
    for dg in model.dgs:
        lines_out += _emit_table(
            "dg",
            [
                ("bus", dg.bus),
                ("s_rated", {p.name: dg.s_rated[p] for p in sorted(dg.s_rated)}),
                ("p_out", {p.name: dg.p_out[p] for p in sorted(dg.p_out)}),
                ("q_set", {p.name: dg.q_set[p] for p in sorted(dg.q_set)}),
                ("connected", dg.connected),
            ],
            array=True,
        )
    return "\n".join(lines_out)
