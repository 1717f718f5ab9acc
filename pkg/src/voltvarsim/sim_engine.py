"""Closed-loop orchestration and the compromised-nodes reliability sweep.

Each control step walks the full chain: field nodes emit truthful
measurements, attacks tamper and flood, the RTU queue admits and serves,
the defense (or a last-value hold) forms the believed load picture, the
Volt-Var optimizer dispatches against that picture, and the power flow
applies the resulting setpoints to the true system. The optimizer never
sees true loads except through the packet path.
"""

from __future__ import annotations

import itertools
import math
import os
import sys
from dataclasses import dataclass, field

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from importlib import resources

from .attacks import AttackSpec, BUILTIN_ATTACKS, DosEntry, FdiEntry, apply_fdi, dos_flood, validate_attack
from .cybernet import MeasurementPacket, RtuQueue
from .defense_ann import (
    DETECTIONS_HEADER,
    DetectionReport,
    Detector,
    detect_and_mitigate,
    measurement_layout,
    model_from_json,
)
from .grid_model import NetworkModel, Phase, load_network, parse_phases, scale_loads
from .powerflow import ControlSetpoints, PowerFlowResult, solve
from .voltvar_opt import OptimizationProblem, objective, optimize


class EngineError(ValueError):
    """A scenario configuration is invalid or incomplete."""


class SimulationAborted(RuntimeError):
    """A module error stopped the loop; carries the partial log."""

    def __init__(self, cause: BaseException, result: "RunResult"):
        super().__init__(f"run aborted at t={result.last_time()}: {cause}")
        self.cause = cause
        self.result = result


@dataclass(frozen=True)
class QueueConfig:
    m: int = 2
    service_time_s: float = 0.005
    capacity: int = 50
    window: float = 0.5


@dataclass(frozen=True)
class ScenarioConfig:
    model_path: str = "builtin:ieee13"
    loading_factor: float = 0.5
    t_end: float = 10.0
    control_step: float = 0.5
    seed: int = 0
    defense_enabled: bool = True
    attack: AttackSpec | None = None
    queue: QueueConfig = QueueConfig()
    ann_model_path: str | None = None

    def __post_init__(self):
        if not 0 < self.control_step <= self.t_end:
            raise EngineError("need 0 < control_step <= t_end")
        if self.loading_factor <= 0:
            raise EngineError("loading_factor must be positive")

    def times(self) -> list[float]:
        n = int(round(self.t_end / self.control_step))
        return [i * self.control_step for i in range(n + 1)]


def _attack_from_table(table: dict) -> AttackSpec:
    if "builtin" in table:
        name = table["builtin"]
        if name not in BUILTIN_ATTACKS:
            raise EngineError(
                f"unknown builtin attack {name!r}; have {sorted(BUILTIN_ATTACKS)}"
            )
        return BUILTIN_ATTACKS[name]()
    fdi = tuple(
        FdiEntry(
            bus=str(e["bus"]),
            phases=parse_phases(e.get("phases", "abc")),
            mode=e["mode"],
            p_value=float(e["p_value"]),
            q_value=float(e["q_value"]),
        )
        for e in table.get("fdi", [])
    )
    dos = tuple(
        DosEntry(
            spoofed_source=str(e["spoofed_source"]),
            flood_rate=float(e.get("flood_rate", 200.0)),
        )
        for e in table.get("dos", [])
    )
    return AttackSpec(
        start_time=float(table.get("start_time_s", 3.0)), fdi=fdi, dos=dos
    )


def apply_overrides(doc: dict, overrides: dict[str, object]) -> dict:
    """Set dotted keys (e.g. 'queue.capacity') on a parsed scenario document."""
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = doc
        for part in parts[:-1]:
            nxt = node.setdefault(part, {})
            if not isinstance(nxt, dict):
                raise EngineError(f"override {dotted!r}: {part!r} is not a table")
            node = nxt
        node[parts[-1]] = value
    return doc


def load_scenario(path: str, overrides: dict[str, object] | None = None) -> ScenarioConfig:
    """Parse a scenario file; relative paths resolve against its directory."""
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    return scenario_from_doc(doc, base, overrides)


def scenario_from_doc(
    doc: dict, base: str, overrides: dict[str, object] | None = None
) -> ScenarioConfig:
    if overrides:
        doc = apply_overrides(doc, overrides)

    def resolve(p: str | None) -> str | None:
        if p is None or p.startswith("builtin:") or os.path.isabs(p):
            return p
        return os.path.join(base, p)

    sc = doc.get("scenario", {})
    qc = doc.get("queue", {})
    queue = QueueConfig(
        m=int(qc.get("m", 2)),
        service_time_s=float(qc.get("service_time_s", 0.005)),
        capacity=int(qc.get("capacity", 50)),
        window=float(qc.get("window", 0.5)),
    )
    attack = _attack_from_table(doc["attack"]) if "attack" in doc else None
    ann = doc.get("ann", {})
    return ScenarioConfig(
        model_path=resolve(str(sc.get("model_path", "builtin:ieee13"))),
        loading_factor=float(sc.get("loading_factor", 0.5)),
        t_end=float(sc.get("t_end", 10.0)),
        control_step=float(sc.get("control_step", 0.5)),
        seed=int(sc.get("seed", 0)),
        defense_enabled=bool(sc.get("defense_enabled", True)),
        attack=attack,
        queue=queue,
        ann_model_path=resolve(ann.get("model_path")),
    )


def _read_maybe_builtin(path: str, suffix: str) -> str:
    """Read a file, resolving 'builtin:NAME' against the packaged data."""
    if path.startswith("builtin:"):
        name = path.split(":", 1)[1]
        ref = resources.files("voltvarsim") / "data" / f"{name}{suffix}"
        if not ref.is_file():
            raise EngineError(f"no builtin {name!r} ({name}{suffix} not bundled)")
        return ref.read_text()
    with open(path, "r") as fh:
        return fh.read()


def resolve_model(config: ScenarioConfig) -> NetworkModel:
    """Load the scenario's network and apply its loading factor."""
    model = load_network(_read_maybe_builtin(config.model_path, ".model"))
    if config.loading_factor != 1.0:
        model = scale_loads(model, config.loading_factor)
    return model


def load_detector(config: ScenarioConfig, model: NetworkModel) -> Detector:
    """Build the configured Detector bound to the model's layout."""
    if config.ann_model_path is None:
        raise EngineError("defense enabled but no trained estimator given")
    text = _read_maybe_builtin(config.ann_model_path, ".json")
    return Detector(model_from_json(text), measurement_layout(model))


@dataclass
class TimeSeriesLog:
    """Column-named rows, one per control step, strictly time-ordered."""

    columns: tuple[str, ...]
    rows: list[tuple] = field(default_factory=list)


@dataclass
class RunResult:
    config: ScenarioConfig
    log: TimeSeriesLog
    reports: list[tuple[float, DetectionReport]]
    queue: RtuQueue

    def last_time(self) -> float | None:
        return self.log.rows[-1][0] if self.log.rows else None

    def detection_rows(self) -> list[tuple[str, ...]]:
        out = [DETECTIONS_HEADER]
        for t, report in self.reports:
            out.extend(report.rows(t))
        return out


def _log_columns(model: NetworkModel) -> tuple[str, ...]:
    cols = ["t_s"]
    for bus in model.buses:
        for ph in sorted(bus.phases):
            cols.append(f"v_{bus.id}_{ph.name}_pu")
    for oltc in model.oltcs:
        cols.append(f"tap_{oltc.bus}")
    for cap in model.capacitors:
        cols.append(f"cap_{cap.bus}")
    for dg in model.dgs:
        for ph in Phase:
            cols.append(f"qdg_{dg.bus}_{ph.name}_pu")
    cols += ["J_pu", "queue_occupancy", "drops", "detections"]
    return tuple(cols)


def _log_row(
    model: NetworkModel,
    t: float,
    result: PowerFlowResult,
    sp: ControlSetpoints,
    queue: RtuQueue,
    detections: int,
) -> tuple:
    row: list = [t]
    for bus in model.buses:
        v = result.voltage(bus.id)
        for ph in sorted(bus.phases):
            row.append(float(v[ph]))
    for i in range(len(model.oltcs)):
        row.append(int(sp.tap[i][0]))
    for i in range(len(model.capacitors)):
        row.append(int(sp.cap_switch[i]))
    for i in range(len(model.dgs)):
        for ph in Phase:
            row.append(float(sp.dg_q[i][ph]) / model.phase_base_kva)
    row += [objective(result), queue.occupancy(), queue.drops, detections]
    return tuple(row)


def _emit_truthful(
    model: NetworkModel,
    buses: tuple[str, ...],
    t: float,
    seq: dict[str, int],
) -> list[MeasurementPacket]:
    """One measurement packet per field node, canonical bus order."""
    by_id = model.bus_by_id
    packets = []
    for bus_id in buses:
        bus = by_id[bus_id]
        payload = {
            ph: (float(bus.load_p.get(ph, 0.0)), float(bus.load_q.get(ph, 0.0)))
            for ph in sorted(bus.phases)
        }
        seq[bus_id] = seq.get(bus_id, 0) + 1
        packets.append(
            MeasurementPacket(bus_id, "measurement", t, seq[bus_id], payload)
        )
    return packets


def run(config: ScenarioConfig, detector: Detector | None = None) -> RunResult:
    """Execute the scenario loop; deterministic for a fixed config."""
    model = resolve_model(config)
    if config.attack is not None:
        validate_attack(config.attack, model)
    layout = measurement_layout(model)
    if config.defense_enabled and detector is None:
        detector = load_detector(config, model)
    if detector is not None and detector.model.layer_sizes[0] != layout.feature_size:
        raise EngineError(
            f"estimator expects {detector.model.layer_sizes[0]} features, "
            f"model produces {layout.feature_size}"
        )
    queue = RtuQueue(
        m=config.queue.m,
        service_time=config.queue.service_time_s,
        capacity=config.queue.capacity,
        window=config.queue.window,
    )
    expected = layout.buses
    result = RunResult(config, TimeSeriesLog(_log_columns(model)), [], queue)

    seq: dict[str, int] = {}
    dos_state: dict = {}
    believed = np.zeros(layout.size)
    prev_clean: np.ndarray | None = None
    prev_physical: PowerFlowResult | None = None
    dt = config.control_step
    try:
        for t in config.times():
            packets = _emit_truthful(model, expected, t, seq)
            if config.attack is not None:
                packets = apply_fdi(packets, config.attack, t)
            for packet in packets:
                queue.enqueue(packet, t)
            if config.attack is not None:
                dos_state = dos_flood(queue, config.attack, t, dt, dos_state)
            delivered = queue.service_step(dt)

            n_detections = 0
            if (
                config.defense_enabled
                and prev_clean is not None
                and prev_physical is not None
            ):
                # trusted head signal: what the substation meter reads plus
                # the known control injections behind it
                head_p = prev_physical.head_p + prev_physical.dg_p.sum(axis=0)
                head_q = (
                    prev_physical.head_q
                    + prev_physical.dg_q.sum(axis=0)
                    + prev_physical.cap_q.sum(axis=0)
                )
                clean, report, disconnects = detect_and_mitigate(
                    detector,
                    delivered,
                    expected,
                    queue.utilization_by_source(),
                    prev_clean,
                    head_p,
                    head_q,
                )
                for source in disconnects:
                    queue.disconnect_source(source)
                believed = clean
                prev_clean = clean
                result.reports.append((t, report))
                n_detections = len(report.rows(t))
            else:
                # first step bootstraps from delivered telemetry; without
                # defense, missing quantities hold their last received value
                updates = layout.updates_from_packets(delivered)
                believed = believed.copy()
                for (bus, ph), (p_pu, q_pu) in updates.items():
                    believed[layout.index(bus, ph, "p")] = p_pu
                    believed[layout.index(bus, ph, "q")] = q_pu
                if config.defense_enabled:
                    prev_clean = believed
                    result.reports.append((t, DetectionReport((), (), ())))

            problem = OptimizationProblem(
                model, believed_loads=layout.loads_from_vector(believed)
            )
            outcome = optimize(problem)
            physical = solve(model, outcome.setpoints)
            prev_physical = physical
            result.log.rows.append(
                _log_row(model, t, physical, outcome.setpoints, queue, n_detections)
            )
    except Exception as exc:
        raise SimulationAborted(exc, result) from exc
    return result


def _format_cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def emit_csv(log: TimeSeriesLog, path: str) -> None:
    """Write the log as CSV, bit-stable for identical inputs."""
    lines = [",".join(log.columns)]
    for row in log.rows:
        lines.append(",".join(_format_cell(v) for v in row))
    _atomic_write(path, "\n".join(lines) + "\n")


def write_detections_csv(result: RunResult, path: str) -> None:
    rows = result.detection_rows()
    _atomic_write(path, "\n".join(",".join(r) for r in rows) + "\n")


def write_queue_events_csv(result: RunResult, path: str) -> None:
    lines = ["time,event,source,kind,occupancy"]
    for ev in result.queue.events or []:
        lines.append(
            f"{repr(ev.time)},{ev.event},{ev.source},{ev.kind},{ev.occupancy}"
        )
    _atomic_write(path, "\n".join(lines) + "\n")


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


# --- reliability sweep ---


def _true_loads(model: NetworkModel, buses: tuple[str, ...]) -> dict:
    by_id = model.bus_by_id
    loads = {}
    for bus_id in buses:
        bus = by_id[bus_id]
        loads[bus_id] = (
            {ph: bus.load_p.get(ph, 0.0) for ph in bus.phases},
            {ph: bus.load_q.get(ph, 0.0) for ph in bus.phases},
        )
    return loads


def _phase_maxima(result: PowerFlowResult) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return np.sqrt(np.nanmax(result.v2, axis=0))


def reliability_sweep(
    model: NetworkModel,
    k_max: int,
    delta_p: float = 100.0,
    delta_q: float = 100.0,
    combinations_cap: int = 2000,
    seed: int = 0,
) -> TimeSeriesLog:
    """Max voltage per phase as k compromised nodes inflate believed loads.

    Each compromised node's believed real power gains delta_p kW and its
    believed reactive power delta_q kVAr, split evenly over its present
    phases. Subsets of size k are evaluated exhaustively when their count
    fits combinations_cap, else by a seeded uniform sample; the k = 0 row
    is the uncompromised baseline. True loads never change.
    """
    candidates = tuple(b.id for b in model.buses if b.id != model.substation)
    if not 0 <= k_max <= len(candidates):
        raise EngineError(f"k_max must lie in 0..{len(candidates)}")
    base_loads = _true_loads(model, candidates)
    by_id = model.bus_by_id

    def evaluate(subset: tuple[str, ...]) -> np.ndarray:
        believed = {
            bus: ({**p}, {**q}) for bus, (p, q) in base_loads.items()
        }
        for bus_id in subset:
            phases = sorted(by_id[bus_id].phases)
            p_map, q_map = believed[bus_id]
            for ph in phases:
                p_map[ph] += delta_p / len(phases)
                q_map[ph] += delta_q / len(phases)
        problem = OptimizationProblem(model, believed_loads=believed)
        outcome = optimize(problem)
        return _phase_maxima(solve(model, outcome.setpoints))

    rng = np.random.default_rng(seed)
    log = TimeSeriesLog(("k", "phase", "v_max_pu"))
    baseline = evaluate(())
    for ph in Phase:
        log.rows.append((0, ph.name, float(baseline[ph])))
    for k in range(1, k_max + 1):
        if math.comb(len(candidates), k) <= combinations_cap:
            subsets = itertools.combinations(candidates, k)
        else:
            subsets = (
                tuple(
                    candidates[i]
                    for i in sorted(rng.choice(len(candidates), k, replace=False))
                )
                for _ in range(combinations_cap)
            )
        maxima = np.full(3, -np.inf)
        for subset in subsets:
            maxima = np.maximum(maxima, evaluate(subset))
        for ph in Phase:
            log.rows.append((k, ph.name, float(maxima[ph])))
    return log
