"""Command-line front end: scenario runs, sweeps, training, reproductions.

Every subcommand is deterministic for fixed seeds, writes its artifacts
atomically, and exits nonzero with a diagnostic (and no partial outputs)
when inputs are missing or invalid. ``VVS_LOG`` sets the log level.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import replace

from importlib import resources

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .defense_ann import (
    evaluate_mape,
    generate_training_set,
    mlp_forward,
    model_to_json,
    train_detector,
)
from .grid_model import NetworkModel, load_network, topology_order
from .powerflow import solve
from .sim_engine import (
    RunResult,
    ScenarioConfig,
    SimulationAborted,
    _atomic_write,
    emit_csv,
    load_detector,
    load_scenario,
    reliability_sweep,
    resolve_model,
    run,
    scenario_from_doc,
    write_detections_csv,
    write_queue_events_csv,
)

log = logging.getLogger("voltvarsim")

REPRO_CASES = ("scenario1", "scenario2", "fig8")


def _coerce(text: str):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _parse_sets(items: list[str] | None) -> dict[str, object]:
    out: dict[str, object] = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = _coerce(value.strip())
    return out


def _violation_intervals(
    model: NetworkModel, result: RunResult
) -> list[tuple[float, float, float]]:
    """(start, end, worst voltage) spans where any bus-phase leaves the band."""
    cols = result.log.columns
    vidx = [i for i, c in enumerate(cols) if c.startswith("v_")]
    spans = []
    current = None
    for row in result.log.rows:
        worst = 0.0
        out_of_band = False
        for i in vidx:
            v = row[i]
            if v > model.v_max or v < model.v_min:
                out_of_band = True
                worst = max(worst, v)
        if out_of_band:
            if current is None:
                current = [row[0], row[0], worst]
            else:
                current[1] = row[0]
                current[2] = max(current[2], worst)
        elif current is not None:
            spans.append(tuple(current))
            current = None
    if current is not None:
        spans.append(tuple(current))
    return spans


def _summary(model: NetworkModel, result: RunResult) -> str:
    cols = result.log.columns
    rows = result.log.rows
    lines = [
        f"defense: {'on' if result.config.defense_enabled else 'off'}",
        f"steps: {len(rows)} (t = {rows[0][0]:g} .. {rows[-1][0]:g} s,"
        f" step {result.config.control_step:g} s)",
        "peak voltage per node (pu):",
    ]
    for bus in model.buses:
        vcols = [i for i, c in enumerate(cols) if c.startswith(f"v_{bus.id}_")]
        peak, t_peak = max((max(row[i] for i in vcols), row[0]) for row in rows)
        lines.append(f"  {bus.id:>4}  {peak:.4f}  (t = {t_peak:g} s)")
    spans = _violation_intervals(model, result)
    lines.append(
        f"violation intervals (outside {model.v_min:g} .. {model.v_max:g} pu):"
    )
    if spans:
        for start, end, worst in spans:
            lines.append(f"  {start:g} .. {end:g} s  (worst {worst:.4f} pu)")
    else:
        lines.append("  none")
    n_fdi = sum(len(rep.fdi) for _, rep in result.reports)
    n_dos = sum(len(rep.dos) for _, rep in result.reports)
    n_fill = sum(len(rep.fills) for _, rep in result.reports)
    lines.append(f"detections: fdi={n_fdi} dos={n_dos} loss-fill={n_fill}")
    disconnected = sorted(result.queue.disconnected)
    lines.append(
        f"disconnected sources: {', '.join(disconnected) if disconnected else 'none'}"
    )
    return "\n".join(lines)


def _write_run_artifacts(
    out_dir: str, model: NetworkModel, result: RunResult, prefix: str = ""
) -> str:
    os.makedirs(out_dir, exist_ok=True)
    tag = f"_{prefix}" if prefix else ""
    emit_csv(result.log, os.path.join(out_dir, f"timeseries{tag}.csv"))
    write_queue_events_csv(result, os.path.join(out_dir, f"queue_events{tag}.csv"))
    if result.config.defense_enabled:
        write_detections_csv(result, os.path.join(out_dir, "detections.csv"))
    summary = _summary(model, result)
    return summary


def _cmd_run(args) -> int:
    config = load_scenario(args.scenario, overrides=_parse_sets(args.set))
    if args.no_defense:
        config = replace(config, defense_enabled=False)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    model = resolve_model(config)
    detector = load_detector(config, model) if config.defense_enabled else None
    try:
        result = run(config, detector=detector)
    except SimulationAborted as aborted:
        os.makedirs(args.out, exist_ok=True)
        emit_csv(aborted.result.log, os.path.join(args.out, "timeseries.csv"))
        log.error("run aborted; partial log flushed to %s", args.out)
        raise
    summary = _write_run_artifacts(args.out, model, result)
    _atomic_write(os.path.join(args.out, "summary.txt"), summary + "\n")
    print(summary)
    log.info("artifacts written to %s", args.out)
    return 0


def _cmd_sweep(args) -> int:
    config = load_scenario(args.scenario, overrides=_parse_sets(args.set))
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    model = resolve_model(config)
    table = reliability_sweep(model, k_max=args.kmax, seed=config.seed)
    os.makedirs(args.out, exist_ok=True)
    emit_csv(table, os.path.join(args.out, "sweep.csv"))
    for row in table.rows:
        print(f"k={row[0]} phase {row[1]}: max {row[2]:.4f} pu")
    return 0


def _cmd_train(args) -> int:
    text_model = _load_model_for(args.model)
    started = time.time()
    detector, curve = train_detector(
        text_model,
        seed=args.seed,
        epochs=args.epochs,
        samples_per_factor=args.samples,
    )
    elapsed = time.time() - started
    _atomic_write(args.out, model_to_json(detector.model))
    loss_path = os.path.splitext(args.out)[0] + "_loss.csv"
    lines = ["epoch,loss"] + [f"{i},{repr(x)}" for i, x in enumerate(curve)]
    _atomic_write(loss_path, "\n".join(lines) + "\n")
    held = generate_training_set(
        text_model, factors=(0.55, 1.25), samples_per_factor=200, seed=args.seed + 1
    )
    mape = evaluate_mape(mlp_forward(detector.model, held.inputs), held.targets)
    print(
        f"trained in {elapsed:.1f} s ({len(curve)} epochs, final loss {curve[-1]:.5f})"
    )
    print(f"held-out MAPE {mape:.2f}% (accuracy {100 - mape:.2f}%)")
    print(f"model: {args.out}\nloss curve: {loss_path}")
    return 0


def _load_model_for(path: str) -> NetworkModel:
    if path.startswith("builtin:"):
        name = path.split(":", 1)[1]
        ref = resources.files("voltvarsim") / "data" / f"{name}.model"
        if not ref.is_file():
            raise FileNotFoundError(f"no builtin model {name!r}")
        return load_network(ref.read_text())
    with open(path, "r") as fh:
        return load_network(fh.read())


def _cmd_validate(args) -> int:
    model = _load_model_for(args.model)
    order, children = topology_order(model)
    depth: dict[str, int] = {model.substation: 0}
    for bus_id in order:
        for child in children.get(bus_id, []):
            depth[child] = depth[bus_id] + 1
    p_tot, q_tot = model.total_load()
    print(f"buses: {len(model.buses)}  lines: {len(model.lines)}"
          f"  tree depth: {max(depth.values())}")
    print(f"regulators: {[o.bus for o in model.oltcs]}"
          f"  capacitors: {[c.bus for c in model.capacitors]}"
          f"  dg: {[d.bus for d in model.dgs]}")
    print(f"total load: {float(p_tot.sum()):.1f} kW, {float(q_tot.sum()):.1f} kVAr")
    result = solve(model)
    lo, hi = result.extremes()
    print("base-case voltages (pu):")
    for bus in model.buses:
        v = result.voltage(bus.id)
        parts = ", ".join(
            f"{ph.name}={v[ph]:.4f}" for ph in sorted(bus.phases)
        )
        print(f"  {bus.id:>4}  {parts}")
    print(f"extremes: {lo ** 0.5:.4f} .. {hi ** 0.5:.4f} pu")
    return 0


def _builtin_scenario(case: str) -> ScenarioConfig:
    text = (resources.files("voltvarsim") / "data" / f"{case}.toml").read_text()
    return scenario_from_doc(tomllib.loads(text), base="")


def _cmd_repro(args) -> int:
    out = args.out or os.path.join("out", args.case)
    if args.case == "fig8":
        config = _builtin_scenario("scenario1")
        model = resolve_model(config)
        table = reliability_sweep(model, k_max=args.kmax, seed=args.seed or 0)
        os.makedirs(out, exist_ok=True)
        emit_csv(table, os.path.join(out, "sweep.csv"))
        print(f"sweep.csv written to {out}")
        for row in table.rows:
            print(f"k={row[0]} phase {row[1]}: max {row[2]:.4f} pu")
        return 0
    config = _builtin_scenario(args.case)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    model = resolve_model(config)
    detector = load_detector(config, model)
    summaries = []
    for enabled, prefix in ((False, "defense_off"), (True, "defense_on")):
        variant = replace(config, defense_enabled=enabled)
        result = run(variant, detector=detector if enabled else None)
        summary = _write_run_artifacts(out, model, result, prefix=prefix)
        summaries.append(f"[{prefix}]\n{summary}")
    text = "\n\n".join(summaries)
    _atomic_write(os.path.join(out, "summary.txt"), text + "\n")
    print(text)
    log.info("artifacts written to %s", out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voltvarsim",
        description="Volt-Var control simulation under hybrid FDI/DoS attacks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a scenario file")
    p_run.add_argument("scenario")
    p_run.add_argument("--no-defense", action="store_true")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--out", default="out")
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="compromised-nodes reliability sweep")
    p_sweep.add_argument("scenario")
    p_sweep.add_argument("--kmax", type=int, required=True)
    p_sweep.add_argument("--seed", type=int)
    p_sweep.add_argument("--out", default="out")
    p_sweep.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_train = sub.add_parser("train-ann", help="train the measurement estimator")
    p_train.add_argument("model", help="network document path or builtin:NAME")
    p_train.add_argument("--out", default="ann.json")
    p_train.add_argument("--epochs", type=int, default=5000)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--samples", type=int, default=100)
    p_train.set_defaults(func=_cmd_train)

    p_val = sub.add_parser("validate", help="check a network document")
    p_val.add_argument("model", help="network document path or builtin:NAME")
    p_val.set_defaults(func=_cmd_validate)

    p_repro = sub.add_parser("repro", help="reproduce a built-in experiment")
    p_repro.add_argument("case", choices=REPRO_CASES)
    p_repro.add_argument("--out")
    p_repro.add_argument("--seed", type=int)
    p_repro.add_argument("--kmax", type=int, default=5)
    p_repro.set_defaults(func=_cmd_repro)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("VVS_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
