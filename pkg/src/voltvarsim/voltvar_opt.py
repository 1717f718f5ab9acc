"""Centralized Volt-Var optimization over discrete devices plus DG reactive power.

The optimizer enumerates every admissible combination of tap positions,
capacitor switches and DG connection bits, dispatches the continuous DG
reactive power for each combination on a linear voltage-sensitivity model,
evaluates every candidate exactly with the power flow, and picks the winner
by a lexicographic key:

    (infeasible?, band violation, total active-power flow J, voltage
     flatness sum (v - 1)^2, canonical assignment tuple)

so feasibility dominates, then the paper objective J (the sum of active power
flows on all lines), then flatness as the deterministic tie-breaker. All
voltage quantities are squared magnitudes in pu^2.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grid_model import Dg, ModelError, NetworkModel, Phase, with_loads
from .powerflow import (
    ControlSetpoints,
    PowerFlowResult,
    compiled,
    nominal_setpoints,
    solve,
    solve_batch,
)

DISPATCH_TOL = 1e-6
DISPATCH_MAX_SWEEPS = 200
ENUMERATION_LIMIT = 10**6


class EnumerationError(RuntimeError):
    """The discrete assignment space exceeds the enumeration limit."""


def qdg_bounds(dg: Dg, phase: Phase) -> tuple[float, float]:
    """Reactive capability (lo, hi) on ``phase`` in the rating's units.

    Symmetric headroom sqrt(s_rated^2 - p_out^2); zero when the phase carries
    no rating. Raises ModelError when real output exceeds the rating.
    """
    s = dg.s_rated.get(phase, 0.0)
    p = dg.p_out.get(phase, 0.0)
    if abs(p) > s:
        raise ModelError(
            f"dg {dg.bus}: p_out {p} exceeds s_rated {s} on phase {phase.name}"
        )
    lim = math.sqrt(s * s - p * p)
    return (-lim, lim)


@dataclass(frozen=True)
class OptimizationProblem:
    """A believed operating state to optimize against.

    ``believed_loads`` (bus -> (P map, Q map), kW/kVAr) replaces the model's
    loads wholesale when given; None means the model's own loads are believed.
    ``v_band`` holds squared-magnitude bounds; None takes the model's band.
    """

    model: NetworkModel
    believed_loads: dict | None = None
    v_band: tuple[float, float] | None = None

    @cached_property
    def believed_model(self) -> NetworkModel:
        if self.believed_loads is None:
            return self.model
        return with_loads(self.model, self.believed_loads)

    @property
    def band(self) -> tuple[float, float]:
        if self.v_band is not None:
            return self.v_band
        return (self.model.v_min**2, self.model.v_max**2)


def count_assignments(model: NetworkModel, tap_radius: int | None = None) -> int:
    total = 1
    for oltc in model.oltcs:
        n = len(oltc.ratios)
        if tap_radius is not None:
            t0 = oltc.tap[0]
            n = min(len(oltc.ratios), t0 + tap_radius) - max(1, t0 - tap_radius) + 1
        total *= n if oltc.ganged else n**3
    total *= 2 ** len(model.capacitors)
    total *= 2 ** len(model.dgs)
    return total


def enumerate_discrete(
    problem: OptimizationProblem,
    limit: int = ENUMERATION_LIMIT,
    tap_radius: int | None = None,
):
    """Yield every discrete assignment (taps, cap_switch, dg_connect) once.

    Canonical order: tap indices ascending (outermost), capacitor switches
    open-first, DG connects disconnect-first; trailing devices vary fastest.
    ``tap_radius`` restricts each regulator to a window around its current
    tap, the documented escape hatch when the full space exceeds ``limit``.
    """
    model = problem.believed_model
    total = count_assignments(model, tap_radius)
    if total > limit:
        raise EnumerationError(
            f"{total} assignments exceed the limit of {limit}; gang regulator "
            f"phases or pass tap_radius to bound the tap window"
        )
    tap_ranges = []
    for oltc in model.oltcs:
        lo, hi = 1, len(oltc.ratios)
        if tap_radius is not None:
            lo = max(lo, oltc.tap[0] - tap_radius)
            hi = min(hi, oltc.tap[0] + tap_radius)
        choices = range(lo, hi + 1)
        if oltc.ganged:
            tap_ranges.append([(t, t, t) for t in choices])
        else:
            tap_ranges.append(
                [t for t in itertools.product(choices, repeat=3)]
            )
    cap_ranges = [(0, 1)] * len(model.capacitors)
    dg_ranges = [(0, 1)] * len(model.dgs)
    for combo in itertools.product(*tap_ranges, *cap_ranges, *dg_ranges):
        n_o = len(model.oltcs)
        n_c = len(model.capacitors)
        taps = combo[:n_o]
        caps = combo[n_o : n_o + n_c]
        dgs = combo[n_o + n_c :]
        yield (tuple(taps), tuple(caps), tuple(dgs))


def build_sensitivity(model: NetworkModel) -> tuple[np.ndarray, list[tuple[int, Phase]]]:
    """Linear map from DG reactive injections to squared voltages.

    Columns are (dg index, phase) pairs with nonzero reactive headroom; rows
    are the present bus-phases flattened in BFS order. Computed from unit
    injections with capacitors forced open (the model is exactly linear in Q
    at fixed taps and capacitor state), taps at their stored positions.
    """
    net = compiled(model)
    columns = [
        (i, ph)
        for i in range(len(model.dgs))
        for ph in Phase
        if net.dg_qmax_pu[i, ph] > 0
    ]
    n_o, n_c, n_d = len(model.oltcs), len(model.capacitors), len(model.dgs)
    rows = 1 + len(columns)
    taps = np.tile(np.array([o.tap for o in model.oltcs], dtype=int), (rows, 1, 1))
    caps = np.zeros((rows, n_c))
    dgc = np.ones((rows, n_d))
    dgq = np.zeros((rows, n_d, 3))
    for j, (i, ph) in enumerate(columns):
        dgq[1 + j, i, ph] = 1.0
    batch = solve_batch(model, taps, caps, dgc, dgq)
    flat = batch.v2.reshape(rows, -1)[:, net.flat_present]
    m = (flat[1:] - flat[0]).T  # (F, C)
    return m, columns


def q_dispatch(
    model: NetworkModel,
    taps: np.ndarray,
    cap_switch: np.ndarray,
    dg_connect: np.ndarray,
    sensitivity: tuple[np.ndarray, list[tuple[int, Phase]]],
    v_target: float = 1.0,
) -> np.ndarray:
    """Dispatch DG reactive power for a batch of discrete assignments.

    Projected coordinate descent on flatness sum (v - target^2)^2 under the
    linear model v = v0 + M q, with per-coordinate box limits from the DG
    ratings (clamped to zero for disconnected units). Rows converge
    independently (a finished row freezes), so results do not depend on how
    assignments are batched. Returns q in pu, shape (A, n_dg, 3).
    """
    net = compiled(model)
    m_mat, columns = sensitivity
    a_n = np.asarray(taps).reshape(-1, len(model.oltcs), 3).shape[0]
    n_d = len(model.dgs)
    q_full = np.zeros((a_n, n_d, 3))
    if not columns:
        return q_full
    base = solve_batch(model, taps, cap_switch, dg_connect, q_full)
    v0 = base.v2.reshape(a_n, -1)[:, net.flat_present]

    n_cols = len(columns)
    col_sq = np.einsum("fc,fc->c", m_mat, m_mat)
    hi = np.empty((a_n, n_cols))
    dgc = np.asarray(dg_connect, dtype=float).reshape(a_n, n_d)
    for j, (i, ph) in enumerate(columns):
        hi[:, j] = dgc[:, i] * net.dg_qmax_pu[i, ph]
    lo = -hi

    q = np.zeros((a_n, n_cols))
    resid = v0 - v_target**2
    active = np.ones(a_n, dtype=bool)
    for _ in range(DISPATCH_MAX_SWEEPS):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        max_delta = np.zeros(rows.size)
        for j in range(n_cols):
            if col_sq[j] == 0.0:
                continue
            g = resid[rows] @ m_mat[:, j]
            q_new = np.clip(q[rows, j] - g / col_sq[j], lo[rows, j], hi[rows, j])
            dq = q_new - q[rows, j]
            resid[rows] += dq[:, None] * m_mat[None, :, j]
            q[rows, j] = q_new
            max_delta = np.maximum(max_delta, np.abs(dq))
        active[rows[max_delta <= DISPATCH_TOL]] = False

    for j, (i, ph) in enumerate(columns):
        q_full[:, i, ph] = q[:, j]
    return q_full


@dataclass(frozen=True, eq=False)
class OptimizationOutcome:
    """Winning dispatch plus its exactly re-solved believed operating point."""

    setpoints: ControlSetpoints
    feasible: bool
    violation: float  # worst band excess in pu^2; 0 when feasible
    objective: float  # sum of active power flows over all lines, pu
    flatness: float  # sum of (v - 1)^2 over present bus-phases, pu^2 units
    result: PowerFlowResult
    n_assignments: int


def _assignment_arrays(model: NetworkModel, assignments: list):
    n_o, n_c, n_d = len(model.oltcs), len(model.capacitors), len(model.dgs)
    a_n = len(assignments)
    taps = np.empty((a_n, n_o, 3), dtype=int)
    caps = np.empty((a_n, n_c))
    dgc = np.empty((a_n, n_d))
    for r, (t, c, d) in enumerate(assignments):
        for i in range(n_o):
            taps[r, i, :] = t[i]
        caps[r, :] = c
        dgc[r, :] = d
    return taps, caps, dgc


def optimize(
    problem: OptimizationProblem,
    limit: int = ENUMERATION_LIMIT,
    tap_radius: int | None = None,
) -> OptimizationOutcome:
    """Solve the Volt-Var dispatch against the problem's believed loads.

    Every discrete assignment is evaluated exactly after its continuous DG
    dispatch; infeasible problems return the least-violating assignment. The
    winner is re-solved through the public single solve so the reported
    numbers are reproducible from the returned setpoints alone.
    """
    model = problem.believed_model
    net = compiled(model)
    assignments = list(enumerate_discrete(problem, limit=limit, tap_radius=tap_radius))
    taps, caps, dgc = _assignment_arrays(model, assignments)
    sens = build_sensitivity(model)
    q_pu = q_dispatch(model, taps, caps, dgc, sens)
    batch = solve_batch(model, taps, caps, dgc, q_pu)

    a_n = len(assignments)
    flat_v = batch.v2.reshape(a_n, -1)[:, net.flat_present]
    lo2, hi2 = problem.band
    violation = np.maximum(
        (lo2 - flat_v).max(axis=1), (flat_v - hi2).max(axis=1)
    )
    violation = np.maximum(violation, 0.0)
    infeasible = (violation > 0.0).astype(int)
    j_total = batch.flow_p.sum(axis=(1, 2))
    flatness = ((flat_v - 1.0) ** 2).sum(axis=1)

    canon = [
        tuple(taps[r].reshape(-1)) + tuple(int(x) for x in caps[r]) + tuple(int(x) for x in dgc[r])
        for r in range(a_n)
    ]
    best = min(
        range(a_n),
        key=lambda r: (infeasible[r], violation[r], j_total[r], flatness[r], canon[r]),
    )

    base = model.phase_base_kva
    setpoints = ControlSetpoints(
        tap=tuple(tuple(int(t) for t in taps[best, i]) for i in range(len(model.oltcs))),
        cap_switch=tuple(int(c) for c in caps[best]),
        dg_connect=tuple(int(d) for d in dgc[best]),
        dg_q=tuple(
            tuple(float(q_pu[best, i, ph] * base) for ph in Phase)
            for i in range(len(model.dgs))
        ),
    )
    final = solve(model, setpoints)
    flat_final = final.v2.reshape(-1)[net.flat_present]
    vio = max(0.0, float((lo2 - flat_final).max()), float((flat_final - hi2).max()))
    return OptimizationOutcome(
        setpoints=setpoints,
        feasible=vio <= 0.0,
        violation=vio,
        objective=float(final.flow_p.sum()),
        flatness=float(((flat_final - 1.0) ** 2).sum()),
        result=final,
        n_assignments=a_n,
    )


def objective(result: PowerFlowResult) -> float:
    """Total active power flow over all lines and phases, in pu."""
    return float(result.flow_p.sum())
