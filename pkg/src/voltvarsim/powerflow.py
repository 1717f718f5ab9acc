"""Three-phase linearized power flow for radial feeders, squared-voltage form.

The model is the lossless linearized branch flow ("LinDistFlow") extended to
unbalanced multiphase lines: power flowing to each subtree is accumulated leaf
to root, then squared voltage magnitudes propagate root to leaf,

    v_j[p] = v_i[p] - 2 Re( sum_q conj(z_ij[p,q]) * alpha[p,q] * S_j[q] )

with alpha[p,q] = exp(j(theta_p - theta_q)) the nominal phase-rotation factors
(theta = 0, -120, +120 degrees). Regulators multiply the arrival voltage by
the tap ratio squared; switched capacitors inject Q proportional to local
squared voltage, resolved by fixed-point iteration.

Everything here is vectorized over an "assignment" axis so a control
optimizer can evaluate hundreds of discrete device assignments in one pass;
``solve`` is the batch-of-one case. Rows of a batch converge independently
(a converged row is frozen), so batch and single evaluations of the same
assignment are bitwise identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from weakref import WeakKeyDictionary

import numpy as np

from .grid_model import (
    CapacitorBank,
    NetworkModel,
    Oltc,
    Phase,
    topology_order,
)


class PowerFlowError(RuntimeError):
    """The fixed-point iteration failed to converge."""


class SetpointError(ValueError):
    """Control setpoints are malformed or violate device limits."""


# alpha[p, q] = exp(j (theta_p - theta_q)), theta = (0, -120, +120) degrees
_THETA = np.array([0.0, -2.0 * np.pi / 3.0, 2.0 * np.pi / 3.0])
ALPHA = np.exp(1j * (_THETA[:, None] - _THETA[None, :]))

CAP_TOL = 1e-8
CAP_MAX_ITER = 50


def tap_ratio(oltc: Oltc, phase: Phase) -> float:
    """Turns ratio currently selected on ``phase`` (1-based tap index)."""
    return oltc.ratios[oltc.tap[phase] - 1]


def capacitor_injection(
    cap: CapacitorBank, switch: int, v_node: np.ndarray, phase_base_kva: float
) -> np.ndarray:
    """Reactive injection (3,) in pu given squared node voltage ``v_node``.

    The injection scales with squared voltage magnitude: a closed bank rated
    0.1 pu on a node at 1.0404 pu^2 injects 0.10404 pu.
    """
    q_rated = np.zeros(3)
    for ph, val in cap.q_rated.items():
        q_rated[ph] = val / phase_base_kva
    return switch * q_rated * np.asarray(v_node, dtype=float)


@dataclass(frozen=True)
class ControlSetpoints:
    """One complete dispatch of the controllable devices.

    Order matches the model's device tuples. Taps are 1-based indices per
    phase; dg_q is kVAr per phase and is ignored for disconnected units.
    """

    tap: tuple[tuple[int, int, int], ...] = ()
    cap_switch: tuple[int, ...] = ()
    dg_connect: tuple[int, ...] = ()
    dg_q: tuple[tuple[float, float, float], ...] = ()


def nominal_setpoints(model: NetworkModel) -> ControlSetpoints:
    """Setpoints reproducing the device states stored in the model."""
    return ControlSetpoints(
        tap=tuple(o.tap for o in model.oltcs),
        cap_switch=tuple(c.switch for c in model.capacitors),
        dg_connect=tuple(d.connected for d in model.dgs),
        dg_q=tuple(
            tuple(d.q_set.get(ph, 0.0) for ph in Phase) for d in model.dgs
        ),
    )


def dg_q_limit_kvar(model: NetworkModel) -> np.ndarray:
    """Per-unit-independent reactive headroom sqrt(s^2 - p^2), (n_dg, 3) kVAr."""
    out = np.zeros((len(model.dgs), 3))
    for i, dg in enumerate(model.dgs):
        for ph in dg.s_rated:
            s = dg.s_rated[ph]
            p = dg.p_out.get(ph, 0.0)
            out[i, ph] = math.sqrt(max(s * s - p * p, 0.0))
    return out


class CompiledNetwork:
    """Immutable per-model arrays the sweeps run on. Built once per model."""

    def __init__(self, model: NetworkModel):
        self.model = model
        order, _children = topology_order(model)
        self.ids: tuple[str, ...] = tuple(order)
        self.pos: dict[str, int] = {b: k for k, b in enumerate(order)}
        n = len(order)
        self.n = n
        by_id = model.bus_by_id
        base = model.phase_base_kva
        z_base = model.z_base

        self.phase_mask = np.zeros((n, 3), dtype=bool)
        self.loads_pu = np.zeros((n, 3), dtype=complex)
        for bus in model.buses:
            k = self.pos[bus.id]
            for ph in bus.phases:
                self.phase_mask[k, ph] = True
            self.loads_pu[k] = bus.load_array() / base

        self.parent = np.full(n, -1, dtype=int)
        self.zeff = np.zeros((n, 3, 3), dtype=complex)
        self.line_child = np.zeros(len(model.lines), dtype=int)
        self.line_ids: tuple[str, ...] = tuple(l.id for l in model.lines)
        # BFS rank identifies each line's downstream endpoint.
        for j, line in enumerate(model.lines):
            a, b = self.pos[line.from_bus], self.pos[line.to_bus]
            child, par = (b, a) if b > a else (a, b)
            self.line_child[j] = child
            self.parent[child] = par
            self.zeff[child] = np.conj(line.z / z_base) * ALPHA

        self.cap_pos = np.array([self.pos[c.bus] for c in model.capacitors], dtype=int)
        self.cap_q_pu = np.zeros((len(model.capacitors), 3))
        for i, cap in enumerate(model.capacitors):
            for ph, val in cap.q_rated.items():
                self.cap_q_pu[i, ph] = val / base

        self.dg_pos = np.array([self.pos[d.bus] for d in model.dgs], dtype=int)
        self.dg_p_pu = np.zeros((len(model.dgs), 3))
        self.dg_qmax_pu = dg_q_limit_kvar(model) / base
        for i, dg in enumerate(model.dgs):
            for ph, val in dg.p_out.items():
                self.dg_p_pu[i, ph] = val / base

        self.oltc_pos = np.array([self.pos[o.bus] for o in model.oltcs], dtype=int)
        self.oltc_ratios = tuple(np.asarray(o.ratios) for o in model.oltcs)

        # Present-phase flat index used for feasibility/flatness reductions.
        self.flat_present = np.flatnonzero(self.phase_mask.reshape(-1))


_COMPILED: "WeakKeyDictionary[NetworkModel, CompiledNetwork]" = WeakKeyDictionary()


def compiled(model: NetworkModel) -> CompiledNetwork:
    net = _COMPILED.get(model)
    if net is None:
        net = CompiledNetwork(model)
        _COMPILED[model] = net
    return net


@dataclass(frozen=True, eq=False)
class BatchResult:
    """Solved batch: leading axis indexes assignments."""

    bus_ids: tuple[str, ...]
    line_ids: tuple[str, ...]
    v2: np.ndarray  # (A, n, 3) pu^2, NaN on absent phases
    flow_p: np.ndarray  # (A, L, 3) pu, flow into each line's downstream subtree
    flow_q: np.ndarray
    head_p: np.ndarray  # (A, 3) pu net flow leaving the substation
    head_q: np.ndarray
    cap_q: np.ndarray  # (A, n_cap, 3) pu injected
    dg_p: np.ndarray  # (A, n_dg, 3) pu injected
    dg_q: np.ndarray
    iterations: np.ndarray  # (A,) fixed-point sweeps used per row


def _sweep(net: CompiledNetwork, s_node: np.ndarray, gamma2: np.ndarray):
    """One accumulation + voltage pass over the tree for a batch.

    s_node: (A, n, 3) complex net withdrawal at each bus.
    gamma2: (A, n, 3) per-bus squared ratio multipliers (1 where no oltc).
    Returns (s_acc, v2): subtree flows and squared voltages, both unmasked.
    """
    src2 = net.model.source_v**2
    s_acc = s_node.copy()
    for k in range(net.n - 1, 0, -1):
        s_acc[:, net.parent[k], :] += s_acc[:, k, :]
    v2 = np.empty_like(s_node, dtype=float)
    v2[:, 0, :] = src2
    for k in range(1, net.n):
        drop = 2.0 * np.real(np.einsum("pq,aq->ap", net.zeff[k], s_acc[:, k, :]))
        v2[:, k, :] = (v2[:, net.parent[k], :] - drop) * gamma2[:, k, :]
    return s_acc, v2


def solve_batch(
    model: NetworkModel,
    taps: np.ndarray,
    cap_switch: np.ndarray,
    dg_connect: np.ndarray,
    dg_q_pu: np.ndarray,
) -> BatchResult:
    """Evaluate a batch of device assignments against one model.

    taps: (A, n_oltc, 3) 1-based indices; cap_switch: (A, n_cap) in {0,1};
    dg_connect: (A, n_dg) in {0,1}; dg_q_pu: (A, n_dg, 3) per-unit reactive
    dispatch. No limit checking happens here; ``solve`` is the checked entry.
    """
    net = compiled(model)
    taps = np.asarray(taps, dtype=int)
    cap_switch = np.asarray(cap_switch, dtype=float)
    dg_connect = np.asarray(dg_connect, dtype=float)
    dg_q_pu = np.asarray(dg_q_pu, dtype=float)
    a_n = max(
        (arr.shape[0] for arr in (taps, cap_switch, dg_connect, dg_q_pu) if arr.ndim),
        default=1,
    )
    taps = taps.reshape(a_n, len(model.oltcs), 3)
    cap_switch = cap_switch.reshape(a_n, len(model.capacitors))
    dg_connect = dg_connect.reshape(a_n, len(model.dgs))
    dg_q_pu = dg_q_pu.reshape(a_n, len(model.dgs), 3)

    gamma2 = np.ones((a_n, net.n, 3))
    for i in range(len(net.oltc_ratios)):
        gam = net.oltc_ratios[i][taps[:, i, :] - 1]
        gamma2[:, net.oltc_pos[i], :] = gam * gam

    dg_p = dg_connect[:, :, None] * net.dg_p_pu[None, :, :]  # (A, d, 3)
    dg_q = dg_connect[:, :, None] * dg_q_pu
    s_base = np.broadcast_to(net.loads_pu, (a_n, net.n, 3)).copy()
    for i in range(len(net.dg_pos)):
        s_base[:, net.dg_pos[i], :] -= dg_p[:, i, :] + 1j * dg_q[:, i, :]

    n_cap = len(net.cap_pos)
    cap_q = np.zeros((a_n, n_cap, 3))
    v_capbus = np.ones((a_n, n_cap, 3))
    # Rows with no closed, nonzero-rated bank finish in one pass.
    effective = (
        (cap_switch * net.cap_q_pu.max(axis=1)[None, :]).max(axis=1) > 0
        if n_cap
        else np.zeros(a_n, dtype=bool)
    )

    s_out = np.empty_like(s_base)
    v_out = np.empty((a_n, net.n, 3))
    iters = np.zeros(a_n, dtype=int)
    active = np.ones(a_n, dtype=bool)
    for sweep_no in range(1, CAP_MAX_ITER + 1):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        s_node = s_base[rows].copy()
        if n_cap:
            q_inj = cap_switch[rows, :, None] * net.cap_q_pu[None] * v_capbus[rows]
            for i in range(n_cap):
                s_node[:, net.cap_pos[i], :] -= 1j * q_inj[:, i, :]
        s_acc, v2 = _sweep(net, s_node, gamma2[rows])
        if n_cap:
            v_new = v2[:, net.cap_pos, :]
            delta = np.abs(v_new - v_capbus[rows]).max(axis=(1, 2))
            v_capbus[rows] = v_new
        else:
            delta = np.zeros(rows.size)
        done = ~effective[rows] | (delta <= CAP_TOL)
        done_rows = rows[done]
        s_out[done_rows] = s_acc[done]
        v_out[done_rows] = v2[done]
        if n_cap:
            cap_q[done_rows] = q_inj[done]
        iters[done_rows] = sweep_no
        active[done_rows] = False
    if active.any():
        raise PowerFlowError(
            f"capacitor fixed point did not converge within {CAP_MAX_ITER} sweeps "
            f"for {int(active.sum())} assignment(s)"
        )

    flows = s_out[:, net.line_child, :]
    root_children = np.flatnonzero(net.parent == 0)
    head = s_out[:, root_children, :].sum(axis=1)
    v_masked = np.where(net.phase_mask[None, :, :], v_out, np.nan)
    return BatchResult(
        bus_ids=net.ids,
        line_ids=net.line_ids,
        v2=v_masked,
        flow_p=flows.real.copy(),
        flow_q=flows.imag.copy(),
        head_p=head.real.copy(),
        head_q=head.imag.copy(),
        cap_q=cap_q,
        dg_p=dg_p,
        dg_q=dg_q,
        iterations=iters,
    )


@dataclass(frozen=True, eq=False)
class PowerFlowResult:
    """Single-assignment solution in bus BFS order."""

    bus_ids: tuple[str, ...]
    line_ids: tuple[str, ...]
    v2: np.ndarray  # (n, 3) pu^2, NaN on absent phases
    flow_p: np.ndarray  # (L, 3) pu
    flow_q: np.ndarray
    head_p: np.ndarray  # (3,) pu
    head_q: np.ndarray
    cap_q: np.ndarray  # (n_cap, 3) pu
    dg_p: np.ndarray  # (n_dg, 3) pu
    dg_q: np.ndarray
    iterations: int

    def v2_at(self, bus_id: str) -> np.ndarray:
        return self.v2[self.bus_ids.index(bus_id)]

    def voltage(self, bus_id: str) -> np.ndarray:
        """Voltage magnitudes (3,) in pu; NaN on absent phases."""
        return np.sqrt(self.v2_at(bus_id))

    def extremes(self) -> tuple[float, float]:
        """(min, max) squared voltage over all present bus-phases."""
        return float(np.nanmin(self.v2)), float(np.nanmax(self.v2))


def _setpoint_arrays(
    model: NetworkModel, sp: ControlSetpoints
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Validate setpoints against model limits; return batch-of-one arrays."""
    if len(sp.tap) != len(model.oltcs):
        raise SetpointError(
            f"expected {len(model.oltcs)} tap entries, got {len(sp.tap)}"
        )
    if len(sp.cap_switch) != len(model.capacitors):
        raise SetpointError(
            f"expected {len(model.capacitors)} capacitor switches, got {len(sp.cap_switch)}"
        )
    if len(sp.dg_connect) != len(model.dgs) or len(sp.dg_q) != len(model.dgs):
        raise SetpointError(f"expected {len(model.dgs)} dg entries")
    for oltc, tap in zip(model.oltcs, sp.tap):
        for t in tap:
            if not 1 <= int(t) <= len(oltc.ratios):
                raise SetpointError(
                    f"oltc {oltc.bus}: tap {t} outside 1..{len(oltc.ratios)}"
                )
        if oltc.ganged and len(set(tap)) != 1:
            raise SetpointError(f"oltc {oltc.bus}: ganged taps must match, got {tap}")
    for cap, sw in zip(model.capacitors, sp.cap_switch):
        if sw not in (0, 1):
            raise SetpointError(f"capacitor {cap.bus}: switch must be 0 or 1")
    qmax = dg_q_limit_kvar(model)
    for i, (dg, conn, q) in enumerate(zip(model.dgs, sp.dg_connect, sp.dg_q)):
        if conn not in (0, 1):
            raise SetpointError(f"dg {dg.bus}: connect must be 0 or 1")
        if conn:
            for ph in Phase:
                if abs(q[ph]) > qmax[i, ph] + 1e-6:
                    raise SetpointError(
                        f"dg {dg.bus}: q {q[ph]:.3f} kvar exceeds limit "
                        f"{qmax[i, ph]:.3f} on phase {ph.name}"
                    )
    taps = np.array([[list(t) for t in sp.tap]], dtype=int).reshape(1, len(model.oltcs), 3)
    caps = np.array([list(sp.cap_switch)], dtype=float).reshape(1, len(model.capacitors))
    dgc = np.array([list(sp.dg_connect)], dtype=float).reshape(1, len(model.dgs))
    dgq = np.array([[list(q) for q in sp.dg_q]], dtype=float).reshape(1, len(model.dgs), 3)
    dgq /= model.phase_base_kva
    return taps, caps, dgc, dgq


def solve(model: NetworkModel, setpoints: ControlSetpoints | None = None) -> PowerFlowResult:
    """Solve one operating point. Defaults to the model's stored device states."""
    sp = setpoints if setpoints is not None else nominal_setpoints(model)
    taps, caps, dgc, dgq = _setpoint_arrays(model, sp)
    batch = solve_batch(model, taps, caps, dgc, dgq)
    return PowerFlowResult(
        bus_ids=batch.bus_ids,
        line_ids=batch.line_ids,
        v2=batch.v2[0],
        flow_p=batch.flow_p[0],
        flow_q=batch.flow_q[0],
        head_p=batch.head_p[0],
        head_q=batch.head_q[0],
        cap_q=batch.cap_q[0],
        dg_p=batch.dg_p[0],
        dg_q=batch.dg_q[0],
        iterations=int(batch.iterations[0]),
    )
