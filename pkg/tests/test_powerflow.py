"""Power-flow tests.

Covers:
  Group 1 - device primitives (tap ratio table, capacitor injection)
  Group 2 - hand-checkable solutions (2-bus oracle, zero load, regulator ratio)
  Group 3 - nonlinear sweep oracle on randomized single-phase chains
  Group 4 - structural invariants (lossless balance, superposition,
            tap monotonicity, monotone drop, capacitor fixed point)
  Group 5 - batching (batch rows bitwise equal to solo solves) and
            setpoint validation
"""

from __future__ import annotations

import numpy as np
import pytest

from voltvarsim.grid_model import (
    Bus,
    CapacitorBank,
    Line,
    NetworkModel,
    Oltc,
    Phase,
    validate_network,
    with_loads,
)
from voltvarsim.powerflow import (
    ControlSetpoints,
    SetpointError,
    capacitor_injection,
    nominal_setpoints,
    solve,
    solve_batch,
    tap_ratio,
)

# Base chosen so z_base = 2.0**2 / 4.0 = 1.0 ohm: per-unit impedances can be
# written directly as ohms and survive ingestion exactly.
_BASE_KV = 2.0
_BASE_MVA = 4.0
_PHASE_BASE = _BASE_MVA * 1e3 / 3.0


def chain_model(
    z_pu: list[complex],
    s_pu: list[complex],
    oltc_bus: str | None = None,
    tap: int = 16,
    cap: tuple[str, float] | None = None,
    cap_switch: int = 0,
) -> NetworkModel:
    """Single-phase radial chain b0 - b1 - ... with per-unit data."""
    phases = frozenset({Phase.a})
    buses = [Bus("b0", phases)]
    lines = []
    for k, (z, s) in enumerate(zip(z_pu, s_pu), start=1):
        buses.append(
            Bus(
                f"b{k}",
                phases,
                load_p={Phase.a: s.real * _PHASE_BASE},
                load_q={Phase.a: s.imag * _PHASE_BASE},
            )
        )
        zm = np.zeros((3, 3), dtype=complex)
        zm[0, 0] = z
        lines.append(Line(f"b{k - 1}", f"b{k}", phases, zm))
    oltcs = (Oltc(bus=oltc_bus, tap=(tap,) * 3),) if oltc_bus else ()
    caps = (
        (CapacitorBank(bus=cap[0], q_rated={Phase.a: cap[1] * _PHASE_BASE}, switch=cap_switch),)
        if cap
        else ()
    )
    model = NetworkModel(
        buses=tuple(buses),
        lines=tuple(lines),
        oltcs=oltcs,
        capacitors=caps,
        dgs=(),
        substation="b0",
        base_kv=_BASE_KV,
        base_mva=_BASE_MVA,
    )
    validate_network(model)
    return model


def nonlinear_chain_v2(z_pu: list[complex], s_pu: list[complex]) -> np.ndarray:
    """Exact single-phase backward/forward sweep; squared magnitudes per bus."""
    n = len(z_pu)
    v = np.ones(n + 1, dtype=complex)
    for _ in range(500):
        i_branch = np.array(
            [np.conj(s / v[k + 1]) for k, s in enumerate(s_pu)], dtype=complex
        )
        for k in range(n - 2, -1, -1):
            i_branch[k] += i_branch[k + 1]
        v_new = v.copy()
        for k in range(n):
            v_new[k + 1] = v_new[k] - z_pu[k] * i_branch[k]
        if np.max(np.abs(v_new - v)) < 1e-13:
            v = v_new
            break
        v = v_new
    return np.abs(v[1:]) ** 2


# --- Group 1: device primitives -----------------------------------------------


def test_tap_ratio_endpoints():
    oltc_lo = Oltc(bus="x", tap=(1, 1, 1))
    oltc_hi = Oltc(bus="x", tap=(32, 32, 32))
    assert tap_ratio(oltc_lo, Phase.a) == 0.90
    assert abs(tap_ratio(oltc_hi, Phase.a) - 1.10) < 1e-12


def test_tap_ratio_nominal_index():
    oltc = Oltc(bus="x")  # default tap 16 on every phase
    assert tap_ratio(oltc, Phase.b) == 0.90 + 15 * 0.2 / 31


def test_capacitor_injection_switch_open():
    cap = CapacitorBank(bus="x", q_rated={Phase.a: 100.0, Phase.c: 50.0})
    out = capacitor_injection(cap, 0, np.ones(3), phase_base_kva=1000.0)
    assert np.array_equal(out, np.zeros(3))


def test_capacitor_injection_tracks_squared_voltage():
    cap = CapacitorBank(bus="x", q_rated={ph: 100.0 for ph in Phase})
    base = 1000.0  # 100 kVAr on a 1000 kVA phase base = 0.1 pu
    at_unity = capacitor_injection(cap, 1, np.ones(3), base)
    assert at_unity == pytest.approx([0.1, 0.1, 0.1], abs=1e-15)
    squeezed = capacitor_injection(cap, 1, np.full(3, 1.0404), base)
    assert squeezed == pytest.approx([0.10404] * 3, abs=1e-15)


# --- Group 2: hand-checkable solutions ------------------------------------------


def test_two_bus_hand_oracle():
    """z = 0.01 + j0.02 pu, load 1.0 + j0.5 pu: v = 1 - 2(0.01 + 0.01) = 0.96."""
    model = chain_model([0.01 + 0.02j], [1.0 + 0.5j])
    result = solve(model)
    assert abs(result.flow_p[0, Phase.a] - 1.0) < 1e-12
    assert abs(result.flow_q[0, Phase.a] - 0.5) < 1e-12
    v2 = float(result.v2_at("b1")[Phase.a])
    assert abs(v2 - 0.96) < 1e-12, f"v2={v2!r}"


def test_zero_load_is_flat():
    model = chain_model([0.01 + 0.02j, 0.02 + 0.01j], [0.0 + 0.0j, 0.0 + 0.0j])
    result = solve(model)
    assert np.array_equal(result.flow_p, np.zeros((2, 3)))
    assert np.array_equal(result.flow_q, np.zeros((2, 3)))
    for bus in ("b0", "b1", "b2"):
        assert float(result.v2_at(bus)[Phase.a]) == 1.0


def test_regulator_applies_squared_ratio():
    model = chain_model(
        [0.01 + 0.02j, 0.01 + 0.02j], [0.0j, 0.0j], oltc_bus="b1", tap=32
    )
    result = solve(model)
    gamma = Oltc(bus="b1").ratios[31]
    assert float(result.v2_at("b0")[Phase.a]) == 1.0
    # no current, so the only effect is the squared turns ratio
    assert abs(float(result.v2_at("b1")[Phase.a]) - gamma * gamma) < 1e-15
    assert abs(float(result.v2_at("b2")[Phase.a]) - gamma * gamma) < 1e-15


def test_absent_phases_are_nan(ieee13_half):
    result = solve(ieee13_half)
    v_652 = result.v2_at("652")
    assert np.isfinite(v_652[Phase.a])
    assert np.isnan(v_652[Phase.b]) and np.isnan(v_652[Phase.c])


def test_base_case_half_loading_sags_below_band(ieee13_half):
    """Stored device states (near-nominal tap, banks open) leave the feeder low:
    this is the operating point the volt-var loop exists to correct."""
    lo, hi = solve(ieee13_half).extremes()
    assert 0.85**2 < lo < 0.95**2, f"lo={lo**0.5:.4f} pu"
    assert hi <= 1.0


# --- Group 3: nonlinear sweep oracle ---------------------------------------------


def test_linearization_tracks_nonlinear_sweep():
    """Randomized 3-bus chains, loads <= 1 pu: |v2_lin - v2_exact| <= 0.02 pu^2."""
    rng = np.random.default_rng(20240817)
    worst = 0.0
    for _ in range(200):
        z_pu = [
            complex(r, r * rng.uniform(1.0, 2.0))
            for r in rng.uniform(0.002, 0.015, size=2)
        ]
        s_pu = [
            complex(rng.uniform(0.0, 1.0), rng.uniform(0.0, 0.5)) for _ in range(2)
        ]
        model = chain_model(z_pu, s_pu)
        result = solve(model)
        lin = np.array(
            [float(result.v2_at(f"b{k}")[Phase.a]) for k in (1, 2)]
        )
        exact = nonlinear_chain_v2(z_pu, s_pu)
        worst = max(worst, float(np.max(np.abs(lin - exact))))
    print(f"\n  worst |v2_lin - v2_exact| over 200 chains: {worst:.2e} pu^2")
    assert worst <= 0.02


# --- Group 4: structural invariants ----------------------------------------------


def test_lossless_balance(ieee13_half):
    """Head P per phase equals loads minus connected DG output, near machine eps."""
    result = solve(ieee13_half)
    p_load, _ = ieee13_half.total_load()
    base = ieee13_half.phase_base_kva
    expected = p_load / base
    for dg in ieee13_half.dgs:
        for ph, p in dg.p_out.items():
            expected[ph] -= dg.connected * p / base
    assert result.head_p == pytest.approx(expected, abs=1e-13)


def test_flow_superposition(ieee13_half):
    """Banks open and DG disconnected: flows are exactly linear in the loads."""
    passive = ControlSetpoints(
        tap=((16,) * 3,), cap_switch=(0, 0), dg_connect=(0,), dg_q=((0.0,) * 3,)
    )
    half = {
        b.id: (dict(b.load_p), dict(b.load_q)) for b in ieee13_half.buses
    }
    quarter = {
        bus: (
            {ph: v / 2 for ph, v in p.items()},
            {ph: v / 2 for ph, v in q.items()},
        )
        for bus, (p, q) in half.items()
    }
    combined = {
        bus: (
            {ph: half[bus][0][ph] + quarter[bus][0][ph] for ph in half[bus][0]},
            {ph: half[bus][1][ph] + quarter[bus][1][ph] for ph in half[bus][1]},
        )
        for bus in half
    }
    r_half = solve(with_loads(ieee13_half, half), passive)
    r_quart = solve(with_loads(ieee13_half, quarter), passive)
    r_comb = solve(with_loads(ieee13_half, combined), passive)
    assert r_comb.flow_p == pytest.approx(r_half.flow_p + r_quart.flow_p, abs=1e-12)
    assert r_comb.flow_q == pytest.approx(r_half.flow_q + r_quart.flow_q, abs=1e-12)
    assert r_comb.head_p == pytest.approx(r_half.head_p + r_quart.head_p, abs=1e-12)


def test_tap_monotonicity(ieee13_half):
    """A higher tap never lowers any voltage downstream of the regulator."""
    previous = None
    for tap in (6, 16, 26):
        sp = ControlSetpoints(
            tap=((tap, tap, tap),),
            cap_switch=(0, 0),
            dg_connect=(1,),
            dg_q=((0.0, 0.0, 0.0),),
        )
        result = solve(ieee13_half, sp)
        downstream = np.array(
            [result.v2_at(b.id) for b in ieee13_half.buses if b.id != "650"]
        )
        if previous is not None:
            delta = downstream - previous
            assert np.all(np.isnan(delta) | (delta > 0)), f"tap {tap} lowered a voltage"
        previous = downstream


def test_voltage_monotone_drop_on_loaded_chain():
    model = chain_model(
        [0.01 + 0.02j, 0.015 + 0.03j, 0.01 + 0.01j],
        [0.3 + 0.1j, 0.2 + 0.1j, 0.4 + 0.2j],
    )
    result = solve(model)
    v = [float(result.v2_at(f"b{k}")[Phase.a]) for k in range(4)]
    assert v == sorted(v, reverse=True)
    assert v[0] == 1.0


def test_capacitor_fixed_point_consistency():
    """Closed bank: injected Q equals rating times the converged squared voltage."""
    model = chain_model(
        [0.02 + 0.04j], [0.5 + 0.3j], cap=("b1", 0.2), cap_switch=1
    )
    result = solve(model)
    v_end = float(result.v2_at("b1")[Phase.a])
    q_inj = float(result.cap_q[0, Phase.a])
    assert abs(q_inj - 0.2 * v_end) < 5e-8
    assert result.iterations > 1

    # independent scalar fixed point: v = 1 - 2*(P*r + (Q - 0.2 v)*x)
    v_ref = 1.0
    for _ in range(100):
        v_next = 1.0 - 2.0 * (0.5 * 0.02 + (0.3 - 0.2 * v_ref) * 0.04)
        if abs(v_next - v_ref) < 1e-14:
            break
        v_ref = v_next
    assert abs(v_end - v_ref) < 1e-7


def test_open_capacitor_matches_capless_model():
    with_cap = chain_model([0.02 + 0.04j], [0.5 + 0.3j], cap=("b1", 0.2), cap_switch=0)
    without = chain_model([0.02 + 0.04j], [0.5 + 0.3j])
    v_with = float(solve(with_cap).v2_at("b1")[Phase.a])
    v_without = float(solve(without).v2_at("b1")[Phase.a])
    assert v_with == v_without


# --- Group 5: batching and setpoint validation ------------------------------------


def test_batch_rows_match_solo_bitwise(ieee13_half):
    rows = [
        ((16,) * 3, (0, 0), (1,), (0.0, 0.0, 0.0)),
        ((27,) * 3, (1, 1), (1,), (0.12, 0.05, -0.02)),
        ((5,) * 3, (1, 0), (0,), (0.0, 0.0, 0.0)),
        ((32,) * 3, (0, 1), (1,), (-0.1, 0.1, 0.0)),
    ]
    taps = np.array([[list(r[0])] for r in rows])
    caps = np.array([list(r[1]) for r in rows], dtype=float)
    dgc = np.array([list(r[2]) for r in rows], dtype=float)
    dgq = np.array([[list(r[3])] for r in rows])
    batch = solve_batch(ieee13_half, taps, caps, dgc, dgq)
    for i in range(len(rows)):
        solo = solve_batch(
            ieee13_half, taps[i : i + 1], caps[i : i + 1], dgc[i : i + 1], dgq[i : i + 1]
        )
        assert np.array_equal(batch.v2[i], solo.v2[0], equal_nan=True)
        assert np.array_equal(batch.flow_p[i], solo.flow_p[0])
        assert np.array_equal(batch.flow_q[i], solo.flow_q[0])
        assert np.array_equal(batch.cap_q[i], solo.cap_q[0])
        assert np.array_equal(batch.dg_q[i], solo.dg_q[0])


def test_setpoint_validation(ieee13_half):
    good = nominal_setpoints(ieee13_half)
    solve(ieee13_half, good)  # sanity: the stored states are valid

    def bad(**kw):
        fields = {
            "tap": good.tap,
            "cap_switch": good.cap_switch,
            "dg_connect": good.dg_connect,
            "dg_q": good.dg_q,
        }
        fields.update(kw)
        return ControlSetpoints(**fields)

    with pytest.raises(SetpointError, match="outside 1..32"):
        solve(ieee13_half, bad(tap=((0, 0, 0),)))
    with pytest.raises(SetpointError, match="outside 1..32"):
        solve(ieee13_half, bad(tap=((33, 33, 33),)))
    with pytest.raises(SetpointError, match="ganged"):
        solve(ieee13_half, bad(tap=((16, 17, 16),)))
    with pytest.raises(SetpointError, match="switch must be 0 or 1"):
        solve(ieee13_half, bad(cap_switch=(2, 0)))
    with pytest.raises(SetpointError, match="connect must be 0 or 1"):
        solve(ieee13_half, bad(dg_connect=(2,)))
    with pytest.raises(SetpointError, match="exceeds limit"):
        solve(ieee13_half, bad(dg_q=((401.0, 0.0, 0.0),)))
    # sqrt(500^2 - 300^2) = 400 kvar is exactly admissible
    solve(ieee13_half, bad(dg_q=((400.0, -400.0, 0.0),)))
    with pytest.raises(SetpointError, match="tap entries"):
        solve(ieee13_half, bad(tap=()))
