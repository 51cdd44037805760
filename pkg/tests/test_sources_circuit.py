import numpy as np
import pytest
import sympy
from hypothesis import given
from hypothesis import strategies as st
from sympy.polys.domains import ZZ
from sympy.polys.galoistools import gf_irreducible_p, gf_pow_mod

from si_opt.circuit import (ALL_GROUPS, Capacitor, CircuitError, MultidropSpec, Netlist,
                            Resistor, TLine, VSource, build_multidrop, run_transient)
from si_opt.sources import LFSR_TAPS, Dc, Prbs, Pulse, Pwl, eval_source, prbs_bits
from si_opt.waveform import Waveform, read_csv, write_csv


def _char_poly(order, taps):
    # b[k] = xor b[k - t]  ->  x^n + sum x^(n - t) over GF(2), high degree first
    coeffs = [0] * (order + 1)
    coeffs[0] = 1
    for t in taps:
        coeffs[t] ^= 1
    return coeffs


@pytest.mark.parametrize("order", sorted(LFSR_TAPS))
def test_lfsr_taps_are_primitive(order):
    f = _char_poly(order, LFSR_TAPS[order])
    assert gf_irreducible_p(f, 2, ZZ)
    n = 2 ** order - 1
    one = [1]
    x = [1, 0]
    assert gf_pow_mod(x, n, f, 2, ZZ) == one
    for p in sympy.primefactors(n):
        assert gf_pow_mod(x, n // p, f, 2, ZZ) != one


@pytest.mark.parametrize("order", [3, 5, 7, 9, 11])
def test_prbs_period_and_balance(order):
    n = 2 ** order - 1
    bits = prbs_bits(order, 2 * n)
    assert np.array_equal(bits[:n], bits[n:])
    for p in range(1, n):
        if n % p == 0:
            assert not np.array_equal(bits[:n], np.roll(bits[:n], p))
    assert bits[:n].sum() == 2 ** (order - 1)


def test_prbs_seed_and_errors():
    bits = prbs_bits(7, seed=0b1010101)
    assert list(bits[:7]) == [1, 0, 1, 0, 1, 0, 1]
    with pytest.raises(ValueError):
        prbs_bits(7, seed=0)
    with pytest.raises(ValueError):
        Prbs(2, 1, 1e-9, 0, 1, 1e-10, 1e-10)


def test_pulse_shape():
    p = Pulse(0.0, 1.0, delay=1.0, rise=1.0, fall=2.0, width=3.0, period=10.0)
    t = np.array([0.0, 1.5, 2.0, 4.9, 6.0, 7.0, 11.5])
    np.testing.assert_allclose(eval_source(p, t), [0, 0.5, 1, 1, 0.5, 0, 0.5])
    assert eval_source(p, 3.0) == 1.0


def test_pwl_and_dc():
    w = Pwl((0.0, 1.0, 3.0), (0.0, 2.0, 0.0))
    np.testing.assert_allclose(eval_source(w, [0.5, 2.0, 5.0]), [1.0, 1.0, 0.0])
    assert eval_source(Dc(0.75), 1.0) == 0.75
    with pytest.raises(ValueError):
        Pwl((0.0, 0.0), (1.0, 2.0))


def test_prbs_waveform_levels_and_edges():
    p = Prbs(7, 0x7F, 1e-9, 0.0, 1.5, 2e-10, 2e-10)
    t = np.arange(0, 20e-9, 1e-11)
    v = eval_source(p, t)
    bits = prbs_bits(7, 20)
    centres = (np.arange(20) + 0.5) * 1e-9
    np.testing.assert_allclose(eval_source(p, centres), 1.5 * bits)
    assert v.min() >= 0 and v.max() <= 1.5


def test_waveform_csv_round_trip(tmp_path):
    w = {"a": Waveform(0.0, 1e-12, np.sin(np.arange(50) / 5)),
         "b": Waveform(0.0, 1e-12, np.cos(np.arange(50) / 5))}
    back = read_csv(write_csv(tmp_path / "w.csv", w))
    for k in w:
        np.testing.assert_array_equal(back[k].samples, w[k].samples)
        assert back[k].dt == pytest.approx(1e-12)


def test_waveform_window_and_difference():
    a = Waveform(0.0, 1.0, np.arange(10.0))
    b = Waveform(0.0, 1.0, np.ones(10))
    assert (a - b).samples[3] == 2.0
    win = a.window(4.0)
    assert win.t0 == 4.0 and win.samples[0] == 4.0


# circuit ----------------------------------------------------------------

def test_resistive_divider_dc():
    net = Netlist()
    net.add(VSource("v", "a", "0", Dc(1.0)))
    net.add(Resistor("r1", "a", "b", 1000.0))
    net.add(Resistor("r2", "b", "0", "rb"))
    out = run_transient(net, {"rb": 3000.0}, 1e-12, 1e-11)
    np.testing.assert_allclose(out["b"].samples, 0.75)


def test_rc_step_matches_exponential():
    net = Netlist()
    net.add(VSource("v", "a", "0", Pulse(0.0, 1.0, 0.0, 1e-15)))
    net.add(Resistor("r", "a", "b", 1000.0))
    net.add(Capacitor("c", "b", "0", 1e-12))
    out = run_transient(net, None, 1e-12, 5e-9)["b"]
    want = 1 - np.exp(-out.times() / 1e-9)
    assert np.max(np.abs(out.samples - want)) < 2e-3


def test_matched_line_has_no_reflection():
    net = Netlist()
    net.add(VSource("v", "e", "0", Pulse(0.0, 1.0, 0.0, 2e-12)))
    net.add(Resistor("rs", "e", "a", 50.0))
    net.add(TLine("t", "a", "b", 50.0, 20e-12))
    net.add(Resistor("rl", "b", "0", 50.0))
    out = run_transient(net, None, 1e-12, 400e-12)
    assert np.max(np.abs(out["b"].samples[30:] - 0.5)) < 1e-9
    assert np.max(np.abs(out["a"].samples[5:] - 0.5)) < 1e-9


@given(st.floats(min_value=5, max_value=500), st.floats(min_value=5, max_value=500),
       st.floats(min_value=20, max_value=120))
def test_line_settles_to_dc_divider(rs, rl, z0):
    net = Netlist()
    net.add(VSource("v", "e", "0", Dc(1.0)))
    net.add(Resistor("rs", "e", "a", rs))
    net.add(TLine("t", "a", "b", z0, 10e-12))
    net.add(Resistor("rl", "b", "0", rl))
    out = run_transient(net, None, 1e-12, 50e-12)
    assert out["b"].samples[-1] == pytest.approx(rl / (rs + rl), rel=1e-9)


def test_circuit_errors():
    net = Netlist()
    net.add(VSource("v", "a", "0", Dc(1.0)))
    net.add(Resistor("r", "a", "b", "missing"))
    net.add(Resistor("r2", "b", "0", 1.0))
    with pytest.raises(CircuitError):
        run_transient(net, {}, 1e-12, 1e-11)
    with pytest.raises(CircuitError):
        net.add(Resistor("r", "a", "0", 1.0))
    bad = Netlist()
    bad.add(VSource("v", "a", "0", Dc(1.0)))
    bad.add(TLine("t", "a", "0", 50.0, 3.5e-12))
    bad.add(Resistor("r", "a", "0", 50.0))
    with pytest.raises(CircuitError):
        run_transient(bad, None, 1e-12, 1e-11)


def test_multidrop_topology_and_pruning():
    spec = MultidropSpec()
    params = {g: 50.0 for g in ALL_GROUPS}
    full = build_multidrop(spec, params)
    rs = [e for e in full.elements if isinstance(e, Resistor) and e.name != "r_src"]
    assert len(rs) == 12
    assert len([e for e in full.elements if isinstance(e, TLine)]) == 7
    pruned = build_multidrop(spec.with_prune({"series_r_drvr": "short",
                                              "shunt_r_primary": "open"}), params)
    names = {e.name for e in pruned.elements}
    assert "r_drvr" not in names and not any(n.startswith("r_pri1_sh") for n in names)
    with pytest.raises(CircuitError):
        build_multidrop(spec.with_prune({"series_r_drvr": "open"}))
    with pytest.raises(CircuitError):
        build_multidrop(spec, {"z_stub": 50.0})


def test_multidrop_receivers_simulate():
    spec = MultidropSpec()
    params = {g: 50.0 for g in ALL_GROUPS}
    out = run_transient(build_multidrop(spec), params, 10e-12, 20e-9)
    for r in spec.receivers():
        assert r in out and np.all(np.isfinite(out[r].samples))
