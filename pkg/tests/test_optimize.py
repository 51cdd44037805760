import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from si_opt.deck import OptModelDecl, lower_to_ir, parse_text
from si_opt.optimize import (E24, ObjectiveError, OptimizeError, OptStageResult, OptVariable,
                             PruneRule, err_fun, format_table, minimize, nearest_e24,
                             prune_topology, round_practical, run_sequence, value_kind,
                             write_table_csv)

TIGHT = OptModelDecl("tight", rel_param_tol=1e-9, rel_result_tol=1e-14, close=0.05,
                     max_iters=400)


@st.composite
def variables(draw):
    lo = draw(st.floats(min_value=-1e3, max_value=1e3))
    span = draw(st.floats(min_value=1e-3, max_value=1e4))
    return OptVariable("p", lo, lo, lo + span)


@given(variables(), st.floats(min_value=0, max_value=1))
def test_unit_round_trip(var, u):
    x = var.from_unit(u)
    assert var.min <= x <= var.max
    assert var.to_unit(x) == pytest.approx(u, abs=1e-9)


@given(st.floats(min_value=1e-3, max_value=1e3), st.floats(min_value=10, max_value=1e6),
       st.floats(min_value=0, max_value=1))
def test_log_scaled_round_trip(lo, ratio, u):
    var = OptVariable("r", lo, lo, lo * ratio)
    assert var.log_scaled
    assert var.to_unit(var.from_unit(u)) == pytest.approx(u, abs=1e-9)


def test_variable_validation():
    with pytest.raises(ValueError):
        OptVariable("a", 1.0, 2.0, 1.0)
    with pytest.raises(ValueError):
        OptVariable("a", 5.0, 0.0, 1.0)


def test_err_fun_definition():
    assert err_fun(0.2, 0.1) == pytest.approx(0.5)
    assert err_fun(-2.0, -1.0) == pytest.approx(0.5)
    with pytest.raises(OptimizeError, match="GOAL=0"):
        err_fun(0.0, 1.0)


def test_minimize_quadratic_scalar():
    res = minimize(lambda p: (p["x"] - 2.0) ** 2 + 1.0, [OptVariable("x", 5.0, -10, 10)],
                   1.0 + 1e-12, TIGHT, sensitivity=False)
    assert res.converged
    assert res.values["x"] == pytest.approx(2.0, abs=1e-3)


def test_minimize_respects_bounds_and_reports_them():
    seen = []

    def obj(p):
        seen.append(p["x"])
        return p["x"]

    res = minimize(obj, [OptVariable("x", 0.5, 0.0, 1.0)], 5.0, TIGHT, sensitivity=False)
    assert all(0.0 <= x <= 1.0 for x in seen)
    assert res.values["x"] == 1.0 and res.at_bounds == ("x",)
    assert "bound" in res.status


def test_objective_error_carries_assignment():
    def boom(p):
        raise RuntimeError("simulator died")

    with pytest.raises(ObjectiveError) as info:
        minimize(boom, [OptVariable("x", 1.0, 0.0, 2.0)], 1.0)
    assert info.value.assignment == {"x": 1.0}


def test_zero_goal_rejected_before_evaluation():
    calls = []
    with pytest.raises(OptimizeError):
        minimize(lambda p: calls.append(1) or 0.0, [OptVariable("x", 1, 0, 2)], 0.0)
    assert not calls


def test_sensitivity_shares_sum_to_100():
    res = minimize(lambda p: 3 * p["a"] + p["b"], [OptVariable("a", 1, 0.5, 2),
                                                   OptVariable("b", 1, 0.5, 2)], 5.0)
    assert sum(res.norm_sensitivity_pct.values()) == pytest.approx(100.0)
    assert res.norm_sensitivity_pct["a"] > res.norm_sensitivity_pct["b"]


def test_deterministic():
    f = lambda p: [p["x"] * p["y"], p["x"] - p["y"]]  # noqa: E731
    vs = [OptVariable("x", 1, 0.1, 10), OptVariable("y", 1, 0.1, 10)]
    a = minimize(f, vs, [6.0, 1.0], TIGHT)
    b = minimize(f, vs, [6.0, 1.0], TIGHT)
    assert a.values == b.values and a.n_evals == b.n_evals
    assert a.values["x"] == pytest.approx(3.0, rel=1e-4)


DECK = """.PARAM x=OPT1(1, 0, 10)
.PARAM y=OPT2(1, 0, 10)
.MEAS TRAN mx MAX par('v(a)') GOAL=4
.MEAS TRAN my MAX par('v(a)') GOAL=9
.MODEL m OPT ITROPT=200
.TRAN 1p 1n SWEEP OPTIMIZE=opt1 RESULTS=mx MODEL=m
.TRAN 1p 1n SWEEP OPTIMIZE=opt2 RESULTS=my MODEL=m
"""


def test_run_sequence_carries_values():
    ir = lower_to_ir(parse_text(DECK, strict=True))

    def evaluate(env, stage):
        return env["x"] if stage.group == "opt1" else env["x"] + env["y"]

    out = run_sequence(ir.stages, ir, evaluate)
    assert len(out) == 2 and not any(r.failed for r in out)
    assert out[0].values["x"] == pytest.approx(4.0, rel=1e-3)
    assert out[1].values["y"] == pytest.approx(5.0, rel=1e-3)


def test_run_sequence_stops_on_failure():
    ir = lower_to_ir(parse_text(DECK, strict=True))

    def evaluate(env, stage):
        if stage.group == "opt2":
            raise RuntimeError("no convergence")
        return env["x"]

    out = run_sequence(ir.stages, ir, evaluate)
    assert out[-1].failed and "no convergence" in out[-1].status
    assert math.isinf(out[-1].final_error)


_groups = st.dictionaries(st.sampled_from(["series_a", "series_b", "shunt_a", "shunt_b"]),
                          st.floats(min_value=1, max_value=1000), min_size=4, max_size=4)
RULES = {"series_a": PruneRule("series", 5, 500), "series_b": PruneRule("series", 5, 500),
         "shunt_a": PruneRule("shunt", 5, 500), "shunt_b": PruneRule("shunt", 5, 500)}


@given(_groups, _groups)
def test_prune_is_idempotent_and_sticky(first, second):
    once = prune_topology(first, RULES)
    assert prune_topology(first, RULES, once) == once
    later = prune_topology(second, RULES, once)
    for g, d in once.items():
        if d != "keep":
            assert later[g] == d
    assert all(d in ("keep", "short", "open") for d in later.values())
    assert all(d != "open" for g, d in once.items() if g.startswith("series"))


def test_prune_rule_validation():
    with pytest.raises(ValueError):
        PruneRule("bridge", 1, 2)
    assert PruneRule.from_bounds("shunt", 1, 1000).open_threshold == 500


@given(st.floats(min_value=1e-2, max_value=1e7))
def test_nearest_e24_matches_brute_force(x):
    cands = [m * 10.0 ** d for d in range(-3, 9) for m in E24]
    want = min(cands, key=lambda c: (abs(c - x), c))
    assert nearest_e24(x) == pytest.approx(want, rel=1e-12)


def test_round_practical_kinds():
    vals = {"series_r_stub": 9.37, "shunt_r_rcvr": 37.7, "z_primary": 51.8, "delay": 1.23}
    out = round_practical(vals)
    assert out == {"series_r_stub": 9.1, "shunt_r_rcvr": 39.0, "z_primary": 52.0,
                   "delay": 1.23}
    assert value_kind("z_stub") == "impedance" and value_kind("linewidth") is None
    with pytest.raises(ValueError):
        nearest_e24(0.0)


def test_format_table_layout(tmp_path):
    res = OptStageResult({"series_r_stub": 9.1, "z_primary": 52.0},
                         {"series_r_stub": 60.0, "z_primary": 40.0}, 3, True, 0.0)
    lines = format_table(res).splitlines()
    assert lines[0] == "\tvalue\t%norm-sen"
    assert lines[1] == ".param series_r_stub =\t9.1000\t60.0000"
    text = write_table_csv(tmp_path / "t.csv", res).read_text()
    assert text.splitlines()[1] == "series_r_stub,9.1,60.0"
