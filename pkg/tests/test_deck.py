import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from si_opt.deck import (DeckError, LinkError, dump_ir, lower_to_ir, parse_text,
                         render_deck, tokenize)
from si_opt.waveform import Waveform

DECKS = Path(__file__).parents[1] / "src" / "si_opt" / "decks"


def _ir(name):
    return lower_to_ir(parse_text((DECKS / name).read_text(), strict=True))


def test_continuation_and_quoted_tokens():
    toks = tokenize(".PARAM\n+ a=1\n+ b='a * 2'\n", strict=True)
    kinds = [t.kind for t in toks]
    assert "expr" in kinds
    deck = parse_text(".PARAM\n+ a=1\n+ b='a * 2'\n", strict=True)
    assert list(deck.params) == ["a", "b"]


def test_backtick_and_par_forms_are_equivalent():
    a = parse_text(".PARAM x=1\n.MEAS TRAN m MIN par('abs(v(s)-x)')\n", strict=True)
    b = parse_text(".PARAM x=1\n.MEAS TRAN m MIN par`abs(v(s)-x)`\n", strict=True)
    assert a.same_structure(b)


def test_opt_params_groups_and_models():
    ir = _ir("multidrop.sp")
    vars_ = ir.variables("opt1")
    assert [v.name for v in vars_][:3] == ["series_r_drvr", "series_r_primary",
                                           "series_r_stub"]
    assert len(vars_) == 8
    assert ir.models["bus_opt"].max_iters == 60
    assert ir.measures["eye_open"].t_from == pytest.approx(127 * 1.2e-9)


def test_stage_chain_carries_over():
    ir = _ir("linkwidth.sp")
    assert [s.group for s in ir.stages] == ["opt1", "opt2", "opt1", "opt2"]
    assert [s.carry_over for s in ir.stages] == [False, True, True, True]
    assert ir.measures["min_eye_opening"].goal == 1e-5


def test_derived_params_follow_linewidth():
    ir = _ir("linkwidth.sp")
    env = ir.resolve({"linewidth": 50.8e-6})
    assert env["scale_factor"] == pytest.approx(0.5)
    g = ir.geometry_at(env)
    assert g.pitch == pytest.approx(127e-6)
    assert g.dielectric_t == pytest.approx(61e-6)
    assert g.metal_thickness == pytest.approx(8.89e-6)


def test_source_waveforms_follow_params():
    ir = _ir("linkwidth.sp")
    env = ir.resolve({"mask_delay": 0.0})
    t = np.arange(64) * 5e-12
    w = ir.source_waveforms(env, t)["mask_p"]
    assert isinstance(w, Waveform)
    assert w.samples.max() == pytest.approx(0.165)
    assert w.samples[0] == 0.0


def test_bound_measure_evaluates_deck_expression():
    ir = _ir("linkwidth.sp")
    env = ir.resolve({"mask_delay": 0.0})
    t = np.arange(32 * 8) * 5e-12
    mask = ir.source_waveforms(env, t)["mask_p"]
    sig = Waveform(0.0, 5e-12, np.full(t.size, 0.2))
    neg = Waveform(0.0, 5e-12, np.full(t.size, -0.2))
    res = ir.measures["min_eye_opening"].evaluate(
        {"inp": sig, "inn": neg, "mask_p": mask}, env)
    assert res.value == pytest.approx(0.4 - 0.165)


def test_duplicate_param_and_unknown_statement():
    with pytest.raises(DeckError, match="duplicate"):
        parse_text(".PARAM a=1\n.PARAM a=2\n", strict=True)
    with pytest.raises(DeckError, match="unsupported"):
        parse_text(".OPTION post\n", strict=True)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        parse_text(".OPTION post\n")
    assert caught


def test_dangling_references_name_the_symbol():
    with pytest.raises(LinkError) as info:
        parse_text(".TRAN 1p 1n OPTIMIZE=opt9 RESULTS=m MODEL=x\n", strict=True)
    assert info.value.symbol == "opt9"
    text = (".PARAM p=OPT1(1, 0, 2)\n.MEAS TRAN m MIN par('v(a)') GOAL=1\n"
            ".TRAN 1p 1n OPTIMIZE=opt1 RESULTS=m MODEL=nope\n")
    with pytest.raises(LinkError, match="nope"):
        parse_text(text, strict=True)


def test_opt_bounds_checked_at_lowering():
    with pytest.raises(DeckError):
        lower_to_ir(parse_text(".PARAM p=OPT1(5, 0, 2)\n", strict=True))
    with pytest.raises(DeckError):
        lower_to_ir(parse_text(".PARAM p=OPT1(1, 3, 2)\n", strict=True))


def test_resolve_rejects_unknown_override():
    with pytest.raises(LinkError):
        _ir("linkwidth.sp").resolve({"nosuch": 1.0})


def test_dump_ir_lists_stages():
    text = dump_ir(_ir("linkwidth.sp"))
    assert "# stages" in text and text.count("optimize opt") == 4
    assert "StriplineGeometry" in text


def test_simulate_only_deck():
    ir = lower_to_ir(parse_text(".PARAM a=1\n.TRAN 1p 1n\n", strict=True))
    assert ir.simulate_only and not ir.stages


_names = st.from_regex(r"[a-z][a-z0-9_]{0,8}", fullmatch=True).filter(
    lambda s: s not in ("par", "abs", "v"))
_values = st.tuples(st.floats(min_value=1e-3, max_value=999, allow_nan=False),
                    st.sampled_from(["", "k", "meg", "m", "u", "n", "p", "f"]))


@given(st.dictionaries(_names, _values, min_size=1, max_size=8))
def test_param_blocks_round_trip(params):
    lines = [".PARAM"] + [f"+ {k}={round(v, 3)}{s}" for k, (v, s) in params.items()]
    deck = parse_text("\n".join(lines) + "\n", strict=True)
    again = parse_text(render_deck(deck), strict=True)
    assert deck.same_structure(again)
    a, b = lower_to_ir(deck).resolve(), lower_to_ir(again).resolve()
    assert a == b


@given(st.floats(min_value=0.001, max_value=999), st.sampled_from(["ps", "ns", "p", "n",
                                                                     "um", "meg", "k"]))
def test_unit_suffix_values_in_decks(x, suffix):
    x = round(x, 3)
    ir = lower_to_ir(parse_text(f".PARAM a={x}{suffix}\n.PARAM b='a * 2'\n", strict=True))
    env = ir.resolve()
    assert env["b"] == pytest.approx(2 * env["a"])
