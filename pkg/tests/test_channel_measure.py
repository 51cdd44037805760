import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from si_opt.channel import (NOMINAL_GEOMETRY, ConnectorSpec, DriverSpec, LinkSpec,
                            StriplineGeometry, cascade_abcd, drive_waveform,
                            impulse_response, lossless_rlgc, scale_geometry,
                            simulate_link, stripline_rlgc, terminated_gain,
                            transfer_function, write_rlgc_csv, write_transfer_csv, z_diff)
from si_opt.measure import (EdgeFidelityWarning, EyeMask, MeasureError, auto_center_window,
                            check_edge_fidelity, fold_eye, masked_opening, reduce,
                            windowed_opening, write_eye_csv, write_eye_svg)
from si_opt.waveform import Waveform

FREQS = np.linspace(1e6, 20e9, 300)


def test_nominal_geometry_is_calibrated():
    assert z_diff(NOMINAL_GEOMETRY) == pytest.approx(100.0, rel=1e-12)
    m = stripline_rlgc(NOMINAL_GEOMETRY)
    assert m.z_nominal == pytest.approx(100.0, rel=1e-9)
    assert m.delay_per_m == pytest.approx(np.sqrt(3.7) / 299792458.0, rel=1e-9)


def test_geometry_validation():
    with pytest.raises(ValueError):
        StriplineGeometry(linewidth=-1e-6)
    with pytest.raises(ValueError):
        StriplineGeometry(pitch=50e-6)


@given(st.floats(min_value=50.8e-6, max_value=127e-6))
def test_scaled_geometry_keeps_ratios(w):
    g = scale_geometry(w)
    s = w / NOMINAL_GEOMETRY.linewidth
    assert g.pitch == pytest.approx(NOMINAL_GEOMETRY.pitch * s)
    assert g.dielectric_t == pytest.approx(NOMINAL_GEOMETRY.dielectric_t * s)
    assert g.metal_thickness == NOMINAL_GEOMETRY.metal_thickness


def test_abcd_sections_are_reciprocal():
    link = LinkSpec()
    abcd = cascade_abcd(link.sections(), FREQS)
    det = abcd[:, 0, 0] * abcd[:, 1, 1] - abcd[:, 0, 1] * abcd[:, 1, 0]
    np.testing.assert_allclose(det, 1.0, atol=1e-8)


def test_lossless_matched_line_is_pure_delay():
    link = LinkSpec(connector=None, rlgc=lossless_rlgc(100.0))
    h = transfer_function(link, FREQS)
    tau = link.total_length * lossless_rlgc(100.0).delay_per_m
    np.testing.assert_allclose(h, 0.5 * np.exp(-2j * np.pi * FREQS * tau), atol=1e-9)


def test_passive_and_lossier_with_length_and_frequency():
    short = LinkSpec(card_length=0.05, backplane_length=0.1, connector=None)
    long_ = LinkSpec(card_length=0.25, backplane_length=0.5, connector=None)
    hs, hl = (np.abs(transfer_function(x, FREQS)) for x in (short, long_))
    assert np.all(hs <= 0.5 + 1e-12) and np.all(hl <= 0.5 + 1e-12)
    assert np.all(hl < hs)
    assert np.all(np.diff(hl) < 0)


def test_narrower_trace_loses_more():
    h = [np.abs(transfer_function(LinkSpec(geometry=scale_geometry(w), connector=None),
                                  [3.125e9]))[0] for w in (50.8e-6, 101.6e-6, 127e-6)]
    assert h[0] < h[1] < h[2]


def test_impulse_response_is_causal():
    link = LinkSpec()
    dt = 5e-12
    h = impulse_response(link, 8192, dt)
    delay = link.total_length * link.line_model().delay_per_m
    early = int(0.8 * delay / dt)
    # only the circular wrap of the slow tail may precede the line delay
    assert np.sum(h[:early] ** 2) < 1e-3 * np.sum(h ** 2)
    assert np.argmax(np.abs(h)) * dt > delay


def test_terminated_gain_of_identity():
    eye = np.tile(np.eye(2, dtype=complex), (3, 1, 1))
    np.testing.assert_allclose(terminated_gain(eye, 50.0, 50.0), 0.5)


def test_driver_levels_and_deemphasis():
    assert DriverSpec().swing == 0.8 and DriverSpec().deemphasis == 0.0
    link = LinkSpec(driver=DriverSpec(swing=1.0, edge_ui=0.06, deemphasis=0.25))
    bits = np.array([0, 1, 1, 1, 0, 0, 1, 0])
    v = drive_waveform(link, bits, 10)
    mid = v[5::10]
    # transition bits at full level, repeated bits de-emphasised
    np.testing.assert_allclose(mid[1], 1.0)
    np.testing.assert_allclose(mid[2], 0.6)
    with pytest.raises(ValueError):
        DriverSpec(deemphasis=1.0)


def test_simulate_link_is_periodic_steady_state():
    link = LinkSpec()
    bits = np.tile([0, 1, 1, 0, 1, 0, 0, 1], 16)
    w = simulate_link(link, bits, 16)
    n = 8 * 16
    np.testing.assert_allclose(w.samples[:n], w.samples[n:2 * n], atol=1e-9)


def test_channel_csv_writers(tmp_path):
    m = stripline_rlgc(NOMINAL_GEOMETRY)
    p = write_rlgc_csv(tmp_path / "w.rlgc", m, FREQS[:5])
    assert p.read_text().splitlines()[0].startswith("freq_hz,")
    p = write_transfer_csv(tmp_path / "h.csv", FREQS[:5], transfer_function(LinkSpec(),
                                                                             FREQS[:5]))
    assert len(p.read_text().splitlines()) == 6


def test_connector_values_are_per_leg():
    a = transfer_function(LinkSpec(connector=ConnectorSpec(c_pad=1e-15, z_conn=50.0)),
                          FREQS)
    b = transfer_function(LinkSpec(connector=None), FREQS)
    # a 100 ohm differential connector of negligible pad capacitance is a pure delay
    np.testing.assert_allclose(np.abs(a), np.abs(b), rtol=1e-3)


# measures ----------------------------------------------------------------

def _isi(seed, n_bits=64, spb=16, period=160e-12):
    rng = np.random.default_rng(seed)
    x = np.repeat(2.0 * rng.integers(0, 2, n_bits) - 1.0, spb)
    k = np.exp(-np.arange(3 * spb) / (0.6 * spb))
    y = np.convolve(x, k / k.sum())[: x.size]
    return Waveform(0.0, period / spb, 0.4 * y)


def test_reduce_reducers():
    t = np.linspace(0, 1, 11)
    v = t ** 2
    assert reduce(t, v, "MIN") == 0.0
    assert reduce(t, v, "MAX") == 1.0
    assert reduce(t, v, "AVG") == pytest.approx(np.mean(v))
    assert reduce(t, v, "INTEG") == pytest.approx(np.trapezoid(v, t))
    with pytest.raises(MeasureError):
        reduce(t, v, "MEDIAN")


def test_auto_center_matches_brute_force():
    for seed in range(10):
        w = _isi(seed)
        period, eye_w = 160e-12, 100e-12
        best, delay = auto_center_window(w, 0.0, eye_w, period, t_from=2 * period)
        brute = max(windowed_opening(w, 0.0, EyeMask.window(eye_w, period, d),
                                     t_from=2 * period).value
                    for d in (np.arange(16) - 0.5) * w.dt + period)
        assert best == pytest.approx(brute, abs=1e-12)
        again = windowed_opening(w, 0.0, EyeMask.window(eye_w, period, delay),
                                 t_from=2 * period).value
        assert again == pytest.approx(best, abs=1e-12)


@given(st.integers(0, 50), st.floats(min_value=0, max_value=160e-12))
def test_masked_measure_periodic_in_delay(seed, d):
    w = _isi(seed)
    T = 160e-12
    base = EyeMask.hexagon(T)
    for red in ("MIN", "AVG"):
        a = masked_opening(w, base.with_delay(d), red, t_from=2 * T).value
        b = masked_opening(w, base.with_delay(d + T), red, t_from=2 * T).value
        assert a == pytest.approx(b, abs=1e-12)


def test_masked_avg_uses_zero_out_of_mask():
    w = Waveform(0.0, 10e-12, np.full(64, 0.5))
    mask = EyeMask.hexagon(160e-12, amplitude=0.1)
    res = masked_opening(w, mask, "AVG")
    m = mask.values(w.times())
    want = np.mean(np.where(m > 0, 0.5 - m, 0.0))
    assert res.value == pytest.approx(want)
    assert masked_opening(w, mask, "MIN").value == pytest.approx(0.4)


def test_measure_coverage_errors():
    w = Waveform(0.0, 10e-12, np.zeros(20))
    with pytest.raises(MeasureError):
        masked_opening(w, EyeMask.hexagon(160e-12), t_from=100e-12)
    with pytest.raises(MeasureError):
        windowed_opening(w, 0.0, EyeMask.hexagon(160e-12))
    with pytest.raises(ValueError):
        EyeMask("window-pulse", 2.0, 0.0, 1e-15, 1e-15, 2e-9, 1e-9)


def test_edge_fidelity_warning():
    with pytest.warns(EdgeFidelityWarning):
        assert not check_edge_fidelity(10e-12, 20e-12)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert check_edge_fidelity(5e-12, 20e-12)


def test_fold_eye_and_artifacts(tmp_path):
    w = _isi(1)
    eye = fold_eye(w, 160e-12)
    assert eye.n_traces == 64
    assert np.all((eye.phases >= 0) & (eye.phases < 160e-12))
    p = write_eye_csv(tmp_path / "e.csv", eye)
    assert len(p.read_text().splitlines()) == w.samples.size + 1
    s1 = write_eye_svg(tmp_path / "a.svg", eye, mask=EyeMask.hexagon(160e-12)).read_text()
    s2 = write_eye_svg(tmp_path / "b.svg", eye, mask=EyeMask.hexagon(160e-12)).read_text()
    assert s1 == s2 and s1.startswith("<svg") and "polyline" in s1
    win = write_eye_svg(tmp_path / "c.svg", eye, mask=EyeMask.window(100e-12, 160e-12))
    assert "<rect" in win.read_text()
