import json
import math
from dataclasses import replace
from importlib.resources import files

import numpy as np
import pytest

from tedsim.fock import State, basis_ket
from tedsim.lindblad import steady_state
from tedsim.protocols import (
    MHZ, Axis, DriveEnvelope, PitchDetectSetup, ProtocolError, ProtocolSpec, ResultTable, Segment,
    SweepSpec, absorption_probability, apply_override, clipping_estimate, dark_count_estimate,
    fock_check_table, pitch_detect, pitch_detect_point, pitch_detect_protocol, reflection,
    run_protocol, scattering_sweep, simulate_detection, simulate_emission, simulate_reset,
    spectral_records,
)
from tedsim.ted import TedParams, effective_from_coupling, single_ted_master_eq, ted_space

G = 11.2e6
NU = -2 * np.pi * 0.169e9
NU_D = -2 * np.pi * 0.174e9


@pytest.fixture(scope="module")
def table_doc():
    return json.loads(files("tedsim").joinpath("data/table1.json").read_text())


@pytest.fixture(scope="module")
def small_setup(table_doc):
    return replace(PitchDetectSetup.from_json_dict(table_doc), dims_s=(2, 2), dims_m=(2, 3))


@pytest.fixture(scope="module")
def ideal_protocol():
    return replace(pitch_detect_protocol(window=3e-6), t1=None, t2=None)


def _source(g=0.472 * G, T=2e-6, t0=1e-6):
    return effective_from_coupling(g, G, NU_D, NU, envelope=DriveEnvelope.cos2(1.0, t0, T))


def _detector(g=0.5 * G):
    return effective_from_coupling(g, G, NU_D, NU, delta_p=-NU)


# --- dark counts -------------------------------------------------------------------


def test_dark_count_closed_form():
    assert dark_count_estimate(81e-6, 10e-6, 4e-6) == pytest.approx(0.159, abs=5e-4)
    assert dark_count_estimate(81e-6, 2e-6, 4e-6) == pytest.approx(0.0715, abs=5e-4)
    assert dark_count_estimate(81e-6, 0, 0) == 0
    with pytest.raises(ProtocolError):
        dark_count_estimate(0, 1e-6, 1e-6)


# --- backscatter -------------------------------------------------------------------


def test_reflection_regimes(table_doc):
    ted = replace(TedParams.from_json_dict(table_doc["sted"]), n_th=0.0)
    assert reflection(ted, 1e-7, levels=2) > 0.9999
    assert reflection(ted, 1 / 16, levels=2) < 1e-6
    assert reflection(ted, 1e4, levels=2) > 0.999


def test_reflection_two_level_closed_form(table_doc):
    # resonant two-level limit: r = 1 - 2 / (1 + 16 n)
    ted = replace(TedParams.from_json_dict(table_doc["sted"]), n_th=0.0)
    for n in (1e-3, 0.03, 0.2, 3.0):
        assert reflection(ted, n, levels=2) == pytest.approx(abs(1 - 2 / (1 + 16 * n)), abs=1e-9)


def test_scattering_sweep_bounds_and_failures(table_doc):
    ted = TedParams.from_json_dict(table_doc["sted"])
    tab = scattering_sweep(ted, [0.0, 1e-3, 0.1, 1.0, 10.0], [0.0, 2 * MHZ, -5 * MHZ])
    assert len(tab.rows) == 15
    assert [r["n_bar"] for r in tab.rows[:3]] == [0.0, 0.0, 0.0]
    assert len(tab.failures()) == 3
    r = tab.column("r_abs")[3:]
    assert np.all((r >= 0) & (r <= 1 + 1e-6))


def test_thermal_reduces_elastic_reflection(table_doc):
    ted = TedParams.from_json_dict(table_doc["sted"])
    cold = reflection(ted, 1e-3, levels=2, n_th=0.0)
    warm = reflection(ted, 1e-3, levels=2, n_th=0.015)
    assert cold - warm > 0.01


# --- reset and emission ------------------------------------------------------------


def test_reset_reaches_thermal_floor():
    eff = effective_from_coupling(0.5 * G, G, NU_D, NU, n_th=0.015)
    assert simulate_reset(eff, 2e-6, 0.12) <= 0.02


def test_reset_equilibrium_is_fixed_point():
    n = 0.015
    eff = effective_from_coupling(0.5 * G, G, NU_D, NU, n_th=n)
    ss = steady_state(single_ted_master_eq(eff, (2, 2)))
    sp = ted_space((2, 2))
    pop = np.trace(ss.dm() @ basis_ket(sp, {"d": 1}).dm()).real + np.trace(ss.dm() @ basis_ket(sp, {"d": 1, "w": 1}).dm()).real
    assert pop == pytest.approx(n / (1 + 2 * n), abs=1e-9)
    assert simulate_reset(eff, 40e-6, n / (1 + 2 * n)) == pytest.approx(n / (1 + 2 * n), abs=1e-4)


def test_reset_without_coupling_keeps_population():
    eff = effective_from_coupling(0.0, G, NU_D, NU, n_th=0.015)
    assert simulate_reset(eff, 2e-6, 0.12) == pytest.approx(0.12, abs=1e-3)
    with pytest.raises(ProtocolError):
        simulate_reset(eff, 0.0, 0.12)


def test_emission_releases_excitation():
    em = simulate_emission(_source(), dims=(3, 4))
    assert em.residual <= 0.05
    assert em.photon_probability == pytest.approx(1 - em.residual - em.leakage)
    # excitation bookkeeping: flux out plus what remains equals what was there
    assert em.emitted + em.residual + em.leakage == pytest.approx(1.0, abs=1e-6)


def test_emission_from_ground_is_dark():
    em = simulate_emission(_source(), initial=(1.0, 0.0), dims=(2, 2), n_samples=201)
    assert np.all(em.trajectory.records["a_out"] == 0)


def test_superposition_maximizes_coherent_output():
    sp = ted_space((2, 2))

    def energy(c):
        rho = np.zeros((sp.dim, sp.dim), dtype=complex)
        i0, i1 = sp.basis_index({}), sp.basis_index({"d": 1})
        rho[i0, i0] = rho[i1, i1] = 0.5
        rho[i0, i1] = c
        rho[i1, i0] = np.conj(c)
        em = simulate_emission(_source(), initial=State(sp, rho), dims=(2, 2), n_samples=801)
        a = em.trajectory.records["a_out"]
        return np.trapezoid(np.abs(a) ** 2, em.trajectory.times) if hasattr(np, "trapezoid") else \
            np.trapz(np.abs(a) ** 2, em.trajectory.times)

    best = energy(0.5)
    for c in (0.0, 0.25, 0.4j, 0.3 + 0.3j, -0.45):
        assert energy(c) < best


def test_emission_span_checks():
    with pytest.raises(ProtocolError):
        simulate_emission(_source(t0=0.5e-6))
    with pytest.raises(ProtocolError):
        simulate_emission(_source(), t_end=1.5e-6)


# --- detection ---------------------------------------------------------------------


def test_detection_without_input_stays_excited():
    res = simulate_detection(_detector(), 2e-6, n_bar=0.0, dims=(2, 3))
    assert res.p_excited >= 1 - 1e-3
    # the only loss is the off-resonant |10> -> |01> exchange, at rate gamma (g / nu)^2
    det = _detector()
    assert 1 - res.p_excited == pytest.approx(G * (det.g_p / NU) ** 2 * 2e-6, rel=0.2)


def test_detection_needs_three_w_levels():
    with pytest.raises(ProtocolError, match="3 levels"):
        simulate_detection(_detector(), 2e-6, n_bar=0.1, dims=(2, 2))


def test_coherent_detection_surface_is_monotone():
    det = _detector(0.259 * G)
    pops = np.array([[simulate_detection(det, w, n_bar=n, dims=(2, 3)).p_excited
                      for w in (0.5e-6, 1e-6, 2e-6)] for n in (0.02, 0.1, 0.5)])
    assert np.all(np.diff(pops, axis=1) < 0)
    assert np.all(np.diff(pops, axis=0) < 0)


def test_fock_detection_efficiency():
    res = simulate_detection(_detector(), 3e-6, source=_source(t0=1e-6), dims=(2, 3))
    assert res.p_detect >= 0.93


def test_fock_detection_monotone_in_window():
    src = _source(t0=1e-6)
    p = [simulate_detection(_detector(), w, source=src, dims=(2, 3)).p_detect
         for w in (0.5e-6, 1e-6, 1.5e-6, 2e-6, 3e-6)]
    assert np.all(np.diff(p) >= -1e-9)


def test_no_coupling_no_detection():
    res = simulate_detection(_detector(0.0), 3e-6, source=_source(t0=1e-6), dims=(2, 3),
                             t1=81e-6, t2=41e-6, readout=1e-6)
    assert res.p_detect == pytest.approx(0.0, abs=1e-6)


# --- protocol scripting ------------------------------------------------------------


def test_protocol_json_round_trip(tmp_path):
    p = pitch_detect_protocol(reset=2e-6)
    doc = p.to_json_dict()
    (tmp_path / "p.json").write_text(json.dumps(doc))
    q = ProtocolSpec.load(tmp_path / "p.json")
    assert [s.kind for s in q.segments] == [s.kind for s in p.segments]
    assert q.end == pytest.approx(p.end)
    assert q.t1 == pytest.approx(81e-6)


def test_protocol_validation():
    with pytest.raises(ProtocolError):
        Segment("teleport", "sted", 1e-6)
    with pytest.raises(ProtocolError):
        Segment("idle", "sted", 0.0)
    with pytest.raises(ProtocolError, match="overlaps"):
        ProtocolSpec((Segment("reset", "sted", 2e-6), Segment("emission", "sted", 2e-6, start=1e-6)))
    with pytest.raises(ProtocolError):
        ProtocolSpec.from_json_dict({"segments": []})
    with pytest.raises(ProtocolError, match="unknown segment fields"):
        ProtocolSpec.from_json_dict({"segments": [{"kind": "idle", "target": "sted", "duration_us": 1,
                                                   "colour": "red"}]})


def test_emission_inside_detection_window_schedule():
    p = pitch_detect_protocol(window=10e-6, arrival=3e-6)
    sched = {(s.kind, s.target): (a, b) for a, b, s in p.schedule()}
    w0, w1 = sched[("detection-window", "mted")]
    e0, e1 = sched[("emission", "sted")]
    assert w0 <= e0 < e1 <= w1
    assert (e0 + e1) / 2 - w0 == pytest.approx(3e-6)
    assert sched[("readout", "mted")][0] == pytest.approx(w1)
    dark = p.without_source()
    assert "pi-pulse" not in [s.kind for s in dark.segments if s.target == "sted"]


def test_sweep_spec_grids():
    s = SweepSpec.from_json_dict({"axis1": {"name": "n_bar", "start": 1e-3, "stop": 10, "num": 5, "scale": "log"},
                                  "axis2": {"name": "delta_MHz", "values": [0, 1]}})
    pts = s.points()
    assert len(pts) == 10
    assert pts[0]["n_bar"] == pytest.approx(1e-3) and pts[-1]["n_bar"] == pytest.approx(10)
    assert [p["delta_MHz"] for p in pts[:2]] == [0, 1]
    with pytest.raises(ProtocolError):
        Axis("x", ())


def test_unknown_override(small_setup, ideal_protocol):
    with pytest.raises(ProtocolError, match="unknown sweep parameter"):
        apply_override(small_setup, ideal_protocol, "colour", 1.0)


def test_result_table_write(tmp_path):
    tab = ResultTable(["x"], ["y"], [{"x": 1.0, "y": 0.5}, {"x": 2.0, "error": "boom"}], {"kind": "demo"})
    csv_path, side = tab.write(tmp_path / "out.csv")
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "x,y,error"
    assert lines[2].endswith("boom")
    meta = json.loads(side.read_text())
    assert meta["rows"] == 2 and meta["failures"][0]["x"] == 2.0


# --- pitch-detect ------------------------------------------------------------------


def test_pitch_detect_ideal_point(small_setup, ideal_protocol):
    r = pitch_detect_point(small_setup, ideal_protocol)
    assert 0.93 <= r["p_detect"] <= 1.0
    assert r["p_exc_dark"] == pytest.approx(1.0, abs=2e-3)
    assert r["invariants_ok"]


def test_pitch_detect_normalization_with_relaxation(small_setup):
    r = pitch_detect_point(small_setup, pitch_detect_protocol())
    assert r["dark_count"] == pytest.approx(dark_count_estimate(81e-6, 2.02e-6, 4e-6), abs=2e-3)
    assert 0.0 <= r["p_detect"] <= 1.0


def test_pitch_detect_zero_coupling(small_setup, ideal_protocol):
    r = pitch_detect_point(replace(small_setup, g_pm=0.0), replace(ideal_protocol, t1=81e-6, t2=41e-6))
    assert r["p_detect"] == pytest.approx(0.0, abs=1e-6)


def test_resonance_map_peaks_at_origin(small_setup, ideal_protocol):
    sweep = SweepSpec(Axis("delta_omega_wm_MHz", (-0.6, 0.0, 0.6)), Axis("delta_omega_pm_MHz", (-0.6, 0.0, 0.6)))
    tab = pitch_detect(small_setup, ideal_protocol, sweep, jobs=2)
    p = tab.column("p_detect").reshape(3, 3)
    assert np.unravel_index(np.argmax(p), p.shape) == (1, 1)
    assert np.all((p >= 0) & (p <= 1))
    serial = pitch_detect(small_setup, ideal_protocol,
                          SweepSpec(Axis("delta_omega_wm_MHz", (0.6,)), Axis("delta_omega_pm_MHz", (-0.6,))))
    assert serial.rows[0] == tab.rows[6]


def test_phase_invariance_of_detection(small_setup, ideal_protocol):
    a = run_protocol(small_setup, ideal_protocol)
    b = run_protocol(replace(small_setup, phi_s=0.7, phi_m=-2.1), ideal_protocol)
    assert np.allclose(a.records["n_dm"], b.records["n_dm"], atol=1e-8)


# --- records and estimates ---------------------------------------------------------


def _with_gates(protocol, target, kind):
    return replace(protocol, segments=tuple(replace(s, kind=kind) if s.target == target and s.kind == "pi-pulse"
                                            else s for s in protocol.segments))


def test_spectra(small_setup, ideal_protocol):
    flat = spectral_records(run_protocol(small_setup, ideal_protocol))
    assert flat["a_out"].max() < 1e-12 and flat["b_out"].max() < 1e-12

    sup = _with_gates(ideal_protocol, "sted", "half-pi-pulse")
    sp = spectral_records(run_protocol(replace(small_setup, delta_omega_wm=20 * MHZ), sup))
    assert sp["a_out"].max() > 1e3 * max(sp["b_out"].max(), 1e-15)

    sup_m = _with_gates(ideal_protocol, "mted", "half-pi-pulse")
    sp = spectral_records(run_protocol(small_setup, sup_m))
    f_peak = abs(sp["freq_Hz"][np.argmax(sp["b_out"])])
    assert f_peak == pytest.approx(abs(NU) / (2 * np.pi), abs=2 * sp["resolution_Hz"])


def test_spectra_need_uniform_sampling(small_setup, ideal_protocol):
    tr = run_protocol(small_setup, ideal_protocol)
    tr.times = tr.times.copy()
    tr.times[3] += 1e-9
    with pytest.raises(ProtocolError, match="uniform"):
        spectral_records(tr)


def test_fock_check_sign_pattern(small_setup, ideal_protocol):
    tab = fock_check_table(small_setup, ideal_protocol)
    rows = {(r["q_ds"], r["q_dm"]): r for r in tab.rows}
    assert rows[(0, 0)]["power_01_rel"] == 0 and rows[(0, 0)]["power_12_rel"] == 0
    assert rows[(1, 0)]["power_01_rel"] > 0.1 and abs(rows[(1, 0)]["power_12_rel"]) < 1e-3
    assert rows[(1, 1)]["power_01_rel"] > 0.1 and rows[(1, 1)]["power_12_rel"] > 0.1
    assert abs(rows[(0, 1)]["power_12_rel"]) < 1e-3


def test_absorption_profile():
    assert absorption_probability(0.0, G / 2, G) == pytest.approx(1.0)
    assert absorption_probability(G / 2, G / 2, G) == pytest.approx(8 / 9)
    assert absorption_probability(0.0, 0.0, G) == pytest.approx(0.0, abs=1e-12)
    d = np.linspace(-5 * G, 5 * G, 101)
    assert np.allclose(absorption_probability(d, G / 2, G), absorption_probability(-d, G / 2, G))


def test_clipping_matches_network(small_setup, ideal_protocol):
    i = ideal_protocol.find("emission", "sted")
    sted = small_setup.effective("sted", "emission", ideal_protocol.segments[i], ideal_protocol.start_of(i))
    for dw in (0.0, 0.5):
        s = replace(small_setup, delta_omega_wm=dw * MHZ)
        c = clipping_estimate(sted, s.effective("mted", "detection-window"))
        p = pitch_detect_point(s, ideal_protocol)["p_detect"]
        assert c["emitted_fraction"] * (1 - c["clipped"]) == pytest.approx(p, abs=5e-3)
