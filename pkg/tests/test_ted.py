import math

import numpy as np
import pytest

from tedsim.fock import ProductSpace, basis_ket
from tedsim.lindblad import MasterEq, evolve
from tedsim.ted import (
    DriveEnvelope, EffectiveTed, TedModelError, TedParams, coherent, design_check,
    detection_drive_frequency, effective_from_coupling, effective_hamiltonian, parametric,
    reset_drive_frequency, rwa_hamiltonian, schrieffer_wolff, ted_space, three_mode_space,
    three_mode_stark_shift, three_mode_transfer_rate,
)

G = 2 * np.pi * 1e9


@pytest.fixture
def ted():
    return TedParams(omega_d=3.155 * G, omega_c=3.87 * G, omega_w=5.65811 * G, nu_d=-0.174 * G,
                     nu_c=-0.169 * G, nu_w=-0.169 * G, g_C=0.07 * G, gamma=11.2e6, n_th=0.015)


def test_params_validation(ted):
    with pytest.raises(TedModelError):
        TedParams(1.0, 2.0, 1.0, -0.1, -0.1, -0.1, 0.01, 1.0)
    with pytest.raises(TedModelError):
        TedParams(1.0, 2.0, 3.0, -0.1, -0.1, -0.1, 0.01, -1.0)
    assert TedParams.from_json_dict(ted.to_json_dict()).omega_w == pytest.approx(ted.omega_w)
    with pytest.raises(TedModelError, match="gamma_per_s"):
        TedParams.from_json_dict({k: v for k, v in ted.to_json_dict().items() if k != "gamma_per_s"})


def test_envelopes():
    env = DriveEnvelope.cos2(2.0, t0=1.0, T=2.0)
    assert env(1.0) == 2.0
    assert env(0.0) == 0.0 and env(2.0) == 0.0 and env(-5.0) == 0.0
    assert env(1.5) == pytest.approx(1.0)
    # continuity at the edges
    assert env(1e-9) < 1e-15
    pwl = DriveEnvelope.pwl([(0, 0), (1, 2), (2, 0)])
    assert pwl(0.5) == pytest.approx(1.0) and pwl(3) == 0
    assert pwl.amplitude == 2
    with pytest.raises(TedModelError):
        DriveEnvelope.cos2(-1.0, 0, 1)
    with pytest.raises(TedModelError):
        DriveEnvelope.pwl([(1, 0), (0, 1)])
    assert env.scaled(0.5)(1.0) == 1.0
    assert env.shifted(1.0)(2.0) == 2.0


def test_rwa_no_drives_lab_ladder(ted):
    sp = three_mode_space((3, 3, 3))
    H = rwa_hamiltonian(ted.__class__(**{**ted.__dict__, "g_C": 0.0}), [], 0.0, sp)
    for n in range(3):
        i = sp.basis_index({"d": 0, "c": 0, "w": n})
        assert H.matrix[i, i].real == pytest.approx(n * ted.omega_w + ted.nu_w * n * (n - 1) / 2)
    assert np.allclose(H.matrix, np.diag(np.diag(H.matrix)))


def test_rwa_resonant_frame(ted):
    sp = three_mode_space((2, 2, 2))
    wp = ted.omega_w - ted.omega_d
    wa = ted.omega_w + 0.01 * G
    H = rwa_hamiltonian(ted, [parametric(wp, DriveEnvelope.constant(0.02 * G)),
                              coherent(wa, DriveEnvelope.constant(0.0))], 0.0, sp).matrix
    i_d = sp.basis_index({"d": 1, "c": 0, "w": 0})
    i_w = sp.basis_index({"d": 0, "c": 0, "w": 1})
    assert H[i_d, i_d].real == pytest.approx(ted.omega_w - wa)
    assert H[i_w, i_w].real == pytest.approx(ted.omega_w - wa)
    assert H[i_d, i_w] == 0


def test_rwa_hermitian_and_config_errors(ted):
    env = DriveEnvelope.cos2(0.02 * G, 1e-6, 2e-6)
    drives = [parametric(2.5 * G, env), coherent(ted.omega_w, DriveEnvelope.constant(1e7))]
    for t in np.linspace(0, 2e-6, 7):
        assert rwa_hamiltonian(ted, drives, t, three_mode_space((2, 2, 3))).is_hermitian(1e-12)
    with pytest.raises(TedModelError, match="unsupported"):
        rwa_hamiltonian(ted, [parametric(1, env), parametric(2, env)], 0.0)


def test_sw_coupling_example(ted):
    par = parametric(ted.omega_w - ted.omega_d, DriveEnvelope.constant(0.020 * G))
    eff = schrieffer_wolff(ted, par)
    assert abs(eff.g_p) / (2 * np.pi) == pytest.approx(0.979e6, rel=2e-3)
    # resonant carrier: two-denominator bracket equals the single-denominator form
    assert eff.g_p == pytest.approx(ted.g_C * 0.020 * G / (2 * (ted.omega_d - ted.omega_c)), rel=1e-12)
    assert eff.stark_coeff == pytest.approx(1 / (4 * (ted.omega_d - ted.omega_c)))
    assert eff.delta == 0 and eff.delta_p == pytest.approx(0, abs=1e-3)


def test_sw_zero_drive(ted):
    eff = schrieffer_wolff(ted, parametric(2.5 * G, DriveEnvelope.constant(0.0)))
    assert eff.g_p == 0
    assert eff.stark_per_gp2 * eff.g_p ** 2 == 0


def test_sw_errors_and_warnings(ted):
    with pytest.raises(TedModelError, match="degenerate"):
        schrieffer_wolff(ted.__class__(**{**ted.__dict__, "omega_c": ted.omega_d}),
                         parametric(2.5 * G, DriveEnvelope.constant(1e6)))
    with pytest.warns(UserWarning, match="dispersive"):
        schrieffer_wolff(ted.__class__(**{**ted.__dict__, "g_C": 0.2 * G}),
                         parametric(2.5 * G, DriveEnvelope.constant(1e6)))


def test_delta_p_sign_rule(ted):
    for wp in (2.4 * G, 2.6 * G, 8.0 * G):
        eff = schrieffer_wolff(ted, parametric(wp, DriveEnvelope.constant(1e6)))
        a = ted.omega_w - ted.omega_d + wp
        b = ted.omega_w - ted.omega_d - wp
        assert abs(eff.delta_p) <= abs(a) + 1e-6 and abs(eff.delta_p) <= abs(b) + 1e-6


def _eff(g_p, **kw):
    base = dict(delta=0.0, delta_p=0.0, nu_d=-0.174 * G, nu_w=-0.169 * G,
                g_p_envelope=DriveEnvelope.constant(abs(g_p)), g_p_sign=1 if g_p >= 0 else -1)
    base.update(kw)
    return EffectiveTed(**base)


def test_effective_hamiltonian_examples():
    sp = ted_space((3, 3))
    H0 = effective_hamiltonian(_eff(0.0), 0.0, space=sp).matrix
    assert np.allclose(H0, np.diag(np.diag(H0)))
    gp = 3e6
    H = effective_hamiltonian(_eff(gp), 0.0, space=sp).matrix
    i10 = sp.basis_index({"d": 1, "w": 0})
    i01 = sp.basis_index({"d": 0, "w": 1})
    assert H[i10, i01] == pytest.approx(-1j * gp)
    i11 = sp.basis_index({"d": 1, "w": 1})
    i02 = sp.basis_index({"d": 0, "w": 2})
    assert abs(H[i11, i02]) == pytest.approx(math.sqrt(2) * gp)
    # anharmonic ladder: E(02) - 2 E(01) = nu_w
    assert (H0[i02, i02] - 2 * H0[i01, i01]).real == pytest.approx(-0.169 * G)


def test_effective_hamiltonian_hermitian_over_time():
    eff = _eff(3e6, g_p_envelope=DriveEnvelope.cos2(3e6, 1e-6, 2e-6), stark_coeff=-1e-9, drive_per_gp=10.0)
    for t in np.linspace(0, 2e-6, 9):
        assert effective_hamiltonian(eff, t, Omega=1e6).is_hermitian(1e-12)


def test_stark_shift_enters_w_frequency():
    eff = _eff(3e6, stark_coeff=-2e-10, drive_per_gp=5.0)
    sp = ted_space((2, 2))
    H = effective_hamiltonian(eff, 0.0, space=sp).matrix
    i01 = sp.basis_index({"d": 0, "w": 1})
    assert H[i01, i01].real == pytest.approx(-2e-10 * (5 * 3e6) ** 2)
    off = effective_hamiltonian(EffectiveTed(**{**eff.__dict__, "stark": False}), 0.0, space=sp).matrix
    assert off[i01, i01] == 0


def test_rabi_oracle():
    gp = 2 * np.pi * 1e6
    sp = ted_space((2, 2))
    eff = _eff(gp)
    H = effective_hamiltonian(eff, 0.0, space=sp)
    t = math.pi / (2 * gp)
    tr = evolve(MasterEq(sp, H), basis_ket(sp, {"d": 1}), (0, t), t_eval=[0, t], tol=1e-11)
    i01 = sp.basis_index({"d": 0, "w": 1})
    assert tr.final[i01, i01].real == pytest.approx(1.0, abs=1e-6)


def test_detection_carrier():
    ted = TedParams(omega_d=2.95 * G, omega_c=3.87 * G, omega_w=(2.95 + 2.541) * G, nu_d=-0.174 * G,
                    nu_c=-0.169 * G, nu_w=-0.169 * G, g_C=0.07 * G, gamma=11.2e6)
    assert detection_drive_frequency(ted) / G == pytest.approx(2.372)
    assert (reset_drive_frequency(ted) - detection_drive_frequency(ted)) / G == pytest.approx(0.169)
    flat = ted.__class__(**{**ted.__dict__, "nu_w": 0.0})
    assert detection_drive_frequency(flat) == reset_drive_frequency(flat)


def test_detection_carrier_makes_11_02_resonant(ted):
    wp = detection_drive_frequency(ted)
    eff = schrieffer_wolff(ted, parametric(wp, DriveEnvelope.constant(0.0)))
    sp = ted_space((3, 3))
    H = effective_hamiltonian(eff, 0.0, space=sp).matrix
    i11 = sp.basis_index({"d": 1, "w": 1})
    e11 = H[i11, i11]
    i02 = sp.basis_index({"d": 0, "w": 2})
    e02 = H[i02, i02]
    assert abs(e11 - e02) < 1e-3


def test_design_check(ted):
    rep = design_check(ted)
    c = rep.checks[0]
    assert c["status"] == "marginal"
    assert c["limit"] / c["value"] == pytest.approx(2.0, rel=0.01)
    assert design_check(ted.__class__(**{**ted.__dict__, "gamma": 0.0})).status("decay_budget") == "pass"
    strong = ted.__class__(**{**ted.__dict__, "g_C": 0.2 * abs(ted.omega_d - ted.omega_c)})
    assert design_check(strong).status("dispersive") == "warn"
    assert design_check(ted, A=ted.g_C).status("drive_amplitude") == "warn"
    assert design_check(ted, E_Jcw=2.2, E_Jc=13, E_Jw=26).status("E_Jcw_cap") == "pass"


def test_effective_from_coupling():
    env = DriveEnvelope.cos2(1.0, 1e-6, 2e-6)
    eff = effective_from_coupling(5e6, 11.2e6, -1e9, -1e9, envelope=env)
    assert eff.g_p == pytest.approx(5e6)
    assert eff.g_p_at(1e-6) == pytest.approx(5e6)


def test_three_mode_oracles_run(ted):
    A = 0.01 * G
    r = three_mode_transfer_rate(ted, A)
    eff = schrieffer_wolff(ted, parametric(ted.omega_w - ted.omega_d, DriveEnvelope.constant(A)))
    assert r["frequency"] == pytest.approx(2 * abs(eff.g_p), rel=0.1)
    assert r["max_population"] > 0.98
    s1, s2 = three_mode_stark_shift(ted, A), three_mode_stark_shift(ted, 2 * A)
    assert s2 / s1 == pytest.approx(4, rel=0.05)


def test_space_labels_custom():
    sp = ProductSpace.of(("ds", 2), ("ws", 3))
    H = effective_hamiltonian(_eff(1e6), 0.0, space=sp, d="ds", w="ws")
    assert H.space == sp
