"""Rotating-frame TED Hamiltonians.

Three-mode model (d, c, w) in the frame of the parametric and coherent drives, and
the two-mode (d, w) model obtained by eliminating the coupler to second order.

Anharmonic terms are written ``(nu/2) q^+2 q^2`` so that ``nu`` is the measured
difference between the 1-2 and 0-1 transition frequencies.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .fock import Op, ProductSpace, lowering, number
from .lindblad import Hamiltonian, MasterEq

GHZ = 2 * np.pi * 1e9


class TedModelError(ValueError):
    pass


@dataclass(frozen=True)
class TedParams:
    omega_d: float
    omega_c: float
    omega_w: float
    nu_d: float
    nu_c: float
    nu_w: float
    g_C: float
    gamma: float
    n_th: float = 0.0

    def __post_init__(self):
        if not self.gamma >= 0:
            raise TedModelError("gamma must be >= 0")
        if self.n_th < 0:
            raise TedModelError("n_th must be >= 0")
        if self.omega_d == self.omega_w:
            raise TedModelError("omega_d must differ from omega_w")

    _GHZ_FIELDS = ("omega_d", "omega_c", "omega_w", "nu_d", "nu_c", "nu_w", "g_C")

    def to_json_dict(self) -> dict:
        doc = {f"{k}_GHz": getattr(self, k) / GHZ for k in self._GHZ_FIELDS}
        doc["gamma_per_s"] = self.gamma
        doc["n_th"] = self.n_th
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "TedParams":
        try:
            kw = {k: float(doc[f"{k}_GHz"]) * GHZ for k in cls._GHZ_FIELDS}
            kw["gamma"] = float(doc["gamma_per_s"])
        except KeyError as exc:
            raise TedModelError(f"missing TED field {exc.args[0]!r}") from None
        kw["n_th"] = float(doc.get("n_th", 0.0))
        return cls(**kw)

    @classmethod
    def load(cls, path, which: str = "sted") -> "TedParams":
        with open(path) as fh:
            doc = json.load(fh)
        return cls.from_json_dict(doc[which] if which in doc else doc)


@dataclass(frozen=True)
class DriveEnvelope:
    """Scalar envelope: constant, cosine-squared pulse, or piecewise-linear table."""

    kind: str = "constant"
    amplitude: float = 0.0
    t0: float = 0.0
    T: float = 0.0
    table: tuple = ()

    def __post_init__(self):
        if self.kind not in ("constant", "cos2", "pwl"):
            raise TedModelError(f"unknown envelope kind {self.kind!r}")
        if self.amplitude < 0:
            raise TedModelError("envelope amplitude must be >= 0")
        if self.kind == "cos2" and not self.T > 0:
            raise TedModelError("cosine-squared envelope needs T > 0")
        if self.kind == "pwl":
            ts = [p[0] for p in self.table]
            if len(ts) < 2 or np.any(np.diff(ts) <= 0):
                raise TedModelError("piecewise-linear table needs >= 2 increasing times")
            if any(p[1] < 0 for p in self.table):
                raise TedModelError("piecewise-linear values must be >= 0")

    @classmethod
    def constant(cls, amplitude: float) -> "DriveEnvelope":
        return cls("constant", amplitude)

    @classmethod
    def cos2(cls, amplitude: float, t0: float, T: float) -> "DriveEnvelope":
        return cls("cos2", amplitude, t0, T)

    @classmethod
    def pwl(cls, points: Sequence[tuple[float, float]]) -> "DriveEnvelope":
        pts = tuple((float(t), float(v)) for t, v in points)
        return cls("pwl", max(v for _, v in pts), table=pts)

    def __call__(self, t: float) -> float:
        if self.kind == "constant":
            return self.amplitude
        if self.kind == "cos2":
            x = t - self.t0
            if abs(x) >= self.T / 2:
                return 0.0
            return self.amplitude * math.cos(math.pi * x / self.T) ** 2
        ts, vs = zip(*self.table)
        return float(np.interp(t, ts, vs, left=0.0, right=0.0))

    def sample(self, times) -> np.ndarray:
        return np.array([self(t) for t in np.asarray(times, dtype=float)])

    @property
    def support(self) -> tuple[float, float]:
        if self.kind == "cos2":
            return (self.t0 - self.T / 2, self.t0 + self.T / 2)
        if self.kind == "pwl":
            return (self.table[0][0], self.table[-1][0])
        return (-math.inf, math.inf)

    @property
    def breakpoints(self) -> tuple[float, ...]:
        if self.kind == "pwl":
            return tuple(p[0] for p in self.table)
        if self.kind == "cos2":
            return self.support
        return ()

    def scaled(self, factor: float) -> "DriveEnvelope":
        factor = abs(factor)
        if self.kind == "pwl":
            return replace(self, amplitude=self.amplitude * factor,
                           table=tuple((t, v * factor) for t, v in self.table))
        return replace(self, amplitude=self.amplitude * factor)

    def shifted(self, dt: float) -> "DriveEnvelope":
        if self.kind == "pwl":
            return replace(self, table=tuple((t + dt, v) for t, v in self.table))
        return replace(self, t0=self.t0 + dt)

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "amplitude": self.amplitude, "t0": self.t0, "T": self.T,
                "table": [list(p) for p in self.table]}


@dataclass(frozen=True)
class DriveSpec:
    kind: str
    omega: float
    envelope: DriveEnvelope = DriveEnvelope()
    n_bar: float | None = None

    def __post_init__(self):
        if self.kind not in ("parametric", "coherent"):
            raise TedModelError(f"unknown drive kind {self.kind!r}")


def parametric(omega_p: float, envelope: DriveEnvelope) -> DriveSpec:
    return DriveSpec("parametric", omega_p, envelope)


def coherent(omega_alpha: float, envelope: DriveEnvelope, n_bar: float | None = None) -> DriveSpec:
    return DriveSpec("coherent", omega_alpha, envelope, n_bar)


def _split_drives(drives: Sequence[DriveSpec]):
    par = [d for d in drives if d.kind == "parametric"]
    coh = [d for d in drives if d.kind == "coherent"]
    if len(par) > 1 or len(coh) > 1:
        raise TedModelError("unsupported configuration: at most one parametric and one coherent drive")
    return (par[0] if par else None), (coh[0] if coh else None)


def detuning_branch(omega_w: float, omega_d: float, omega_p: float) -> tuple[float, int]:
    """``delta_p = omega_w - omega_d - s omega_p`` with ``s`` in (+1, -1) minimizing ``|delta_p|``.

    ``s`` is also the sign with which ``omega_p`` enters the d and c frame energies.
    """
    minus = omega_w - omega_d - omega_p
    plus = omega_w - omega_d + omega_p
    return (minus, 1) if abs(minus) <= abs(plus) else (plus, -1)


def three_mode_space(dims: tuple[int, int, int] = (3, 3, 4)) -> ProductSpace:
    return ProductSpace.of(("d", dims[0]), ("c", dims[1]), ("w", dims[2]))


def _anharm(space: ProductSpace, mode: str, nu: float) -> Op:
    a = lowering(space, mode)
    ad = a.dag()
    return (ad @ ad @ a @ a) * (nu / 2)


def rwa_hamiltonian(ted: TedParams, drives: Sequence[DriveSpec], t: float,
                    space: ProductSpace | None = None) -> Op:
    """Three-mode Hamiltonian in the frame of the drives at time ``t`` (rad/s)."""
    space = space or three_mode_space()
    par, coh = _split_drives(drives)
    omega_p = par.omega if par else 0.0
    omega_a = coh.omega if coh else 0.0
    s = detuning_branch(ted.omega_w, ted.omega_d, omega_p)[1] if par else 1
    d, c, w = (lowering(space, q) for q in ("d", "c", "w"))
    H = (number(space, "d") * (ted.omega_d + s * omega_p - omega_a)
         + number(space, "c") * (ted.omega_c + s * omega_p - omega_a)
         + number(space, "w") * (ted.omega_w - omega_a)
         + _anharm(space, "d", ted.nu_d) + _anharm(space, "c", ted.nu_c) + _anharm(space, "w", ted.nu_w)
         + (c @ d.dag() + c.dag() @ d) * ted.g_C)
    if par:
        A = par.envelope(t)
        H = H + (c.dag() @ w - c @ w.dag()) * (A / 2j)
    if coh:
        H = H + (w + w.dag()) * (coh.envelope(t) / 2)
    return Op(space, 0.5 * (H.matrix + H.matrix.conj().T), hermitian=True)


@dataclass(frozen=True)
class EffectiveTed:
    """Two-mode (d, w) TED after eliminating the coupler.

    ``g_p_envelope`` carries ``|g_p(t)|``; the sign of the coupling is ``g_p_sign``.
    The w frequency shifts by ``stark_coeff * A(t)^2`` with ``A(t) = drive_per_gp * g_p(t)``.
    """

    delta: float
    delta_p: float
    nu_d: float
    nu_w: float
    g_p_envelope: DriveEnvelope
    stark_coeff: float = 0.0
    gamma: float = 0.0
    n_th: float = 0.0
    g_p_sign: int = 1
    drive_per_gp: float = 0.0
    d_shift: float = 0.0
    omega_w: float = 0.0
    omega_d: float = 0.0
    omega_p: float = 0.0
    stark: bool = True

    @property
    def g_p(self) -> float:
        return self.g_p_sign * self.g_p_envelope.amplitude

    def g_p_at(self, t: float) -> float:
        return self.g_p_sign * self.g_p_envelope(t)

    @property
    def stark_per_gp2(self) -> float:
        """w shift per ``g_p(t)^2``; zero when the Stark correction is disabled."""
        if not self.stark:
            return 0.0
        return self.stark_coeff * self.drive_per_gp ** 2

    def with_envelope(self, env: DriveEnvelope) -> "EffectiveTed":
        return replace(self, g_p_envelope=env)


def effective_from_coupling(g_p: float, gamma: float, nu_d: float, nu_w: float,
                            delta: float = 0.0, delta_p: float = 0.0, n_th: float = 0.0,
                            envelope: DriveEnvelope | None = None, stark_per_gp2: float = 0.0,
                            omega_w: float = 0.0, omega_d: float = 0.0) -> EffectiveTed:
    """Effective TED specified directly by its coupling, as fitted in experiments.

    ``stark_per_gp2`` is the w shift per ``g_p^2`` (a fitted quadratic prefactor).
    """
    env = envelope if envelope is not None else DriveEnvelope.constant(abs(g_p))
    if envelope is not None and g_p:
        env = envelope.scaled(abs(g_p) / envelope.amplitude) if envelope.amplitude else envelope
    return EffectiveTed(delta=delta, delta_p=delta_p, nu_d=nu_d, nu_w=nu_w, g_p_envelope=env,
                        stark_coeff=stark_per_gp2, gamma=gamma, n_th=n_th,
                        g_p_sign=1 if g_p >= 0 else -1, drive_per_gp=1.0,
                        omega_w=omega_w, omega_d=omega_d, omega_p=abs(omega_w - omega_d) - delta_p)


def schrieffer_wolff(ted: TedParams, par: DriveSpec, omega_alpha: float | None = None) -> EffectiveTed:
    """Eliminate the coupler to second order in ``g_C`` and ``A``."""
    if par.kind != "parametric":
        raise TedModelError("schrieffer_wolff needs a parametric drive")
    if ted.omega_d == ted.omega_c:
        raise TedModelError("degenerate modes: omega_d equals omega_c")
    omega_alpha = ted.omega_w if omega_alpha is None else omega_alpha
    delta_p, s = detuning_branch(ted.omega_w, ted.omega_d, par.omega)
    dc = ted.omega_d - ted.omega_c
    wc = ted.omega_w - ted.omega_c - s * par.omega
    if wc == 0:
        raise TedModelError("parametric drive is resonant with the coupler")
    if abs(ted.g_C / dc) >= 0.1:
        warnings.warn(f"g_C/|omega_d - omega_c| = {abs(ted.g_C / dc):.3g} is outside the dispersive regime",
                      stacklevel=2)
    gp_per_A = ted.g_C / 4 * (1 / dc + 1 / wc)
    return EffectiveTed(
        delta=ted.omega_w - omega_alpha,
        delta_p=delta_p,
        nu_d=ted.nu_d,
        nu_w=ted.nu_w,
        g_p_envelope=par.envelope.scaled(abs(gp_per_A)),
        stark_coeff=1 / (4 * wc),
        gamma=ted.gamma,
        n_th=ted.n_th,
        g_p_sign=1 if gp_per_A >= 0 else -1,
        drive_per_gp=(1 / abs(gp_per_A)) if gp_per_A else 0.0,
        d_shift=ted.g_C ** 2 / dc,
        omega_w=ted.omega_w,
        omega_d=ted.omega_d,
        omega_p=par.omega,
    )


def effective_hamiltonian(eff: EffectiveTed, t: float, Omega: float = 0.0,
                          space: ProductSpace | None = None, d: str = "d", w: str = "w") -> Op:
    """Two-mode Hamiltonian at time ``t``."""
    return ted_hamiltonian(eff, space, d=d, w=w, Omega=Omega)(t)


def ted_space(dims: tuple[int, int] = (3, 4), d: str = "d", w: str = "w") -> ProductSpace:
    return ProductSpace.of((d, dims[0]), (w, dims[1]))


def ted_hamiltonian(eff: EffectiveTed, space: ProductSpace | None = None, d: str = "d", w: str = "w",
                    Omega=0.0) -> Hamiltonian:
    """Time-dependent two-mode Hamiltonian on ``space`` (which may hold other modes too).

    ``Omega`` is a constant or a callable envelope for the coherent drive on w.
    """
    space = space or ted_space(d=d, w=w)
    dd, ww = lowering(space, d), lowering(space, w)
    static = (number(space, d) * (eff.delta - eff.delta_p) + number(space, w) * eff.delta
              + _anharm(space, d, eff.nu_d) + _anharm(space, w, eff.nu_w))
    env = eff.g_p_envelope
    sign = eff.g_p_sign
    terms = []
    exchange = (dd.dag() @ ww - dd @ ww.dag()) * (-1j * sign)
    if env.kind == "constant":
        static = static + exchange * env.amplitude
    elif env.amplitude:
        terms.append((env, exchange))
    k = eff.stark_per_gp2
    if k:
        if env.kind == "constant":
            static = static + number(space, w) * (k * env.amplitude ** 2)
        elif env.amplitude:
            terms.append((_squared(env), number(space, w) * k))
    drive = ww + ww.dag()
    if callable(Omega):
        terms.append((_halved(Omega), drive))
    elif Omega:
        static = static + drive * (Omega / 2)
    return Hamiltonian(Op(space, static.matrix), terms)


def _squared(f):
    return lambda t: f(t) ** 2


def _halved(f):
    return lambda t: 0.5 * f(t)


def ted_dissipators(eff: EffectiveTed, space: ProductSpace, w: str = "w"):
    """Waveguide decay of w with thermal occupation ``n_th``: (collapse, thermal) lists."""
    ww = lowering(space, w)
    collapse = [(eff.gamma * (1 + eff.n_th), ww)]
    thermal = [(eff.gamma * eff.n_th, ww.dag())] if eff.n_th > 0 else []
    return collapse, thermal


def single_ted_master_eq(eff: EffectiveTed, dims: tuple[int, int] = (3, 4), Omega=0.0,
                         extra_collapse: Sequence = ()) -> MasterEq:
    space = ted_space(dims)
    H = ted_hamiltonian(eff, space, Omega=Omega)
    collapse, thermal = ted_dissipators(eff, space)
    return MasterEq(space, H, collapse=list(collapse) + list(extra_collapse), thermal=thermal)


def detection_drive_frequency(p) -> float:
    """Parametric carrier of the |11> <-> |02> transition, ``|omega_w - omega_d| + nu_w``."""
    return abs(p.omega_w - p.omega_d) + p.nu_w


def reset_drive_frequency(p) -> float:
    return abs(p.omega_w - p.omega_d)


@dataclass
class DesignReport:
    checks: list = field(default_factory=list)

    def add(self, name, status, value, limit, note=""):
        margin = (limit / value) if value else math.inf
        self.checks.append({"name": name, "status": status, "value": value, "limit": limit,
                            "margin": margin, "note": note})

    def status(self, name: str) -> str:
        for c in self.checks:
            if c["name"] == name:
                return c["status"]
        raise KeyError(name)

    @property
    def ok(self) -> bool:
        return all(c["status"] == "pass" for c in self.checks)


def design_check(ted: TedParams, A: float | None = None, E_Jcw: float | None = None,
                 E_Jc: float | None = None, E_Jw: float | None = None, strong: float = 10.0) -> DesignReport:
    """Check the coherence/operability design rules.

    ``0.005 |omega_d - omega_c| >> gamma`` passes when the ratio exceeds ``strong``,
    is marginal between 1 and ``strong``, and fails below 1.
    """
    rep = DesignReport()
    dc = abs(ted.omega_d - ted.omega_c)
    budget = 0.005 * dc
    if ted.gamma == 0:
        rep.add("decay_budget", "pass", 0.0, budget, "no waveguide decay")
    else:
        ratio = budget / ted.gamma
        status = "pass" if ratio >= strong else ("marginal" if ratio >= 1 else "fail")
        rep.add("decay_budget", status, ted.gamma, budget, f"ratio {ratio:.3g}")
    rep.add("dispersive", "pass" if ted.g_C <= 0.1 * dc else "warn", ted.g_C, 0.1 * dc)
    if A is not None:
        rep.add("drive_amplitude", "pass" if A <= ted.g_C / 2 else "warn", A, ted.g_C / 2)
    if E_Jcw is not None and E_Jc is not None and E_Jw is not None:
        cap = 0.2 * min(E_Jc, E_Jw)
        rep.add("E_Jcw_cap", "pass" if E_Jcw <= cap else "warn", E_Jcw, cap)
    return rep


# --- three-mode reference calculations -------------------------------------------------


def _single_excitation_block(ted: TedParams, omega_p: float, A: float) -> np.ndarray:
    """Three-mode RWA Hamiltonian restricted to one excitation, basis (d, c, w)."""
    s = detuning_branch(ted.omega_w, ted.omega_d, omega_p)[1]
    return np.array([
        [ted.omega_d + s * omega_p, ted.g_C, 0.0],
        [ted.g_C, ted.omega_c + s * omega_p, A / 2j],
        [0.0, -A / 2j, ted.omega_w],
    ], dtype=complex)


def _dw_pair(ted, omega_p, A):
    evals, vecs = np.linalg.eigh(_single_excitation_block(ted, omega_p, A))
    c_weight = np.abs(vecs[1]) ** 2
    keep = np.argsort(c_weight)[:2]
    keep = keep[np.argsort(evals[keep])]
    return evals[keep], vecs[:, keep]


def three_mode_transfer_rate(ted: TedParams, A: float, dims: tuple[int, int, int] = (2, 2, 2),
                             n_samples: int = 4000) -> dict:
    """Exchange frequency between |d=1> and |w=1> from closed three-mode evolution.

    The parametric carrier is tuned to the minimum of the dressed d/w splitting,
    |d=1> is evolved under the constant three-mode Hamiltonian, and the frequency is
    ``pi / t_max`` with ``t_max`` the first maximum of the w population.
    """
    guess = ted.omega_w - ted.omega_d
    g_est = abs(ted.g_C * A / (2 * (ted.omega_d - ted.omega_c)))
    width = 20 * (g_est + ted.g_C ** 2 / abs(ted.omega_d - ted.omega_c) + A ** 2 / abs(ted.omega_d - ted.omega_c))
    res = minimize_scalar(lambda wp: float(np.diff(_dw_pair(ted, wp, A)[0])[0]),
                          bounds=(guess - width, guess + width), method="bounded",
                          options={"xatol": 1e-6 * g_est + 1e-3})
    omega_p = res.x
    space = three_mode_space(dims)
    par = parametric(omega_p, DriveEnvelope.constant(A))
    H = rwa_hamiltonian(ted, [par], 0.0, space).matrix
    evals, vecs = np.linalg.eigh(H)
    i_d = space.basis_index({"d": 1, "c": 0, "w": 0})
    i_w = space.basis_index({"d": 0, "c": 0, "w": 1})
    # <w| exp(-iHt) |d> = sum_k <w|k><k|d> exp(-i E_k t)
    proj = vecs[i_w] * vecs[i_d].conj()
    splitting = float(np.diff(_dw_pair(ted, omega_p, A)[0])[0])
    t = np.linspace(0, 1.5 * math.pi / splitting, n_samples)
    pw = np.abs(np.exp(-1j * np.outer(t, evals)) @ proj) ** 2
    k = int(np.argmax(pw))
    res_t = minimize_scalar(lambda x: -abs(np.exp(-1j * x * evals) @ proj) ** 2,
                            bounds=(t[max(k - 1, 0)], t[min(k + 1, len(t) - 1)]), method="bounded",
                            options={"xatol": 1e-15})
    t_max = res_t.x
    return {"omega_p": omega_p, "t_max": t_max, "frequency": math.pi / t_max,
            "max_population": -res_t.fun, "splitting": splitting}


def three_mode_stark_shift(ted: TedParams, A: float) -> float:
    """A-dependent shift of the w-like level at the resonant carrier.

    The single-excitation block has a fixed trace, so the summed shift of the d- and
    w-like levels equals minus the coupler's shift; the static ``g_C`` part cancels
    against the ``A = 0`` reference.
    """
    omega_p = ted.omega_w - ted.omega_d

    def dw_sum(a):
        evals, vecs = np.linalg.eigh(_single_excitation_block(ted, omega_p, a))
        c_level = int(np.argmax(np.abs(vecs[1]) ** 2))
        return evals.sum() - evals[c_level]

    return dw_sum(A) - dw_sum(0.0)
