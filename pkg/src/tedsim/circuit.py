"""Lumped-element model of a single TED: data (d), coupler (c) and waveguide (w) transmons.

Inputs use GHz / fF / pH / Ohm (the units of the parameter tables); everything is
converted once to SI here, and returned frequencies are angular (rad/s).
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import MISSING, asdict, dataclass, fields

import numpy as np
from scipy import constants as const
from scipy.optimize import minimize

HBAR = const.hbar
E = const.e
PHI0 = HBAR / (2 * E)  # reduced flux quantum
FF = 1e-15
PH = 1e-12
GHZ = 2 * np.pi * 1e9

MODES = ("d", "c", "w")


class CircuitError(ValueError):
    pass


def josephson_inductance(E_J_GHz: float) -> float:
    """``L = phi0^2 / E_J`` with ``E_J`` given as a frequency in GHz (times h)."""
    return PHI0 ** 2 / (const.h * E_J_GHz * 1e9)


@dataclass(frozen=True)
class CircuitParams:
    E_Jd: float
    E_Jc: float
    E_Jw: float
    E_Jcw: float
    C_d: float
    C_c: float
    C_w: float
    C_dc: float
    C_cw: float
    C_v: float
    M_d: float = 1.0
    M_p: float = 3.0
    R_load: float = 50.0

    def __post_init__(self):
        for name in ("C_d", "C_c", "C_w", "C_dc", "C_cw", "C_v"):
            if not getattr(self, name) > 0:
                raise CircuitError(f"capacitance {name} must be > 0, got {getattr(self, name)}")
        for name in ("E_Jd", "E_Jc", "E_Jw", "E_Jcw"):
            if not getattr(self, name) > 0:
                raise CircuitError(f"junction energy {name} must be > 0, got {getattr(self, name)}")
        if not self.R_load > 0:
            raise CircuitError("R_load must be > 0")
        if self.E_Jcw > 0.2 * min(self.E_Jc, self.E_Jw):
            warnings.warn(f"E_Jcw = {self.E_Jcw} GHz exceeds 0.2 x min(E_Jc, E_Jw)", stacklevel=2)

    @property
    def inductances(self) -> dict[str, float]:
        """Josephson inductances in henry, keyed d, c, w, cw."""
        return {k: josephson_inductance(getattr(self, f"E_J{k}")) for k in ("d", "c", "w", "cw")}

    _UNITS = {"E_J": "GHz", "C_": "fF", "M_": "pH", "R_": "Ohm"}

    @classmethod
    def _key(cls, name: str) -> str:
        for prefix, unit in cls._UNITS.items():
            if name.startswith(prefix):
                return f"{name}_{unit}"
        raise KeyError(name)

    def to_json_dict(self) -> dict:
        return {self._key(k): v for k, v in asdict(self).items()}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "CircuitParams":
        known = {cls._key(f.name): f for f in fields(cls)}
        unknown = set(doc) - set(known)
        if unknown:
            raise CircuitError("unknown circuit fields: " + ", ".join(sorted(unknown)))
        missing = [k for k, f in known.items() if f.default is MISSING and k not in doc]
        if missing:
            raise CircuitError("missing circuit fields: " + ", ".join(missing))
        return cls(**{known[k].name: float(v) for k, v in doc.items()})

    @classmethod
    def load(cls, path) -> "CircuitParams":
        with open(path) as fh:
            doc = json.load(fh)
        return cls.from_json_dict(doc.get("circuit", doc))


@dataclass(frozen=True)
class FluxPoint:
    phi_bar: float = 0.0
    amp: float = 0.0
    omega_p: float = 0.0

    def __post_init__(self):
        if self.amp < 0:
            raise CircuitError("flux modulation amplitude must be >= 0")
        if self.amp > 0.5:
            warnings.warn(f"A_phi = {self.amp} is outside the small-signal regime", stacklevel=2)


@dataclass(frozen=True)
class QuantizedTed:
    omega_d: float
    omega_c: float
    omega_w: float
    nu_d: float
    nu_c: float
    nu_w: float
    Z_d: float
    Z_c: float
    Z_w: float
    g_C: float
    g_L_bar: float
    A_amp: float
    plasma: tuple = ()

    def to_json_dict(self) -> dict:
        out = {}
        for q in MODES:
            out[f"omega_{q}_GHz"] = getattr(self, f"omega_{q}") / GHZ
            out[f"nu_{q}_GHz"] = getattr(self, f"nu_{q}") / GHZ
            out[f"Z_{q}_Ohm"] = getattr(self, f"Z_{q}")
        out["g_C_GHz"] = self.g_C / GHZ
        out["g_L_bar_GHz"] = self.g_L_bar / GHZ
        out["A_amp_GHz"] = self.A_amp / GHZ
        return out


def capacitance_matrix(p: CircuitParams) -> np.ndarray:
    """Node capacitance matrix in fF, node order (d, c, w)."""
    C = np.array([
        [p.C_d + p.C_dc, -p.C_dc, 0.0],
        [-p.C_dc, p.C_c + p.C_dc + p.C_cw, -p.C_cw],
        [0.0, -p.C_cw, p.C_w + p.C_cw + p.C_v],
    ])
    try:
        np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        raise CircuitError("capacitance matrix is not positive definite") from None
    return C


def branch_fluxes(p: CircuitParams, phi_p: float) -> tuple[float, float, float]:
    """Split an external loop flux over the c, cw and w junction branches.

    The three weights are normalized so the parts add up to ``phi_p``.
    """
    det = np.linalg.det(capacitance_matrix(p))
    if abs(det) < 1e-300:
        raise CircuitError("singular capacitance matrix")
    r = np.array([p.C_cw * p.C_w, p.C_c * p.C_w, -p.C_cw * p.C_c]) / det
    r = r / r.sum()
    return tuple(float(x) for x in r * phi_p)


def inverse_inductance_matrix(p: CircuitParams, phi_p: float) -> np.ndarray:
    """Flux-biased linear inverse-inductance matrix (1/H), node order (d, c, w)."""
    L = p.inductances
    phi_c, phi_cw, phi_w = branch_fluxes(p, phi_p)
    ic = math.cos(phi_c) / L["c"]
    icw = math.cos(phi_cw) / L["cw"]
    iw = math.cos(phi_w) / L["w"]
    return np.array([
        [1.0 / L["d"], 0.0, 0.0],
        [0.0, ic + icw, -icw],
        [0.0, -icw, iw + icw],
    ])


def coupling_scale(Z_c: float, Z_w: float, p: CircuitParams) -> float:
    """``sqrt(Z_w Z_c) / 2 L_cw`` in rad/s."""
    return math.sqrt(Z_w * Z_c) / (2.0 * p.inductances["cw"])


def quantize(p: CircuitParams, flux: FluxPoint = FluxPoint()) -> QuantizedTed:
    Cinv = np.linalg.inv(capacitance_matrix(p) * FF)
    Linv = inverse_inductance_matrix(p, flux.phi_bar)
    cd, li = np.diag(Cinv), np.diag(Linv)
    if np.any(li <= 0):
        bad = MODES[int(np.argmin(li))]
        raise CircuitError(f"mode {bad} is unstable at phi_bar = {flux.phi_bar:.6g} rad "
                           "(non-positive inverse inductance)")
    Z = np.sqrt(cd / li)
    plasma = np.sqrt(cd * li)
    # E_C / hbar with E_C = e^2 / 2C; quartic cosine term shifts the 0-1 line by -E_C
    nu = -E ** 2 * cd / (2 * HBAR)
    omega = plasma + nu
    g_C = Cinv[0, 1] / (2 * math.sqrt(Z[0] * Z[1]))
    scale = coupling_scale(Z[1], Z[2], p)
    return QuantizedTed(
        omega_d=omega[0], omega_c=omega[1], omega_w=omega[2],
        nu_d=nu[0], nu_c=nu[1], nu_w=nu[2],
        Z_d=Z[0], Z_c=Z[1], Z_w=Z[2],
        g_C=abs(g_C),
        g_L_bar=scale * math.cos(flux.phi_bar),
        A_amp=scale * flux.amp * math.sin(flux.phi_bar),
        plasma=tuple(plasma),
    )


def _potential_minimum(p: CircuitParams, phi_bar: float) -> np.ndarray:
    """Static node phases (c, w) minimizing the DTC potential with all loop flux on the cw junction."""
    Ec, Ew, Ecw = p.E_Jc, p.E_Jw, p.E_Jcw

    def U(x):
        c, w = x
        return -Ec * math.cos(c) - Ew * math.cos(w) - Ecw * math.cos(w - c + phi_bar)

    def grad(x):
        c, w = x
        s = math.sin(w - c + phi_bar)
        return np.array([Ec * math.sin(c) - Ecw * s, Ew * math.sin(w) + Ecw * s])

    res = minimize(U, np.zeros(2), jac=grad, method="BFGS", options={"gtol": 1e-14})
    return res.x


def linear_modes(p: CircuitParams, phi_bar: float) -> tuple[np.ndarray, np.ndarray]:
    """Normal-mode angular frequencies and overlaps with the bare (d, c, w) modes.

    Returns ``(omega, overlap)`` with ``overlap[i, j]`` the weight of bare mode i in
    normal mode j, in charge-scaled coordinates.
    """
    L = p.inductances
    c, w = _potential_minimum(p, phi_bar)
    cw = w - c + phi_bar
    ic = math.cos(c) / L["c"]
    iw = math.cos(w) / L["w"]
    icw = math.cos(cw) / L["cw"]
    K = np.array([[1.0 / L["d"], 0.0, 0.0], [0.0, ic + icw, -icw], [0.0, -icw, iw + icw]])
    C = capacitance_matrix(p) * FF
    # symmetric form C^-1/2 K C^-1/2
    ev, U = np.linalg.eigh(C)
    Cm12 = U @ np.diag(ev ** -0.5) @ U.T
    lam, V = np.linalg.eigh(Cm12 @ K @ Cm12)
    if np.any(lam <= 0):
        raise CircuitError(f"unstable linear mode at phi_bar = {phi_bar:.6g} rad")
    return np.sqrt(lam), np.abs(V) ** 2


def flux_dispersion(p: CircuitParams, grid) -> list[dict]:
    """Normal-mode frequencies of the linearized circuit over a grid of static fluxes.

    Each row has ``phi_bar`` and ``omega_d``, ``omega_c``, ``omega_w`` (rad/s); a row
    that fails is kept with ``valid = False`` and NaN frequencies.
    """
    grid = list(grid)
    if not grid:
        raise ValueError("flux grid is empty")
    rows = []
    for phi in grid:
        row = {"phi_bar": float(phi), "valid": True, "error": ""}
        try:
            omega, overlap = linear_modes(p, float(phi))
            labels = _label_modes(omega, overlap)
            for q, j in zip(MODES, labels):
                row[f"omega_{q}"] = float(omega[j])
        except CircuitError as exc:
            row.update(valid=False, error=str(exc), omega_d=math.nan, omega_c=math.nan, omega_w=math.nan)
        rows.append(row)
    return rows


def _label_modes(omega: np.ndarray, overlap: np.ndarray) -> list[int]:
    """Assign normal modes to bare modes by largest overlap; ties go to frequency order."""
    order = sorted(((-overlap[i, j], omega[j], i, j) for i in range(3) for j in range(3)))
    taken_bare, taken_norm, out = set(), set(), [None] * 3
    for _, _, i, j in order:
        if i in taken_bare or j in taken_norm:
            continue
        out[i] = j
        taken_bare.add(i)
        taken_norm.add(j)
    return out


def write_dispersion_csv(rows: list[dict], path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phi_bar", "omega_d_GHz", "omega_c_GHz", "omega_w_GHz"])
        for r in rows:
            w.writerow([repr(r["phi_bar"])] + [repr(r[f"omega_{q}"] / GHZ) for q in MODES])


def _parallel(a: complex, b: complex) -> complex:
    if a == 0 or b == 0:
        return 0j
    return 1.0 / (1.0 / a + 1.0 / b)


def admittance(p: CircuitParams, omega: float, flux: FluxPoint = FluxPoint()) -> complex:
    """Admittance seen at the d node with the waveguide replaced by ``R_load``."""
    if not omega > 0:
        raise ValueError("omega must be > 0")
    L = p.inductances
    phi_c, phi_cw, phi_w = branch_fluxes(p, flux.phi_bar)
    jw = 1j * omega
    load = _parallel(jw * p.C_v * FF, 1.0 / p.R_load)
    w_node = jw * p.C_w * FF + math.cos(phi_w) / (jw * L["w"]) + load
    cw_branch = jw * p.C_cw * FF + math.cos(phi_cw) / (jw * L["cw"])
    c_node = jw * p.C_c * FF + math.cos(phi_c) / (jw * L["c"]) + _parallel(cw_branch, w_node)
    return jw * p.C_d * FF + 1.0 / (jw * L["d"]) + _parallel(jw * p.C_dc * FF, c_node)


def purcell_rate(p: CircuitParams, omega: float, flux: FluxPoint = FluxPoint()) -> float:
    """Waveguide-induced relaxation rate of the d mode, ``Re Y(omega) / (C_d + C_dc)``."""
    y = admittance(p, omega, flux)
    return y.real / ((p.C_d + p.C_dc) * FF)
