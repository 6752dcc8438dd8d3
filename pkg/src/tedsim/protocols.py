"""Experiment protocols: backscatter, reset, emission, detection and pitch-detect runs.

Frequencies and rates are rad/s, times are seconds. Qubit gates are ideal
instantaneous unitaries applied at the start of their segment.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from functools import partial
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import simpson
from scipy.signal.windows import flattop

from .fock import Op, ProductSpace, State, basis_ket, local_op, lowering, mixture, number, projector
from .lindblad import MasterEq, Trajectory, evolve, rabi_from_power, steady_state
from .slh import NetworkSpec, build_pitch_detect
from .ted import (
    DriveEnvelope, EffectiveTed, TedParams, detection_drive_frequency, parametric,
    reset_drive_frequency, schrieffer_wolff, single_ted_master_eq, ted_space,
)

US = 1e-6
MHZ = 2 * np.pi * 1e6
T1_DEFAULT = 81e-6
T2_DEFAULT = 41e-6


class ProtocolError(ValueError):
    pass


# --- tables and sweeps -----------------------------------------------------------------


@dataclass
class ResultTable:
    """One row per grid point; failed points carry an ``error`` string and NaN outputs."""

    axes: list
    columns: list
    rows: list
    meta: dict = field(default_factory=dict)

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.rows], dtype=float)

    def failures(self) -> list:
        return [r for r in self.rows if r.get("error")]

    def write(self, path) -> tuple[Path, Path]:
        path = Path(path)
        names = list(self.axes) + list(self.columns) + ["error"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.rows:
                w.writerow([_cell(r.get(n, "")) for n in names])
        side = path.with_suffix(".json")
        meta = dict(self.meta)
        meta.update(rows=len(self.rows), axes=self.axes, columns=self.columns,
                    failures=[{k: r[k] for k in list(self.axes) + ["error"]} for r in self.failures()])
        with open(side, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)
        return path, side


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _json_default(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


@dataclass(frozen=True)
class Axis:
    name: str
    values: tuple

    def __post_init__(self):
        if len(self.values) == 0:
            raise ProtocolError(f"sweep axis {self.name!r} has an empty grid")

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Axis":
        if "name" not in doc:
            raise ProtocolError("sweep axis needs a 'name'")
        if "values" in doc:
            vals = [float(v) for v in doc["values"]]
        else:
            try:
                start, stop, num = float(doc["start"]), float(doc["stop"]), int(doc["num"])
            except KeyError as exc:
                raise ProtocolError(f"sweep axis {doc['name']!r} needs 'values' or start/stop/num "
                                    f"(missing {exc.args[0]!r})") from None
            scale = doc.get("scale", "linear")
            if scale == "log":
                vals = np.geomspace(start, stop, num).tolist()
            elif scale == "linear":
                vals = np.linspace(start, stop, num).tolist()
            else:
                raise ProtocolError(f"unknown axis scale {scale!r}")
        return cls(doc["name"], tuple(vals))

    def to_json_dict(self) -> dict:
        return {"name": self.name, "values": list(self.values)}


@dataclass(frozen=True)
class SweepSpec:
    axis1: Axis
    axis2: Axis | None = None

    @property
    def axes(self) -> list:
        return [self.axis1.name] + ([self.axis2.name] if self.axis2 else [])

    def points(self) -> list:
        """Grid points in index order, axis1 outermost."""
        if self.axis2 is None:
            return [{self.axis1.name: v} for v in self.axis1.values]
        return [{self.axis1.name: a, self.axis2.name: b}
                for a in self.axis1.values for b in self.axis2.values]

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SweepSpec":
        if "axis1" not in doc:
            raise ProtocolError("sweep needs 'axis1'")
        a2 = doc.get("axis2")
        return cls(Axis.from_json_dict(doc["axis1"]), Axis.from_json_dict(a2) if a2 else None)

    @classmethod
    def load(cls, path) -> "SweepSpec":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))

    def to_json_dict(self) -> dict:
        doc = {"axis1": self.axis1.to_json_dict()}
        if self.axis2:
            doc["axis2"] = self.axis2.to_json_dict()
        return doc


def run_points(fn: Callable[[dict], dict], points: Sequence[dict], jobs: int = 1,
               progress: Callable[[int, int, dict], None] | None = None) -> list:
    """Evaluate ``fn`` on every point; results come back in grid order.

    A point that raises is recorded with an ``error`` field instead of aborting the sweep.
    With ``jobs > 1`` points run in worker processes, so ``fn`` must be picklable.
    """
    results: list = [None] * len(points)

    def settle(i, out, exc):
        row = dict(points[i])
        if exc is not None:
            row["error"] = f"{type(exc).__name__}: {exc}"
        else:
            row.update(out)
        results[i] = row
        if progress:
            progress(i, len(points), row)

    if jobs <= 1:
        for i, p in enumerate(points):
            try:
                settle(i, fn(p), None)
            except Exception as exc:  # recorded per point
                settle(i, None, exc)
        return results
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futs = {pool.submit(fn, p): i for i, p in enumerate(points)}
        for fut in as_completed(futs):
            i = futs[fut]
            exc = fut.exception()
            settle(i, None if exc else fut.result(), exc)
    return results


# --- coherent backscatter --------------------------------------------------------------


def reflection(ted: TedParams, n_bar: float, delta: float = 0.0, levels: int = 3,
               n_th: float | None = None) -> float:
    """Steady-state ``|<a_out>| / sqrt(gamma n_bar)`` for a drive detuned by ``delta`` from ``omega_w``."""
    if not n_bar > 0:
        raise ProtocolError("n_bar must be > 0")
    n_th = ted.n_th if n_th is None else n_th
    g = ted.gamma
    sp = ProductSpace.of(("w", levels))
    w = lowering(sp, "w")
    omega_alpha = ted.omega_w - delta
    Om = rabi_from_power(n_bar, g, omega_alpha, ted.omega_w)
    H = number(sp, "w") * delta + (w.dag() @ w.dag() @ w @ w) * (ted.nu_w / 2) + (w - w.dag()) * (0.5j * Om)
    meq = MasterEq(sp, H, collapse=[(g * (1 + n_th), w)], thermal=[(g * n_th, w.dag())])
    mean_w = np.trace(steady_state(meq).dm() @ w.matrix)
    amp = math.sqrt(g * n_bar)
    return float(abs(amp + math.sqrt(g / 2) * mean_w) / amp)


def _scatter_point(ted, levels, p):
    return {"r_abs": reflection(ted, p["n_bar"], p.get("delta_MHz", 0.0) * MHZ, levels)}


def scattering_sweep(ted: TedParams, n_bar: Sequence[float], detuning: Sequence[float] = (0.0,),
                     levels: int = 3, jobs: int = 1, progress=None) -> ResultTable:
    """|r| on the (n_bar, detuning) grid; detunings are rad/s, tabulated in MHz."""
    sweep = SweepSpec(Axis("n_bar", tuple(float(x) for x in n_bar)),
                      Axis("delta_MHz", tuple(float(d) / MHZ for d in detuning)))
    rows = run_points(partial(_scatter_point, ted, levels), sweep.points(), jobs, progress)
    return ResultTable(sweep.axes, ["r_abs"], rows,
                       {"kind": "scatter", "levels": levels, "ted": ted.to_json_dict()})


# --- single-TED runs -------------------------------------------------------------------


def intrinsic_dissipators(space: ProductSpace, mode: str, t1: float | None, t2: float | None) -> list:
    """Amplitude damping at 1/T1 and pure dephasing so coherences decay at 1/T2."""
    out = []
    if t1:
        if t1 <= 0:
            raise ProtocolError("T1 must be > 0")
        out.append((1 / t1, lowering(space, mode)))
    if t2:
        rate = 1 / t2 - (0.5 / t1 if t1 else 0.0)
        if rate < -1e-12:
            raise ProtocolError("T2 must not exceed 2 T1")
        if rate > 0:
            out.append((2 * rate, number(space, mode)))
    return out


def simulate_reset(eff: EffectiveTed, duration: float, initial_excited: float,
                   dims: tuple = (2, 2), tol: float = 1e-9) -> float:
    """Excited population of d after driving the |10> <-> |01> transition for ``duration``."""
    if not duration > 0:
        raise ProtocolError("reset duration must be > 0")
    sp = ted_space(dims)
    rho0 = mixture([(1 - initial_excited, basis_ket(sp)), (initial_excited, basis_ket(sp, {"d": 1}))])
    tr = evolve(single_ted_master_eq(eff, dims), rho0, (0.0, duration), tol=tol,
                t_eval=[0.0, duration], e_ops={"n_d": number(sp, "d")}, store_states=False)
    return float(tr.records["n_d"][-1].real)


@dataclass
class EmissionResult:
    trajectory: Trajectory
    initial: float
    emitted: float
    residual: float
    leakage: float

    @property
    def photon_probability(self) -> float:
        """Excitation that left the TED: initial minus what remains in d and w."""
        return self.initial - self.residual - self.leakage


def _initial_ket(space: ProductSpace, initial) -> State:
    if isinstance(initial, State):
        return initial
    amps = np.asarray(initial, dtype=complex)
    v = np.zeros(space.dim, dtype=complex)
    for level, a in enumerate(amps):
        v[space.basis_index({"d": level})] = a
    return State(space, v / np.linalg.norm(v), "ket")


def simulate_emission(sted: EffectiveTed, initial=(0.0, 1.0), dims: tuple = (3, 4),
                      t_end: float | None = None, n_samples: int = 2001, tol: float = 1e-9) -> EmissionResult:
    """Release the d excitation through w with the TED's coupling envelope.

    ``initial`` is a State on the (d, w) space or d amplitudes with w in vacuum.
    ``emitted`` integrates the net waveguide flux and should equal ``photon_probability``.
    """
    env = sted.g_p_envelope
    lo, hi = env.support
    if lo < 0:
        raise ProtocolError("emission envelope starts before t = 0")
    if t_end is None:
        if not math.isfinite(hi):
            raise ProtocolError("constant envelope needs an explicit t_end")
        t_end = hi + 10 / sted.gamma
    if hi > t_end and math.isfinite(hi):
        raise ProtocolError("emission envelope extends past t_end")
    sp = ted_space(dims)
    w = lowering(sp, "w")
    t = np.linspace(0.0, t_end, n_samples)
    tr = evolve(single_ted_master_eq(sted, dims), _initial_ket(sp, initial), (0.0, t_end), tol=tol,
                t_eval=t, breakpoints=env.breakpoints, store_states=False,
                e_ops={"a_out": w * math.sqrt(sted.gamma / 2), "n_d": number(sp, "d"), "n_w": number(sp, "w")})
    n_w = tr.records["n_w"].real
    emitted = float(simpson(sted.gamma * (n_w - sted.n_th), x=t))
    return EmissionResult(tr, float(tr.records["n_d"][0].real), emitted,
                          float(tr.records["n_d"][-1].real), float(n_w[-1]))


@dataclass
class DetectionResult:
    p_excited: float
    p_excited_dark: float

    @property
    def p_detect(self) -> float:
        """Detection probability with the no-photon run mapped to zero."""
        if self.p_excited_dark <= 0:
            return float("nan")
        return float(np.clip(1 - self.p_excited / self.p_excited_dark, 0.0, 1.0))


def _p_excited(rho: np.ndarray, space: ProductSpace, mode: str) -> float:
    return float(1 - np.trace(rho @ projector(space, mode, 0).matrix).real)


def simulate_detection(mted: EffectiveTed, window: float, n_bar: float = 0.0, dims: tuple = (2, 3),
                       t1: float | None = None, t2: float | None = None, readout: float = 0.0,
                       source: EffectiveTed | None = None, source_dims: tuple = (2, 2),
                       eta: float = 0.0, tol: float = 1e-8) -> DetectionResult:
    """Detector prepared in |10>, coupling on for ``window`` then ``readout`` idle.

    The input is either a coherent drive of ``n_bar`` photons per 1/gamma on w (always on),
    or, when ``source`` is given, the photon released by that emitter through the network.
    """
    if dims[1] < 3:
        raise ProtocolError("detection needs at least 3 levels on w (the |02> state)")
    if not window > 0:
        raise ProtocolError("detection window must be > 0")
    if source is None:
        def run(nb):
            sp = ted_space(dims)
            Om = rabi_from_power(nb, mted.gamma, 1.0, 1.0) if nb else 0.0
            extra = intrinsic_dissipators(sp, "d", t1, t2)
            rho = basis_ket(sp, {"d": 1}).dm()
            for eff, span in ((mted, (0.0, window)), (_switched_off(mted), (window, window + readout))):
                if span[1] > span[0]:
                    meq = single_ted_master_eq(eff, dims, Omega=Om, extra_collapse=extra)
                    rho = evolve(meq, rho, span, tol=tol, t_eval=[span[1]], store_states=False,
                                 breakpoints=eff.g_p_envelope.breakpoints).final
            return _p_excited(rho, sp, "d")
        return DetectionResult(run(n_bar), run(0.0))

    def run_net(src):
        spec = NetworkSpec(src, mted, eta=eta, dims_s=source_dims, dims_m=dims)
        sp = spec.space
        rho = basis_ket(sp, {"ds": 1, "dm": 1}).dm()
        extra = intrinsic_dissipators(sp, "dm", t1, t2)
        for m_eff, span in ((mted, (0.0, window)), (_switched_off(mted), (window, window + readout))):
            if span[1] > span[0]:
                net = build_pitch_detect(replace(spec, mted=m_eff))
                meq = _with_extra(net.meq, extra)
                bps = tuple(src.g_p_envelope.breakpoints) + tuple(m_eff.g_p_envelope.breakpoints)
                rho = evolve(meq, rho, span, tol=tol, t_eval=[span[1]], store_states=False,
                             breakpoints=bps).final
        return _p_excited(rho, sp, "dm")
    return DetectionResult(run_net(source), run_net(_switched_off(source)))


def _switched_off(eff: EffectiveTed) -> EffectiveTed:
    return eff.with_envelope(DriveEnvelope.constant(0.0))


def _with_extra(meq: MasterEq, extra: Sequence) -> MasterEq:
    if not extra:
        return meq
    return MasterEq(meq.space, meq.hamiltonian, collapse=list(meq.collapse) + list(extra),
                    thermal=meq.thermal, cross=meq.cross)


def dark_count_estimate(t1: float, window: float, readout: float) -> float:
    """Probability that d relaxes during the window and readout."""
    if not t1 > 0:
        raise ProtocolError("T1 must be > 0")
    return float(-math.expm1(-(window + readout) / t1))


# --- protocol scripting ----------------------------------------------------------------

GATES = ("pi-pulse", "half-pi-pulse")
DRIVEN = ("reset", "emission", "detection-window")
KINDS = GATES + DRIVEN + ("idle", "readout")
TARGETS = {"sted": "ds", "mted": "dm"}


@dataclass(frozen=True)
class Segment:
    kind: str
    target: str
    duration: float
    start: float | None = None
    g_p_over_gamma: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProtocolError(f"unknown segment kind {self.kind!r}; expected one of {KINDS}")
        if self.target not in TARGETS:
            raise ProtocolError(f"unknown segment target {self.target!r}")
        if not self.duration > 0:
            raise ProtocolError(f"segment {self.kind} on {self.target} needs duration > 0")

    def to_json_dict(self) -> dict:
        doc = {"kind": self.kind, "target": self.target, "duration_us": self.duration / US}
        if self.start is not None:
            doc["start_us"] = self.start / US
        if self.g_p_over_gamma is not None:
            doc["g_p_over_gamma"] = self.g_p_over_gamma
        return doc

    @classmethod
    def from_json_dict(cls, doc: dict) -> "Segment":
        known = {"kind", "target", "duration_us", "start_us", "g_p_over_gamma"}
        bad = set(doc) - known
        if bad:
            raise ProtocolError(f"unknown segment fields {sorted(bad)}")
        try:
            return cls(doc["kind"], doc["target"], float(doc["duration_us"]) * US,
                       float(doc["start_us"]) * US if "start_us" in doc else None,
                       doc.get("g_p_over_gamma"))
        except KeyError as exc:
            raise ProtocolError(f"segment missing {exc.args[0]!r}") from None


@dataclass(frozen=True)
class ProtocolSpec:
    """Per-target sequences; a segment without ``start`` follows the previous one on its target."""

    segments: tuple
    initial_ds: int = 0
    initial_dm: int = 0
    t1: float | None = T1_DEFAULT
    t2: float | None = T2_DEFAULT

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        self.schedule()

    def schedule(self) -> list:
        """``(start, end, segment)`` triples sorted by start time."""
        clock = {t: 0.0 for t in TARGETS}
        out = []
        for seg in self.segments:
            start = clock[seg.target] if seg.start is None else seg.start
            if start < 0:
                raise ProtocolError(f"segment {seg.kind} on {seg.target} starts before t = 0")
            if start < clock[seg.target] - 1e-15:
                raise ProtocolError(f"segment {seg.kind} on {seg.target} overlaps the previous one "
                                    f"(starts {start / US:.4g} us, target busy until {clock[seg.target] / US:.4g} us)")
            clock[seg.target] = start + seg.duration
            out.append((start, start + seg.duration, seg))
        return sorted(out, key=lambda x: x[0])

    @property
    def end(self) -> float:
        return max(e for _, e, _ in self.schedule())

    def without_source(self) -> "ProtocolSpec":
        """Companion run: gates on the source qubit become idle time, so no photon is sent."""
        segs = tuple(replace(s, kind="idle") if s.target == "sted" and s.kind in GATES else s
                     for s in self.segments)
        return replace(self, segments=segs)

    def find(self, kind: str, target: str) -> int:
        for i, s in enumerate(self.segments):
            if s.kind == kind and s.target == target:
                return i
        raise ProtocolError(f"protocol has no {kind} segment on {target}")

    def start_of(self, index: int) -> float:
        seg = self.segments[index]
        for start, _, s in self.schedule():
            if s is seg:
                return start
        raise ProtocolError("segment not scheduled")

    def with_segment(self, index: int, seg: Segment) -> "ProtocolSpec":
        segs = list(self.segments)
        segs[index] = seg
        return replace(self, segments=tuple(segs))

    def to_json_dict(self) -> dict:
        return {"segments": [s.to_json_dict() for s in self.segments],
                "initial": {"ds": self.initial_ds, "dm": self.initial_dm},
                "T1_us": None if self.t1 is None else self.t1 / US,
                "T2_us": None if self.t2 is None else self.t2 / US}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ProtocolSpec":
        if "segments" not in doc or not doc["segments"]:
            raise ProtocolError("protocol needs a non-empty 'segments' list")
        init = doc.get("initial", {})
        t1 = doc.get("T1_us", T1_DEFAULT / US)
        t2 = doc.get("T2_us", T2_DEFAULT / US)
        return cls(tuple(Segment.from_json_dict(s) for s in doc["segments"]),
                   int(init.get("ds", 0)), int(init.get("dm", 0)),
                   None if t1 is None else t1 * US, None if t2 is None else t2 * US)

    @classmethod
    def load(cls, path) -> "ProtocolSpec":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def pitch_detect_protocol(window: float = 2 * US, emission_T: float = 2 * US, arrival: float | None = None,
                          readout: float = 4 * US, reset: float = 0.0, gate: float = 20e-9,
                          t1: float | None = T1_DEFAULT, t2: float | None = T2_DEFAULT) -> ProtocolSpec:
    """Excite both data qubits, then release a shaped photon inside the detection window.

    ``arrival`` is the emission pulse center measured from the start of the window.
    """
    segs = []
    t = 0.0
    if reset > 0:
        segs += [Segment("reset", "sted", reset), Segment("reset", "mted", reset)]
        t = reset
    segs += [Segment("pi-pulse", "sted", gate, t), Segment("pi-pulse", "mted", gate, t)]
    w0 = t + gate
    arrival = emission_T / 2 if arrival is None else arrival
    start = w0 + arrival - emission_T / 2
    if start < w0 - 1e-15:
        raise ProtocolError("emission would start before the source qubit is excited")
    segs += [Segment("emission", "sted", emission_T, start),
             Segment("detection-window", "mted", window, w0),
             Segment("readout", "mted", readout)]
    return ProtocolSpec(tuple(segs), t1=t1, t2=t2)


@dataclass(frozen=True)
class PitchDetectSetup:
    """Two TEDs joined through a circulator, both in the frame of the source w frequency.

    The detector w is flux-tuned to the source photon, offset by ``delta_omega_wm``; its
    detection carrier is set for that matched point and offset by ``delta_omega_pm``.
    Coupling strengths are in units of the respective gamma.
    """

    sted: TedParams
    mted: TedParams
    eta: float = 0.0
    phi_s: float = 0.0
    phi_m: float = 0.0
    g_ps: float = 0.472
    g_pm: float = 0.5
    g_reset: float = 0.5
    delta_omega_wm: float = 0.0
    delta_omega_pm: float = 0.0
    dims_s: tuple = (3, 4)
    dims_m: tuple = (3, 4)
    thermal: bool = False
    stark: bool = True
    tol: float = 1e-9
    dt: float = 2.5e-9

    _KEYS = {"eta": "eta", "phi_s": "phi_s", "phi_m": "phi_m", "g_ps_over_gamma": "g_ps",
             "g_pm_over_gamma": "g_pm", "g_reset_over_gamma": "g_reset", "dims_s": "dims_s",
             "dims_m": "dims_m", "thermal": "thermal", "stark": "stark", "tol": "tol"}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "PitchDetectSetup":
        for k in ("sted", "mted"):
            if k not in doc:
                raise ProtocolError(f"parameter file needs a {k!r} block")
        net = dict(doc.get("network", {}))
        kw = {}
        for key, val in net.items():
            if key in cls._KEYS:
                kw[cls._KEYS[key]] = tuple(val) if key.startswith("dims") else val
            elif key == "delta_omega_wm_MHz":
                kw["delta_omega_wm"] = float(val) * MHZ
            elif key == "delta_omega_pm_MHz":
                kw["delta_omega_pm"] = float(val) * MHZ
            elif key == "dt_ns":
                kw["dt"] = float(val) * 1e-9
            else:
                raise ProtocolError(f"unknown network field {key!r}")
        return cls(TedParams.from_json_dict(doc["sted"]), TedParams.from_json_dict(doc["mted"]), **kw)

    def to_json_dict(self) -> dict:
        return {"sted": self.sted.to_json_dict(), "mted": self.mted.to_json_dict(),
                "network": {"eta": self.eta, "phi_s": self.phi_s, "phi_m": self.phi_m,
                            "g_ps_over_gamma": self.g_ps, "g_pm_over_gamma": self.g_pm,
                            "g_reset_over_gamma": self.g_reset,
                            "delta_omega_wm_MHz": self.delta_omega_wm / MHZ,
                            "delta_omega_pm_MHz": self.delta_omega_pm / MHZ,
                            "dims_s": list(self.dims_s), "dims_m": list(self.dims_m),
                            "thermal": self.thermal, "stark": self.stark, "tol": self.tol,
                            "dt_ns": self.dt / 1e-9}}

    def _params(self, target: str) -> TedParams:
        if target == "sted":
            return self.sted
        return replace(self.mted, omega_w=self.sted.omega_w)

    def effective(self, target: str, kind: str | None, seg: Segment | None = None,
                  start: float = 0.0) -> EffectiveTed:
        """Two-mode model of ``target`` while segment ``kind`` is active (None: coupling off)."""
        p = self._params(target)
        if kind == "detection-window":
            omega_p = detection_drive_frequency(p) + (self.delta_omega_pm if target == "mted" else 0.0)
        else:
            omega_p = reset_drive_frequency(p)
        if target == "mted":
            p = replace(p, omega_w=p.omega_w + self.delta_omega_wm)
        unit = schrieffer_wolff(p, parametric(omega_p, DriveEnvelope.constant(1.0)),
                                omega_alpha=self.sted.omega_w)
        ratio = {"reset": self.g_reset, "emission": self.g_ps,
                 "detection-window": self.g_pm}.get(kind, 0.0)
        if seg is not None and seg.g_p_over_gamma is not None:
            ratio = seg.g_p_over_gamma
        g = abs(ratio) * p.gamma
        if kind == "emission":
            env = DriveEnvelope.cos2(g, start + seg.duration / 2, seg.duration)
        else:
            env = DriveEnvelope.constant(g)
        return replace(unit.with_envelope(env), stark=self.stark,
                       n_th=p.n_th if self.thermal else 0.0)

    def network(self, eff_s: EffectiveTed, eff_m: EffectiveTed):
        return build_pitch_detect(NetworkSpec(eff_s, eff_m, eta=self.eta, phi_s=self.phi_s,
                                              phi_m=self.phi_m, dims_s=self.dims_s, dims_m=self.dims_m,
                                              thermal=self.thermal))


def _gate(space: ProductSpace, mode: str, kind: str) -> np.ndarray:
    n = space.mode_dim(mode)
    u = np.eye(n, dtype=complex)
    if kind == "pi-pulse":
        u[:2, :2] = [[0, 1], [1, 0]]
    else:
        c = 1 / math.sqrt(2)
        u[:2, :2] = [[c, -c], [c, c]]
    return local_op(space, mode, u).matrix


def run_protocol(setup: PitchDetectSetup, protocol: ProtocolSpec) -> Trajectory:
    """Run the scripted sequence on the two-TED network.

    Records on a uniform grid of step ``setup.dt``: data-qubit populations, ``a_out``,
    ``b_out``, the 0-1 part of ``a_out`` and the output powers.
    """
    sched = protocol.schedule()
    t_end = max(e for _, e, _ in sched)
    n_grid = int(round(t_end / setup.dt))
    grid = np.linspace(0.0, t_end, n_grid + 1)
    cuts = sorted({0.0, t_end, *[s for s, _, _ in sched], *[e for _, e, _ in sched]})
    spec_space = NetworkSpec(None, None, dims_s=setup.dims_s, dims_m=setup.dims_m).space
    rho = basis_ket(spec_space, {"ds": protocol.initial_ds, "dm": protocol.initial_dm}).dm()
    extra = (intrinsic_dissipators(spec_space, "ds", protocol.t1, protocol.t2)
             + intrinsic_dissipators(spec_space, "dm", protocol.t1, protocol.t2))
    cache: dict = {}
    times, recs, diag = [], {}, {"trace_error": [], "hermiticity_error": [], "min_eigenvalue": []}
    e_ops = None

    def gates_at(t):
        nonlocal rho
        for s, _, seg in sched:
            if seg.kind in GATES and abs(s - t) <= 1e-15 + 1e-12 * t_end:
                u = _gate(spec_space, TARGETS[seg.target], seg.kind)
                rho = u @ rho @ u.conj().T

    def active(target, a, b):
        for s, e, seg in sched:
            if seg.target == target and seg.kind in DRIVEN and s <= a + 1e-15 and e >= b - 1e-15:
                return s, seg
        return 0.0, None

    gates_at(0.0)
    for a, b in zip(cuts[:-1], cuts[1:]):
        if b - a <= 1e-15:
            continue
        if a > 0:
            gates_at(a)
        effs, key = [], []
        for target in ("sted", "mted"):
            s, seg = active(target, a, b)
            kind = seg.kind if seg else None
            effs.append(setup.effective(target, kind, seg, s))
            key.append((kind, s, seg))
        key = tuple(key)
        if key not in cache:
            cache[key] = setup.network(*effs)
        net = cache[key]
        if e_ops is None:
            sp = net.meq.space
            e_ops = {"n_ds": number(sp, "ds"), "n_dm": number(sp, "dm"),
                     "p0_dm": projector(sp, "dm", 0), "p0_ds": projector(sp, "ds", 0),
                     "a_out": net.a_out, "b_out": net.b_out, "a_out01": net.a_out01,
                     "power_a01": net.a_out01.dag() @ net.a_out01, "power_b": net.b_out.dag() @ net.b_out}
            if a == 0.0:
                times.append(0.0)
                for k, op in e_ops.items():
                    recs.setdefault(k, []).append(np.trace(rho @ op.matrix))
        meq = _with_extra(net.meq, extra)
        inside = grid[(grid > a + 1e-15) & (grid < b - 1e-15)]
        on_grid = np.any(np.abs(grid - b) <= 1e-12 * t_end)
        t_eval = np.append(inside, b)
        bps = tuple(effs[0].g_p_envelope.breakpoints) + tuple(effs[1].g_p_envelope.breakpoints)
        tr = evolve(meq, rho, (a, b), tol=setup.tol, t_eval=t_eval, e_ops=e_ops,
                    store_states=False, breakpoints=bps)
        rho = tr.final
        keep = len(t_eval) if on_grid else len(t_eval) - 1
        times.extend(t_eval[:keep])
        for k in e_ops:
            recs[k].extend(tr.records[k][:keep])
        for k in diag:
            diag[k].extend(np.atleast_1d(tr.diagnostics[k]))
    records = {k: np.array(v) for k, v in recs.items()}
    meta = {"final_state": rho, "t_end": t_end, "protocol": protocol.to_json_dict(),
            "setup": setup.to_json_dict()}
    return Trajectory(np.array(times), None, records, {k: np.array(v) for k, v in diag.items()},
                      spec_space, meta)


def _final_excited(traj: Trajectory, mode: str) -> float:
    return _p_excited(traj.final, traj.space, mode)


def pitch_detect_point(setup: PitchDetectSetup, protocol: ProtocolSpec) -> dict:
    """Normalized detection probability from a photon run and its no-photon companion."""
    photon = run_protocol(setup, protocol)
    dark = run_protocol(setup, protocol.without_source())
    pe, pd = _final_excited(photon, "dm"), _final_excited(dark, "dm")
    inv = [tr.check_invariants(setup.tol) for tr in (photon, dark)]
    return {"p_detect": DetectionResult(pe, pd).p_detect, "p_exc_photon": pe, "p_exc_dark": pd,
            "dark_count": 1 - pd, "p_exc_ds": _final_excited(photon, "ds"),
            "invariants_ok": all(c["trace_ok"] and c["hermiticity_ok"] and c["positivity_ok"] for c in inv)}


PITCH_COLUMNS = ["p_detect", "p_exc_photon", "p_exc_dark", "dark_count", "p_exc_ds", "invariants_ok"]
SWEEP_PARAMS = ("delta_omega_wm_MHz", "delta_omega_pm_MHz", "g_pm_over_gamma", "g_ps_over_gamma",
                "eta", "arrival_us", "window_us")


def apply_override(setup: PitchDetectSetup, protocol: ProtocolSpec, name: str, value: float):
    """Return ``(setup, protocol)`` with one swept parameter replaced."""
    if name == "delta_omega_wm_MHz":
        return replace(setup, delta_omega_wm=value * MHZ), protocol
    if name == "delta_omega_pm_MHz":
        return replace(setup, delta_omega_pm=value * MHZ), protocol
    if name == "g_pm_over_gamma":
        return replace(setup, g_pm=value), protocol
    if name == "g_ps_over_gamma":
        return replace(setup, g_ps=value), protocol
    if name == "eta":
        return replace(setup, eta=value), protocol
    if name == "arrival_us":
        i = protocol.find("emission", "sted")
        w0 = protocol.start_of(protocol.find("detection-window", "mted"))
        seg = protocol.segments[i]
        return setup, protocol.with_segment(i, replace(seg, start=w0 + value * US - seg.duration / 2))
    if name == "window_us":
        i = protocol.find("detection-window", "mted")
        return setup, protocol.with_segment(i, replace(protocol.segments[i], duration=value * US))
    raise ProtocolError(f"unknown sweep parameter {name!r}; expected one of {SWEEP_PARAMS}")


def _pitch_point(setup, protocol, point):
    for name, value in point.items():
        setup, protocol = apply_override(setup, protocol, name, value)
    return pitch_detect_point(setup, protocol)


def pitch_detect(setup: PitchDetectSetup, protocol: ProtocolSpec, sweep: SweepSpec,
                 jobs: int = 1, progress=None) -> ResultTable:
    for name in sweep.axes:
        if name not in SWEEP_PARAMS:
            raise ProtocolError(f"unknown sweep parameter {name!r}; expected one of {SWEEP_PARAMS}")
    rows = run_points(partial(_pitch_point, setup, protocol), sweep.points(), jobs, progress)
    return ResultTable(sweep.axes, PITCH_COLUMNS, rows,
                       {"kind": "pitch-detect", "setup": setup.to_json_dict(),
                        "protocol": protocol.to_json_dict(), "sweep": sweep.to_json_dict()})


# --- records and derived estimates -----------------------------------------------------


def spectral_records(traj: Trajectory, names: Sequence[str] = ("a_out", "b_out"), pad: int = 4) -> dict:
    """Flat-top windowed, zero-padded FFT magnitudes of complex records.

    Frequencies are offsets from the frame frequency in Hz, ascending.
    """
    t = np.asarray(traj.times, dtype=float)
    if len(t) < 4:
        raise ProtocolError("need at least 4 samples for a spectrum")
    dt = np.diff(t)
    if np.max(np.abs(dt - dt[0])) > 1e-6 * dt[0]:
        raise ProtocolError("spectral_records needs uniformly sampled records")
    n = len(t)
    nfft = pad * n
    win = flattop(n, sym=False)
    out = {"freq_Hz": np.fft.fftshift(np.fft.fftfreq(nfft, dt[0])),
           "resolution_Hz": 1 / (nfft * dt[0]), "window": "flattop", "zero_pad": pad}
    for name in names:
        x = np.asarray(traj.records[name]) * win
        out[name] = np.abs(np.fft.fftshift(np.fft.fft(x, nfft))) * dt[0]
    return out


def fock_check_table(setup: PitchDetectSetup, protocol: ProtocolSpec | None = None) -> ResultTable:
    """Integrated 0-1 and 1-2 output power for each data-qubit preparation, minus |0000>."""
    protocol = protocol or pitch_detect_protocol()
    rows = []
    for ds in (0, 1):
        for dm in (0, 1):
            segs = tuple(replace(s, kind="idle") if s.kind in GATES and
                         ((s.target == "sted" and not ds) or (s.target == "mted" and not dm)) else s
                         for s in protocol.segments)
            tr = run_protocol(setup, replace(protocol, segments=segs))
            rows.append({"q_ds": ds, "q_dm": dm,
                         "power_01": float(simpson(tr.records["power_a01"].real, x=tr.times)),
                         "power_12": float(simpson(tr.records["power_b"].real, x=tr.times))})
    ref = rows[0]
    for r in rows:
        r["power_01_rel"] = r["power_01"] - ref["power_01"]
        r["power_12_rel"] = r["power_12"] - ref["power_12"]
    return ResultTable(["q_ds", "q_dm"], ["power_01", "power_12", "power_01_rel", "power_12_rel"], rows,
                       {"kind": "fock-check", "setup": setup.to_json_dict(), "protocol": protocol.to_json_dict()})


def absorption_probability(delta, g_p: float, gamma: float, e11: float = 0.0, e02: float = 0.0):
    """Probability that a photon at frame detuning ``delta`` is absorbed by a detector in |10>.

    One minus the elastic reflection of the driven {|11>, |02>} pair. ``e11`` and ``e02``
    are the frame energies of |11> and |02> relative to |10> (zero on resonance).
    """
    delta = np.asarray(delta, dtype=float)
    denom = (gamma / 2 + 1j * (e11 - delta)) + 2 * g_p ** 2 / (gamma + 1j * (e02 - delta))
    r = 1 - gamma / denom
    return 1 - np.abs(r) ** 2


def detector_levels(mted: EffectiveTed) -> tuple[float, float]:
    """Frame energies of |11> and |02> relative to |10>, including the constant Stark shift."""
    s = mted.stark_per_gp2 * mted.g_p ** 2
    return mted.delta + s, mted.delta + 2 * s + mted.nu_w + mted.delta_p


def clipping_estimate(sted: EffectiveTed, mted: EffectiveTed, dims: tuple = (2, 2), pad: int = 8,
                      n_samples: int = 4001) -> dict:
    """Fraction of the emitted single-photon spectrum that the detector does not absorb.

    ``mted`` is the detector in the source frame with its constant detection coupling.
    """
    em = simulate_emission(sted, initial=(1.0, 1.0), dims=dims, n_samples=n_samples)
    t = em.trajectory.times
    xi = em.trajectory.records["a_out"]
    dt = t[1] - t[0]
    spec = np.abs(np.fft.fft(xi, pad * len(t))) ** 2
    # numpy's transform peaks at f = -delta / 2 pi for a record rotating as exp(-i delta t)
    delta = -2 * np.pi * np.fft.fftfreq(pad * len(t), dt)
    e11, e02 = detector_levels(mted)
    absorbed = float(np.sum(spec * absorption_probability(delta, mted.g_p, mted.gamma, e11, e02)) / np.sum(spec))
    return {"clipped": 1 - absorbed, "absorbed": absorbed,
            "spectral_width_Hz": float(np.sqrt(np.sum(spec * (delta / (2 * np.pi)) ** 2) / np.sum(spec))),
            "emitted_fraction": em.photon_probability / em.initial}
