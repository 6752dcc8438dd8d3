"""Command-line front end: JSON in, CSV/JSON out.

Exit codes: 0 success, 1 invalid configuration, 2 simulation failure, 3 I/O failure.
Every run writes ``manifest.json`` into the output directory; ``tedsim rerun`` replays it.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import platform
import sys
import time
from dataclasses import dataclass, field, replace
from functools import partial
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .circuit import CircuitError, CircuitParams, FluxPoint, flux_dispersion, purcell_rate, quantize
from .protocols import (MHZ, T1_DEFAULT, T2_DEFAULT, US, Axis, PitchDetectSetup, ProtocolError,
                        ProtocolSpec, ResultTable, Segment, SweepSpec, fock_check_table, pitch_detect,
                        pitch_detect_protocol, run_points, scattering_sweep, simulate_detection,
                        simulate_emission, spectral_records)
from .ted import GHZ, TedModelError, TedParams

COMMANDS = ("quantize", "dispersion", "scatter", "emit", "detect", "pitch-detect", "fock-check")
TRUNC_MODES = ("d", "c", "w")
DETECT_PARAMS = ("n_bar", "window_us", "readout_us", "g_pm_over_gamma")

EXIT_OK, EXIT_CONFIG, EXIT_SIM, EXIT_IO = 0, 1, 2, 3
CONFIG_ERRORS = (ProtocolError, TedModelError, CircuitError, KeyError, TypeError, ValueError)


class ConfigError(Exception):
    pass


# --- configuration ---------------------------------------------------------------------


@dataclass
class RunConfig:
    command: str
    params: str | None = None
    protocol: str | None = None
    sweep: str | None = None
    out: str = "tedsim-out"
    trunc: dict = field(default_factory=dict)
    tol: float | None = None
    jobs: int = 1
    quiet: bool = False
    ted: str = "sted"
    phi_bar: float = 0.0
    inputs: dict = field(default_factory=dict)


def parse_trunc(text: str | None) -> dict:
    """``"d=3,c=3,w=4"`` to ``{"d": 3, "c": 3, "w": 4}``."""
    if not text:
        return {}
    out = {}
    for item in text.split(","):
        key, sep, val = item.partition("=")
        key = key.strip()
        if not sep or key not in TRUNC_MODES:
            raise ConfigError(f"bad --trunc entry {item!r}; expected mode=levels with mode in {TRUNC_MODES}")
        try:
            n = int(val)
        except ValueError:
            raise ConfigError(f"bad --trunc level {val!r} for mode {key}") from None
        if n < 2:
            raise ConfigError(f"--trunc {key} needs at least 2 levels")
        out[key] = n
    return out


def _read_json(path: str, what: str) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {path}")
    raw = p.read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} file {path} is not valid JSON: {exc}") from None
    return {"path": str(p), "sha256": hashlib.sha256(raw).hexdigest(), "content": doc}


def default_params() -> dict:
    raw = resources.files("tedsim").joinpath("data/table1.json").read_bytes()
    return {"path": "<package:tedsim/data/table1.json>", "sha256": hashlib.sha256(raw).hexdigest(),
            "content": json.loads(raw)}


def load_inputs(cfg: RunConfig) -> dict:
    """Read every referenced file; embedded documents (from a manifest) take precedence."""
    if cfg.inputs:
        return cfg.inputs
    inputs = {"params": _read_json(cfg.params, "params") if cfg.params else default_params()}
    if cfg.protocol:
        inputs["protocol"] = _read_json(cfg.protocol, "protocol")
    if cfg.sweep:
        inputs["sweep"] = _read_json(cfg.sweep, "sweep")
    return inputs


def _content(inputs: dict, key: str):
    return inputs[key]["content"] if key in inputs else None


def _setup(cfg: RunConfig, doc: dict) -> PitchDetectSetup:
    setup = PitchDetectSetup.from_json_dict(doc)
    kw = {}
    for name in ("dims_s", "dims_m"):
        d, w = getattr(setup, name)
        kw[name] = (cfg.trunc.get("d", d), cfg.trunc.get("w", w))
    if cfg.tol is not None:
        kw["tol"] = cfg.tol
    return replace(setup, **kw)


def _sweep(inputs: dict, default: SweepSpec, allowed) -> SweepSpec:
    doc = _content(inputs, "sweep")
    sweep = default if doc is None else SweepSpec.from_json_dict(doc)
    for name in sweep.axes:
        if name not in allowed:
            raise ConfigError(f"unknown sweep parameter {name!r}; expected one of {tuple(allowed)}")
    return sweep


def _protocol(inputs: dict) -> ProtocolSpec:
    doc = _content(inputs, "protocol")
    return pitch_detect_protocol() if doc is None else ProtocolSpec.from_json_dict(doc)


# --- commands --------------------------------------------------------------------------
# Each command returns (plan, execute): ``plan`` holds resolved parameters and is built
# before any simulation so configuration errors surface as exit 1.


def _progress(cfg: RunConfig):
    if cfg.quiet:
        return None
    done = [0]

    def report(i, n, row):
        done[0] += 1
        status = "error: " + row["error"] if row.get("error") else "ok"
        print(f"[{done[0]}/{n}] point {i}: {status}", file=sys.stderr, flush=True)
    return report


def _cmd_quantize(cfg, inputs):
    doc = inputs["params"]["content"]
    p = CircuitParams.from_json_dict(doc.get("circuit", doc))
    flux = FluxPoint(phi_bar=cfg.phi_bar)
    resolved = {"circuit": p.to_json_dict(), "phi_bar": cfg.phi_bar}

    def run(out: Path):
        q = quantize(p, flux)
        rate = purcell_rate(p, q.omega_d, flux)
        result = {"inputs": p.to_json_dict(), "phi_bar": cfg.phi_bar, "derived": q.to_json_dict(),
                  "purcell_rate_per_s": rate, "purcell_T1_s": 1 / rate if rate > 0 else math.inf}
        return [_write_json(out / "quantize.json", result)], []
    return resolved, run


def _cmd_dispersion(cfg, inputs):
    doc = inputs["params"]["content"]
    p = CircuitParams.from_json_dict(doc.get("circuit", doc))
    sweep = _sweep(inputs, SweepSpec(Axis("phi_bar", tuple(np.linspace(-np.pi, np.pi, 201).tolist()))),
                   ("phi_bar",))
    if sweep.axis2 is not None:
        raise ConfigError("dispersion takes a single phi_bar axis")
    resolved = {"circuit": p.to_json_dict(), "sweep": sweep.to_json_dict()}

    def run(out: Path):
        rows = flux_dispersion(p, sweep.axis1.values)
        table = ResultTable(["phi_bar"], ["omega_d_GHz", "omega_c_GHz", "omega_w_GHz"],
                            [{"phi_bar": r["phi_bar"], "error": r["error"],
                              **{f"omega_{q}_GHz": r[f"omega_{q}"] / GHZ for q in "dcw"}} for r in rows],
                            {"kind": "dispersion", "circuit": p.to_json_dict()})
        return list(table.write(out / "dispersion.csv")), table.failures()
    return resolved, run


def _cmd_scatter(cfg, inputs):
    doc = inputs["params"]["content"]
    if cfg.ted not in doc:
        raise ConfigError(f"parameter file has no {cfg.ted!r} block")
    ted = TedParams.from_json_dict(doc[cfg.ted])
    default = SweepSpec(Axis("n_bar", tuple(np.geomspace(1e-3, 10, 41).tolist())))
    sweep = _sweep(inputs, default, ("n_bar", "delta_MHz"))
    grid = {a.name: a.values for a in (sweep.axis1, sweep.axis2) if a is not None}
    if "n_bar" not in grid:
        raise ConfigError("scatter sweep needs an n_bar axis")
    levels = cfg.trunc.get("w", 3)
    resolved = {"ted": ted.to_json_dict(), "which": cfg.ted, "levels": levels, "sweep": sweep.to_json_dict()}

    def run(out: Path):
        table = scattering_sweep(ted, grid["n_bar"], [d * MHZ for d in grid.get("delta_MHz", (0.0,))],
                                 levels, cfg.jobs, _progress(cfg))
        return list(table.write(out / "scatter.csv")), table.failures()
    return resolved, run


def _cmd_emit(cfg, inputs):
    setup = _setup(cfg, inputs["params"]["content"])
    proto = _content(inputs, "protocol")
    duration = 2 * US
    if proto is not None:
        spec = ProtocolSpec.from_json_dict(proto)
        duration = spec.segments[spec.find("emission", "sted")].duration
    seg = Segment("emission", "sted", duration, 0.0)
    dims = setup.dims_s
    resolved = {"setup": setup.to_json_dict(), "emission_us": duration / US, "dims": list(dims),
                "tol": setup.tol}

    def run(out: Path):
        eff = setup.effective("sted", "emission", seg, 0.0)
        t_end = duration + 10 / eff.gamma
        n = int(round(t_end / setup.dt)) + 1
        em = simulate_emission(eff, dims=dims, t_end=t_end, n_samples=n, tol=setup.tol)
        tr = em.trajectory
        # a Fock state has no mean field; the superposition run carries the wavepacket in <a_out>
        sup = simulate_emission(eff, initial=(1.0, 1.0), dims=dims, t_end=t_end, n_samples=n, tol=setup.tol)
        xi = sup.trajectory.records["a_out"]
        files = [_write_csv(out / "emit_trajectory.csv",
                            ["t_us", "n_d", "n_w", "flux_per_s", "a_out_sup_re", "a_out_sup_im"],
                            zip(tr.times / US, tr.records["n_d"].real, tr.records["n_w"].real,
                                eff.gamma * tr.records["n_w"].real, xi.real, xi.imag))]
        spec = spectral_records(sup.trajectory, ("a_out",))
        files.append(_write_csv(out / "emit_spectrum.csv", ["f_MHz", "a_out_abs"],
                                zip(spec["freq_Hz"] / 1e6, spec["a_out"])))
        summary = {"initial": em.initial, "emitted": em.emitted, "residual": em.residual,
                   "leakage": em.leakage, "photon_probability": em.photon_probability,
                   "spectrum_resolution_Hz": spec["resolution_Hz"], "window": spec["window"],
                   "zero_pad": spec["zero_pad"], "invariants": tr.check_invariants()}
        files.append(_write_json(out / "emit_summary.json", summary))
        return files, []
    return resolved, run


def _detect_point(setup, t1, t2, base, point):
    p = dict(base, **point)
    s = replace(setup, g_pm=p["g_pm_over_gamma"])
    eff = s.effective("mted", "detection-window")
    res = simulate_detection(eff, p["window_us"] * US, n_bar=p["n_bar"], dims=setup.dims_m,
                             t1=t1, t2=t2, readout=p["readout_us"] * US, tol=setup.tol)
    return {"p_detect": res.p_detect, "p_excited": res.p_excited, "p_excited_dark": res.p_excited_dark}


def _cmd_detect(cfg, inputs):
    setup = _setup(cfg, inputs["params"]["content"])
    if "d" not in cfg.trunc and "w" not in cfg.trunc:
        setup = replace(setup, dims_m=(2, 3))
    proto = _content(inputs, "protocol")
    t1, t2 = T1_DEFAULT, T2_DEFAULT
    if proto is not None:
        spec = ProtocolSpec.from_json_dict(proto)
        t1, t2 = spec.t1, spec.t2
    default = SweepSpec(Axis("n_bar", tuple(np.geomspace(1e-3, 1, 7).tolist())))
    sweep = _sweep(inputs, default, DETECT_PARAMS)
    base = {"n_bar": 0.0, "window_us": 2.0, "readout_us": 0.0, "g_pm_over_gamma": setup.g_pm}
    resolved = {"setup": setup.to_json_dict(), "T1_us": t1 and t1 / US, "T2_us": t2 and t2 / US,
                "defaults": base, "sweep": sweep.to_json_dict()}

    def run(out: Path):
        rows = run_points(partial(_detect_point, setup, t1, t2, base), sweep.points(), cfg.jobs, _progress(cfg))
        table = ResultTable(sweep.axes, ["p_detect", "p_excited", "p_excited_dark"], rows,
                            {"kind": "detect", **resolved})
        return list(table.write(out / "detect.csv")), table.failures()
    return resolved, run


def _cmd_pitch_detect(cfg, inputs):
    setup = _setup(cfg, inputs["params"]["content"])
    protocol = _protocol(inputs)
    sweep = _sweep(inputs, SweepSpec(Axis("delta_omega_wm_MHz", (0.0,))),
                   ("delta_omega_wm_MHz", "delta_omega_pm_MHz", "g_pm_over_gamma", "g_ps_over_gamma",
                    "eta", "arrival_us", "window_us"))
    resolved = {"setup": setup.to_json_dict(), "protocol": protocol.to_json_dict(),
                "sweep": sweep.to_json_dict()}

    def run(out: Path):
        table = pitch_detect(setup, protocol, sweep, cfg.jobs, _progress(cfg))
        return list(table.write(out / "pitch_detect.csv")), table.failures()
    return resolved, run


def _cmd_fock_check(cfg, inputs):
    setup = _setup(cfg, inputs["params"]["content"])
    protocol = _protocol(inputs)
    resolved = {"setup": setup.to_json_dict(), "protocol": protocol.to_json_dict()}

    def run(out: Path):
        table = fock_check_table(setup, protocol)
        return list(table.write(out / "fock_check.csv")), table.failures()
    return resolved, run


HANDLERS = {"quantize": _cmd_quantize, "dispersion": _cmd_dispersion, "scatter": _cmd_scatter,
            "emit": _cmd_emit, "detect": _cmd_detect, "pitch-detect": _cmd_pitch_detect,
            "fock-check": _cmd_fock_check}


# --- output ----------------------------------------------------------------------------


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _write_json(path: Path, doc) -> Path:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    return path


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])
    return path


def versions() -> dict:
    return {"tedsim": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def run(cfg: RunConfig) -> int:
    """Execute one command; returns the exit status."""
    t0 = time.perf_counter()
    if cfg.command not in HANDLERS:
        print(f"error: unknown command {cfg.command!r}", file=sys.stderr)
        return EXIT_CONFIG
    if cfg.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        inputs = load_inputs(cfg)
        resolved, execute = HANDLERS[cfg.command](cfg, inputs)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CONFIG_ERRORS as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {out}: {exc}", file=sys.stderr)
        return EXIT_IO

    status, files, failures, message = EXIT_OK, [], [], None
    try:
        files, failures = execute(out)
        if failures:
            status, message = EXIT_SIM, f"{len(failures)} sweep point(s) failed"
    except OSError as exc:
        status, message = EXIT_IO, f"cannot write results: {exc}"
    except Exception as exc:  # any solver or model failure
        status, message = EXIT_SIM, f"simulation failed: {type(exc).__name__}: {exc}"
        failures = [{"error": message}]

    manifest = {"command": cfg.command,
                "options": {"out": str(out), "trunc": cfg.trunc, "tol": cfg.tol, "jobs": cfg.jobs,
                            "ted": cfg.ted, "phi_bar": cfg.phi_bar},
                "inputs": inputs, "resolved": resolved, "versions": versions(),
                "outputs": [Path(f).name for f in files], "exit_status": status,
                "failures": failures, "wall_time_s": time.perf_counter() - t0}
    try:
        _write_json(out / "manifest.json", manifest)
    except OSError as exc:
        print(f"error: cannot write manifest: {exc}", file=sys.stderr)
        return EXIT_IO
    if message:
        print(f"error: {message}; details in {out / 'manifest.json'}", file=sys.stderr)
    return status


def config_from_manifest(path: str, out: str | None = None, quiet: bool = False) -> RunConfig:
    doc = _read_json(path, "manifest")["content"]
    try:
        opts = doc["options"]
        return RunConfig(doc["command"], out=out or opts["out"], trunc=dict(opts["trunc"]), tol=opts["tol"],
                         jobs=opts["jobs"], quiet=quiet, ted=opts["ted"], phi_bar=opts["phi_bar"],
                         inputs=doc["inputs"])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"manifest {path} is missing {exc}") from None


# --- argument parsing ------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tedsim", description="Transmon emitter/detector simulations.")
    parser.add_argument("--version", action="version", version=f"tedsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = _Parser(add_help=False)
    common.add_argument("--params", help="parameter JSON (default: packaged device table)")
    common.add_argument("--out", default="tedsim-out", help="output directory")
    common.add_argument("--quiet", action="store_true", help="no progress lines")

    sim = _Parser(add_help=False)
    sim.add_argument("--protocol", help="protocol JSON")
    sim.add_argument("--sweep", help="sweep JSON")
    sim.add_argument("--trunc", help="levels per mode, e.g. d=3,c=3,w=4")
    sim.add_argument("--tol", type=float, help="integrator tolerance")
    sim.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")

    q = sub.add_parser("quantize", parents=[common], help="circuit to mode parameters")
    q.add_argument("--phi-bar", type=float, default=0.0, help="static flux phase (rad)")
    d = sub.add_parser("dispersion", parents=[common], help="mode frequencies vs static flux")
    d.add_argument("--sweep", help="sweep JSON with a phi_bar axis")
    s = sub.add_parser("scatter", parents=[common, sim], help="coherent reflection |r| vs n_bar")
    s.add_argument("--ted", choices=("sted", "mted"), default="sted")
    sub.add_parser("emit", parents=[common, sim], help="shaped single-photon emission")
    sub.add_parser("detect", parents=[common, sim], help="detection of a coherent drive")
    sub.add_parser("pitch-detect", parents=[common, sim], help="two-TED pitch and detect")
    sub.add_parser("fock-check", parents=[common, sim], help="output power per data-qubit preparation")
    r = sub.add_parser("rerun", help="replay a run from its manifest")
    r.add_argument("manifest")
    r.add_argument("--out", help="output directory (default: the recorded one)")
    r.add_argument("--quiet", action="store_true")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code
    try:
        if args.command == "rerun":
            cfg = config_from_manifest(args.manifest, args.out, args.quiet)
        else:
            cfg = RunConfig(args.command, params=args.params, protocol=getattr(args, "protocol", None),
                            sweep=getattr(args, "sweep", None), out=args.out,
                            trunc=parse_trunc(getattr(args, "trunc", None)), tol=getattr(args, "tol", None),
                            jobs=getattr(args, "jobs", 1), quiet=args.quiet, ted=getattr(args, "ted", "sted"),
                            phi_bar=getattr(args, "phi_bar", 0.0))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return run(cfg)


if __name__ == "__main__":
    raise SystemExit(main())
