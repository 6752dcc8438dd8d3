"""Time-dependent Lindblad master equations.

Generators are written in the normal form

    drho/dt = -i[H(t), rho] + sum_k r_k D[L_k] rho + sum_j r_j (D2[A_j, B_j] + D2[B_j, A_j]) rho

with ``D2[A, B] rho = A rho B^+ - {A^+ B, rho}/2``. Hamiltonians are in angular
frequency units (rad/s) and times in seconds; hbar never appears.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.integrate import DOP853

from .fock import Op, ProductSpace, SpaceMismatchError, State

DEFAULT_TOL = 1e-8


class IntegrationError(RuntimeError):
    pass


class SteadyStateError(RuntimeError):
    pass


class Hamiltonian:
    """``H(t) = H0 + sum_k f_k(t) H_k`` with scalar coefficient functions.

    Calling the object returns the :class:`Op` at time ``t``; the integrator also
    uses the term structure directly so it never rebuilds dense matrices.
    """

    def __init__(self, static: Op, terms: Sequence[tuple[Callable[[float], complex], Op]] = ()):
        self.static = static
        self.terms = tuple(terms)
        for _, op in self.terms:
            if op.space != static.space:
                raise SpaceMismatchError("Hamiltonian terms must share one space")

    @property
    def space(self) -> ProductSpace:
        return self.static.space

    @property
    def is_constant(self) -> bool:
        return not self.terms

    def __call__(self, t: float) -> Op:
        m = self.static.matrix.copy()
        for f, op in self.terms:
            c = f(t)
            if c != 0:
                m = m + c * op.matrix
        return Op(self.space, m)

    def __add__(self, other):
        if isinstance(other, Hamiltonian):
            return Hamiltonian(self.static + other.static, self.terms + other.terms)
        if isinstance(other, Op):
            return Hamiltonian(self.static + other, self.terms)
        return NotImplemented

    __radd__ = __add__

    def __mul__(self, scalar):
        s = complex(scalar)
        return Hamiltonian(self.static * s, [(_scaled(f, s), op) for f, op in self.terms])

    __rmul__ = __mul__

    def embed(self, space: ProductSpace) -> "Hamiltonian":
        return Hamiltonian(self.static.embed(space), [(f, op.embed(space)) for f, op in self.terms])


def _scaled(f, s):
    return lambda t: s * f(t)


def as_hamiltonian(h) -> Hamiltonian | Callable[[float], Op]:
    if isinstance(h, Hamiltonian):
        return h
    if isinstance(h, Op):
        return Hamiltonian(h)
    if callable(h):
        return h
    raise TypeError(f"cannot interpret {type(h).__name__} as a Hamiltonian")


@dataclass(frozen=True)
class MasterEq:
    space: ProductSpace
    hamiltonian: object
    collapse: tuple = ()
    thermal: tuple = ()
    cross: tuple = ()

    def __post_init__(self):
        h = as_hamiltonian(self.hamiltonian)
        object.__setattr__(self, "hamiltonian", h)
        if isinstance(h, Hamiltonian) and h.space != self.space:
            raise SpaceMismatchError("Hamiltonian space differs from master-equation space")

        def clean(entries, width):
            kept = []
            for e in entries:
                rate = float(e[0])
                if rate < 0 or not math.isfinite(rate):
                    raise ValueError(f"dissipator rates must be finite and >= 0, got {rate}")
                for op in e[1:width]:
                    if op.space != self.space:
                        raise SpaceMismatchError("dissipator operator on a different space")
                if rate > 0:
                    kept.append((rate,) + tuple(e[1:width]))
            return tuple(kept)

        object.__setattr__(self, "collapse", clean(self.collapse, 2))
        object.__setattr__(self, "thermal", clean(self.thermal, 2))
        object.__setattr__(self, "cross", clean(self.cross, 3))

    @property
    def is_time_independent(self) -> bool:
        h = self.hamiltonian
        return isinstance(h, Hamiltonian) and h.is_constant

    def hamiltonian_at(self, t: float) -> Op:
        return self.hamiltonian(t)

    def apply(self, rho: np.ndarray, t: float = 0.0) -> np.ndarray:
        """Generator applied to a matrix: returns drho/dt (dense reference path)."""
        H = self.hamiltonian_at(t).matrix
        out = -1j * (H @ rho - rho @ H)
        for rate, L in self.collapse + self.thermal:
            out += rate * _d2(L.matrix, L.matrix, rho)
        for rate, A, B in self.cross:
            out += rate * (_d2(A.matrix, B.matrix, rho) + _d2(B.matrix, A.matrix, rho))
        return out


def _d2(A, B, rho):
    AB = A.conj().T @ B
    return A @ rho @ B.conj().T - 0.5 * (AB @ rho + rho @ AB)


def dissipator(L: Op, rho: np.ndarray) -> np.ndarray:
    return _d2(L.matrix, L.matrix, rho)


def cross_dissipator(A: Op, B: Op, rho: np.ndarray) -> np.ndarray:
    """``D2[A, B] rho = A rho B^+ - {A^+ B, rho}/2``."""
    return _d2(A.matrix, B.matrix, rho)


class _Kernel:
    """Sparse right-hand side of the vectorized master equation."""

    def __init__(self, meq: MasterEq):
        self.dim = meq.space.dim
        anti = np.zeros((self.dim, self.dim), dtype=complex)
        jumps = []
        for rate, L in meq.collapse + meq.thermal:
            M = L.matrix
            anti += rate * (M.conj().T @ M)
            s = sp.csr_matrix(M)
            jumps.append((rate, s, s))
        for rate, A, B in meq.cross:
            a, b = A.matrix, B.matrix
            anti += rate * (a.conj().T @ b + b.conj().T @ a)
            sa, sb = sp.csr_matrix(a), sp.csr_matrix(b)
            jumps.append((rate, sa, sb))
            jumps.append((rate, sb, sa))
        self.jumps = jumps
        h = meq.hamiltonian
        if isinstance(h, Hamiltonian):
            self.h_static = sp.csr_matrix(h.static.matrix - 0.5j * anti)
            self.h_terms = [(f, sp.csr_matrix(op.matrix)) for f, op in h.terms]
            self.h_call = None
        else:
            self.h_static = sp.csr_matrix(-0.5j * anti)
            self.h_terms = []
            self.h_call = h

    def heff_apply(self, t, x):
        y = self.h_static @ x
        for f, m in self.h_terms:
            c = f(t)
            if c != 0:
                y = y + c * (m @ x)
        if self.h_call is not None:
            y = y + self.h_call(t).matrix @ x
        return y

    def __call__(self, t, y):
        rho = y.reshape(self.dim, self.dim)
        rho_h = rho.conj().T
        # rho H_eff^+ = (H_eff rho^+)^+
        out = -1j * (self.heff_apply(t, rho) - self.heff_apply(t, rho_h).conj().T)
        for rate, J, K in self.jumps:
            out = out + rate * (J @ (K @ rho_h).conj().T)
        return np.asarray(out).ravel()


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray | None
    records: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    space: ProductSpace | None = None
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        if self.states is not None:
            return self.states[-1]
        return self.meta["final_state"]

    def final_state(self) -> State:
        return State(self.space, self.final, "dm", validate=False)

    def expect(self, op: Op) -> np.ndarray:
        if self.states is None:
            raise ValueError("trajectory was run without stored states; pass the operator as an e_op")
        if op.space != self.space:
            raise SpaceMismatchError("operator and trajectory live on different spaces")
        return np.einsum("tij,ji->t", self.states, op.matrix)

    def check_invariants(self, tol: float = DEFAULT_TOL) -> dict:
        """Worst trace, Hermiticity and positivity deviations over all samples."""
        d = self.diagnostics
        return {
            "trace": float(np.max(d["trace_error"])),
            "hermiticity": float(np.max(d["hermiticity_error"])),
            "min_eigenvalue": float(np.min(d["min_eigenvalue"])) if "min_eigenvalue" in d else float("nan"),
            "trace_ok": bool(np.max(d["trace_error"]) < 10 * tol),
            "hermiticity_ok": bool(np.max(d["hermiticity_error"]) < 1e-9),
            "positivity_ok": bool(np.min(d.get("min_eigenvalue", [0.0])) >= -1e-7),
        }

    def to_csv(self, path, time_unit: str = "s"):
        scale = {"s": 1.0, "us": 1e6, "ns": 1e9}[time_unit]
        names = list(self.records)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = [f"t_{time_unit}"]
            for n in names:
                header += [f"re_{n}", f"im_{n}"]
            w.writerow(header)
            for i, t in enumerate(self.times):
                row = [repr(float(t * scale))]
                for n in names:
                    v = complex(self.records[n][i])
                    row += [repr(v.real), repr(v.imag)]
                w.writerow(row)

    def write_sidecar(self, path, **extra):
        meta = {k: v for k, v in self.meta.items() if k != "final_state"}
        meta.update(extra)
        with open(path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, complex):
        return [o.real, o.imag]
    return str(o)


def _rho_from(rho0, space: ProductSpace) -> np.ndarray:
    if isinstance(rho0, State):
        if rho0.space != space:
            raise SpaceMismatchError("initial state lives on a different space")
        return np.array(rho0.dm(), dtype=complex)
    rho = np.asarray(rho0, dtype=complex)
    if rho.shape == (space.dim,):
        rho = np.outer(rho, rho.conj())
    State(space, rho, "dm")  # validates
    return rho.copy()


def evolve(meq: MasterEq, rho0, t_span: tuple[float, float], tol: float = DEFAULT_TOL,
           t_eval: Sequence[float] | None = None, e_ops: Mapping[str, Op] | None = None,
           store_states: bool = True, breakpoints: Sequence[float] = (),
           check_positivity: bool = True, max_step: float = np.inf,
           max_steps: int = 5_000_000) -> Trajectory:
    """Integrate the master equation with an adaptive 8(5,3) Runge-Kutta pair.

    ``breakpoints`` are times where the Hamiltonian is discontinuous; the
    integrator restarts there instead of stepping across them.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    if not t1 > t0:
        raise ValueError(f"t_span must be increasing, got {t_span}")
    rho = _rho_from(rho0, meq.space)
    dim = meq.space.dim
    if t_eval is None:
        t_eval = np.linspace(t0, t1, 201)
    t_eval = np.asarray(t_eval, dtype=float)
    if np.any(np.diff(t_eval) <= 0) or t_eval[0] < t0 or t_eval[-1] > t1 * (1 + 1e-15) + 1e-300:
        raise ValueError("t_eval must be strictly increasing and inside t_span")
    e_ops = dict(e_ops or {})
    for name, op in e_ops.items():
        if op.space != meq.space:
            raise SpaceMismatchError(f"e_op {name!r} lives on a different space")
    e_mats = {name: np.ascontiguousarray(op.matrix.T) for name, op in e_ops.items()}

    kernel = _Kernel(meq)
    cuts = sorted({t0, t1, *[b for b in breakpoints if t0 < b < t1]})
    n = len(t_eval)
    states = np.empty((n, dim, dim), dtype=complex) if store_states else None
    records = {name: np.empty(n, dtype=complex) for name in e_mats}
    trace_err = np.empty(n)
    herm_err = np.empty(n)
    min_eig = np.empty(n) if check_positivity else None
    atol = tol * 1e-2

    def sample(i, r):
        if states is not None:
            states[i] = r
        for name, m in e_mats.items():
            records[name][i] = np.sum(r * m)
        trace_err[i] = abs(np.trace(r) - 1.0)
        herm_err[i] = np.max(np.abs(r - r.conj().T))
        if min_eig is not None:
            min_eig[i] = np.linalg.eigvalsh(0.5 * (r + r.conj().T))[0]

    i = 0
    while i < n and t_eval[i] <= t0:
        sample(i, rho)
        i += 1
    y = rho.ravel()
    n_steps = 0
    for a, b in zip(cuts[:-1], cuts[1:]):
        solver = DOP853(kernel, a, y, b, rtol=tol, atol=atol, max_step=max_step)
        while solver.status == "running":
            msg = solver.step()
            n_steps += 1
            if solver.status == "failed":
                raise IntegrationError(f"integration failed at t={solver.t:.6g} s: {msg} "
                                       "(step size underflow; problem too stiff for the tolerance)")
            if not np.all(np.isfinite(solver.y)):
                raise IntegrationError(f"non-finite state at t={solver.t:.6g} s")
            if n_steps > max_steps:
                raise IntegrationError(f"step budget of {max_steps} exhausted at t={solver.t:.6g} s")
            if i < n and t_eval[i] <= solver.t:
                dense = solver.dense_output()
                while i < n and t_eval[i] <= solver.t:
                    sample(i, dense(t_eval[i]).reshape(dim, dim))
                    i += 1
        y = solver.y
    while i < n:
        sample(i, y.reshape(dim, dim))
        i += 1

    diag = {"trace_error": trace_err, "hermiticity_error": herm_err}
    if min_eig is not None:
        diag["min_eigenvalue"] = min_eig
    return Trajectory(times=t_eval, states=states, records=records, diagnostics=diag,
                      space=meq.space,
                      meta={"tol": tol, "steps": n_steps, "t_span": [t0, t1],
                            "final_state": y.reshape(dim, dim).copy()})


def liouvillian(meq: MasterEq, t: float = 0.0) -> np.ndarray:
    """Dense superoperator acting on row-major ``rho.ravel()``."""
    d = meq.space.dim
    eye = np.eye(d)
    H = meq.hamiltonian_at(t).matrix
    Lv = -1j * (np.kron(H, eye) - np.kron(eye, H.T))

    def d2(A, B):
        AB = A.conj().T @ B
        return np.kron(A, B.conj()) - 0.5 * (np.kron(AB, eye) + np.kron(eye, AB.T))

    for rate, L in meq.collapse + meq.thermal:
        Lv += rate * d2(L.matrix, L.matrix)
    for rate, A, B in meq.cross:
        Lv += rate * (d2(A.matrix, B.matrix) + d2(B.matrix, A.matrix))
    return Lv


def steady_state(meq: MasterEq, degeneracy_tol: float = 1e-9) -> State:
    """Unique stationary state from the null space of the dense Liouvillian."""
    if not meq.is_time_independent:
        raise ValueError("steady_state needs a time-independent Hamiltonian")
    if not (meq.collapse or meq.thermal or meq.cross):
        raise ValueError("steady_state needs at least one dissipator")
    d = meq.space.dim
    Lv = liouvillian(meq)
    scale = np.linalg.norm(Lv, 2)
    _, s, vh = np.linalg.svd(Lv)
    if s[-2] < degeneracy_tol * scale:
        raise SteadyStateError(f"non-unique steady state: two singular values below "
                               f"{degeneracy_tol:g} x |L| ({s[-2] / scale:.3g}, {s[-1] / scale:.3g})")
    rho = vh[-1].conj().reshape(d, d)
    rho = rho / np.trace(rho)
    rho = 0.5 * (rho + rho.conj().T)
    resid = np.linalg.norm(Lv @ rho.ravel()) / scale
    if resid > 1e-10:
        raise SteadyStateError(f"steady-state residual {resid:.3g} exceeds 1e-10 (relative)")
    return State(meq.space, rho, "dm")


def rabi_from_power(n_bar: float, gamma: float, omega_alpha: float, omega_w: float) -> float:
    """Rabi rate of a waveguide drive carrying ``n_bar`` photons per ``1/gamma``."""
    if n_bar < 0:
        raise ValueError("n_bar must be >= 0")
    power = gamma * n_bar
    return 2.0 * math.sqrt(2.0 * power * gamma * omega_alpha / omega_w)


def output_operator(terms: Sequence[tuple[float, float, Op]]) -> Op:
    """``sum_k exp(i phase_k) sqrt(rate_k / 2) op_k``."""
    if not terms:
        raise ValueError("need at least one output term")
    out = None
    for phase, rate, op in terms:
        piece = op * (np.exp(1j * phase) * math.sqrt(rate / 2.0))
        out = piece if out is None else out + piece
    return out


def output_amplitude(traj: Trajectory, terms: Sequence[tuple[float, float, Op]], a_in=0.0) -> np.ndarray:
    """``<a_out>(t) = a_in(t) + sum_k exp(i phase_k) sqrt(rate_k/2) <op_k>(t)``."""
    op = output_operator(terms)
    a_in = a_in(traj.times) if callable(a_in) else a_in
    return a_in + traj.expect(op)


def output_power(traj: Trajectory, terms: Sequence[tuple[float, float, Op]]) -> np.ndarray:
    """``<a_out^+ a_out>(t)`` for vacuum input."""
    op = output_operator(terms)
    return traj.expect(op.dag() @ op).real
