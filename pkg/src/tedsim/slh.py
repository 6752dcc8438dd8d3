"""SLH network algebra with scalar scattering matrices.

A component is ``(S, L, H)``: a unitary ``P x P`` scattering matrix of complex
numbers, ``P`` coupling operators, and a Hamiltonian. Components without internal
degrees of freedom (delays, the circulator, identities) carry no space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .fock import Op, ProductSpace, SpaceMismatchError, lowering, transition_part
from .lindblad import Hamiltonian, MasterEq
from .ted import EffectiveTed, ted_dissipators, ted_hamiltonian

UNITARY_TOL = 1e-12
FEEDBACK_TOL = 1e-10


class SlhError(ValueError):
    pass


def _h_embed(H, space):
    if H is None:
        return None
    return H.embed(space)


@dataclass(frozen=True)
class SlhTriple:
    S: np.ndarray
    L: tuple
    H: object = None
    space: ProductSpace | None = None

    def __post_init__(self):
        S = np.array(self.S, dtype=complex, ndmin=2)
        if S.shape[0] != S.shape[1]:
            raise SlhError("scattering matrix must be square")
        if not np.allclose(S @ S.conj().T, np.eye(len(S)), atol=UNITARY_TOL, rtol=0):
            raise SlhError("scattering matrix is not unitary")
        S.setflags(write=False)
        object.__setattr__(self, "S", S)
        L = tuple(self.L)
        if len(L) != len(S):
            raise SlhError(f"{len(S)} ports but {len(L)} coupling operators")
        for op in L:
            if op is not None and op.space != self.space:
                raise SpaceMismatchError("coupling operator on a different space")
        object.__setattr__(self, "L", L)
        H = self.H
        if isinstance(H, Op):
            H = Hamiltonian(H)
        if H is not None:
            if H.space != self.space:
                raise SpaceMismatchError("Hamiltonian on a different space")
            if not H.static.is_hermitian(1e-9 * max(1.0, np.abs(H.static.matrix).max())):
                raise SlhError("Hamiltonian is not Hermitian")
        object.__setattr__(self, "H", H)

    @property
    def ports(self) -> int:
        return len(self.S)

    def embed(self, space: ProductSpace | None) -> "SlhTriple":
        if space is None or space == self.space:
            return self
        L = tuple(None if op is None else op.embed(space) for op in self.L)
        return SlhTriple(self.S, L, _h_embed(self.H, space), space)

    def L_dense(self) -> list[Op | None]:
        return list(self.L)

    def hamiltonian_at(self, t: float = 0.0) -> Op | None:
        return None if self.H is None else self.H(t)

    def master_eq(self, thermal: Sequence = ()) -> MasterEq:
        """Master equation with one unit-rate dissipator per port."""
        if self.space is None:
            raise SlhError("component has no internal degrees of freedom")
        H = self.H if self.H is not None else Hamiltonian(Op(self.space, np.zeros((self.space.dim,) * 2)))
        return MasterEq(self.space, H, collapse=[(1.0, op) for op in self.L if op is not None], thermal=thermal)


def _joint_space(a: SlhTriple, b: SlhTriple) -> ProductSpace | None:
    if a.space is None:
        return b.space
    if b.space is None or a.space == b.space:
        return a.space
    if a.space.contains(b.space):
        return a.space
    if b.space.contains(a.space):
        return b.space
    try:
        return a.space.join(b.space)
    except ValueError as exc:
        raise SlhError(f"cannot combine component spaces: {exc}") from None


def _add_h(h1, h2):
    if h1 is None:
        return h2
    if h2 is None:
        return h1
    if isinstance(h1, Op):
        h1 = Hamiltonian(h1)
    return h1 + h2


def _add_op(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _scale(op, c):
    if op is None or c == 0:
        return None
    return op * c


def identity_component(n: int = 1) -> SlhTriple:
    return SlhTriple(np.eye(n), (None,) * n)


def delay(phi: float) -> SlhTriple:
    return SlhTriple([[np.exp(1j * phi)]], (None,))


def circulator(eta: float) -> SlhTriple:
    """Lossy three-port circulator (port p -> p+1) with three loss ports."""
    if not 0 <= eta <= 1:
        raise SlhError(f"eta must lie in [0, 1], got {eta}")
    eb = math.sqrt(1 - eta ** 2)
    S = np.array([
        [0, 0, eb, -eta, 0, 0],
        [eb, 0, 0, 0, -eta, 0],
        [0, eb, 0, 0, 0, -eta],
        [0, 0, eta, eb, 0, 0],
        [eta, 0, 0, 0, eb, 0],
        [0, eta, 0, 0, 0, eb],
    ], dtype=float)
    return SlhTriple(S, (None,) * 6)


def ted_component(eff: EffectiveTed, space: ProductSpace, d: str = "d", w: str = "w",
                  two_port: bool = False) -> SlhTriple:
    """One-port TED ``(1, sqrt(gamma) w, H)``, or the two-port form with ``sqrt(gamma/2)`` per port."""
    H = ted_hamiltonian(eff, space, d=d, w=w)
    ww = lowering(space, w)
    if two_port:
        half = ww * math.sqrt(eff.gamma / 2)
        return SlhTriple(np.eye(2), (half, half), H, space)
    return SlhTriple([[1.0]], (ww * math.sqrt(eff.gamma),), H, space)


def concatenate(c1: SlhTriple, c2: SlhTriple) -> SlhTriple:
    space = _joint_space(c1, c2)
    a, b = c1.embed(space), c2.embed(space)
    S = np.zeros((a.ports + b.ports,) * 2, dtype=complex)
    S[:a.ports, :a.ports] = a.S
    S[a.ports:, a.ports:] = b.S
    return SlhTriple(S, a.L + b.L, _add_h(a.H, b.H), space)


def concat(*cs: SlhTriple) -> SlhTriple:
    out = cs[0]
    for c in cs[1:]:
        out = concatenate(out, c)
    return out


def _im(x: Op | None) -> Op | None:
    """``(x - x^+) / 2i``."""
    if x is None:
        return None
    return (x - x.dag()) * (1 / 2j)


def cascade(c2: SlhTriple, c1: SlhTriple) -> SlhTriple:
    """``c2 <| c1``: outputs of ``c1`` feed the inputs of ``c2``."""
    if c1.ports != c2.ports:
        raise SlhError(f"cascade needs equal port counts, got {c2.ports} and {c1.ports}")
    space = _joint_space(c1, c2)
    a, b = c1.embed(space), c2.embed(space)
    S = b.S @ a.S
    L = []
    for i in range(b.ports):
        acc = b.L[i]
        for j in range(a.ports):
            acc = _add_op(acc, _scale(a.L[j], b.S[i, j]))
        L.append(acc)
    # (L2^+ S2 L1 - h.c.) / 2i
    cross = None
    for i in range(b.ports):
        if b.L[i] is None:
            continue
        for j in range(a.ports):
            if a.L[j] is None or b.S[i, j] == 0:
                continue
            cross = _add_op(cross, (b.L[i].dag() @ a.L[j]) * b.S[i, j])
    H = _add_h(_add_h(a.H, b.H), _im(cross))
    return SlhTriple(S, tuple(L), H, space)


def series(*cs: SlhTriple) -> SlhTriple:
    """``cs[0] <| cs[1] <| ... <| cs[-1]``."""
    out = cs[-1]
    for c in reversed(cs[:-1]):
        out = cascade(c, out)
    return out


def feedback(c: SlhTriple, out_port: int, in_port: int) -> SlhTriple:
    """Feed output ``out_port`` back into input ``in_port`` (1-based port numbers)."""
    P = c.ports
    if P < 2:
        raise SlhError("feedback needs at least two ports")
    x, y = out_port - 1, in_port - 1
    if not (0 <= x < P and 0 <= y < P):
        raise SlhError(f"ports must lie in 1..{P}")
    sxy = c.S[x, y]
    if abs(1 - sxy) <= FEEDBACK_TOL:
        raise SlhError(f"singular feedback: S[{out_port},{in_port}] = 1 (algebraic loop)")
    k = 1 / (1 - sxy)
    rows = [i for i in range(P) if i != x]
    cols = [j for j in range(P) if j != y]
    S = c.S[np.ix_(rows, cols)] + k * np.outer(c.S[rows, y], c.S[x, cols])
    L = tuple(_add_op(c.L[i], _scale(c.L[x], k * c.S[i, y])) for i in rows)
    cross = None
    if c.L[x] is not None:
        for j in range(P):
            if c.L[j] is not None and c.S[j, y] != 0:
                cross = _add_op(cross, (c.L[j].dag() @ c.L[x]) * (c.S[j, y] * k))
    return SlhTriple(S, L, _add_h(c.H, _im(cross)), c.space)


# --- reduction to the master-equation normal form -------------------------------------


def _coefficients(L: Op, channels: Sequence[Op]) -> np.ndarray:
    X = np.stack([ch.matrix.ravel() for ch in channels], axis=1)
    y = L.matrix.ravel()
    c, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = np.linalg.norm(X @ c - y)
    if resid > 1e-10 * max(1.0, np.linalg.norm(y)):
        raise SlhError("coupling operator is not a combination of the given channels")
    return c


def normal_form(triple: SlhTriple, channels: Sequence[Op], thermal: Sequence = ()) -> MasterEq:
    """Express the port dissipators as local plus pairwise cross terms on ``channels``."""
    coeffs = np.array([_coefficients(op, channels) if op is not None else np.zeros(len(channels))
                       for op in triple.L])
    collapse = [(float(np.sum(np.abs(coeffs[:, i]) ** 2)), ch) for i, ch in enumerate(channels)]
    cross = []
    for i in range(len(channels)):
        for j in range(i + 1, len(channels)):
            z = np.sum(coeffs[:, i] * coeffs[:, j].conj())
            if abs(z) > 0:
                cross.append((float(abs(z)), channels[i], channels[j] * np.exp(-1j * np.angle(z))))
    H = triple.H if triple.H is not None else Hamiltonian(Op(triple.space, np.zeros((triple.space.dim,) * 2)))
    return MasterEq(triple.space, H, collapse=collapse, thermal=thermal, cross=cross)


# --- the two-TED network --------------------------------------------------------------


@dataclass(frozen=True)
class NetworkSpec:
    sted: EffectiveTed
    mted: EffectiveTed
    eta: float = 0.0
    phi_s: float = 0.0
    phi_m: float = 0.0
    dims_s: tuple = (3, 4)
    dims_m: tuple = (3, 4)
    thermal: bool = True

    def __post_init__(self):
        if not 0 <= self.eta <= 1:
            raise SlhError(f"eta must lie in [0, 1], got {self.eta}")

    @property
    def space(self) -> ProductSpace:
        return ProductSpace.of(("ds", self.dims_s[0]), ("ws", self.dims_s[1]),
                               ("dm", self.dims_m[0]), ("wm", self.dims_m[1]))

    @property
    def phase(self) -> float:
        return self.phi_s + self.phi_m


class PitchDetectNetwork(NamedTuple):
    meq: MasterEq
    a_out: Op
    b_out: Op
    a_out01: Op
    triple: SlhTriple


def pitch_detect_triple(spec: NetworkSpec) -> SlhTriple:
    space = spec.space
    sted = ted_component(spec.sted, space, d="ds", w="ws")
    mted = ted_component(spec.mted, space, d="dm", w="wm")
    delays = concat(delay(spec.phi_s), delay(spec.phi_m), identity_component(4))
    net = series(
        concat(identity_component(1), mted, identity_component(4)),
        delays,
        circulator(spec.eta),
        delays,
        concat(sted, identity_component(5)),
    )
    # close 1 -> 1, then the original port 2 (now port 1) -> itself
    return feedback(feedback(net, 1, 1), 1, 1)


def build_pitch_detect(spec: NetworkSpec) -> PitchDetectNetwork:
    space = spec.space
    triple = pitch_detect_triple(spec)
    ws, wm = lowering(space, "ws"), lowering(space, "wm")
    thermal = []
    extra = []
    if spec.thermal:
        for eff, w in ((spec.sted, "ws"), (spec.mted, "wm")):
            if eff.n_th > 0:
                _, th = ted_dissipators(eff, space, w=w)
                # the network supplies the vacuum part; add only the thermal excess
                extra.append((eff.gamma * eff.n_th, lowering(space, w)))
                thermal.extend(th)
    meq = normal_form(triple, [ws, wm], thermal=thermal)
    if extra:
        meq = MasterEq(space, meq.hamiltonian, collapse=list(meq.collapse) + extra,
                       thermal=meq.thermal, cross=meq.cross)
    ph = np.exp(1j * spec.phase)
    src = ws * (ph * math.sqrt(spec.sted.gamma / 2))
    a_out = src + wm * math.sqrt(spec.mted.gamma / 2)
    a_out01 = src + transition_part(wm, "wm", 1, 0) * math.sqrt(spec.mted.gamma / 2)
    b_out = transition_part(wm, "wm", 2, 1) * math.sqrt(spec.mted.gamma / 2) if spec.dims_m[1] > 2 \
        else wm * 0.0
    return PitchDetectNetwork(meq, a_out, b_out, a_out01, triple)
