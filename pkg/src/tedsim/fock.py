"""Truncated multi-mode bosonic spaces and dense operators on them.

Every operator carries the :class:`ProductSpace` it acts on. Operators built on
different spaces refuse to combine, which catches most mode-ordering mistakes
at construction time rather than as silently wrong physics.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce
from typing import Iterable, Mapping, Sequence

import numpy as np

HERMITIAN_TOL = 1e-12
KET_NORM_TOL = 1e-10
DM_TRACE_TOL = 1e-10
DM_MIN_EIG = -1e-8


class SpaceMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModeSpec:
    label: str
    dim: int

    def __post_init__(self):
        if int(self.dim) != self.dim or self.dim < 2:
            raise ValueError(f"mode {self.label!r}: dim must be an integer >= 2, got {self.dim}")


@dataclass(frozen=True)
class ProductSpace:
    """Ordered tensor product of truncated bosonic modes."""

    modes: tuple[ModeSpec, ...]

    def __post_init__(self):
        labels = [m.label for m in self.modes]
        if len(set(labels)) != len(labels):
            raise ValueError(f"duplicate mode labels in {labels}")
        if not self.modes:
            raise ValueError("a ProductSpace needs at least one mode")

    @classmethod
    def of(cls, *pairs: tuple[str, int]) -> "ProductSpace":
        return cls(tuple(ModeSpec(label, dim) for label, dim in pairs))

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(m.label for m in self.modes)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(m.dim for m in self.modes)

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims))

    def index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise KeyError(f"unknown mode label {label!r}; space has {list(self.labels)}") from None

    def mode_dim(self, label: str) -> int:
        return self.modes[self.index(label)].dim

    def join(self, other: "ProductSpace") -> "ProductSpace":
        """Product of two spaces with disjoint labels (self first)."""
        clash = set(self.labels) & set(other.labels)
        if clash:
            raise SpaceMismatchError(f"cannot join spaces sharing labels {sorted(clash)}")
        return ProductSpace(self.modes + other.modes)

    def contains(self, other: "ProductSpace") -> bool:
        return all(label in self.labels and self.mode_dim(label) == m.dim
                   for label, m in zip(other.labels, other.modes))

    def basis_index(self, levels: Mapping[str, int]) -> int:
        """Flat index of the product basis state; unspecified modes are in |0>."""
        for label in levels:
            self.index(label)
        idx = [int(levels.get(m.label, 0)) for m in self.modes]
        for n, m in zip(idx, self.modes):
            if not 0 <= n < m.dim:
                raise ValueError(f"level {n} out of range for mode {m.label!r} (dim {m.dim})")
        return int(np.ravel_multi_index(idx, self.dims))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=complex, copy=True)
    a.setflags(write=False)
    return a


class Op:
    """Dense complex operator on a :class:`ProductSpace`.

    Supports ``+``, ``-``, scalar ``*``, operator product ``@`` and ``dag()``.
    The wrapped matrix is read-only.
    """

    __slots__ = ("space", "matrix")

    def __init__(self, space: ProductSpace, matrix, hermitian: bool = False):
        m = _readonly(matrix)
        if m.shape != (space.dim, space.dim):
            raise SpaceMismatchError(f"matrix shape {m.shape} does not match space dim {space.dim}")
        if hermitian and not np.allclose(m, m.conj().T, atol=HERMITIAN_TOL, rtol=0):
            raise ValueError("operator flagged Hermitian is not Hermitian to 1e-12")
        object.__setattr__(self, "space", space)
        object.__setattr__(self, "matrix", m)

    def __setattr__(self, name, value):
        raise AttributeError("Op is immutable")

    def __repr__(self):
        return f"Op(labels={self.space.labels}, dims={self.space.dims})"

    def _check(self, other: "Op"):
        if not isinstance(other, Op):
            return NotImplemented
        if other.space != self.space:
            raise SpaceMismatchError(f"operators on different spaces: {self.space.labels}{self.space.dims} "
                                     f"vs {other.space.labels}{other.space.dims}")
        return None

    def __add__(self, other):
        if isinstance(other, Op):
            self._check(other)
            return Op(self.space, self.matrix + other.matrix)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, Op):
            self._check(other)
            return Op(self.space, self.matrix - other.matrix)
        return NotImplemented

    def __neg__(self):
        return Op(self.space, -self.matrix)

    def __mul__(self, scalar):
        if isinstance(scalar, Op):
            raise TypeError("use @ for operator products")
        return Op(self.space, self.matrix * complex(scalar))

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return Op(self.space, self.matrix / complex(scalar))

    def __matmul__(self, other):
        if isinstance(other, Op):
            self._check(other)
            return Op(self.space, self.matrix @ other.matrix)
        return NotImplemented

    def dag(self) -> "Op":
        return Op(self.space, self.matrix.conj().T)

    def is_hermitian(self, tol: float = HERMITIAN_TOL) -> bool:
        return bool(np.max(np.abs(self.matrix - self.matrix.conj().T), initial=0.0) <= tol)

    def allclose(self, other: "Op", atol: float = 1e-12) -> bool:
        self._check(other)
        return bool(np.max(np.abs(self.matrix - other.matrix), initial=0.0) <= atol)

    def embed(self, space: ProductSpace) -> "Op":
        """Re-express this operator on a larger space containing all of its modes."""
        if space == self.space:
            return self
        if not space.contains(self.space):
            raise SpaceMismatchError(f"{self.space.labels} is not a subspace of {space.labels}")
        own = list(self.space.labels)
        extra = [m for m in space.modes if m.label not in own]
        extra_dim = int(np.prod([m.dim for m in extra])) if extra else 1
        full = np.kron(self.matrix, np.eye(extra_dim))
        # axes currently ordered (own..., extra...); permute to the target ordering
        current = own + [m.label for m in extra]
        cur_dims = [self.space.mode_dim(l) for l in own] + [m.dim for m in extra]
        n = len(current)
        t = full.reshape(cur_dims + cur_dims)
        perm = [current.index(l) for l in space.labels]
        t = t.transpose(perm + [p + n for p in perm])
        return Op(space, t.reshape(space.dim, space.dim))


def identity(space: ProductSpace) -> Op:
    return Op(space, np.eye(space.dim))


def zero(space: ProductSpace) -> Op:
    return Op(space, np.zeros((space.dim, space.dim)))


def _embed_local(space: ProductSpace, mode: str, local: np.ndarray) -> np.ndarray:
    k = space.index(mode)
    factors = [np.eye(m.dim) for m in space.modes]
    factors[k] = local
    return reduce(np.kron, factors)


def local_op(space: ProductSpace, mode: str, matrix) -> Op:
    """Embed a single-mode matrix acting on ``mode``."""
    m = np.asarray(matrix)
    n = space.mode_dim(mode)
    if m.shape != (n, n):
        raise ValueError(f"local matrix for {mode!r} must be {n}x{n}, got {m.shape}")
    return Op(space, _embed_local(space, mode, m))


def local_lowering(dim: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, dim, dtype=float)), k=1)


def lowering(space: ProductSpace, mode: str) -> Op:
    """Annihilation operator on ``mode``, identity on all other modes."""
    return Op(space, _embed_local(space, mode, local_lowering(space.mode_dim(mode))))


def raising(space: ProductSpace, mode: str) -> Op:
    return lowering(space, mode).dag()


def number(space: ProductSpace, mode: str) -> Op:
    n = space.mode_dim(mode)
    return Op(space, _embed_local(space, mode, np.diag(np.arange(n, dtype=float))))


def projector(space: ProductSpace, mode: str, level: int) -> Op:
    n = space.mode_dim(mode)
    if not 0 <= level < n:
        raise ValueError(f"level {level} out of range for mode {mode!r} (dim {n})")
    p = np.zeros((n, n))
    p[level, level] = 1.0
    return Op(space, _embed_local(space, mode, p))


def transition_part(op: Op, mode: str, from_level: int, to_level: int) -> Op:
    """Keep only the ``|to><from|`` element of the mode-local lowering operator.

    ``op`` must be the lowering operator of ``mode`` on its space. The retained
    element is ``sqrt(from_level)`` and ``to_level`` must equal ``from_level - 1``.
    """
    space = op.space
    n = space.mode_dim(mode)
    if not (0 <= to_level < n and 0 < from_level < n):
        raise ValueError(f"levels {from_level}->{to_level} out of range for mode {mode!r} (dim {n})")
    if to_level != from_level - 1:
        raise ValueError("a lowering operator only connects adjacent levels (to = from - 1)")
    if not op.allclose(lowering(space, mode)):
        raise ValueError(f"op is not the lowering operator of mode {mode!r}")
    local = np.zeros((n, n))
    local[to_level, from_level] = np.sqrt(from_level)
    return Op(space, _embed_local(space, mode, local))


class State:
    """Ket or density matrix on a :class:`ProductSpace`, validated on construction."""

    __slots__ = ("space", "kind", "data")

    def __init__(self, space: ProductSpace, data, kind: str | None = None, validate: bool = True):
        arr = _readonly(data)
        if kind is None:
            kind = "ket" if arr.ndim == 1 else "dm"
        if kind == "ket":
            if arr.shape != (space.dim,):
                raise SpaceMismatchError(f"ket shape {arr.shape} does not match space dim {space.dim}")
            if validate and abs(np.linalg.norm(arr) - 1.0) > KET_NORM_TOL:
                raise ValueError(f"ket norm {np.linalg.norm(arr)} is not 1")
        elif kind == "dm":
            if arr.shape != (space.dim, space.dim):
                raise SpaceMismatchError(f"density matrix shape {arr.shape} does not match space dim {space.dim}")
            if validate:
                _validate_dm(arr)
        else:
            raise ValueError(f"unknown state kind {kind!r}")
        object.__setattr__(self, "space", space)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "data", arr)

    def __setattr__(self, name, value):
        raise AttributeError("State is immutable")

    def dm(self) -> np.ndarray:
        if self.kind == "dm":
            return self.data
        return np.outer(self.data, self.data.conj())

    def to_dm(self) -> "State":
        return self if self.kind == "dm" else State(self.space, self.dm(), "dm")


def _validate_dm(rho: np.ndarray):
    herm = np.max(np.abs(rho - rho.conj().T))
    if herm > 1e-10:
        raise ValueError(f"density matrix is not Hermitian (max deviation {herm:.3g})")
    tr = np.trace(rho).real
    if abs(tr - 1.0) > DM_TRACE_TOL:
        raise ValueError(f"density matrix trace {tr} is not 1")
    ev = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min()
    if ev < DM_MIN_EIG:
        raise ValueError(f"density matrix has negative eigenvalue {ev:.3g}")


def basis_ket(space: ProductSpace, levels: Mapping[str, int] | None = None) -> State:
    v = np.zeros(space.dim, dtype=complex)
    v[space.basis_index(levels or {})] = 1.0
    return State(space, v, "ket")


def superposition(space: ProductSpace, amplitudes: Iterable[tuple[complex, Mapping[str, int]]]) -> State:
    """Normalized superposition of product basis states."""
    v = np.zeros(space.dim, dtype=complex)
    for amp, levels in amplitudes:
        v[space.basis_index(levels)] += amp
    v = v / np.linalg.norm(v)
    return State(space, v, "ket")


def mixture(states: Sequence[tuple[float, State]]) -> State:
    space = states[0][1].space
    rho = sum(p * s.dm() for p, s in states)
    return State(space, rho, "dm")


def expectation(state: State, op: Op) -> complex:
    """``Tr[rho op]`` for density matrices, ``<psi|op|psi>`` for kets."""
    if state.space != op.space:
        raise SpaceMismatchError(f"state on {state.space.labels}{state.space.dims}, "
                                 f"operator on {op.space.labels}{op.space.dims}")
    if state.kind == "ket":
        return complex(np.vdot(state.data, op.matrix @ state.data))
    return complex(np.sum(state.data * op.matrix.T))
