"""States and operators on truncated Fock spaces tensored with a three-level ancilla.

The simulation state is a complex array over (mode_0, ..., mode_k, ancilla)
with the ancilla always last and fixed to three levels |g>, |e>, |f>.
Operators are kept sparse; structured fast paths for diagonal and
single-mode operators live in the engine.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import expm as sparse_expm

ANCILLA_LEVELS = ("g", "e", "f")
ANCILLA_DIM = 3
G, E, F = 0, 1, 2

FLAG_TOL = 1e-10


class TruncationError(ValueError):
    """A coherent amplitude does not fit in the requested Fock truncation."""


class LayoutMismatchError(ValueError):
    """Operands were built against different system layouts."""


def truncation_guard(beta: complex) -> int:
    """Smallest truncation that comfortably holds |beta>: |b|^2 + 5|b| + 10."""
    b = abs(beta)
    return int(math.ceil(b * b + 5.0 * b + 10.0))


def default_truncation(alpha: float) -> int:
    """Fock truncation for modes that undergo coherent-state discrimination.

    Discrimination displaces the farthest cat component to 2*alpha, so the
    guard is evaluated there rather than at alpha itself.
    """
    return max(40, truncation_guard(2.0 * abs(alpha)))


def cat_truncation(alpha: float) -> int:
    """Fock truncation for modes that only ever hold cat states.

    Keeps the coherent tail below ~1e-9 for alpha <= 3: a = |alpha| gives
    a^2 + 7a + 10.
    """
    a = abs(alpha)
    return max(40, int(math.ceil(a * a + 7.0 * a + 10.0)))


@dataclass(frozen=True)
class ModeSpec:
    """A single bosonic mode truncated to Fock states 0..truncation-1."""

    truncation: int
    label: str = "m0"

    def __post_init__(self):
        if self.truncation < 2:
            raise ValueError(f"mode {self.label!r}: truncation must be >= 2")


@dataclass(frozen=True)
class Coupling:
    """Dispersive (cross-Kerr) rates of one ancilla level pair to one mode."""

    chi_f: float
    chi_e: float


@dataclass(frozen=True)
class SystemLayout:
    """Ordered modes plus the active three-level ancilla and its couplings.

    couplings maps mode label -> Coupling for the ancilla in use.  Only one
    ancilla factor is represented at a time; idle ancillas are assumed reset
    to |g> and factored out.
    """

    modes: tuple[ModeSpec, ...]
    couplings: Mapping[str, Coupling] = field(default_factory=dict)

    def __post_init__(self):
        labels = [m.label for m in self.modes]
        if len(set(labels)) != len(labels):
            raise ValueError("mode labels must be unique")
        for lbl, c in self.couplings.items():
            if lbl not in labels:
                raise ValueError(f"coupling references unknown mode {lbl!r}")
            if c.chi_f == 0.0:
                raise ValueError(f"coupling to mode {lbl!r} must have chi_f != 0")

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(m.truncation for m in self.modes) + (ANCILLA_DIM,)

    @property
    def dim(self) -> int:
        return int(np.prod(self.dims))

    def mode_index(self, label: str) -> int:
        for i, m in enumerate(self.modes):
            if m.label == label:
                return i
        raise KeyError(f"no mode labelled {label!r}")

    def mode(self, label: str) -> ModeSpec:
        return self.modes[self.mode_index(label)]

    def coupling(self, label: str) -> Coupling:
        try:
            return self.couplings[label]
        except KeyError:
            raise KeyError(f"no ancilla coupling declared for mode {label!r}") from None


def single_mode_layout(truncation: int, chi_f: float = 0.0, chi_e: float = 0.0,
                       label: str = "m0") -> SystemLayout:
    """Convenience layout: one mode, one ancilla."""
    couplings = {label: Coupling(chi_f, chi_e)} if chi_f != 0.0 else {}
    return SystemLayout(modes=(ModeSpec(truncation, label),), couplings=couplings)


class StateVector:
    """A pure state on the layout's product space with explicit norm tracking.

    Amplitudes are stored as a complex array of shape layout.dims; the state
    is allowed to be unnormalized (no-jump evolution shrinks the norm).
    """

    __slots__ = ("layout", "amps")

    def __init__(self, layout: SystemLayout, amps: np.ndarray):
        amps = np.asarray(amps, dtype=np.complex128)
        if amps.shape != layout.dims:
            if amps.size == layout.dim:
                amps = amps.reshape(layout.dims)
            else:
                raise LayoutMismatchError(
                    f"amplitude shape {amps.shape} does not match layout dims {layout.dims}")
        self.layout = layout
        self.amps = amps

    @property
    def norm2(self) -> float:
        return float(np.vdot(self.amps, self.amps).real)

    def copy(self) -> "StateVector":
        return StateVector(self.layout, self.amps.copy())

    def normalized(self) -> "StateVector":
        n2 = self.norm2
        if n2 <= 0.0:
            raise ValueError("cannot normalize a zero state")
        return StateVector(self.layout, self.amps / math.sqrt(n2))

    def flat(self) -> np.ndarray:
        return self.amps.reshape(-1)

    def overlap(self, other: "StateVector") -> complex:
        if other.layout.dims != self.layout.dims:
            raise LayoutMismatchError("overlap requires matching layouts")
        return complex(np.vdot(self.amps, other.amps))


def basis_state(layout: SystemLayout, occupations: Sequence[int], ancilla: int = G) -> StateVector:
    """|n_0, ..., n_k> tensor an ancilla level."""
    amps = np.zeros(layout.dims, dtype=np.complex128)
    amps[tuple(occupations) + (ancilla,)] = 1.0
    return StateVector(layout, amps)


def vacuum_state(layout: SystemLayout, ancilla: int = G) -> StateVector:
    return basis_state(layout, (0,) * len(layout.modes), ancilla)


def coherent_amplitudes(beta: complex, n_max: int) -> np.ndarray:
    """Fock coefficients e^{-|b|^2/2} b^n / sqrt(n!) for n < n_max, renormalized."""
    n = np.arange(n_max)
    log_fact = np.cumsum(np.concatenate(([0.0], np.log(np.arange(1, n_max)))))
    b = complex(beta)
    if b == 0:
        c = np.zeros(n_max, dtype=np.complex128)
        c[0] = 1.0
        return c
    log_mag = -0.5 * abs(b) ** 2 + n * math.log(abs(b)) - 0.5 * log_fact
    phase = np.angle(b) * n
    c = np.exp(log_mag + 1j * phase)
    return c / math.sqrt(float(np.sum(np.abs(c) ** 2)))


def coherent_state(space: ModeSpec, beta: complex, *, strict: bool = True) -> np.ndarray:
    """Single-mode coherent state |beta> as a length-N coefficient vector.

    Raises TruncationError when the truncation guard is violated and strict
    is set; otherwise warns.  The renormalization correction is < 1e-8
    whenever the guard holds.
    """
    need = 0 if beta == 0 else truncation_guard(beta)
    if need > space.truncation:
        msg = (f"coherent amplitude {beta} needs truncation >= {need}, "
               f"mode {space.label!r} has {space.truncation}")
        if strict:
            raise TruncationError(msg)
        warnings.warn(msg, stacklevel=2)
    return coherent_amplitudes(beta, space.truncation)


def cat_amplitudes(space: ModeSpec, alpha: complex, which: str, *, strict: bool = True) -> np.ndarray:
    """Four-legged cat states as single-mode coefficient vectors.

    which is one of '0', '1', '+', '-':
      |0_c> ~ |a> + |-a> + |ia> + |-ia>   (support n = 0 mod 4)
      |1_c> ~ |a> + |-a> - |ia> - |-ia>   (support n = 2 mod 4)
      |+_c> ~ |a> + |-a>                  (support even n)
      |-_c> ~ |ia> + |-ia>
    """
    a = complex(alpha)
    legs = {
        "0": ((a, 1.0), (-a, 1.0), (1j * a, 1.0), (-1j * a, 1.0)),
        "1": ((a, 1.0), (-a, 1.0), (1j * a, -1.0), (-1j * a, -1.0)),
        "+": ((a, 1.0), (-a, 1.0)),
        "-": ((1j * a, 1.0), (-1j * a, 1.0)),
    }
    try:
        terms = legs[which]
    except KeyError:
        raise ValueError(f"unknown cat label {which!r}; expected one of 0,1,+,-") from None
    vec = np.zeros(space.truncation, dtype=np.complex128)
    for beta, w in terms:
        vec += w * coherent_state(space, beta, strict=strict)
    # scrub amplitude outside the exact Fock support class so downstream
    # parity arguments hold to numerical precision
    n = np.arange(space.truncation)
    if which == "0":
        vec[n % 4 != 0] = 0.0
    elif which == "1":
        vec[n % 4 != 2] = 0.0
    else:
        vec[n % 2 == 1] = 0.0
    return vec / math.sqrt(float(np.sum(np.abs(vec) ** 2)))


def cat_state(space: ModeSpec, alpha: complex, which: str) -> np.ndarray:
    """Alias of cat_amplitudes with the strict truncation guard."""
    return cat_amplitudes(space, alpha, which, strict=True)


def product_state(layout: SystemLayout, mode_vectors: Sequence[np.ndarray],
                  ancilla: int = G) -> StateVector:
    """Tensor product of per-mode coefficient vectors with an ancilla level."""
    if len(mode_vectors) != len(layout.modes):
        raise LayoutMismatchError("need one coefficient vector per mode")
    acc = np.asarray(mode_vectors[0], dtype=np.complex128)
    for v in mode_vectors[1:]:
        acc = np.multiply.outer(acc, np.asarray(v, dtype=np.complex128))
    anc = np.zeros(ANCILLA_DIM, dtype=np.complex128)
    anc[ancilla] = 1.0
    return StateVector(layout, np.multiply.outer(acc, anc))


class LinearOp:
    """A sparse operator on the full layout space with verified flags."""

    __slots__ = ("layout", "matrix", "unitary", "hermitian", "diagonal")

    def __init__(self, layout: SystemLayout, matrix, *, unitary: bool = False,
                 hermitian: bool = False, diagonal: bool = False):
        self.layout = layout
        self.matrix = sp.csr_matrix(matrix)
        if self.matrix.shape != (layout.dim, layout.dim):
            raise LayoutMismatchError(
                f"matrix shape {self.matrix.shape} does not match layout dim {layout.dim}")
        self.unitary = unitary
        self.hermitian = hermitian
        self.diagonal = diagonal
        self.validate_flags()

    def validate_flags(self, tol: float = FLAG_TOL):
        m = self.matrix
        if self.unitary:
            dev = abs((m.getH() @ m) - sp.identity(m.shape[0], format="csr"))
            if dev.count_nonzero() and dev.max() > tol:
                raise ValueError(f"unitary flag violated: max deviation {dev.max():.3e}")
        if self.hermitian:
            dev = abs(m - m.getH())
            if dev.count_nonzero() and dev.max() > tol:
                raise ValueError(f"hermitian flag violated: max deviation {dev.max():.3e}")
        if self.diagonal:
            off = m - sp.diags(m.diagonal())
            if off.count_nonzero() and abs(off).max() > tol:
                raise ValueError("diagonal flag violated: off-diagonal entries present")

    def apply(self, psi: StateVector) -> StateVector:
        if psi.layout.dims != self.layout.dims:
            raise LayoutMismatchError("operator and state layouts differ")
        out = self.matrix @ psi.flat()
        return StateVector(psi.layout, out.reshape(psi.layout.dims))

    def dagger(self) -> "LinearOp":
        return LinearOp(self.layout, self.matrix.getH(), unitary=self.unitary,
                        hermitian=self.hermitian, diagonal=self.diagonal)


def destroy(n_max: int) -> sp.csr_matrix:
    """Single-mode annihilation operator a on an n_max-dim truncation."""
    return sp.diags(np.sqrt(np.arange(1, n_max)), 1, format="csr")


def number_op(n_max: int) -> sp.csr_matrix:
    return sp.diags(np.arange(n_max, dtype=float), 0, format="csr")


def parity_projectors(n_max: int) -> tuple[sp.csr_matrix, sp.csr_matrix]:
    """(Pi_even, Pi_odd) on a single mode."""
    n = np.arange(n_max)
    even = sp.diags((n % 2 == 0).astype(float), 0, format="csr")
    odd = sp.diags((n % 2 == 1).astype(float), 0, format="csr")
    return even, odd


def mode_operators(space: ModeSpec) -> dict:
    """{a, n, parity_even, parity_odd} for one mode as sparse matrices."""
    even, odd = parity_projectors(space.truncation)
    return {"a": destroy(space.truncation), "n": number_op(space.truncation),
            "parity_even": even, "parity_odd": odd}


def displacement_matrix(n_max: int, beta: complex) -> np.ndarray:
    """Dense matrix of D(beta) = exp(beta a^dag - beta* a) on the truncation.

    Built by exponentiating the sparse generator (scaling and squaring);
    the closed-form Laguerre matrix elements serve as a test oracle only.
    """
    if beta == 0:
        return np.eye(n_max, dtype=np.complex128)
    a = destroy(n_max)
    gen = beta * a.getH() - np.conj(beta) * a
    return np.asarray(sparse_expm(sp.csc_matrix(gen)).todense())


def displacement_op(space: ModeSpec, beta: complex) -> np.ndarray:
    """Alias of displacement_matrix on a ModeSpec."""
    return displacement_matrix(space.truncation, beta)


def ancilla_pulse(angle: float, phase: float = 0.0) -> np.ndarray:
    """Rotation exp(-i angle/2 (e^{i phase}|f><g| + h.c.)) on the {g,f} pair.

    |e> is untouched; it is never intentionally driven.
    """
    u = np.eye(ANCILLA_DIM, dtype=np.complex128)
    c = math.cos(angle / 2.0)
    s = math.sin(angle / 2.0)
    u[G, G] = c
    u[F, F] = c
    u[F, G] = -1j * s * np.exp(1j * phase)
    u[G, F] = -1j * s * np.exp(-1j * phase)
    return u


def embed(op, target: int | str, layout: SystemLayout, **flags) -> LinearOp:
    """Embed a single-factor operator into the full layout space.

    target is a mode index/label or the string 'ancilla'.  The result acts
    as the identity on every other factor; sparsity is preserved.
    """
    if isinstance(target, str) and target != "ancilla":
        target = layout.mode_index(target)
    factors = []
    for i, m in enumerate(layout.modes):
        if target == i:
            if op.shape != (m.truncation, m.truncation):
                raise LayoutMismatchError(
                    f"operator shape {op.shape} does not fit mode {m.label!r}")
            factors.append(sp.csr_matrix(op))
        else:
            factors.append(sp.identity(m.truncation, format="csr"))
    if target == "ancilla":
        if np.shape(op) != (ANCILLA_DIM, ANCILLA_DIM):
            raise LayoutMismatchError("ancilla operator must be 3x3")
        factors.append(sp.csr_matrix(op))
    else:
        factors.append(sp.identity(ANCILLA_DIM, format="csr"))
    full = factors[0]
    for f in factors[1:]:
        full = sp.kron(full, f, format="csr")
    return LinearOp(layout, full, **flags)


def fidelity(psi: StateVector, target: StateVector) -> float:
    """|<target|psi>|^2 with psi normalized first; target must be normalized."""
    if psi.layout.dims != target.layout.dims:
        raise LayoutMismatchError("fidelity requires matching layouts")
    tn = target.norm2
    if abs(tn - 1.0) > 1e-8:
        raise ValueError(f"target is not normalized (norm^2 = {tn:.3e})")
    n2 = psi.norm2
    if n2 <= 0.0:
        return 0.0
    return float(abs(np.vdot(target.amps, psi.amps)) ** 2 / n2)


def fidelity_dm(rho: np.ndarray, target: StateVector) -> float:
    """Mixed-state variant <target|rho|target> for a dense density matrix."""
    t = target.flat()
    if rho.shape != (t.size, t.size):
        raise LayoutMismatchError("density matrix does not match target layout")
    return float(np.real(np.vdot(t, rho @ t)))
