"""Error-detectable gadgets for the four-legged cat code.

Each gadget emits a schedule fragment plus herald semantics: which
measurement outcomes keep the run acceptable, and how a complete record
decodes into an outcome label and pending Pauli-frame corrections.

Conventions
-----------
* The ancilla |e> level is never driven; any measurement returning e is a
  discard (error detection).
* chi_e = chi_f is assumed in the dispersive waits so that phase accrual
  continues unchanged under an f -> e decay (error transparency).
* Number-selective drives are modeled as exact Fock-comb couplings; the
  phase rotations Z_c / ZZ_c drive *every* Fock class simultaneously with
  class-dependent drive phases.  An ancilla-dephasing jump then reweights
  all classes uniformly instead of collapsing the logical state, which is
  what makes the phase gates error-detectable rather than merely heralded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import schedule as sched
from .hilbert import (E, F, G, StateVector, SystemLayout, TruncationError,
                      truncation_guard)
from .noise import NoiseModel, noiseless


# =====================================================================
# Pauli frame
# =====================================================================

@dataclass(frozen=True)
class PauliFrame:
    """Pending logical Pauli corrections, one (x, z) bit pair per mode."""

    x: frozenset = frozenset()
    z: frozenset = frozenset()

    def toggle(self, mode: str, pauli: str) -> "PauliFrame":
        if pauli == "X":
            return PauliFrame(self.x ^ {mode}, self.z)
        if pauli == "Z":
            return PauliFrame(self.x, self.z ^ {mode})
        if pauli == "Y":
            return PauliFrame(self.x ^ {mode}, self.z ^ {mode})
        raise ValueError(f"unknown Pauli {pauli!r}")

    def compose(self, other: "PauliFrame") -> "PauliFrame":
        return PauliFrame(self.x ^ other.x, self.z ^ other.z)

    def apply_deltas(self, deltas: Sequence[tuple[str, str]]) -> "PauliFrame":
        f = self
        for mode, pauli in deltas:
            f = f.toggle(mode, pauli)
        return f


# =====================================================================
# protocol parameters
# =====================================================================

@dataclass(frozen=True)
class ProtocolParams:
    """Device-level knobs shared by all gadgets."""

    alpha: float
    omega_ratio: float = 0.1      # selective Rabi rate as a fraction of chi_f
    parity_rounds: int = 2

    def selective_rate(self, chi_f: float) -> float:
        return self.omega_ratio * abs(chi_f)


@dataclass(frozen=True)
class GadgetOutcome:
    label: str
    accept: bool
    frame: tuple = ()             # ((mode, 'X'|'Z'), ...)


@dataclass
class GadgetResult:
    """One herald branch of a gadget run: outcome, weight, post state."""

    outcome: GadgetOutcome
    weight: float
    state: StateVector
    record: dict


class Gadget:
    """Schedule fragment plus decode rules for one error-detectable block."""

    restartable = False   # failures can be retried before entanglement

    def __init__(self, name: str, items: list, modes: tuple[str, ...]):
        self.name = name
        self.items = items
        self.modes = modes
        self.measure_names = [it.name for it in items if isinstance(it, sched.Measure)]

    def owns(self, name: str) -> bool:
        return name in self.measure_names

    def allowed(self, name: str, record: Mapping[str, str]) -> frozenset:
        raise NotImplementedError

    def outcome(self, record: Mapping[str, str]) -> GadgetOutcome:
        raise NotImplementedError


class CompositeGadget(Gadget):
    """Sequential composition; accepted iff every child accepts."""

    def __init__(self, name: str, children: Sequence[Gadget]):
        items = [it for c in children for it in c.items]
        modes = tuple(dict.fromkeys(m for c in children for m in c.modes))
        super().__init__(name, items, modes)
        self.children = list(children)

    def _owner(self, name: str) -> Gadget:
        for c in self.children:
            if c.owns(name):
                return c
        raise KeyError(f"no child of {self.name!r} owns measurement {name!r}")

    def allowed(self, name, record):
        return self._owner(name).allowed(name, record)

    def outcome(self, record):
        frames: list[tuple[str, str]] = []
        labels = []
        for c in self.children:
            out = c.outcome(record)
            if not out.accept:
                return GadgetOutcome(f"{c.name}:{out.label}", False)
            frames.extend(out.frame)
            labels.append(out.label)
        return GadgetOutcome("+".join(labels), True, tuple(frames))


class GadgetPolicy:
    """HeraldPolicy adapter so the engine can run a bare gadget."""

    def __init__(self, gadget: Gadget):
        self.gadget = gadget

    def allowed(self, name, record):
        return self.gadget.allowed(name, record)

    def decode(self, record):
        out = self.gadget.outcome(record)
        return sched.DecodeResult(out.accept, out.label, out.frame)


def apply_gadget(psi: StateVector, gadget: Gadget, model: Optional[NoiseModel] = None
                 ) -> list[GadgetResult]:
    """Run a gadget's no-jump branch sweep (noise-free by default)."""
    from .engine import ScheduleRunner
    runner = ScheduleRunner(sched.Schedule(list(gadget.items)), psi.layout,
                            model or noiseless())
    branches, _, _, _ = runner.enumerate(psi, GadgetPolicy(gadget))
    out = []
    for b in branches:
        o = gadget.outcome(b.record)
        out.append(GadgetResult(o, b.weight, b.state, b.record))
    return out


# =====================================================================
# comb helpers
# =====================================================================

def _mode_shape(layout: SystemLayout) -> tuple[int, ...]:
    return layout.dims[:-1]

def _full_comb(layout: SystemLayout) -> np.ndarray:
    return np.ones(_mode_shape(layout), dtype=bool)


def _mode_number_grid(layout: SystemLayout, mode: str) -> np.ndarray:
    ax = layout.mode_index(mode)
    n = layout.modes[ax].truncation
    shape = [1] * len(_mode_shape(layout))
    shape[ax] = n
    return np.broadcast_to(np.arange(n).reshape(shape), _mode_shape(layout))


def low_fock_comb(layout: SystemLayout, mode: str, levels=(0, 1)) -> np.ndarray:
    """Comb selecting basis states whose `mode` occupation is in `levels`."""
    grid = _mode_number_grid(layout, mode)
    return np.isin(grid, np.asarray(levels))


def class_phases(layout: SystemLayout, modes: Sequence[str], theta: float) -> np.ndarray:
    """Drive phases -theta on the joint Fock class sum(n) = 2 (mod 4).

    With the [instant pi, class-phased selective pi] pair, a drive phase
    phi on a class imprints e^{-i phi} there, so -theta yields the
    relative phase e^{i theta} of Z_c/ZZ_c on the 2 (mod 4) class.  Odd
    classes keep phase 0.
    """
    total = sum(_mode_number_grid(layout, m) for m in modes)
    return np.where(total % 4 == 2, -theta, 0.0)


def _dispersive_terms(layout: SystemLayout, modes: Sequence[str]):
    terms = []
    for m in modes:
        c = layout.coupling(m)
        terms.append((F, m, c.chi_f))
        if c.chi_e != 0.0:
            terms.append((E, m, c.chi_e))
    return tuple(terms)


def _chi_f(layout: SystemLayout, mode: str) -> float:
    return layout.coupling(mode).chi_f


# =====================================================================
# parity measurement
# =====================================================================

class ParityMeasure(Gadget):
    """Repeated Ramsey parity measurement with round-agreement post-selection.

    Round = instantaneous pi/2 pulse, dispersive wait of pi/chi_f, inverted
    pi/2 pulse, ancilla measurement (g = even, f = odd), reset.  An e outcome
    or disagreeing rounds discard the run.  accept_parities restricts which
    agreed parities count as acceptance ('even', 'odd').
    """

    def __init__(self, layout: SystemLayout, mode: str, gid: str,
                 params: ProtocolParams, rounds: Optional[int] = None,
                 accept_parities: frozenset = frozenset({"even", "odd"}),
                 guard: sched.Guard = ()):
        rounds = params.parity_rounds if rounds is None else rounds
        if rounds < 1:
            raise ValueError("parity measurement needs at least one round")
        chi = _chi_f(layout, mode)
        wait = math.pi / abs(chi)
        items: list = []
        for k in range(rounds):
            items += [
                sched.AncillaPulse(math.pi / 2, 0.0, guard=guard),
                sched.DiagonalSegment(duration=wait,
                                      terms=_dispersive_terms(layout, [mode]),
                                      guard=guard),
                sched.AncillaPulse(math.pi / 2, math.pi, guard=guard),
                sched.Measure(f"{gid}.r{k}", accept=frozenset({"g", "f"}), guard=guard),
                sched.Reset(guard=guard),
            ]
        super().__init__(gid, items, (mode,))
        self.rounds = rounds
        self.gid = gid
        self.accept_parities = accept_parities

    def _round_names(self):
        return [f"{self.gid}.r{k}" for k in range(self.rounds)]

    def allowed(self, name, record):
        want = set()
        if "even" in self.accept_parities:
            want.add("g")
        if "odd" in self.accept_parities:
            want.add("f")
        first = record.get(self._round_names()[0])
        if name == self._round_names()[0]:
            return frozenset(want)
        # later rounds must agree with the first
        return frozenset({first} if first in want else set())

    def outcome(self, record):
        vals = [record.get(n) for n in self._round_names()]
        if any(v == "e" or v is None for v in vals):
            return GadgetOutcome("discard", False)
        if len(set(vals)) != 1:
            return GadgetOutcome("discard", False)
        parity = "even" if vals[0] == "g" else "odd"
        ok = parity in self.accept_parities
        return GadgetOutcome(parity, ok)


def parity_measure(layout, mode, gid, params, rounds=None,
                   accept_parities=frozenset({"even", "odd"})) -> ParityMeasure:
    return ParityMeasure(layout, mode, gid, params, rounds, accept_parities)


# =====================================================================
# plus-state preparation
# =====================================================================

class PrepPlus(CompositeGadget):
    """D(alpha) (or D(i alpha)) then even-parity post-selection -> |+-_c>."""

    restartable = True

    def __init__(self, layout, mode, gid, params, sign="+"):
        if sign not in "+-":
            raise ValueError("sign must be '+' or '-'")
        beta = params.alpha if sign == "+" else 1j * params.alpha
        disp = Gadget(f"{gid}.d", [sched.Displacement(mode, beta)], (mode,))
        disp.allowed = lambda name, record: frozenset()
        disp.outcome = lambda record: GadgetOutcome("displaced", True)
        par = ParityMeasure(layout, mode, f"{gid}.p", params,
                            accept_parities=frozenset({"even"}))
        super().__init__(gid, [disp, par])
        self.sign = sign


def prep_plus(layout, mode, gid, params, sign="+") -> PrepPlus:
    return PrepPlus(layout, mode, gid, params, sign)


# =====================================================================
# coherent-component discrimination
# =====================================================================

class Discriminate(Gadget):
    """Unambiguous discrimination of one coherent component |beta>.

    D(-beta), selective flip S on displaced Fock levels {0, 1}, D(beta),
    measure: f = conclusive, g = inconclusive, e = discard.
    """

    def __init__(self, layout, mode, beta, gid, params, guard: sched.Guard = ()):
        need = truncation_guard(2 * abs(beta))
        n = layout.mode(mode).truncation
        if n < need:
            raise TruncationError(
                f"discriminating beta={beta} displaces components to 2|beta|; "
                f"needs truncation >= {need}, mode {mode!r} has {n}")
        chi = _chi_f(layout, mode)
        omega = params.selective_rate(chi)
        comb = low_fock_comb(layout, mode)
        items = [
            sched.Displacement(mode, -beta, guard=guard),
            sched.SelectiveSegment(duration=math.pi / omega, rabi=omega, comb=comb,
                                   phases=np.full(_mode_shape(layout), math.pi),
                                   modes=(mode,), guard=guard),
            sched.Displacement(mode, beta, guard=guard),
            sched.Measure(f"{gid}.m", accept=frozenset({"g", "f"}), guard=guard),
            sched.Reset(guard=guard),
        ]
        super().__init__(gid, items, (mode,))
        self.gid = gid
        self.beta = beta

    def allowed(self, name, record):
        return frozenset({"g", "f"})

    def outcome(self, record):
        v = record.get(f"{self.gid}.m")
        if v == "f":
            return GadgetOutcome("conclusive", True)
        if v == "g":
            return GadgetOutcome("inconclusive", True)
        return GadgetOutcome("discard", False)


def discriminate(layout, mode, beta, gid, params) -> Discriminate:
    return Discriminate(layout, mode, beta, gid, params)


# =====================================================================
# logical X measurement
# =====================================================================

class MeasureX(Gadget):
    """Sequential discrimination of the four cat components.

    Stages check -alpha, +alpha, -i alpha, +i alpha; the first f outcome
    terminates the sequence (later stages idle out their slots).  Decode:
    f in stage 0/1 -> plus, f in stage 2/3 -> minus, all-g -> discard.
    """

    def __init__(self, layout, mode, gid, params):
        a = params.alpha
        betas = [-a, a, -1j * a, 1j * a]
        items: list = []
        self.stages = []
        for k, beta in enumerate(betas):
            guard = tuple((f"{gid}.s{j}.m", "g") for j in range(k))
            d = Discriminate(layout, mode, beta, f"{gid}.s{k}", params, guard=guard)
            items += d.items
            self.stages.append(d)
        super().__init__(gid, items, (mode,))
        self.gid = gid

    def allowed(self, name, record):
        k = int(name.split(".s")[-1].split(".")[0])
        prior = [record.get(f"{self.gid}.s{j}.m") for j in range(k)]
        if any(v == "f" for v in prior):
            # cannot happen: guards skip later stages after a conclusive f
            return frozenset()
        if k == 3:
            return frozenset({"f"})       # all-g would be a discard
        return frozenset({"g", "f"})

    def outcome(self, record):
        vals = [record.get(n) for n in self.measure_names]
        if any(v == "e" for v in vals):
            return GadgetOutcome("discard", False)
        for k, v in enumerate(vals):
            if v == "f":
                return GadgetOutcome("plus" if k < 2 else "minus", True)
        return GadgetOutcome("discard", False)


def measure_x(layout, mode, gid, params) -> MeasureX:
    return MeasureX(layout, mode, gid, params)


# =====================================================================
# phase rotations: Z_c(theta), ZZ_c(theta)
# =====================================================================

class PhaseRotation(Gadget):
    """Z_c(theta) on one mode or ZZ_c(theta) on a pair via a class-phased loop.

    An instantaneous pi pulse shelves every amplitude at |f>; a selective
    pi pulse with per-class drive phases returns it to |g>, imprinting
    e^{i theta} on the (sum n) = 2 (mod 4) class relative to the others.
    All classes are driven with the same Rabi rate, so ancilla dephasing at
    any instant reweights classes uniformly (never collapses the logical
    state); residual f or an e outcome is discarded.
    """

    def __init__(self, layout, modes: tuple[str, ...], theta, gid, params,
                 guard: sched.Guard = ()):
        chi = _chi_f(layout, modes[0])
        omega = params.selective_rate(chi)
        items = [
            sched.AncillaPulse(math.pi, 0.0, guard=guard),
            sched.SelectiveSegment(duration=math.pi / omega, rabi=omega,
                                   comb=_full_comb(layout),
                                   phases=class_phases(layout, modes, theta),
                                   modes=tuple(modes), guard=guard),
            sched.Measure(f"{gid}.m", accept=frozenset({"g"}), guard=guard),
            sched.Reset(guard=guard),
        ]
        super().__init__(gid, items, tuple(modes))
        self.gid = gid
        self.theta = theta

    def allowed(self, name, record):
        return frozenset({"g"})

    def outcome(self, record):
        if record.get(f"{self.gid}.m") == "g":
            return GadgetOutcome("done", True)
        return GadgetOutcome("discard", False)


def z_rot(layout, mode, theta, gid, params) -> PhaseRotation:
    return PhaseRotation(layout, (mode,), theta, gid, params)


def zz_rot(layout, mode_a, mode_b, theta, gid, params) -> PhaseRotation:
    return PhaseRotation(layout, (mode_a, mode_b), theta, gid, params)


def cz_gadgets(layout, mode_a, mode_b, gid, params) -> list[Gadget]:
    """CZ = Z(-pi/2) x Z(-pi/2) . ZZ(pi/2) (exact on the code space)."""
    return [
        z_rot(layout, mode_a, -math.pi / 2, f"{gid}.za", params),
        z_rot(layout, mode_b, -math.pi / 2, f"{gid}.zb", params),
        zz_rot(layout, mode_a, mode_b, math.pi / 2, f"{gid}.zz", params),
    ]


# =====================================================================
# teleported Hadamard
# =====================================================================

class HadamardTeleport(CompositeGadget):
    """One-bit teleportation of H_c: CZ(data, fresh), then X-measure data.

    The fresh mode must already hold |+_c>.  A parity verification on the
    data mode sits between the CZ and the X measurement so that photon loss
    during the CZ pulses is heralded rather than silently teleported.  A
    minus outcome leaves a pending X_c on the output, tracked in the frame.
    """

    def __init__(self, layout, data, fresh, gid, params):
        children = cz_gadgets(layout, data, fresh, f"{gid}.cz", params)
        children.append(ParityMeasure(layout, data, f"{gid}.v", params,
                                      accept_parities=frozenset({"even"})))
        self.mx = MeasureX(layout, data, f"{gid}.mx", params)
        children.append(self.mx)
        super().__init__(gid, children)
        self.data = data
        self.fresh = fresh

    def outcome(self, record):
        base = super().outcome(record)
        if not base.accept:
            return base
        mx_out = self.mx.outcome(record)
        frame = base.frame + ((self.fresh, "X"),) if mx_out.label == "minus" else base.frame
        return GadgetOutcome(mx_out.label, True, frame)


def hadamard_teleport(layout, data, fresh, gid, params) -> HadamardTeleport:
    return HadamardTeleport(layout, data, fresh, gid, params)


# =====================================================================
# non-fault-tolerant SNAP baseline
# =====================================================================

class SnapBaseline(CompositeGadget):
    """Conventional single-mode preparation with a two-level ancilla.

    D(alpha), one unrepeated parity round post-selecting even, then a SNAP
    phase pulse (class-phased pair) whose herald is ignored: decay and
    dephasing flow into the accepted ensemble at first order.  Pair with a
    NoiseModel whose ancilla is flagged two_level so decay lands back in g
    undetected.
    """

    restartable = True

    def __init__(self, layout, mode, gid, params, phase_on_two_class=-math.pi / 4):
        disp = Gadget(f"{gid}.d", [sched.Displacement(mode, params.alpha)], (mode,))
        disp.allowed = lambda name, record: frozenset()
        disp.outcome = lambda record: GadgetOutcome("displaced", True)
        par = ParityMeasure(layout, mode, f"{gid}.p", params, rounds=1,
                            accept_parities=frozenset({"even"}))
        chi = _chi_f(layout, mode)
        omega = params.selective_rate(chi)
        snap_items = [
            sched.AncillaPulse(math.pi, 0.0),
            sched.SelectiveSegment(duration=math.pi / omega, rabi=omega,
                                   comb=_full_comb(layout),
                                   phases=class_phases(layout, (mode,),
                                                       phase_on_two_class),
                                   modes=(mode,)),
            sched.Measure(f"{gid}.snap", accept=frozenset({"g", "e", "f"})),
            sched.Reset(),
        ]
        snap = Gadget(f"{gid}.s", snap_items, (mode,))
        snap.allowed = lambda name, record: frozenset({"g", "e", "f"})
        snap.outcome = lambda record: GadgetOutcome("snap", True)
        super().__init__(gid, [disp, par, snap])
        self.mode = mode
        self.phase = phase_on_two_class


def snap_baseline_prep(layout, mode, gid, params,
                       phase_on_two_class=-math.pi / 4) -> SnapBaseline:
    return SnapBaseline(layout, mode, gid, params, phase_on_two_class)
