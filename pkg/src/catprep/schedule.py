"""Piecewise protocol descriptions: timed segments, instant unitaries,
measurement/branch points, and resets.

A Schedule is a flat, rigid timeline.  Items may carry a guard: a tuple of
(measurement name, required outcome) pairs.  A guarded item executes on a
branch only when every referenced outcome was recorded with the required
value; a skipped timed item still idles out its duration (the controller
runs on a fixed latency), so all branches share one global clock.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Protocol, Sequence

import numpy as np

OUTCOMES = ("g", "e", "f")

Guard = tuple[tuple[str, str], ...]


def guard_passes(guard: Guard, record: Mapping[str, str]) -> bool:
    return all(record.get(name) == value for name, value in guard)


@dataclass(frozen=True)
class DiagonalSegment:
    """Dispersive (cross-Kerr) free evolution: H = sum chi |lvl><lvl| x n_mode.

    terms maps (ancilla_level, mode_label) -> angular rate chi.  Phase on a
    basis state is exp(-i chi n t) when the ancilla sits in lvl.
    """

    duration: float
    terms: tuple[tuple[int, str, float], ...] = ()
    guard: Guard = ()

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("segment duration must be >= 0")


@dataclass(frozen=True)
class SelectiveSegment:
    """Number-selective ancilla drive on the g<->f pair.

    comb is a boolean mask over the mode product basis (shape = mode dims);
    phases is a float array of per-basis drive phases (used where comb).
    The generator couples |g,k> <-> |f,k> for comb states k with Rabi rate
    `rabi` and phase phases[k]; other states are untouched apart from
    no-jump decay.  Spectral leakage outside the comb is not modeled.
    """

    duration: float
    rabi: float
    comb: np.ndarray
    phases: np.ndarray
    modes: tuple[str, ...] = ()   # involved modes, for bookkeeping
    guard: Guard = ()

    def __post_init__(self):
        if self.duration < 0 or self.rabi <= 0:
            raise ValueError("selective segment needs duration >= 0 and rabi > 0")


@dataclass(frozen=True)
class Displacement:
    """Instantaneous displacement D(beta) on one mode."""

    mode: str
    beta: complex
    guard: Guard = ()

    duration = 0.0


@dataclass(frozen=True)
class AncillaPulse:
    """Instantaneous unselective rotation on the ancilla g<->f pair."""

    angle: float
    phase: float = 0.0
    guard: Guard = ()

    duration = 0.0


@dataclass(frozen=True)
class InstantUnitary:
    """Generic instantaneous unitary given as a full-space sparse operator."""

    op: object  # hilbert.LinearOp
    guard: Guard = ()

    duration = 0.0


@dataclass(frozen=True)
class Measure:
    """Projective ancilla measurement in the {g,e,f} basis.

    `accept` is the static set of outcomes that can possibly lead to an
    accepted run; a HeraldPolicy may restrict it further per branch.  The
    outcome is recorded under `name`.
    """

    name: str
    accept: frozenset = frozenset({"g", "f"})
    guard: Guard = ()

    duration = 0.0


@dataclass(frozen=True)
class Reset:
    """Ideal instantaneous ancilla re-initialization to |g>.

    Valid only when the branch's ancilla occupies a single level (always the
    case right after a measurement).
    """

    guard: Guard = ()

    duration = 0.0


@dataclass(frozen=True)
class ApplyChannel:
    """Deterministic insertion of one bare jump operator (fault injection)."""

    channel: object  # noise.JumpChannel
    guard: Guard = ()

    duration = 0.0


@dataclass(frozen=True)
class ModeRelease:
    """Disentangle a measured-out mode and return it to vacuum for reuse.

    The dominant Schmidt vector of the mode is contracted out; residual
    entangled mass (exponentially small for measured-out cat modes) is
    dropped from the branch norm and logged.
    """

    mode: str
    guard: Guard = ()

    duration = 0.0


Item = object


@dataclass
class Schedule:
    """Ordered items plus start-time bookkeeping."""

    items: list = field(default_factory=list)

    @property
    def duration(self) -> float:
        return float(sum(getattr(it, "duration", 0.0) for it in self.items))

    def start_times(self) -> list[float]:
        out, t = [], 0.0
        for it in self.items:
            out.append(t)
            t += getattr(it, "duration", 0.0)
        return out

    def measures(self) -> list[Measure]:
        return [it for it in self.items if isinstance(it, Measure)]

    def extend(self, items: Sequence) -> "Schedule":
        self.items.extend(items)
        return self


class HeraldPolicy(Protocol):
    """Branch bookkeeping rules for a schedule run."""

    def allowed(self, name: str, record: Mapping[str, str]) -> frozenset:
        """Outcomes at measurement `name` that keep acceptance possible."""
        ...

    def decode(self, record: Mapping[str, str]) -> "DecodeResult":
        """Final accept/discard decision over a complete herald record."""
        ...

    def atom_class(self, name: str, record: Mapping[str, str], outcome: str) -> str:
        """Classify a non-acceptable outcome: 'discard' or 'restart'.

        Restart marks failures of a preparation on a still-unentangled
        mode: the attempt is simply repeated, so it is excluded from the
        success-probability denominator rather than counted against it.
        """
        ...


@dataclass(frozen=True)
class DecodeResult:
    accepted: bool
    label: str = ""
    frame: tuple = ()   # logical Pauli toggles, e.g. (("m2", "X"),)


class AcceptAll:
    """Policy that never discards: every outcome branch is enumerated."""

    def allowed(self, name, record):
        return frozenset(OUTCOMES)

    def decode(self, record):
        return DecodeResult(accepted=True, label="all")


class StaticPolicy:
    """Policy driven by each Measure's static accept set."""

    def __init__(self, schedule: Schedule):
        self._accept = {m.name: m.accept for m in schedule.measures()}

    def allowed(self, name, record):
        return self._accept[name]

    def decode(self, record):
        ok = all(v in self._accept[k] for k, v in record.items())
        return DecodeResult(accepted=ok, label="ok" if ok else "discard")
