"""Incoherent error channels as rate-weighted jump operators.

Channels per mode: photon loss (a) and dephasing (n).  Channels on the
active ancilla: population relaxation |e><f| and dephasing
eps_e|e><e| + eps_f|f><f|.  A global multiplier s scales every rate;
jump operators scale by sqrt(s).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np
import scipy.sparse as sp

from .hilbert import (ANCILLA_DIM, E, F, LinearOp, SystemLayout, destroy,
                      embed, number_op)


@dataclass(frozen=True)
class ModeRates:
    """Loss and dephasing rates (1/time) for a single bosonic mode."""

    kappa_loss: float = 0.0
    kappa_dephasing: float = 0.0


@dataclass(frozen=True)
class AncillaRates:
    """Relaxation f->e and dephasing rates for the three-level ancilla.

    eps_e and eps_f are the dimensionless dephasing weights of the two
    excited levels; the dephasing channel is the single jump operator
    sqrt(gamma_phi) (eps_e |e><e| + eps_f |f><f|).

    two_level models a conventional ancilla without the error-flag level:
    relaxation lands back in |g> (undetectable) and only |f> dephases.
    """

    gamma_fe: float = 0.0
    gamma_phi: float = 0.0
    eps_e: float = 1.0
    eps_f: float = 2.0
    two_level: bool = False


@dataclass(frozen=True)
class NoiseModel:
    """Per-mode and ancilla rates plus the global multiplier s."""

    modes: dict[str, ModeRates] = field(default_factory=dict)
    ancilla: AncillaRates = AncillaRates()
    s: float = 1.0

    def __post_init__(self):
        for lbl, r in self.modes.items():
            if r.kappa_loss < 0 or r.kappa_dephasing < 0:
                raise ValueError(f"mode {lbl!r}: rates must be >= 0")
        a = self.ancilla
        if a.gamma_fe < 0 or a.gamma_phi < 0:
            raise ValueError("ancilla rates must be >= 0")
        if self.s < 0:
            raise ValueError("global multiplier s must be >= 0")

    def rates_for(self, label: str) -> ModeRates:
        return self.modes.get(label, ModeRates())


def scaled(model: NoiseModel, s: float) -> NoiseModel:
    """Same model with the global multiplier scaled by s (multiplicative)."""
    if s < 0:
        raise ValueError("global multiplier s must be >= 0")
    return replace(model, s=model.s * s)


def noiseless() -> NoiseModel:
    return NoiseModel()


@dataclass(frozen=True)
class JumpChannel:
    """One Lindblad channel: kind/target metadata plus the scaled rate.

    The engine applies these through structured fast paths; `operator`
    materializes the rate-weighted sparse matrix sqrt(s*rate) * L for
    oracle-style dense computations.
    """

    kind: str            # 'loss' | 'mode_dephasing' | 'ancilla_decay' | 'ancilla_dephasing'
    target: str          # mode label, or 'ancilla'
    rate: float          # already includes the global multiplier s
    eps_e: float = 0.0   # ancilla_dephasing only
    eps_f: float = 0.0

    def bare_matrix(self, layout: SystemLayout) -> sp.csr_matrix:
        if self.kind == "loss":
            i = layout.mode_index(self.target)
            return embed(destroy(layout.modes[i].truncation), i, layout).matrix
        if self.kind == "mode_dephasing":
            i = layout.mode_index(self.target)
            return embed(number_op(layout.modes[i].truncation), i, layout).matrix
        if self.kind == "ancilla_decay":
            m = np.zeros((ANCILLA_DIM, ANCILLA_DIM))
            m[E, F] = 1.0
            return embed(m, "ancilla", layout).matrix
        if self.kind == "ancilla_decay_fg":
            m = np.zeros((ANCILLA_DIM, ANCILLA_DIM))
            m[G, F] = 1.0
            return embed(m, "ancilla", layout).matrix
        if self.kind == "ancilla_dephasing":
            m = np.zeros((ANCILLA_DIM, ANCILLA_DIM))
            m[E, E] = self.eps_e
            m[F, F] = self.eps_f
            return embed(m, "ancilla", layout).matrix
        raise ValueError(f"unknown channel kind {self.kind!r}")

    def operator(self, layout: SystemLayout) -> sp.csr_matrix:
        return np.sqrt(self.rate) * self.bare_matrix(layout)


def jump_operators(layout: SystemLayout, model: NoiseModel) -> list[JumpChannel]:
    """All channels with nonzero scaled rate, in a fixed deterministic order.

    Zero-rate channels are omitted entirely so that their absence leaves
    the evolution bit-identical.
    """
    out: list[JumpChannel] = []
    s = model.s
    for m in layout.modes:
        r = model.rates_for(m.label)
        if s * r.kappa_loss > 0:
            out.append(JumpChannel("loss", m.label, s * r.kappa_loss))
        if s * r.kappa_dephasing > 0:
            out.append(JumpChannel("mode_dephasing", m.label, s * r.kappa_dephasing))
    a = model.ancilla
    if s * a.gamma_fe > 0:
        kind = "ancilla_decay_fg" if a.two_level else "ancilla_decay"
        out.append(JumpChannel(kind, "ancilla", s * a.gamma_fe))
    if s * a.gamma_phi > 0:
        eps_e = 0.0 if a.two_level else a.eps_e
        out.append(JumpChannel("ancilla_dephasing", "ancilla", s * a.gamma_phi,
                               eps_e=eps_e, eps_f=a.eps_f))
    return out


def decay_rates_diag(layout: SystemLayout, model: NoiseModel) -> np.ndarray:
    """(1/2) sum_k rate_k diag(L_k^dag L_k) over the full basis.

    Every channel's L^dag L is diagonal in the Fock x ancilla product basis,
    so the anti-Hermitian part of the no-jump Hamiltonian is entirely
    captured by this array (shape layout.dims, real, >= 0).
    """
    dims = layout.dims
    out = np.zeros(dims, dtype=np.float64)
    s = model.s
    nmodes = len(layout.modes)
    for i, m in enumerate(layout.modes):
        r = model.rates_for(m.label)
        if r.kappa_loss == 0 and r.kappa_dephasing == 0:
            continue
        n = np.arange(m.truncation, dtype=np.float64)
        shape = [1] * len(dims)
        shape[i] = m.truncation
        out += 0.5 * s * (r.kappa_loss * n + r.kappa_dephasing * n ** 2).reshape(shape)
    a = model.ancilla
    anc = np.zeros(ANCILLA_DIM)
    anc[F] += 0.5 * s * a.gamma_fe
    if not a.two_level:
        anc[E] += 0.5 * s * a.gamma_phi * a.eps_e ** 2
    anc[F] += 0.5 * s * a.gamma_phi * a.eps_f ** 2
    shape = [1] * len(dims)
    shape[nmodes] = ANCILLA_DIM
    out += anc.reshape(shape)
    return out
