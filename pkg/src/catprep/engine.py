"""Evolution of states through schedules under noise.

Three complementary execution modes:

* exact no-jump branch enumeration over measurement outcomes,
* Monte Carlo wave-function trajectories with closed-form jump-time solving,
* a dense Lindblad integrator used as a validation oracle at small dimension.

Segment propagators are closed-form: diagonal segments are entrywise
complex exponentials, selective-drive segments are 2x2 blocks over
{|g,k>, |f,k>} for comb states k.  No ODE stepping occurs anywhere in the
trajectory path.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.linalg import expm as dense_expm

from . import schedule as sched
from .hilbert import (ANCILLA_DIM, E, F, G, LayoutMismatchError, StateVector,
                      SystemLayout, ancilla_pulse, displacement_matrix, embed)
from .noise import JumpChannel, NoiseModel, decay_rates_diag, jump_operators

PRUNE_WEIGHT = 1e-14
JUMP_TIME_RTOL = 1e-12
ORACLE_DIM_CAP = 64


# =====================================================================
# structured state operations
# =====================================================================

def _mode_axis_matmul(amps: np.ndarray, matrix: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(amps, axis, 0)
    out = np.tensordot(matrix, moved, axes=([1], [0]))
    return np.moveaxis(out, 0, axis)


def apply_channel(amps: np.ndarray, ch: JumpChannel, layout: SystemLayout) -> np.ndarray:
    """Apply the bare jump operator L (no rate factor) to an amplitude array."""
    if ch.kind == "loss":
        ax = layout.mode_index(ch.target)
        n = layout.modes[ax].truncation
        out = np.zeros_like(amps)
        src = np.moveaxis(amps, ax, 0)
        dst = np.moveaxis(out, ax, 0)
        root = np.sqrt(np.arange(1, n, dtype=np.float64)).astype(
            np.float32 if amps.dtype == np.complex64 else np.float64)
        dst[:-1] = root.reshape((-1,) + (1,) * (amps.ndim - 1)) * src[1:]
        return out
    if ch.kind == "mode_dephasing":
        ax = layout.mode_index(ch.target)
        n = layout.modes[ax].truncation
        shape = [1] * amps.ndim
        shape[ax] = n
        w = np.arange(n, dtype=np.float32 if amps.dtype == np.complex64 else np.float64)
        return amps * w.reshape(shape)
    if ch.kind == "ancilla_decay":
        out = np.zeros_like(amps)
        out[..., E] = amps[..., F]
        return out
    if ch.kind == "ancilla_decay_fg":
        out = np.zeros_like(amps)
        out[..., G] = amps[..., F]
        return out
    if ch.kind == "ancilla_dephasing":
        out = np.zeros_like(amps)
        out[..., E] = ch.eps_e * amps[..., E]
        out[..., F] = ch.eps_f * amps[..., F]
        return out
    raise ValueError(f"unknown channel kind {ch.kind!r}")


def channel_weight(amps: np.ndarray, ch: JumpChannel, layout: SystemLayout) -> float:
    """rate * <psi|L^dag L|psi> on an unnormalized amplitude array."""
    return _channel_weight_from_p(np.abs(amps) ** 2, ch, layout)


def _channel_weight_from_p(p: np.ndarray, ch: JumpChannel, layout: SystemLayout) -> float:
    if ch.kind == "loss" or ch.kind == "mode_dephasing":
        ax = layout.mode_index(ch.target)
        n = np.arange(layout.modes[ax].truncation, dtype=float)
        w = n if ch.kind == "loss" else n ** 2
        shape = [1] * p.ndim
        shape[ax] = w.size
        return float(ch.rate * np.sum(p * w.reshape(shape)))
    if ch.kind in ("ancilla_decay", "ancilla_decay_fg"):
        return float(ch.rate * np.sum(p[..., F]))
    if ch.kind == "ancilla_dephasing":
        return float(ch.rate * (ch.eps_e ** 2 * np.sum(p[..., E])
                                + ch.eps_f ** 2 * np.sum(p[..., F])))
    raise ValueError(f"unknown channel kind {ch.kind!r}")


# =====================================================================
# closed-form segment propagators
# =====================================================================

class _NormProfile:
    """Binned-exponential evaluator of the no-jump norm^2 along a segment.

    Selective pairs exploit that gamma_f - gamma_g is the same for every
    comb state (ancilla rates only), so the 2x2 trig factors are scalars
    and the pair contribution is three exponential mixtures.
    """

    __slots__ = ("kind", "coef", "gam2", "pair")

    def __init__(self, kind, coef, gam2, pair=None):
        self.kind = kind
        self.coef = coef      # diagonal bin weights
        self.gam2 = gam2      # 2*gamma per diagonal bin
        self.pair = pair      # (Gamma_sum_bins, delta, omega, Sg, Sf, Sx_im) or None

    def value(self, t: float) -> float:
        w = float(np.dot(self.coef, np.exp(-self.gam2 * t)))
        if self.pair is not None:
            w += self._pair_value(t)
        return w

    def _pair_value(self, t: float) -> float:
        gsum, delta, omega, sg, sf, sx_im = self.pair
        ch, shl = _pair_trig(delta, omega, t)
        half_o2 = (omega / 2.0) ** 2 * shl * shl
        f_g = (ch - delta * shl) ** 2 + half_o2
        f_f = (ch + delta * shl) ** 2 + half_o2
        f_x = -2.0 * omega * delta * shl * shl
        env = np.exp(-gsum * t)
        return float(np.dot(env, f_g * sg + f_f * sf) + f_x * np.dot(env, sx_im))

    def derivative(self, t: float) -> float:
        d = float(-np.dot(self.coef * self.gam2, np.exp(-self.gam2 * t)))
        if self.pair is not None:
            eps = max(1e-9 * (abs(t) + 1e-12), 1e-15)
            d += (self._pair_value(t + eps) - self._pair_value(t)) / eps
        return d


def _pair_trig(delta: float, omega: float, t: float) -> tuple[float, float]:
    """Real-valued cosh(lam t) and sinh(lam t)/lam for lam^2 = d^2 - (O/2)^2."""
    lam2 = delta * delta - (omega / 2.0) ** 2
    if lam2 >= 0:
        lam = math.sqrt(lam2)
        if lam * t < 1e-8:
            return math.cosh(lam * t), t * (1.0 + (lam * t) ** 2 / 6.0)
        return math.cosh(lam * t), math.sinh(lam * t) / lam
    kap = math.sqrt(-lam2)
    if kap * t < 1e-8:
        return math.cos(kap * t), t * (1.0 - (kap * t) ** 2 / 6.0)
    return math.cos(kap * t), math.sin(kap * t) / kap


def _pair_elements(gg, gf, omega, t):
    """2x2 no-jump propagator elements for decay pair (gamma_g, gamma_f).

    d/dt (a_g, a_f) = [[-gg, -i O/2], [-i O/2, -gf]] (drive phase folded out).
    """
    m = -(gg + gf) / 2.0
    delta = (gg - gf) / 2.0
    lam = np.sqrt((delta ** 2 - (omega / 2.0) ** 2).astype(np.complex128))
    lt = lam * t
    ch = np.cosh(lt)
    small = np.abs(lt) < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        shl = np.where(small, t * (1.0 + lt ** 2 / 6.0), np.sinh(lt) / np.where(small, 1.0, lam))
    env = np.exp(m * t)
    ugg = env * (ch - delta * shl)
    uff = env * (ch + delta * shl)
    ux = env * (-1j * (omega / 2.0) * shl)   # both off-diagonals in the folded frame
    return np.real(ugg), np.real(uff), -1j * np.real(1j * ux)


class _DiagonalProp:
    """Entrywise propagator exp(-(i theta + gamma) t) with norm-profile bins."""

    _CACHE_MAX = 8

    def __init__(self, theta: np.ndarray, gamma: np.ndarray, duration: float = 0.0):
        self.factor_rate = -(1j * theta + gamma)
        g2 = (2.0 * gamma).reshape(-1)
        self.bins, self.inv = np.unique(np.round(g2, 14), return_inverse=True)
        self.duration = duration
        self._cache: dict[float, np.ndarray] = {}
        self._seen: set = set()

    def evolve(self, amps: np.ndarray, t: float) -> np.ndarray:
        # cache the factor for recurring times (segment durations), not for
        # one-off jump times; trajectories may run in complex64
        key = (t, amps.dtype.char)
        f = self._cache.get(key)
        if f is None:
            f = np.exp(self.factor_rate * t).astype(amps.dtype, copy=False)
            if key in self._seen and len(self._cache) < self._CACHE_MAX:
                self._cache[key] = f
            self._seen.add(key)
        return amps * f

    def norm_profile(self, amps: np.ndarray) -> _NormProfile:
        p = (np.abs(amps) ** 2).reshape(-1)
        coef = np.bincount(self.inv, weights=p, minlength=self.bins.size)
        return _NormProfile("diag", coef, self.bins)


class _SelectiveProp:
    """Comb-selective g<->f drive: 2x2 blocks on comb states, decay elsewhere."""

    def __init__(self, seg: sched.SelectiveSegment, gamma: np.ndarray):
        mode_shape = gamma.shape[:-1]
        self.duration = float(seg.duration)
        self._full: Optional[dict] = None
        comb = np.asarray(seg.comb, dtype=bool)
        if comb.shape != mode_shape:
            raise LayoutMismatchError(
                f"comb shape {comb.shape} does not match mode dims {mode_shape}")
        self.comb = comb
        self.all_comb = bool(comb.all())
        self.omega = float(seg.rabi)
        if self.all_comb:
            # keep grid shapes so evolve can work on whole ancilla slices
            self.phase = np.asarray(seg.phases, dtype=float)
            self.gg = gamma[..., G]
            self.gf = gamma[..., F]
        else:
            self.phase = np.asarray(seg.phases, dtype=float)[comb]
            self.gg = gamma[..., G][comb]
            self.gf = gamma[..., F][comb]
        self.gamma = gamma
        # diagonal part: everything except the comb g/f amplitudes
        mask = np.ones(gamma.shape, dtype=bool)
        mask[..., G][comb] = False
        mask[..., F][comb] = False
        self.diag_mask = mask
        g2 = (2.0 * gamma[mask]).reshape(-1)
        self.diag_bins, self.diag_inv = np.unique(np.round(g2, 14), return_inverse=True)
        delta = ((self.gg - self.gf) / 2.0).reshape(-1)
        if delta.size and float(np.ptp(delta)) > 1e-12 * (1 + float(np.max(np.abs(delta)))):
            raise ValueError("selective comb decay asymmetry must be uniform "
                             "(mode rates enter g and f rows identically)")
        self.delta = float(delta[0]) if delta.size else 0.0
        gsum = (self.gg + self.gf).reshape(-1)
        self.pair_bins, self.pair_inv = np.unique(np.round(gsum, 14),
                                                  return_inverse=True)
        self.pair_inv = self.pair_inv.reshape(-1)

    def _factors(self, t: float):
        # const-delta closed form: scalar trig, per-state decay envelope
        ch, shl = _pair_trig(self.delta, self.omega, t)
        env = np.exp(-0.5 * (self.gg + self.gf) * t)
        ugg = env * (ch - self.delta * shl)
        uff = env * (ch + self.delta * shl)
        ux = env * (-1j * (self.omega / 2.0) * shl)
        ph = np.exp(1j * self.phase)
        return ugg, uff, ux * ph, ux * np.conj(ph)

    def evolve(self, amps: np.ndarray, t: float) -> np.ndarray:
        if t == self.duration and self.duration > 0.0:
            if self._full is None:
                self._full = {}
            ch = amps.dtype.char
            if ch not in self._full:
                fac = (np.exp(-self.gamma * t),) + self._factors(t)
                self._full[ch] = tuple(a.astype(amps.dtype, copy=False) for a in fac)
            decay, ugg, uff, uxg, uxf = self._full[ch]
        else:
            dt_ = amps.dtype
            decay = np.exp(-self.gamma * t).astype(dt_, copy=False)
            ugg, uff, uxg, uxf = (a.astype(dt_, copy=False) for a in self._factors(t))
        if self.all_comb:
            out = np.empty_like(amps)
            out[..., E] = amps[..., E] * decay[..., E]
            ag = amps[..., G]
            af = amps[..., F]
            out[..., G] = ugg * ag + uxf * af
            out[..., F] = uxg * ag + uff * af
            return out
        out = amps * decay   # placeholder for diagonal part
        ag = amps[..., G][self.comb]
        af = amps[..., F][self.comb]
        new_g = ugg * ag + uxf * af
        new_f = uxg * ag + uff * af
        gslice = out[..., G]
        gslice[self.comb] = new_g
        out[..., G] = gslice
        fslice = out[..., F]
        fslice[self.comb] = new_f
        out[..., F] = fslice
        return out

    def norm_profile(self, amps: np.ndarray) -> _NormProfile:
        p = (np.abs(amps) ** 2)[self.diag_mask].reshape(-1)
        coef = np.bincount(self.diag_inv, weights=p, minlength=self.diag_bins.size)
        ag = (amps[..., G][self.comb] if not self.all_comb
              else amps[..., G]).reshape(-1)
        af = (amps[..., F][self.comb] if not self.all_comb
              else amps[..., F]).reshape(-1) * np.exp(1j * self.phase.reshape(-1))
        nb = self.pair_bins.size
        sg = np.bincount(self.pair_inv, weights=np.abs(ag) ** 2, minlength=nb)
        sf = np.bincount(self.pair_inv, weights=np.abs(af) ** 2, minlength=nb)
        cross_im = (np.conj(ag) * af).imag
        sx_im = np.bincount(self.pair_inv, weights=cross_im, minlength=nb)
        pair = (self.pair_bins, self.delta, self.omega, sg, sf, sx_im)
        return _NormProfile("sel", coef, self.diag_bins, pair)


def _theta_for(seg: sched.DiagonalSegment, layout: SystemLayout) -> np.ndarray:
    theta = np.zeros(layout.dims)
    for lvl, mode, chi in seg.terms:
        ax = layout.mode_index(mode)
        n = np.arange(layout.modes[ax].truncation, dtype=float)
        shape = [1] * len(layout.dims)
        shape[ax] = n.size
        contrib = chi * n.reshape(shape)
        sel = np.zeros(ANCILLA_DIM)
        sel[lvl] = 1.0
        ancshape = [1] * len(layout.dims)
        ancshape[-1] = ANCILLA_DIM
        theta = theta + contrib * sel.reshape(ancshape)
    return theta


def propagate_no_jump(psi: StateVector, seg, model: NoiseModel, t: float) -> StateVector:
    """Evolve under exp(-i H_eff t) for one segment; norm is non-increasing."""
    dur = getattr(seg, "duration", 0.0)
    if t > dur * (1 + 1e-12):
        raise ValueError(f"t={t} exceeds segment duration {dur}")
    gamma = decay_rates_diag(psi.layout, model)
    if isinstance(seg, sched.DiagonalSegment):
        prop = _DiagonalProp(_theta_for(seg, psi.layout), gamma)
    elif isinstance(seg, sched.SelectiveSegment):
        prop = _SelectiveProp(seg, gamma)
    else:
        raise TypeError(f"not a timed segment: {seg!r}")
    return StateVector(psi.layout, prop.evolve(psi.amps, t))


# =====================================================================
# schedule runner
# =====================================================================

@dataclass
class _Branch:
    amps: np.ndarray
    record: dict
    released: float = 0.0


@dataclass
class TrajectoryResult:
    """One Monte Carlo trajectory: final state, herald record, jump log."""

    state: Optional[StateVector]
    weight: float
    record: dict
    accepted: bool
    label: str
    jumps: list            # (channel kind:target, absolute time)
    frame: tuple = ()

    @property
    def jump_count(self) -> int:
        return len(self.jumps)


@dataclass
class BranchResult:
    record: dict
    weight: float
    state: StateVector
    decode: sched.DecodeResult
    released: float = 0.0


@dataclass
class _Frame:
    item_index: int
    t0: float
    duration: float
    entries: list          # (record, amps_at_start, profile)
    w_start: float = 0.0
    w_end: float = 0.0


@dataclass
class _Atom:
    item_index: int
    t: float
    mass: float
    kind: str              # 'measure-dead' | 'release'


class ScheduleRunner:
    """Caches propagators and drives enumeration / trajectory sampling."""

    def __init__(self, schedule: sched.Schedule, layout: SystemLayout, model: NoiseModel):
        self.schedule = schedule
        self.layout = layout
        self.model = model
        self.channels = jump_operators(layout, model)
        self.gamma = decay_rates_diag(layout, model)
        self.start_times = schedule.start_times()
        self._props: dict[int, object] = {}
        self._prop_pool: dict = {}
        self._idle: Optional[_DiagonalProp] = None
        self._disp_cache: dict[tuple, np.ndarray] = {}

    # -------------------------------------------------- propagators

    def prop_for(self, idx: int):
        if idx not in self._props:
            item = self.schedule.items[idx]
            if isinstance(item, sched.DiagonalSegment):
                key = ("diag", item.terms, item.duration)
            elif isinstance(item, sched.SelectiveSegment):
                key = ("sel", item.rabi, item.duration, item.comb.tobytes(),
                       np.asarray(item.phases).tobytes())
            else:
                raise TypeError(f"item {idx} is not timed")
            if key not in self._prop_pool:
                if isinstance(item, sched.DiagonalSegment):
                    self._prop_pool[key] = _DiagonalProp(
                        _theta_for(item, self.layout), self.gamma, item.duration)
                else:
                    self._prop_pool[key] = _SelectiveProp(item, self.gamma)
            self._props[idx] = self._prop_pool[key]
        return self._props[idx]

    def idle_prop(self) -> _DiagonalProp:
        # guard-skipped slot: drives off, ancilla parked in |g>, decay only
        if self._idle is None:
            self._idle = _DiagonalProp(np.zeros(self.layout.dims), self.gamma)
        return self._idle

    def displacement(self, mode: str, beta: complex, dtype=np.complex128) -> np.ndarray:
        ax = self.layout.mode_index(mode)
        key = (ax, complex(beta), np.dtype(dtype).char)
        if key not in self._disp_cache:
            n = self.layout.modes[ax].truncation
            self._disp_cache[key] = displacement_matrix(n, beta).astype(dtype)
        return self._disp_cache[key]

    def apply_instant(self, amps: np.ndarray, item) -> np.ndarray:
        if isinstance(item, sched.Displacement):
            ax = self.layout.mode_index(item.mode)
            d = self.displacement(item.mode, item.beta, amps.dtype)
            return _mode_axis_matmul(amps, d, ax)
        if isinstance(item, sched.AncillaPulse):
            u = ancilla_pulse(item.angle, item.phase).astype(amps.dtype, copy=False)
            out = np.empty_like(amps)
            ag, af = amps[..., G], amps[..., F]
            out[..., G] = u[G, G] * ag + u[G, F] * af
            out[..., F] = u[F, G] * ag + u[F, F] * af
            out[..., E] = amps[..., E]
            return out
        if isinstance(item, sched.InstantUnitary):
            flat = item.op.matrix @ amps.reshape(-1)
            return flat.reshape(amps.shape)
        raise TypeError(f"not an instant unitary: {item!r}")

    def release_mode(self, amps: np.ndarray, mode: str) -> tuple[np.ndarray, float]:
        """Contract the mode's dominant Schmidt vector, reset it to vacuum."""
        ax = self.layout.mode_index(mode)
        n = self.layout.modes[ax].truncation
        moved = np.moveaxis(amps, ax, 0).reshape(n, -1)
        rho = moved @ moved.conj().T
        evals, evecs = np.linalg.eigh(rho)
        chi = evecs[:, -1]
        rest = chi.conj() @ moved                    # (other dims,) flattened
        before = float(np.sum(np.abs(amps) ** 2))
        after = float(np.sum(np.abs(rest) ** 2))
        out = np.zeros((n, rest.size), dtype=amps.dtype)
        out[0] = rest
        shape = list(amps.shape)
        del shape[ax]
        out = np.moveaxis(out.reshape([n] + shape), 0, ax)
        return out, before - after

    # -------------------------------------------------- exact enumeration

    def enumerate(self, psi0: StateVector, policy=None, keep_frames: bool = False):
        """No-jump sweep over all acceptance-compatible measurement branches.

        Returns (branch results, W0_alive, frames, atoms).  frames/atoms
        are populated when keep_frames is set and feed the first-jump
        sampler.
        """
        policy = policy or sched.AcceptAll()
        if psi0.layout.dims != self.layout.dims:
            raise LayoutMismatchError("initial state does not match runner layout")
        branches = [_Branch(psi0.amps.copy(), {})]
        frames: list[_Frame] = []
        atoms: list[_Atom] = []
        for idx, item in enumerate(self.schedule.items):
            t0 = self.start_times[idx]
            dur = getattr(item, "duration", 0.0)
            if dur > 0.0:
                entries = []
                for b in branches:
                    run = sched.guard_passes(item.guard, b.record)
                    prop = self.prop_for(idx) if run else self.idle_prop()
                    if keep_frames:
                        entries.append((dict(b.record), b.amps.copy(), prop.norm_profile(b.amps)))
                    b.amps = prop.evolve(b.amps, dur)
                if keep_frames:
                    frames.append(_Frame(idx, t0, dur, entries))
                continue
            if isinstance(item, sched.Measure):
                nxt: list[_Branch] = []
                for b in branches:
                    if not sched.guard_passes(item.guard, b.record):
                        nxt.append(b)
                        continue
                    allowed = policy.allowed(item.name, b.record) & item.accept
                    for lvl, name in ((G, "g"), (E, "e"), (F, "f")):
                        proj = np.zeros_like(b.amps)
                        proj[..., lvl] = b.amps[..., lvl]
                        mass = float(np.sum(np.abs(proj) ** 2))
                        if mass <= PRUNE_WEIGHT:
                            continue
                        if name in allowed:
                            rec = dict(b.record)
                            rec[item.name] = name
                            nxt.append(_Branch(proj, rec, b.released))
                        else:
                            cls = _classify(policy, item.name, b.record, name)
                            atoms.append(_Atom(idx, t0, mass, cls))
                branches = nxt
                continue
            if isinstance(item, sched.Reset):
                for b in branches:
                    if not sched.guard_passes(item.guard, b.record):
                        continue
                    pops = [float(np.sum(np.abs(b.amps[..., l]) ** 2)) for l in range(ANCILLA_DIM)]
                    total = sum(pops)
                    occupied = [l for l, p in enumerate(pops) if p > 1e-12 * max(total, 1e-300)]
                    if len(occupied) > 1:
                        raise ValueError("reset requires a single occupied ancilla level; "
                                         "place it after a measurement")
                    lvl = occupied[0] if occupied else G
                    if lvl != G:
                        out = np.zeros_like(b.amps)
                        out[..., G] = b.amps[..., lvl]
                        b.amps = out
                continue
            if isinstance(item, sched.ModeRelease):
                for b in branches:
                    if not sched.guard_passes(item.guard, b.record):
                        continue
                    b.amps, lost = self.release_mode(b.amps, item.mode)
                    b.released += lost
                    if lost > PRUNE_WEIGHT:
                        atoms.append(_Atom(idx, t0, lost, "release"))
                continue
            if isinstance(item, sched.ApplyChannel):
                for b in branches:
                    b.amps = apply_channel(b.amps, item.channel, self.layout)
                branches = [b for b in branches
                            if float(np.sum(np.abs(b.amps) ** 2)) > 1e-300]
                continue
            # instant unitaries
            for b in branches:
                if sched.guard_passes(item.guard, b.record):
                    b.amps = self.apply_instant(b.amps, item)
        results = []
        w0 = 0.0
        for b in branches:
            w = float(np.sum(np.abs(b.amps) ** 2))
            if w <= PRUNE_WEIGHT:
                continue
            w0 += w
            state = StateVector(self.layout, b.amps / math.sqrt(w))
            results.append(BranchResult(b.record, w, state, policy.decode(b.record), b.released))
        if keep_frames:
            self._fill_frame_bounds(frames, atoms)
        return results, w0, frames, atoms

    @staticmethod
    def _fill_frame_bounds(frames, atoms):
        events = sorted(frames + atoms, key=lambda e: (e.t0 if isinstance(e, _Frame) else e.t,
                                                       0 if isinstance(e, _Frame) else 1))
        w = 1.0
        for ev in events:
            if isinstance(ev, _Frame):
                ev.w_start = w
                drop = sum(p.value(0.0) - p.value(ev.duration) for _, _, p in ev.entries)
                w -= drop
                ev.w_end = w
            else:
                w -= ev.mass

    # -------------------------------------------------- trajectories

    def sample_trajectory(self, psi0: StateVector, seed, policy=None) -> TrajectoryResult:
        """Plain Monte Carlo wave-function trajectory from t = 0."""
        policy = policy or sched.AcceptAll()
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(_seed_key(seed))))
        return self._continue(psi0.amps.copy(), {}, 0, 0.0, rng, policy, [])

    traj_dtype = np.complex128

    def _continue(self, amps, record, start_idx, t_local, rng, policy, jumps) -> TrajectoryResult:
        amps = amps / math.sqrt(float(np.vdot(amps, amps).real))
        w_cur = 1.0
        anc_level = None   # definite ancilla level after a measurement
        for idx in range(start_idx, len(self.schedule.items)):
            item = self.schedule.items[idx]
            offset = t_local if idx == start_idx else 0.0
            dur = getattr(item, "duration", 0.0)
            if dur > 0.0:
                run = sched.guard_passes(item.guard, record)
                prop = self.prop_for(idx) if run else self.idle_prop()
                t = offset
                while True:
                    evolved = prop.evolve(amps, dur - t)
                    w_end = float(np.vdot(evolved, evolved).real)
                    r = rng.uniform(0.0, w_cur)
                    if r <= w_end:
                        amps = evolved
                        w_cur = w_end
                        break
                    profile = prop.norm_profile(amps)
                    tj = _bisect_profile(profile, 0.0, dur - t, r, dur)
                    amps = prop.evolve(amps, tj)
                    amps, kind = self._apply_jump(amps, rng)
                    w_cur = 1.0
                    anc_level = None
                    jumps.append((kind, self.start_times[idx] + t + tj))
                    t += tj
                if run and isinstance(item, sched.SelectiveSegment):
                    anc_level = None   # drives move population between levels
                continue
            if isinstance(item, sched.Measure):
                if not sched.guard_passes(item.guard, record):
                    continue
                probs = np.array([float(np.vdot(amps[..., l], amps[..., l]).real)
                                  for l in range(ANCILLA_DIM)])
                probs = probs / probs.sum()
                lvl = int(rng.choice(ANCILLA_DIM, p=probs))
                name = "gef"[lvl]
                out = np.zeros_like(amps)
                out[..., lvl] = amps[..., lvl]
                amps = out / math.sqrt(float(np.vdot(out, out).real))
                w_cur = 1.0
                anc_level = lvl
                record = dict(record)
                record[item.name] = name
                if name not in (policy.allowed(item.name, record) & item.accept):
                    cls = _classify(policy, item.name, record, name)
                    return TrajectoryResult(None, 1.0, record, False, cls, jumps)
                continue
            if isinstance(item, sched.Reset):
                if not sched.guard_passes(item.guard, record):
                    continue
                if anc_level is not None:
                    lvl = anc_level
                else:
                    pops = [float(np.vdot(amps[..., l], amps[..., l]).real)
                            for l in range(ANCILLA_DIM)]
                    lvl = int(np.argmax(pops))
                    if pops[lvl] < (1 - 1e-9) * sum(pops):
                        raise ValueError("reset on a multi-level ancilla state")
                if lvl != G:
                    out = np.zeros_like(amps)
                    out[..., G] = amps[..., lvl]
                    amps = out
                anc_level = G
                continue
            if isinstance(item, sched.ModeRelease):
                if not sched.guard_passes(item.guard, record):
                    continue
                amps, lost = self.release_mode(amps, item.mode)
                keep = float(np.vdot(amps, amps).real)
                if rng.uniform() > keep / (keep + lost):
                    return TrajectoryResult(None, 1.0, record, False, "release-loss", jumps)
                amps = amps / math.sqrt(keep)
                w_cur = 1.0
                continue
            if sched.guard_passes(item.guard, record):
                amps = self.apply_instant(amps, item)
                if isinstance(item, (sched.AncillaPulse, sched.InstantUnitary)):
                    anc_level = None
        decode = policy.decode(record)
        final_norm = math.sqrt(float(np.sum(np.abs(amps) ** 2)))
        state = StateVector(self.layout, amps / final_norm)
        return TrajectoryResult(state, 1.0, record, decode.accepted, decode.label,
                                jumps, decode.frame)

    def _apply_jump(self, amps, rng):
        p = np.abs(amps) ** 2
        weights = np.array([_channel_weight_from_p(p, ch, self.layout)
                            for ch in self.channels])
        total = weights.sum()
        if total <= 0:
            raise RuntimeError("jump requested but all channel weights vanish")
        k = int(rng.choice(len(self.channels), p=weights / total))
        ch = self.channels[k]
        out = apply_channel(amps, ch, self.layout)
        out = out / math.sqrt(float(np.vdot(out, out).real))
        return out, f"{ch.kind}:{ch.target}"

    # -------------------------------------------------- stratified estimator

    @staticmethod
    def jump_mass(frames) -> float:
        """Total probability that the first deviation is a quantum jump."""
        return float(sum(f.w_start - f.w_end for f in frames))

    def sample_jump_stratum_trajectory(self, frames, atoms, w0, seed, policy,
                                       frame_index: Optional[int] = None
                                       ) -> TrajectoryResult:
        """One trajectory conditioned on the first deviation being a jump.

        Dead measurement outcomes on the no-jump path (restart / discard
        atoms) carry exactly known masses and are handled analytically by
        the estimator; here only the jump portion of the survival-mass drop
        is inverted.  With frame_index the first jump is confined to that
        timed segment (per-segment stratification); the suffix after the
        jump is ordinary Monte Carlo.
        """
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(_seed_key(seed))))
        if frame_index is None:
            u = rng.uniform(0.0, self.jump_mass(frames))
            pool = frames
        else:
            ev = frames[frame_index]
            u = rng.uniform(0.0, ev.w_start - ev.w_end)
            pool = [ev]
        for ev in pool:
            drop = ev.w_start - ev.w_end
            if u > drop or not ev.entries:
                u -= drop
                continue
            # invert the in-segment survival at target w_start - u
            tj = _bisect_total(ev, ev.w_start - u)
            dens = np.array([max(-p.derivative(tj), 0.0) for _, _, p in ev.entries])
            if dens.sum() <= 0:
                dens = np.array([p.value(tj) for _, _, p in ev.entries])
            bi = int(rng.choice(len(ev.entries), p=dens / dens.sum()))
            record, amps0, _ = ev.entries[bi]
            item = self.schedule.items[ev.item_index]
            run = sched.guard_passes(item.guard, record)
            prop = self.prop_for(ev.item_index) if run else self.idle_prop()
            amps = prop.evolve(amps0, tj)
            amps, kind = self._apply_jump(amps, rng)
            jumps = [(kind, ev.t0 + tj)]
            res = self._continue(amps.astype(self.traj_dtype), dict(record),
                                 ev.item_index, tj, rng, policy, jumps)
            return res
        # numerical corner: u fell into terminal round-off
        return TrajectoryResult(None, 1.0, {"_atom": "roundoff"}, False, "discard", [])


def _classify(policy, name, record, outcome) -> str:
    fn = getattr(policy, "atom_class", None)
    if fn is None:
        return "discard"
    cls = fn(name, record, outcome)
    return cls if cls in ("discard", "restart") else "discard"


def _seed_key(seed):
    if isinstance(seed, (tuple, list)):
        return list(seed)
    return [int(seed)]


def _bisect_profile(profile, lo, hi, target, scale):
    tol = JUMP_TIME_RTOL * max(scale, 1e-300)
    flo, fhi = profile.value(lo), profile.value(hi)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        fm = profile.value(mid)
        if fm >= target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _bisect_total(frame, target):
    def total(t):
        return frame.w_start - sum((p.value(0.0) - p.value(t)) for _, _, p in frame.entries)

    lo, hi = 0.0, frame.duration
    tol = JUMP_TIME_RTOL * max(frame.duration, 1e-300)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if total(mid) >= target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# =====================================================================
# public operations
# =====================================================================

def inject_channel_schedule(schedule: sched.Schedule, channel: JumpChannel,
                            t: float) -> sched.Schedule:
    """Copy of the schedule with one bare jump operator inserted at time t.

    Timed segments are split at t; both halves keep their generator and
    guards (the closed-form propagators compose exactly).
    """
    import dataclasses
    total = schedule.duration
    if not 0.0 <= t <= total:
        raise ValueError(f"injection time {t} outside [0, {total}]")
    items = []
    clock = 0.0
    placed = False
    for it in schedule.items:
        dur = getattr(it, "duration", 0.0)
        if not placed and dur > 0.0 and clock <= t < clock + dur:
            tau = t - clock
            if tau <= 0.0:
                items.append(sched.ApplyChannel(channel))
                items.append(it)
            else:
                items.append(dataclasses.replace(it, duration=tau))
                items.append(sched.ApplyChannel(channel))
                items.append(dataclasses.replace(it, duration=dur - tau))
            placed = True
        else:
            items.append(it)
        clock += dur
    if not placed:
        items.append(sched.ApplyChannel(channel))
    return sched.Schedule(items)


def enumerate_no_jump_branches(schedule: sched.Schedule, psi0: StateVector,
                               model: NoiseModel, policy=None,
                               branch_cap: int = 4096):
    """Exact zero-jump branch sweep; returns (list of BranchResult, W0)."""
    runner = ScheduleRunner(schedule, psi0.layout, model)
    results, w0, _, _ = runner.enumerate(psi0, policy)
    if len(results) > branch_cap:
        raise RuntimeError(f"branch cap exceeded: {len(results)} > {branch_cap}")
    return results, w0


def sample_trajectory(schedule: sched.Schedule, psi0: StateVector, model: NoiseModel,
                      seed, policy=None) -> TrajectoryResult:
    runner = ScheduleRunner(schedule, psi0.layout, model)
    return runner.sample_trajectory(psi0, seed, policy)


@dataclass
class EstimatorResult:
    """Post-selected infidelity and success probability with bootstrap CIs.

    Success probability conditions on preparation retries: restart-class
    herald failures (spoiled preps of not-yet-entangled modes, repeated at
    negligible cost) are excluded from the denominator, every other discard
    counts against success.
    """

    infidelity: float
    infidelity_ci: tuple[float, float]
    success_prob: float
    success_ci: tuple[float, float]
    w0: float
    zero_jump_weights: dict
    n_zero_branches: int
    n_jump_traj: int
    seed: int
    method: str = "exact zero-jump stratum + first-jump forcing"
    accepted_zero_mass: float = 0.0
    restart_prob: float = 0.0
    raw_accept_prob: float = 0.0
    meta: dict = field(default_factory=dict)


_WORKER_CTX: dict = {}


def _run_jump_batch(tasks):
    runner = _WORKER_CTX["runner"]
    frames = _WORKER_CTX["frames"]
    atoms = _WORKER_CTX["atoms"]
    w0 = _WORKER_CTX["w0"]
    policy = _WORKER_CTX["policy"]
    value_fn = _WORKER_CTX["value_fn"]
    out = []
    for stratum, j, s in tasks:
        tr = runner.sample_jump_stratum_trajectory(frames, atoms, w0, s, policy,
                                                   frame_index=stratum)
        if tr.accepted and value_fn is not None:
            val = value_fn(tr)
        else:
            val = 0.0
        fid = val[0] if isinstance(val, tuple) else float(val)
        out.append((stratum, j, tr.accepted, fid, len(tr.jumps),
                    tr.label == "restart"))
    return out


def stratified_estimate(schedule: sched.Schedule, psi0: StateVector, model: NoiseModel,
                        value_fn: Optional[Callable[[TrajectoryResult], float]],
                        n_traj: int, seed: int, policy=None, workers: int = 1,
                        bootstrap: int = 1000, fast_traj: bool = True) -> EstimatorResult:
    """Unbiased post-selected estimate: exact zero-jump stratum plus Monte
    Carlo over trajectories that jump or herald outside the acceptance set.

    value_fn maps an accepted TrajectoryResult to the fidelity of its final
    state against the experiment target (frame resolution included by the
    caller).  With all rates zero the estimator is exact and CI widths are 0.
    """
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    policy = policy or sched.AcceptAll()
    runner = ScheduleRunner(schedule, psi0.layout, model)
    if fast_traj:
        # the exact zero-jump stratum stays in double precision; sampled
        # trajectory suffixes run in complex64 (value noise ~1e-6, far below
        # the Monte Carlo resolution)
        runner.traj_dtype = np.complex64
    keep = len(runner.channels) > 0
    branches, w0, frames, atoms = runner.enumerate(psi0, policy, keep_frames=keep)
    acc = [b for b in branches if b.decode.accepted]
    s0 = sum(b.weight for b in acc)
    a0 = 0.0
    for b in acc:
        tr = TrajectoryResult(b.state, b.weight, b.record, True, b.decode.label, [],
                              b.decode.frame)
        val = value_fn(tr) if value_fn is not None else 1.0
        a0 += b.weight * (val[0] if isinstance(val, tuple) else float(val))
    restart0 = sum(a.mass for a in atoms if a.kind == "restart")
    lam = ScheduleRunner.jump_mass(frames) if keep else 0.0
    zero_w = {_record_key(b.record): b.weight for b in branches}

    if not keep or lam <= 1e-15:
        fid = a0 / s0 if s0 > 0 else float("nan")
        p_succ = s0 / max(1.0 - restart0, 1e-300)
        inf = 1.0 - fid if s0 > 0 else float("nan")
        return EstimatorResult(inf, (inf, inf), p_succ, (p_succ, p_succ), w0,
                               zero_w, len(branches), 0, seed,
                               accepted_zero_mass=s0, restart_prob=restart0,
                               raw_accept_prob=s0,
                               meta={"note": "no jump channels; exact"})

    # two-stage stratification over timed segments: a pilot probes every
    # segment's first-jump window (rare-but-heavy windows included, e.g.
    # losses after a mode's last parity check), then the remaining budget is
    # spread Neyman-style by each stratum's mass-weighted spread of the
    # post-selected infidelity contribution
    drops = np.array([max(f.w_start - f.w_end, 0.0) for f in frames])
    live = drops > 1e-18 * max(lam, 1e-300)
    n_live = max(int(live.sum()), 1)
    pilot = max(6, min(n_traj // (2 * n_live), 60))
    alloc = np.where(live, pilot, 0)

    ctx = {"runner": runner, "frames": frames, "atoms": atoms, "w0": w0,
           "policy": policy, "value_fn": value_fn}
    _WORKER_CTX.update(ctx)   # inherited by forked workers, no pickling

    def run_tasks(tasks):
        if workers > 1 and len(tasks) > 8:
            import multiprocessing as mp
            chunks = [tasks[i::workers] for i in range(workers)]
            out = []
            with ProcessPoolExecutor(max_workers=workers,
                                     mp_context=mp.get_context("fork")) as ex:
                for part in ex.map(_run_jump_batch, chunks):
                    out.extend(part)
            return out
        return _run_jump_batch(tasks)

    try:
        tasks = [(i, j, (seed, i, j)) for i in range(len(frames))
                 for j in range(alloc[i])]
        rows = run_tasks(tasks)
        # Neyman reallocation on the infidelity-contribution spread
        remaining = max(n_traj - len(rows), 0)
        if remaining > 0:
            sigma = np.zeros(len(frames))
            for i in range(len(frames)):
                ys = [r[2] - r[3] for r in rows if r[0] == i]   # acc - fid
                if len(ys) > 1:
                    sigma[i] = float(np.std(ys))
            # hedge toward proportional allocation: pilots can miss a
            # stratum's rare heavy branch entirely
            hedge = 0.3 * float(np.dot(drops, sigma)) / max(float(drops.sum()), 1e-300)
            score = drops * np.maximum(sigma, max(hedge, 1e-4))
            if score.sum() <= 0:
                score = drops.astype(float)
            extra = np.floor(remaining * score / score.sum()).astype(int)
            tasks2 = [(i, alloc[i] + j, (seed, i, alloc[i] + j))
                      for i in range(len(frames)) for j in range(extra[i])]
            rows.extend(run_tasks(tasks2))
            alloc = alloc + extra
    finally:
        _WORKER_CTX.clear()
    rows.sort(key=lambda r: (r[0], r[1]))   # worker-count independent ordering

    by_stratum: dict[int, list] = {}
    for r in rows:
        by_stratum.setdefault(r[0], []).append(r)
    strata = []
    for i, rs in sorted(by_stratum.items()):
        strata.append((drops[i],
                       np.array([1.0 if r[2] else 0.0 for r in rs]),
                       np.array([r[3] for r in rs]),
                       np.array([1.0 if r[5] else 0.0 for r in rs])))

    def estimates(rng_or_none):
        s_hat, a_hat, r_hat = s0, a0, restart0
        for mass, acc_i, val_i, res_i in strata:
            n_i = len(acc_i)
            if rng_or_none is None:
                idx = slice(None)
            else:
                idx = rng_or_none.integers(0, n_i, n_i)
            s_hat += mass * float(np.mean(acc_i[idx]))
            a_hat += mass * float(np.mean(val_i[idx]))
            r_hat += mass * float(np.mean(res_i[idx]))
        fid = a_hat / s_hat if s_hat > 0 else float("nan")
        return 1.0 - fid, s_hat / max(1.0 - r_hat, 1e-300), s_hat, r_hat

    inf_mean, p_mean, s_raw, r_mean = estimates(None)
    boot_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 0xB007])))
    infs, ps = [], []
    for _ in range(bootstrap):
        i, p, _, _ = estimates(boot_rng)
        infs.append(i)
        ps.append(p)
    inf_ci = (float(np.percentile(infs, 2.5)), float(np.percentile(infs, 97.5)))
    p_ci = (float(np.percentile(ps, 2.5)), float(np.percentile(ps, 97.5)))
    jumps_arr = np.array([r[4] for r in rows])
    return EstimatorResult(inf_mean, inf_ci, p_mean, p_ci, w0, zero_w,
                           len(branches), len(rows), seed,
                           accepted_zero_mass=s0, restart_prob=r_mean,
                           raw_accept_prob=s_raw,
                           meta={"mean_jumps": float(np.mean(jumps_arr)),
                                 "jump_stratum_mass": lam,
                                 "alloc": alloc.tolist()})


def _record_key(record: Mapping[str, str]) -> str:
    return ",".join(f"{k}={v}" for k, v in sorted(record.items()))


# =====================================================================
# dense Lindblad oracle
# =====================================================================

def _superop_hamiltonian(h: np.ndarray) -> np.ndarray:
    d = h.shape[0]
    eye = np.eye(d)
    return -1j * (np.kron(h, eye) - np.kron(eye, h.T))


def _superop_dissipator(l: np.ndarray) -> np.ndarray:
    d = l.shape[0]
    eye = np.eye(d)
    ldl = l.conj().T @ l
    return (np.kron(l, l.conj())
            - 0.5 * np.kron(ldl, eye)
            - 0.5 * np.kron(eye, ldl.T))


def lindblad_evolve(rho: np.ndarray, schedule: sched.Schedule, layout: SystemLayout,
                    model: NoiseModel, dim_cap: int = ORACLE_DIM_CAP,
                    no_jump_only: bool = False) -> np.ndarray:
    """Dense master-equation propagation of a schedule (validation oracle).

    Measurements act as dephasing channels (outcome-summed), resets as
    re-initialization channels.  With no_jump_only the recycling terms
    L rho L^dag are dropped, so tr(rho) equals the no-jump survival mass.
    Guarded items are not supported here.
    """
    d = layout.dim
    if d > dim_cap:
        raise ValueError(f"oracle supports dim <= {dim_cap}, layout has {d}")
    for it in schedule.items:
        if getattr(it, "guard", ()):
            raise ValueError("lindblad oracle does not support guarded items")
    rho = np.array(rho, dtype=np.complex128, copy=True)
    if rho.shape != (d, d):
        raise LayoutMismatchError(f"rho shape {rho.shape} != ({d},{d})")
    channels = jump_operators(layout, model)
    diss = np.zeros((d * d, d * d), dtype=np.complex128)
    for ch in channels:
        lmat = np.asarray(ch.operator(layout).todense())
        if no_jump_only:
            eye = np.eye(d)
            ldl = lmat.conj().T @ lmat
            diss += -0.5 * np.kron(ldl, eye) - 0.5 * np.kron(eye, ldl.T)
        else:
            diss += _superop_dissipator(lmat)
    for item in schedule.items:
        dur = getattr(item, "duration", 0.0)
        if dur > 0.0:
            if isinstance(item, sched.DiagonalSegment):
                h = np.diag(_theta_for(item, layout).reshape(-1))
            elif isinstance(item, sched.SelectiveSegment):
                h = _selective_hamiltonian(item, layout)
            else:
                raise TypeError(f"unsupported timed item {item!r}")
            gen = _superop_hamiltonian(h) + diss
            u = dense_expm(gen * dur)
            rho = (u @ rho.reshape(-1)).reshape(d, d)
            continue
        if isinstance(item, sched.Measure):
            new = np.zeros_like(rho)
            for lvl in range(ANCILLA_DIM):
                p = _level_projector(layout, lvl)
                new += p @ rho @ p
            rho = new
            continue
        if isinstance(item, sched.Reset):
            new = np.zeros_like(rho)
            for lvl in range(ANCILLA_DIM):
                k = _level_transfer(layout, lvl)
                new += k @ rho @ k.conj().T
            rho = new
            continue
        if isinstance(item, sched.ModeRelease):
            raise ValueError("lindblad oracle does not support mode release")
        if isinstance(item, sched.ApplyChannel):
            lmat = np.asarray(item.channel.bare_matrix(layout).todense())
            rho = lmat @ rho @ lmat.conj().T
            continue
        u = _instant_matrix(item, layout)
        rho = u @ rho @ u.conj().T
    return rho


def _level_projector(layout, lvl):
    m = np.zeros((ANCILLA_DIM, ANCILLA_DIM))
    m[lvl, lvl] = 1.0
    return np.asarray(embed(m, "ancilla", layout).matrix.todense())


def _level_transfer(layout, lvl):
    m = np.zeros((ANCILLA_DIM, ANCILLA_DIM))
    m[G, lvl] = 1.0
    return np.asarray(embed(m, "ancilla", layout).matrix.todense())


def _selective_hamiltonian(seg: sched.SelectiveSegment, layout: SystemLayout) -> np.ndarray:
    mode_dims = layout.dims[:-1]
    comb = np.asarray(seg.comb, dtype=bool).reshape(-1)
    phases = np.asarray(seg.phases, dtype=float).reshape(-1)
    nmode = int(np.prod(mode_dims))
    h = np.zeros((layout.dim, layout.dim), dtype=np.complex128)
    for k in range(nmode):
        if not comb[k]:
            continue
        gi = k * ANCILLA_DIM + G
        fi = k * ANCILLA_DIM + F
        h[fi, gi] = (seg.rabi / 2.0) * np.exp(1j * phases[k])
        h[gi, fi] = (seg.rabi / 2.0) * np.exp(-1j * phases[k])
    return h


def _instant_matrix(item, layout) -> np.ndarray:
    if isinstance(item, sched.Displacement):
        ax = layout.mode_index(item.mode)
        n = layout.modes[ax].truncation
        return np.asarray(embed(displacement_matrix(n, item.beta), ax, layout).matrix.todense())
    if isinstance(item, sched.AncillaPulse):
        return np.asarray(embed(ancilla_pulse(item.angle, item.phase), "ancilla",
                                layout).matrix.todense())
    if isinstance(item, sched.InstantUnitary):
        return np.asarray(item.op.matrix.todense())
    raise TypeError(f"not an instant unitary: {item!r}")
