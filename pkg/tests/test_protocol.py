import math

import numpy as np
import pytest

from catprep import engine as eng
from catprep import hilbert as hb
from catprep import noise as nm
from catprep import protocol as pro
from catprep import schedule as sched

ALPHA = 2.6
CHI = 2 * math.pi * 2.0   # MHz units: time in microseconds
EXP2A2 = math.exp(-2 * ALPHA ** 2)


def cat_layout(n_modes=1, trunc=None):
    trunc = trunc or hb.truncation_guard(ALPHA) + 4
    modes = tuple(hb.ModeSpec(trunc, f"m{i}") for i in range(n_modes))
    coup = {m.label: hb.Coupling(CHI, CHI) for m in modes}
    return hb.SystemLayout(modes=modes, couplings=coup)


def params():
    return pro.ProtocolParams(alpha=ALPHA)


def cat(layout, which, mode=0):
    return hb.cat_amplitudes(layout.modes[mode], ALPHA, which)


def run(psi, gadget, model=None):
    return pro.apply_gadget(psi, gadget, model)


def outcome_weights(results):
    out = {}
    for r in results:
        out[r.outcome.label] = out.get(r.outcome.label, 0.0) + r.weight
    return out


# ---------------------------------------------------------------- parity

def test_parity_fock2_always_even():
    layout = cat_layout()
    psi = hb.basis_state(layout, (2,))
    res = run(psi, pro.parity_measure(layout, "m0", "p", params()))
    w = outcome_weights(res)
    assert abs(w.get("even", 0.0) - 1.0) < 1e-9
    assert "odd" not in w


def test_parity_on_coherent_projects_even():
    # oracle: P(even) = (1 + e^{-2 a^2}) / 2; accepted state ~ |a> + |-a>
    layout = cat_layout()
    psi = hb.product_state(layout, [hb.coherent_state(layout.modes[0], ALPHA)])
    res = run(psi, pro.parity_measure(layout, "m0", "p", params()))
    w = outcome_weights(res)
    want = 0.5 * (1 + EXP2A2)
    assert abs(w["even"] - want) < 1e-9
    even = [r for r in res if r.outcome.label == "even"][0]
    target = hb.product_state(layout, [cat(layout, "+")])
    assert hb.fidelity(even.state, target) > 1 - 1e-6


def test_parity_outcomes_sum_to_one():
    layout = cat_layout()
    psi = hb.product_state(layout, [hb.coherent_state(layout.modes[0], ALPHA)])
    gadget = pro.parity_measure(layout, "m0", "p0", params())
    runner = eng.ScheduleRunner(sched.Schedule(list(gadget.items)), layout, nm.noiseless())
    branches, w0, _, atoms = runner.enumerate(psi, pro.GadgetPolicy(gadget))
    total = sum(b.weight for b in branches) + sum(a.mass for a in atoms)
    assert abs(total - 1.0) < 1e-10


def test_parity_dephasing_mid_wait_never_false_accepts():
    # a dephasing jump during the dispersive wait randomizes the round
    # outcome but commutes with the phase accrual: accepted branches stay
    # exact parity projections
    layout = cat_layout()
    psi = hb.product_state(layout, [hb.coherent_state(layout.modes[0], ALPHA)])
    gadget = pro.parity_measure(layout, "m0", "p", params())
    base = sched.Schedule(list(gadget.items))
    chan = nm.JumpChannel("ancilla_dephasing", "ancilla", 1.0, eps_e=1.0, eps_f=2.0)
    wait = math.pi / CHI
    target = hb.product_state(layout, [cat(layout, "+")])
    for frac in (0.25, 0.5, 0.75):
        injected = eng.inject_channel_schedule(base, chan, frac * wait)
        runner = eng.ScheduleRunner(injected, layout, nm.noiseless())
        branches, _, _, _ = runner.enumerate(psi, pro.GadgetPolicy(gadget))
        for b in branches:
            if gadget.outcome(b.record).label == "even" and b.weight > 1e-12:
                assert hb.fidelity(b.state, target) > 1 - 1e-9


# ---------------------------------------------------------------- prep_plus

def test_prep_plus_state_and_success():
    layout = cat_layout()
    psi = hb.vacuum_state(layout)
    res = run(psi, pro.prep_plus(layout, "m0", "pp", params(), sign="+"))
    acc = [r for r in res if r.outcome.accept]
    assert len(acc) == 1
    target = hb.product_state(layout, [cat(layout, "+")])
    assert hb.fidelity(acc[0].state, target) > 1 - 1e-6
    assert abs(acc[0].weight - 0.5 * (1 + EXP2A2)) < 1e-8


def test_prep_minus_state():
    layout = cat_layout()
    psi = hb.vacuum_state(layout)
    res = run(psi, pro.prep_plus(layout, "m0", "pm", params(), sign="-"))
    acc = [r for r in res if r.outcome.accept]
    target = hb.product_state(layout, [cat(layout, "-")])
    assert hb.fidelity(acc[0].state, target) > 1 - 1e-6


# ---------------------------------------------------------------- discriminate

def disc_layout():
    return cat_layout(trunc=hb.truncation_guard(2 * ALPHA) + 2)


def test_discriminate_target_component_conclusive():
    layout = disc_layout()
    psi = hb.product_state(layout, [hb.coherent_state(layout.modes[0], ALPHA)])
    res = run(psi, pro.discriminate(layout, "m0", ALPHA, "d", params()))
    w = outcome_weights(res)
    assert w["conclusive"] > 1 - 1e-6


def test_discriminate_wrong_component_false_positive_bound():
    # oracle: P(f) <= e^{-|2b|^2} (1 + |2b|^2) from the displaced overlap
    layout = disc_layout()
    psi = hb.product_state(layout, [hb.coherent_state(layout.modes[0], -ALPHA)])
    res = run(psi, pro.discriminate(layout, "m0", ALPHA, "d", params()))
    w = outcome_weights(res)
    bound = math.exp(-4 * ALPHA ** 2) * (1 + 4 * ALPHA ** 2) + 1e-10
    assert w.get("conclusive", 0.0) <= bound


def test_discriminate_dephasing_mid_pulse_no_corrupt_conclusive():
    layout = disc_layout()
    psi = hb.product_state(layout, [hb.coherent_state(layout.modes[0], ALPHA)])
    gadget = pro.discriminate(layout, "m0", ALPHA, "d", params())
    base = sched.Schedule(list(gadget.items))
    seg = [it for it in gadget.items if isinstance(it, sched.SelectiveSegment)][0]
    chan = nm.JumpChannel("ancilla_dephasing", "ancilla", 1.0, eps_e=1.0, eps_f=2.0)
    # conclusive target: the beta component projected out (= |alpha> here)
    target = hb.product_state(layout, [hb.coherent_state(layout.modes[0], ALPHA)])
    for frac in (0.2, 0.5, 0.8):
        injected = eng.inject_channel_schedule(base, chan, frac * seg.duration)
        runner = eng.ScheduleRunner(injected, layout, nm.noiseless())
        branches, _, _, _ = runner.enumerate(psi, pro.GadgetPolicy(gadget))
        for b in branches:
            if gadget.outcome(b.record).label == "conclusive" and b.weight > 1e-12:
                assert hb.fidelity(b.state, target) > 1 - 1e-6


# ---------------------------------------------------------------- measure_x

def test_measure_x_plus_input():
    layout = disc_layout()
    psi = hb.product_state(layout, [cat(layout, "+")])
    res = run(psi, pro.measure_x(layout, "m0", "mx", params()))
    w = outcome_weights(res)
    assert w.get("plus", 0.0) > 1 - 10 * EXP2A2
    stage_w = {}
    for r in res:
        if r.outcome.label == "plus":
            k = [i for i in range(4) if r.record.get(f"mx.s{i}.m") == "f"][0]
            stage_w[k] = stage_w.get(k, 0.0) + r.weight
    assert abs(stage_w[0] - 0.5) < 0.01
    assert abs(stage_w[1] - 0.5) < 0.01


def test_measure_x_minus_input():
    # the -i a / +i a legs sit at distance sqrt(2) a from the first two
    # displacement targets, so false-plus leakage is ~4 e^{-2a^2}(1+2a^2)
    layout = disc_layout()
    psi = hb.product_state(layout, [cat(layout, "-")])
    res = run(psi, pro.measure_x(layout, "m0", "mx", params()))
    w = outcome_weights(res)
    leak = 12 * (1 + 2 * ALPHA ** 2) * EXP2A2
    assert w.get("minus", 0.0) > 1 - leak
    assert w.get("plus", 0.0) < leak


def test_measure_x_zero_logical_splits_evenly():
    layout = disc_layout()
    psi = hb.product_state(layout, [cat(layout, "0")])
    res = run(psi, pro.measure_x(layout, "m0", "mx", params()))
    w = outcome_weights(res)
    assert abs(w.get("plus", 0.0) - 0.5) < 5e-3
    assert abs(w.get("minus", 0.0) - 0.5) < 5e-3


# ---------------------------------------------------------------- phase gates

def logical_state(layout, c0, c1, mode=0):
    v = c0 * cat(layout, "0", mode) + c1 * cat(layout, "1", mode)
    v = v / np.linalg.norm(v)
    return v


def test_z_rot_zero_identity():
    layout = cat_layout()
    v = logical_state(layout, 1 / math.sqrt(2), 1j / math.sqrt(2))
    psi = hb.product_state(layout, [v])
    res = run(psi, pro.z_rot(layout, "m0", 0.0, "z", params()))
    acc = [r for r in res if r.outcome.accept]
    assert len(acc) == 1
    assert abs(acc[0].weight - 1.0) < 1e-9
    assert hb.fidelity(acc[0].state, psi) > 1 - 1e-8


def test_z_rot_pi_maps_plus_to_minus():
    layout = cat_layout()
    psi = hb.product_state(layout, [cat(layout, "+")])
    res = run(psi, pro.z_rot(layout, "m0", math.pi, "z", params()))
    acc = [r for r in res if r.outcome.accept][0]
    target = hb.product_state(layout, [cat(layout, "-")])
    assert hb.fidelity(acc.state, target) > 1 - 1e-6


def test_z_rot_matches_logical_action():
    theta = 0.77
    layout = cat_layout()
    c0, c1 = 0.6, 0.8j
    psi = hb.product_state(layout, [logical_state(layout, c0, c1)])
    res = run(psi, pro.z_rot(layout, "m0", theta, "z", params()))
    acc = [r for r in res if r.outcome.accept][0]
    tgt = hb.product_state(layout, [logical_state(layout, c0, c1 * np.exp(1j * theta))])
    assert hb.fidelity(acc.state, tgt) > 1 - 1e-8


def test_pulse_pair_phase_identity_2x2():
    # build-time oracle: a pi pulse pair with second-pulse phase offset D
    # imprints the loop phase pi - D on the driven pair
    for delta in (0.0, 0.4, 1.3, math.pi):
        u1 = hb.ancilla_pulse(math.pi, 0.0)
        u2 = hb.ancilla_pulse(math.pi, delta)
        total = u2 @ u1
        got = total[hb.G, hb.G]
        want = np.exp(1j * (math.pi - delta))
        assert abs(got - want) < 1e-12


def test_zz_rot_entangles_plus_pair():
    theta = math.pi / 6
    layout = cat_layout(n_modes=2)
    plus = cat(layout, "+")
    psi = hb.product_state(layout, [plus, plus])
    res = run(psi, pro.zz_rot(layout, "m0", "m1", -2 * theta, "zz", params()))
    acc = [r for r in res if r.outcome.accept][0]
    minus = cat(layout, "-")
    tgt_amps = (math.cos(theta) * np.multiply.outer(plus, plus)
                + 1j * math.sin(theta) * np.multiply.outer(minus, minus))
    tgt = hb.product_state(layout, [np.ones(1)] * 0 + [plus, plus])  # placeholder
    full = np.zeros(layout.dims, dtype=complex)
    full[..., hb.G] = tgt_amps
    tgt = hb.StateVector(layout, full)
    tgt = tgt.normalized()
    assert hb.fidelity(acc.state, tgt) > 1 - 1e-6


def test_z_rot_ancilla_decay_heralds_e():
    layout = cat_layout()
    psi = hb.product_state(layout, [cat(layout, "+")])
    gadget = pro.z_rot(layout, "m0", 0.9, "z", params())
    base = sched.Schedule(list(gadget.items))
    seg = [it for it in gadget.items if isinstance(it, sched.SelectiveSegment)][0]
    chan = nm.JumpChannel("ancilla_decay", "ancilla", 1.0)
    for frac in (0.1, 0.5, 0.9):
        injected = eng.inject_channel_schedule(base, chan, frac * seg.duration)
        runner = eng.ScheduleRunner(injected, layout, nm.noiseless())
        branches, _, _, atoms = runner.enumerate(psi, pro.GadgetPolicy(gadget))
        # every surviving amplitude is in |e>: all mass lands in discard atoms
        assert not branches or all(b.weight < 1e-12 for b in branches)
        assert sum(a.mass for a in atoms) > 0


def test_z_rot_dephasing_mid_pulse_accepted_branch_exact():
    # the class-phased loop: a dephasing jump reweights classes uniformly,
    # so the accepted g branch still carries the exact gate action
    theta = 1.1
    layout = cat_layout()
    c0, c1 = 0.6, 0.8j
    psi = hb.product_state(layout, [logical_state(layout, c0, c1)])
    gadget = pro.z_rot(layout, "m0", theta, "z", params())
    base = sched.Schedule(list(gadget.items))
    seg = [it for it in gadget.items if isinstance(it, sched.SelectiveSegment)][0]
    chan = nm.JumpChannel("ancilla_dephasing", "ancilla", 1.0, eps_e=1.0, eps_f=2.0)
    tgt = hb.product_state(layout, [logical_state(layout, c0, c1 * np.exp(1j * theta))])
    for frac in (0.15, 0.5, 0.85):
        injected = eng.inject_channel_schedule(base, chan, frac * seg.duration)
        runner = eng.ScheduleRunner(injected, layout, nm.noiseless())
        branches, _, _, _ = runner.enumerate(psi, pro.GadgetPolicy(gadget))
        accepted = [b for b in branches if gadget.outcome(b.record).accept
                    and b.weight > 1e-12]
        for b in accepted:
            assert hb.fidelity(b.state, tgt) > 1 - 1e-9


# ---------------------------------------------------------------- teleport

def teleport_layout(alpha):
    trunc = hb.truncation_guard(2 * alpha) + 2
    modes = (hb.ModeSpec(trunc, "m0"), hb.ModeSpec(trunc, "m1"))
    coup = {m.label: hb.Coupling(CHI, CHI) for m in modes}
    return hb.SystemLayout(modes=modes, couplings=coup)


def hadamard_case(which_in, which_out, alpha=ALPHA):
    # intrinsic leg-overlap corrections scale as (1 + 2 a^2) e^{-2 a^2}
    scale = (1 + 2 * alpha ** 2) * math.exp(-2 * alpha ** 2)
    layout = teleport_layout(alpha)
    p = pro.ProtocolParams(alpha=alpha)
    c = lambda w, m: hb.cat_amplitudes(layout.modes[m], alpha, w)
    data = hb.product_state(layout, [c(which_in, 0), c("+", 1)])
    gadget = pro.hadamard_teleport(layout, "m0", "m1", "h", p)
    res = run(data, gadget)
    acc = [r for r in res if r.outcome.accept]
    assert len(acc) >= 2   # plus and minus patterns
    total = sum(r.weight for r in acc)
    assert total > 1 - 30 * scale
    tgt_mode = c(which_out, 1)
    for r in acc:
        out_is_minus = r.outcome.label == "minus"
        v = tgt_mode
        if out_is_minus and ("m1", "X") not in r.outcome.frame:
            raise AssertionError("minus outcome must toggle the output frame")
        if out_is_minus:
            # resolve the frame: X_c swaps the codeword classes
            v = resolve_x(layout, tgt_mode, alpha)
        # data mode is measured out: compare the reduced output state
        f = reduced_fidelity(r.state, 1, v)
        assert f > 1 - 10 * scale - 1e-8
    weights = {r.outcome.label: r.weight for r in acc}
    assert abs(weights.get("plus", 0.0) - weights.get("minus", 0.0)) < 0.01


def resolve_x(layout, vec, alpha=ALPHA):
    """Apply the ideal logical X_c to a single-mode code vector."""
    c0 = hb.cat_amplitudes(layout.modes[1], alpha, "0")
    c1 = hb.cat_amplitudes(layout.modes[1], alpha, "1")
    a0 = np.vdot(c0, vec)
    a1 = np.vdot(c1, vec)
    out = a1 * c0 + a0 * c1
    return out / np.linalg.norm(out)


def reduced_fidelity(state, mode_axis, target_vec):
    """<target| rho_mode |target> for one mode of a multimode pure state."""
    amps = state.amps
    moved = np.moveaxis(amps, mode_axis, 0).reshape(amps.shape[mode_axis], -1)
    overlap = target_vec.conj() @ moved
    return float(np.sum(np.abs(overlap) ** 2) / np.sum(np.abs(amps) ** 2))


def test_hadamard_teleport_zero_to_plus():
    hadamard_case("0", "+")


def test_hadamard_teleport_plus_to_zero():
    hadamard_case("+", "0")


def test_hadamard_teleport_sharp_at_large_alpha():
    # at alpha = 3.0 the leg overlaps are ~3e-7, so the logical action is
    # resolved to the 1e-5 level
    hadamard_case("0", "+", alpha=3.0)


# ---------------------------------------------------------------- snap baseline

def test_snap_baseline_noise_free_target():
    layout = cat_layout()
    psi = hb.vacuum_state(layout)
    res = run(psi, pro.snap_baseline_prep(layout, "m0", "snap", params()))
    acc = [r for r in res if r.outcome.accept]
    assert len(acc) == 1
    v = (cat(layout, "0") + np.exp(-1j * math.pi / 4) * cat(layout, "1"))
    v = v / np.linalg.norm(v)
    tgt = hb.product_state(layout, [v])
    assert hb.fidelity(acc[0].state, tgt) > 1 - 1e-5


def test_snap_baseline_two_level_decay_goes_undetected():
    layout = cat_layout()
    psi = hb.vacuum_state(layout)
    gadget = pro.snap_baseline_prep(layout, "m0", "snap", params())
    base = sched.Schedule(list(gadget.items))
    seg = [it for it in gadget.items if isinstance(it, sched.SelectiveSegment)][0]
    t_seg = base.duration - seg.duration
    chan = nm.JumpChannel("ancilla_decay_fg", "ancilla", 1.0)
    injected = eng.inject_channel_schedule(base, chan, t_seg + 0.5 * seg.duration)
    runner = eng.ScheduleRunner(injected, layout, nm.noiseless())
    branches, _, _, _ = runner.enumerate(psi, pro.GadgetPolicy(gadget))
    acc = [b for b in branches if gadget.outcome(b.record).accept and b.weight > 1e-9]
    assert acc   # corrupted branches are accepted: no herald protection
    v = (cat(layout, "0") + np.exp(-1j * math.pi / 4) * cat(layout, "1"))
    v = v / np.linalg.norm(v)
    tgt = hb.product_state(layout, [v])
    worst = min(hb.fidelity(b.state, tgt) for b in acc)
    assert worst < 0.9


# ---------------------------------------------------------------- frame

def test_pauli_frame_xor_composition():
    f = pro.PauliFrame()
    f = f.toggle("m0", "X").toggle("m1", "Z").toggle("m0", "X")
    assert f.x == frozenset()
    assert f.z == frozenset({"m1"})
    g = pro.PauliFrame(frozenset({"m0"}), frozenset())
    assert f.compose(g).x == frozenset({"m0"})
    assert f.compose(f) == pro.PauliFrame()
    assert f.apply_deltas((("m1", "Z"),)) == pro.PauliFrame()
