import math

import numpy as np
import pytest

from catprep import engine as eng
from catprep import hilbert as hb
from catprep import noise as nm
from catprep import schedule as sched


def loss_model(kappa, label="m0"):
    return nm.NoiseModel(modes={label: nm.ModeRates(kappa_loss=kappa)})


def trace_distance(r1, r2):
    ev = np.linalg.eigvalsh(r1 - r2)
    return 0.5 * float(np.sum(np.abs(ev)))


def idle_segment(duration):
    return sched.DiagonalSegment(duration=duration, terms=())


# ------------------------------------------------------- propagate_no_jump

def test_dispersive_phase_on_f_level():
    chi = 2.0
    layout = hb.single_mode_layout(8, chi_f=chi)
    seg = sched.DiagonalSegment(duration=math.pi / chi, terms=((hb.F, "m0", chi),))
    psi = hb.basis_state(layout, (3,), hb.F)
    out = eng.propagate_no_jump(psi, seg, nm.noiseless(), math.pi / chi)
    # chi_f t = pi on |f>|n=3> gives phase e^{-3 i pi} = -1
    assert abs(out.amps[3, hb.F] + 1.0) < 1e-12


def test_pure_loss_no_jump_survival():
    # oracle: norm^2 = exp(|a|^2 (e^{-kt} - 1))
    kappa, alpha, t = 0.7, 1.3, 0.9
    layout = hb.single_mode_layout(40)
    psi = hb.product_state(layout, [hb.coherent_state(layout.modes[0], alpha)])
    out = eng.propagate_no_jump(psi, idle_segment(t), loss_model(kappa), t)
    want = math.exp(alpha ** 2 * (math.exp(-kappa * t) - 1.0))
    assert abs(out.norm2 - want) < 1e-10


def test_selective_pi_pulse_action():
    layout = hb.single_mode_layout(8)
    omega = 3.0
    comb = np.zeros(8, dtype=bool)
    comb[[0, 1]] = True
    seg = sched.SelectiveSegment(duration=math.pi / omega, rabi=omega, comb=comb,
                                 phases=np.full(8, math.pi), modes=("m0",))
    psi0 = hb.basis_state(layout, (0,), hb.G)
    out = eng.propagate_no_jump(psi0, seg, nm.noiseless(), math.pi / omega)
    assert abs(out.amps[0, hb.F] - 1j) < 1e-10   # S flips |g,0> -> i|f,0>
    psi5 = hb.basis_state(layout, (5,), hb.G)
    out5 = eng.propagate_no_jump(psi5, seg, nm.noiseless(), math.pi / omega)
    assert abs(out5.amps[5, hb.G] - 1.0) < 1e-12  # outside the comb: untouched


def test_no_jump_norm_monotone():
    layout = hb.single_mode_layout(20)
    psi = hb.product_state(layout, [hb.coherent_state(layout.modes[0], 1.5)])
    model = nm.NoiseModel(modes={"m0": nm.ModeRates(kappa_loss=0.4, kappa_dephasing=0.2)})
    prev = 1.0
    for t in np.linspace(0.0, 1.0, 17):
        n2 = eng.propagate_no_jump(psi, idle_segment(1.0), model, t).norm2
        assert n2 <= prev + 1e-12
        prev = n2


# ------------------------------------------------------- lindblad oracle

def test_lindblad_zero_noise_unitary():
    chi = 1.7
    layout = hb.single_mode_layout(6, chi_f=chi)
    seg = sched.DiagonalSegment(duration=0.8, terms=((hb.F, "m0", chi),))
    s = sched.Schedule([seg])
    psi = hb.basis_state(layout, (2,), hb.F)
    rho0 = np.outer(psi.flat(), psi.flat().conj())
    rho = eng.lindblad_evolve(rho0, s, layout, nm.noiseless())
    u = np.exp(-1j * chi * 2 * 0.8)
    # pure state stays pure with the dispersive phase
    out = eng.propagate_no_jump(psi, seg, nm.noiseless(), 0.8)
    want = np.outer(out.flat(), out.flat().conj())
    assert np.max(np.abs(rho - want)) < 1e-10


def test_lindblad_pure_loss_keeps_coherent():
    # oracle: rho(t) is the coherent state alpha e^{-kt/2}
    kappa, alpha, t = 0.5, 1.1, 0.7
    layout = hb.single_mode_layout(18)
    psi = hb.product_state(layout, [hb.coherent_state(layout.modes[0], alpha)])
    rho0 = np.outer(psi.flat(), psi.flat().conj())
    rho = eng.lindblad_evolve(rho0, sched.Schedule([idle_segment(t)]), layout,
                              loss_model(kappa))
    tgt = hb.product_state(layout, [hb.coherent_state(layout.modes[0],
                                                      alpha * math.exp(-kappa * t / 2))])
    fid = hb.fidelity_dm(rho, tgt)
    assert abs(np.trace(rho).real - 1.0) < 1e-8
    assert abs(fid - 1.0) < 1e-7


def test_lindblad_dephasing_coherence_decay():
    # oracle: off-diagonal <0|rho|2> decays as e^{-2 k t} for kappa_deph = k
    k, t = 0.35, 0.6
    layout = hb.single_mode_layout(6)
    model = nm.NoiseModel(modes={"m0": nm.ModeRates(kappa_dephasing=k)})
    v = np.zeros(6, dtype=complex)
    v[0] = v[2] = 1 / math.sqrt(2)
    psi = hb.product_state(layout, [v])
    rho0 = np.outer(psi.flat(), psi.flat().conj())
    rho = eng.lindblad_evolve(rho0, sched.Schedule([idle_segment(t)]), layout, model)
    rho_t = rho.reshape(6, 3, 6, 3)
    got = rho_t[0, hb.G, 2, hb.G]
    want = 0.5 * math.exp(-0.5 * k * (2 - 0) ** 2 * t) * 2  # (n-n')^2 k/2 rate
    assert abs(got - 0.5 * math.exp(-2 * k * t)) < 1e-8
    assert abs(np.linalg.eigvalsh(rho).min()) > -1e-8


def test_lindblad_dim_cap():
    layout = hb.single_mode_layout(40)
    rho = np.eye(layout.dim) / layout.dim
    with pytest.raises(ValueError):
        eng.lindblad_evolve(rho, sched.Schedule([idle_segment(0.1)]), layout, nm.noiseless())


# ------------------------------------------------------- trajectories

def test_zero_noise_trajectory_deterministic():
    layout = hb.single_mode_layout(8)
    s = sched.Schedule([idle_segment(1.0)])
    psi = hb.basis_state(layout, (2,))
    tr = eng.sample_trajectory(s, psi, nm.noiseless(), seed=11)
    assert tr.jump_count == 0
    assert tr.weight == 1.0
    assert tr.accepted


def test_seed_determinism():
    layout = hb.single_mode_layout(20)
    psi = hb.product_state(layout, [hb.coherent_state(layout.modes[0], 1.2)])
    s = sched.Schedule([idle_segment(2.0)])
    model = loss_model(0.8)
    t1 = eng.sample_trajectory(s, psi, model, seed=42)
    t2 = eng.sample_trajectory(s, psi, model, seed=42)
    assert t1.jumps == t2.jumps
    assert np.array_equal(t1.state.amps, t2.state.amps)


def test_jump_count_poisson_statistics():
    # oracle: photon-loss jump count over [0,T] is Poisson with
    # mean |alpha|^2 (1 - e^{-k T})
    kappa, alpha, t_total = 0.6, 1.4, 1.0
    layout = hb.single_mode_layout(22)
    psi = hb.product_state(layout, [hb.coherent_state(layout.modes[0], alpha)])
    s = sched.Schedule([idle_segment(t_total)])
    model = loss_model(kappa)
    runner = eng.ScheduleRunner(s, layout, model)
    n = 4000
    counts = np.array([runner.sample_trajectory(psi, (9, i)).jump_count for i in range(n)])
    mean_want = alpha ** 2 * (1 - math.exp(-kappa * t_total))
    se = math.sqrt(mean_want / n)   # Poisson variance = mean
    assert abs(counts.mean() - mean_want) < 3 * se


def test_trajectory_average_matches_lindblad():
    kappa = 0.5
    layout = hb.single_mode_layout(10, chi_f=2.0)
    model = nm.NoiseModel(modes={"m0": nm.ModeRates(kappa_loss=kappa)},
                          ancilla=nm.AncillaRates(gamma_fe=0.3))
    comb = np.zeros(10, dtype=bool)
    comb[[0, 1]] = True
    s = sched.Schedule([
        sched.DiagonalSegment(duration=0.5, terms=((hb.F, "m0", 2.0),)),
        sched.SelectiveSegment(duration=0.7, rabi=math.pi / 0.7, comb=comb,
                               phases=np.zeros(10), modes=("m0",)),
    ])
    v = hb.coherent_amplitudes(1.0, 10)
    anc = np.zeros(3, dtype=complex)
    anc[hb.G] = 1 / math.sqrt(2)
    anc[hb.F] = 1 / math.sqrt(2)
    psi = hb.StateVector(layout, np.multiply.outer(v, anc))
    rho_oracle = eng.lindblad_evolve(np.outer(psi.flat(), psi.flat().conj()), s, layout, model)
    runner = eng.ScheduleRunner(s, layout, model)
    n = 3000
    acc = np.zeros((layout.dim, layout.dim), dtype=complex)
    for i in range(n):
        tr = runner.sample_trajectory(psi, (31, i))
        f = tr.state.flat()
        acc += np.outer(f, f.conj())
    acc /= n
    assert trace_distance(acc, rho_oracle) < 8e-3


# ------------------------------------------------------- branch enumeration

def test_enumeration_no_measure_single_branch():
    layout = hb.single_mode_layout(8)
    s = sched.Schedule([idle_segment(1.0)])
    psi = hb.basis_state(layout, (1,))
    branches, w0 = eng.enumerate_no_jump_branches(s, psi, nm.noiseless())
    assert len(branches) == 1
    assert abs(w0 - 1.0) < 1e-12


def test_enumeration_order_invariance_and_completeness():
    layout = hb.single_mode_layout(8)
    psi = hb.StateVector(layout, np.zeros(layout.dims, dtype=complex))
    psi.amps[2, hb.G] = math.sqrt(0.3)
    psi.amps[3, hb.F] = math.sqrt(0.7)
    s = sched.Schedule([sched.Measure("m"), sched.Reset()])
    branches, w0 = eng.enumerate_no_jump_branches(s, psi, nm.noiseless())
    weights = {b.record["m"]: b.weight for b in branches}
    assert abs(weights["g"] - 0.3) < 1e-12
    assert abs(weights["f"] - 0.7) < 1e-12
    assert abs(w0 - 1.0) < 1e-12


def test_w0_matches_lindblad_no_jump_mass():
    layout = hb.single_mode_layout(10, chi_f=1.5)
    model = nm.NoiseModel(modes={"m0": nm.ModeRates(kappa_loss=0.4, kappa_dephasing=0.1)},
                          ancilla=nm.AncillaRates(gamma_fe=0.25, gamma_phi=0.1))
    comb = np.zeros(10, dtype=bool)
    comb[[0, 1]] = True
    s = sched.Schedule([
        sched.AncillaPulse(math.pi / 2, 0.0),
        sched.DiagonalSegment(duration=0.6, terms=((hb.F, "m0", 1.5),)),
        sched.SelectiveSegment(duration=0.5, rabi=2.0, comb=comb,
                               phases=np.zeros(10), modes=("m0",)),
        sched.Measure("m"),
        sched.Reset(),
    ])
    psi = hb.product_state(layout, [hb.coherent_amplitudes(1.1, 10)])
    branches, w0 = eng.enumerate_no_jump_branches(s, psi, model)
    rho0 = np.outer(psi.flat(), psi.flat().conj())
    rho_nj = eng.lindblad_evolve(rho0, s, layout, model, no_jump_only=True)
    assert abs(w0 - np.trace(rho_nj).real) < 1e-8


# ------------------------------------------------------- stratified estimator

def _mx_like_value(target):
    def fn(tr):
        return hb.fidelity(tr.state, target)
    return fn


def test_estimator_zero_rates_exact():
    layout = hb.single_mode_layout(8)
    psi = hb.basis_state(layout, (2,))
    s = sched.Schedule([idle_segment(1.0)])
    res = eng.stratified_estimate(s, psi, nm.noiseless(),
                                  _mx_like_value(psi), n_traj=10, seed=3)
    assert res.infidelity_ci == (res.infidelity, res.infidelity)
    assert abs(res.infidelity) < 1e-12
    assert res.success_prob == 1.0
    assert res.n_jump_traj == 0


def _superposition_state(layout):
    v = np.zeros(layout.modes[0].truncation, dtype=complex)
    v[0] = v[2] = 1 / math.sqrt(2)
    return hb.product_state(layout, [v])


def test_estimator_matches_plain_monte_carlo():
    kappa = 0.5
    layout = hb.single_mode_layout(20)
    psi = _superposition_state(layout)
    target = psi.copy()
    s = sched.Schedule([idle_segment(0.8)])
    model = loss_model(kappa)
    res = eng.stratified_estimate(s, psi, model, _mx_like_value(target),
                                  n_traj=1500, seed=5)
    runner = eng.ScheduleRunner(s, layout, model)
    n = 4000
    vals = []
    for i in range(n):
        tr = runner.sample_trajectory(psi, (77, i))
        vals.append(hb.fidelity(tr.state, target))
    plain_inf = 1.0 - float(np.mean(vals))
    half = max(res.infidelity_ci[1] - res.infidelity, 2.0 * float(np.std(vals)) / math.sqrt(n))
    assert abs(res.infidelity - plain_inf) < max(4 * half, 1e-9)


def test_estimator_variance_beats_plain_mc():
    kappa = 0.25
    layout = hb.single_mode_layout(20)
    psi = _superposition_state(layout)
    target = psi.copy()
    s = sched.Schedule([idle_segment(0.5)])
    model = loss_model(kappa)
    n = 400
    strat_means, plain_means = [], []
    for rep in range(12):
        res = eng.stratified_estimate(s, psi, model, _mx_like_value(target),
                                      n_traj=n, seed=1000 + rep)
        strat_means.append(res.infidelity)
        runner = eng.ScheduleRunner(s, layout, model)
        vals = [hb.fidelity(runner.sample_trajectory(psi, (rep, i)).state, target)
                for i in range(n)]
        plain_means.append(1.0 - float(np.mean(vals)))
    assert np.std(strat_means) < np.std(plain_means)


def test_estimator_worker_count_independent():
    kappa = 0.4
    layout = hb.single_mode_layout(16)
    psi = hb.product_state(layout, [hb.coherent_state(layout.modes[0], 0.9)])
    s = sched.Schedule([idle_segment(0.7)])
    model = loss_model(kappa)
    r1 = eng.stratified_estimate(s, psi, model, _mx_like_value(psi), n_traj=60,
                                 seed=9, workers=1)
    r2 = eng.stratified_estimate(s, psi, model, _mx_like_value(psi), n_traj=60,
                                 seed=9, workers=2)
    assert r1.infidelity == r2.infidelity
    assert r1.success_prob == r2.success_prob
    assert r1.infidelity_ci == r2.infidelity_ci
