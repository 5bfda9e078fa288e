"""Acceptance criteria 1-9, each at its stated tolerance.

Every test records one ``PASS``/``FAIL`` line, printed in the terminal
summary under "acceptance criteria".
"""

import itertools
import math
import time

import numpy as np
import pytest

from backaction.basis import QuantumState, build_capped_basis, build_fixed_n_basis, fidelity, overlap
from backaction.entanglement import (
    Bipartition,
    asymptotic_entropy,
    entanglement_entropy,
    entropy_bits,
    moments_via_swap,
)
from backaction.lightmatter import forward_measurements, mode_operator, reconstruct_occupations, travelling_wave_operator
from backaction.states import gutzwiller_sf, multimode_pdc, pdc_state, two_sf_entangled
from backaction.trajectory import (
    BhHamiltonian,
    DetectionScheme,
    class_probabilities,
    integrate_with_hamiltonian,
    run_ensemble,
    run_trajectory,
    zeno_check,
)

from conftest import ACCEPTANCE_LINES

LAM = 25.0  # per mode; <N> = 50 over the two modes
ENS_TAU = 64.0
ENS_TRAJ = 200
ENS_SEED = 1000


def record(number, ok, detail):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def detection_ensembles():
    init = gutzwiller_sf(2, LAM)
    scenarios = {
        "a": (mode_operator(2, math.pi), DetectionScheme("phase_sensitive", None)),
        "b": (mode_operator(2, 0.0), DetectionScheme()),
        "c": (mode_operator(2, math.pi), DetectionScheme()),
    }
    t0 = time.perf_counter()
    out = {k: run_ensemble(init, op, sch, tau_max=ENS_TAU, dtau=1e-4, n_traj=ENS_TRAJ,
                           base_seed=ENS_SEED, n_grid=100)
           for k, (op, sch) in scenarios.items()}
    return out, time.perf_counter() - t0


def test_criterion_1_vandermonde_round_trip():
    t0 = time.perf_counter()
    total = ok = 0
    for R in (2, 3, 4, 5):
        for occ in itertools.product(range(7), repeat=R):
            total += 1
            ok += reconstruct_occupations(forward_measurements(occ), R) == occ
    dt = time.perf_counter() - t0
    record(1, ok == total and dt < 10, f"{ok}/{total} tuples recovered in {dt:.1f} s (limit 10 s)")


def test_criterion_2_entropy_law():
    t0 = time.perf_counter()
    rows = []
    good = True
    for R in (2, 3, 4):
        cut = Bipartition.of([0], R)
        lam = 50.0 * R
        e = entanglement_entropy(multimode_pdc(lam, R), cut, orders=(2,)).von_neumann_bits
        a = asymptotic_entropy(lam, R)
        good &= abs(e - a) < 0.05
        rows.append(f"R={R} lam/R=50 |dE|={abs(e - a):.4f}")
        lam = 200.0 * R
        e = entanglement_entropy(multimode_pdc(lam, R), cut, orders=(2,)).von_neumann_bits
        a = asymptotic_entropy(lam, R)
        good &= abs(e - a) / e < 0.01
        rows.append(f"R={R} lam/R=200 rel={abs(e - a) / e:.2e}")
    dt = time.perf_counter() - t0
    record(2, good and dt < 30, "; ".join(rows) + f"; {dt:.1f} s")


def _smoothed_nondecreasing(entropy, window):
    s = np.convolve(entropy, np.ones(window) / window, mode="valid")
    return bool(np.all(np.diff(s) >= -1e-9))


def test_criterion_3_detection_scenarios(detection_ensembles):
    ens, dt = detection_ensembles
    means = {k: e.mean_final_entropy for k, e in ens.items()}
    stds = {k: e.std_final_entropy for k, e in ens.items()}
    spread = (max(means.values()) - min(means.values())) / min(means.values())
    ok_i = spread < 0.15
    ok_ii = stds["a"] < stds["b"] < stds["c"]
    grid = ens["a"].records[0].tau_grid
    window = int(round(0.1 * ENS_TAU / (grid[1] - grid[0])))
    frac = {k: np.mean([_smoothed_nondecreasing(r.entropy, window) for r in e.records]) for k, e in ens.items()}
    ok_iii = all(f >= 0.9 for f in frac.values())
    detail = (f"means a/b/c = {means['a']:.3f}/{means['b']:.3f}/{means['c']:.3f} (spread {spread:.1%}); "
              f"std = {stds['a']:.3f} < {stds['b']:.3f} < {stds['c']:.3f}: {ok_ii}; "
              f"monotone fraction = {frac['a']:.3f}/{frac['b']:.3f}/{frac['c']:.3f}; "
              f"{ENS_TRAJ} traj/scenario in {dt:.0f} s")
    record(3, ok_i and ok_ii and ok_iii and dt < 900, detail)


def test_criterion_4_deterministic_projection(detection_ensembles):
    ens, _ = detection_ensembles
    good = 0
    for r in ens["a"].records[:100]:
        st = r.final_state
        p = st.probabilities()
        dn = (st.basis.states[:, 1] - st.basis.states[:, 0]).astype(float)
        mean = p @ dn
        var = p @ (dn - mean) ** 2
        f = fidelity(st, pdc_state(LAM, int(round(mean))))
        good += var < 1e-3 and f > 0.99
    record(4, good >= 95, f"{good}/100 seeds with Var(dN) < 1e-3 and fidelity > 0.99")


def test_criterion_5_cat_structure(detection_ensembles):
    ens, _ = detection_ensembles
    records = ens["c"].records
    good = 0
    worst_split, worst_fid = 0.0, 1.0
    for r in records:
        st = r.final_state
        p = st.probabilities()
        dn = st.basis.states[:, 1] - st.basis.states[:, 0]
        absd = np.abs(dn)
        d = int(np.argmax(np.bincount(absd, weights=p)))
        if d == 0:
            split = 0.0
            f = fidelity(st, pdc_state(LAM, 0))
        else:
            plus, minus = p[dn == d].sum(), p[dn == -d].sum()
            split = abs(plus / (plus + minus) - 0.5)  # initial split is exactly 1/2
            a, b = overlap(pdc_state(LAM, d), st), overlap(pdc_state(LAM, -d), st)
            f = (abs(a) + abs(b)) ** 2 / 2  # best branch relative phase
        worst_split, worst_fid = max(worst_split, split), min(worst_fid, f)
        good += split < 1e-6 and f > 0.99
    frac = good / len(records)
    record(5, frac >= 0.95, f"{good}/{len(records)} seeds; worst split error {worst_split:.1e}, "
                            f"worst fidelity {worst_fid:.6f}")


def test_criterion_6_zeno():
    t0 = time.perf_counter()
    b = build_fixed_n_basis(4, 4)
    init = QuantumState.fock(b, (2, 0, 2, 0))
    rep = zeno_check(init, travelling_wave_operator(4, math.pi), BhHamiltonian(1.0, 0.0, 4, periodic=True),
                     kappa_strong=100.0, tau_max=1.0, n_grid=50, dt=1e-3, seed=0, n_traj=4)
    dt = time.perf_counter() - t0
    ok_drift = rep.measured_drift <= rep.free_drift / 10
    ok_intra = rep.intramode_variation > 1e-3
    record(6, ok_drift and ok_intra and dt < 60,
           f"drift measured {rep.measured_drift:.2e} vs free {rep.free_drift:.3f} "
           f"(x{rep.suppression:.0f}); intramode <b0+ b2> varies by {rep.intramode_variation:.3f}; {dt:.1f} s")


def test_criterion_7_swap_moments():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        da, db = rng.integers(2, 13, size=2)
        basis = build_capped_basis(2, int(max(da, db)) - 1)
        amps = np.zeros(basis.dim, dtype=complex)
        mask = (basis.states[:, 0] < da) & (basis.states[:, 1] < db)
        amps[mask] = rng.normal(size=mask.sum()) + 1j * rng.normal(size=mask.sum())
        st = QuantumState(basis, amps).normalized()
        cut = Bipartition.of([0], 2)
        spec = entanglement_entropy(st, cut).schmidt_spectrum
        for m in (2, 3):
            worst = max(worst, abs(moments_via_swap(st, cut, m).moment - np.sum(spec ** m)))
    dt = time.perf_counter() - t0
    record(7, worst < 1e-10 and dt < 60, f"max |swap - spectrum| = {worst:.1e} over 100 states; {dt:.1f} s")


def test_criterion_8_two_sf():
    t0 = time.perf_counter()
    cut = Bipartition.of([0, 1], 4)
    cases = bad = 0
    for NA in range(1, 7):
        for NB in range(1, 7):
            for dN in range(-(NA + NB), NA + NB + 1, 2):
                cases += 1
                e = entropy_bits(two_sf_entangled(NA, NB, dN), cut)
                boundary = abs(dN) == NA + NB
                bad += (e > 1e-12) if boundary else (e <= 1e-12)
    dt = time.perf_counter() - t0
    record(8, bad == 0 and dt < 10, f"{cases - bad}/{cases} (N_A, N_B, dN) cases; {dt:.1f} s")


def test_criterion_9_martingale_and_norm():
    # per-step norm: one grid point per step, so the norm guard runs after every step
    init = gutzwiller_sf(2, 2.0)
    op = mode_operator(2, math.pi)
    rec = run_trajectory(init, op, DetectionScheme(), tau_max=0.5, dtau=1e-3, n_grid=500, seed=1,
                         keep_states=True)
    norm_dev = max(abs(s.norm - 1) for s in rec.states)
    b = build_fixed_n_basis(4, 3)
    norms = []
    integrate_with_hamiltonian(QuantumState.fock(b, (2, 0, 1, 0)), travelling_wave_operator(4, math.pi).eigenvalues(b),
                               2.0, BhHamiltonian(1.0, 0.5, 4).matrix(b), np.linspace(0, 0.5, 501), 1e-3, 3,
                               lambda k, n, psi: norms.append(np.linalg.norm(psi)))
    norm_dev = max(norm_dev, max(abs(n - 1) for n in norms))

    n_traj = 500
    records = [run_trajectory(init, op, DetectionScheme(), tau_max=1.0, dtau=1e-3, n_grid=10, seed=s,
                              keep_states=True) for s in range(n_traj)]
    p0 = class_probabilities(init, op)
    classes = [k for k, v in p0.items() if v > 1e-3]
    target = np.array([p0[c] for c in classes])
    worst = 0.0
    for k_grid in range(11):
        per = np.array([[class_probabilities(r.states[k_grid], op).get(c, 0.0) for c in classes]
                        for r in records])
        sigma = per.std(axis=0, ddof=1) / math.sqrt(n_traj)
        dev = np.abs(per.mean(axis=0) - target)
        # at tau = 0 all trajectories agree and sigma is pure roundoff
        z = np.where(dev < 1e-12, 0.0, dev / np.maximum(sigma, 1e-300))
        worst = max(worst, float(z.max()))
    record(9, norm_dev < 1e-10 and worst <= 3.0,
           f"max norm deviation {norm_dev:.1e}; max |<p_k> - p_k(0)| = {worst:.2f} sigma "
           f"({len(classes)} classes x 11 times, {n_traj} trajectories)")
