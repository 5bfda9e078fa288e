import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from backaction.basis import CapacityError, QuantumState, build_capped_basis, build_support_basis
from backaction.entanglement import (
    Bipartition,
    NumericalFailure,
    asymptotic_entropy,
    entanglement_entropy,
    entropy_bits,
    genuine_multipartite_check,
    moments_via_swap,
    reduced_density,
    renyi_entropy,
    schmidt_spectrum,
)
from backaction.states import gutzwiller_sf, multimode_pdc, pdc_state, sf_product

CUT2 = Bipartition.of([0], 2)


def bell():
    return QuantumState.from_mapping(build_support_basis(2, [(0, 1), (1, 0)]), {(0, 1): 1, (1, 0): 1})


def partial_trace_oracle(psi_matrix):
    """rho_A by explicit summation over B indices."""
    da, db = psi_matrix.shape
    rho = np.zeros((da, da), dtype=complex)
    for b in range(db):
        rho += np.outer(psi_matrix[:, b], psi_matrix[:, b].conj())
    return rho


def random_two_mode(rng, da, db):
    basis = build_capped_basis(2, max(da, db) - 1)
    amps = np.zeros(basis.dim, dtype=complex)
    for i, (a, b) in enumerate(basis.states):
        if a < da and b < db:
            amps[i] = rng.normal() + 1j * rng.normal()
    return QuantumState(basis, amps).normalized()


def psi_matrix(state, da, db):
    m = np.zeros((da, db), dtype=complex)
    for (a, b), amp in zip(state.basis.states, state.amplitudes):
        if a < da and b < db:
            m[a, b] = amp
    return m


class TestBipartition:
    def test_validation(self):
        with pytest.raises(ValueError):
            Bipartition((0,), (0, 1))
        with pytest.raises(ValueError):
            Bipartition((), (0,))
        with pytest.raises(ValueError):
            Bipartition((0,), (2,))
        assert Bipartition.of([2, 0], 4) == Bipartition((0, 2), (1, 3))


class TestReducedDensity:
    def test_product_rank_one(self):
        rho, _ = reduced_density(gutzwiller_sf(2, 1.0), CUT2)
        assert np.linalg.matrix_rank(rho, tol=1e-10) == 1

    def test_bell(self):
        rho, labels = reduced_density(bell(), CUT2)
        assert np.allclose(rho, np.eye(2) / 2)

    def test_pdc_diagonal(self):
        s = pdc_state(1.0)
        rho, labels = reduced_density(s, CUT2)
        assert np.allclose(rho, np.diag(np.diag(rho)), atol=1e-15)
        n = labels[:, 0]
        w = np.array([1 / math.factorial(k) ** 2 for k in n])
        assert np.allclose(np.diag(rho).real, w / w.sum(), atol=1e-14)

    def test_capped_fast_path_matches_generic(self, rng):
        s = random_two_mode(rng, 5, 5)
        rho, _ = reduced_density(s, CUT2)
        assert np.allclose(rho, partial_trace_oracle(psi_matrix(s, 5, 5)), atol=1e-12)


class TestEntropy:
    def test_product(self):
        assert entanglement_entropy(gutzwiller_sf(2, 3.0), CUT2).von_neumann_bits == pytest.approx(0, abs=1e-10)
        assert entanglement_entropy(sf_product([3, 3]), CUT2).von_neumann_bits == 0

    def test_bell(self):
        assert entanglement_entropy(bell(), CUT2).von_neumann_bits == pytest.approx(1.0, abs=1e-12)

    def test_multimode_large_lambda(self):
        rep = entanglement_entropy(multimode_pdc(100.0, 2), CUT2)
        assert abs(rep.von_neumann_bits - 0.5 * math.log2(2 * math.pi * math.e * 50)) < 0.05
        assert abs(rep.von_neumann_bits - 4.869) < 0.05

    @given(st.integers(2, 8), st.integers(2, 8), st.integers(0, 2 ** 16))
    def test_ordering_and_symmetry(self, da, db, seed):
        s = random_two_mode(np.random.default_rng(seed), da, db)
        rep = entanglement_entropy(s, CUT2)
        h2 = rep.renyi[2]
        assert h2 <= rep.von_neumann_bits + 1e-10
        assert rep.von_neumann_bits <= math.log2(rep.schmidt_rank) + 1e-10
        assert abs(rep.schmidt_spectrum.sum() - 1) < 1e-10
        swapped = QuantumState(build_capped_basis(2, s.basis.n_max), np.zeros(s.basis.dim, complex))
        for (a, b), amp in zip(s.basis.states, s.amplitudes):
            swapped.amplitudes[swapped.basis.index_of((b, a))] = amp
        assert abs(entropy_bits(swapped, CUT2) - rep.von_neumann_bits) < 1e-8

    def test_report_json(self):
        import json
        d = json.loads(entanglement_entropy(bell(), CUT2).to_json())
        assert d["von_neumann_bits"] == pytest.approx(1.0)

    def test_numerical_failure_is_an_arithmetic_error(self):
        assert issubclass(NumericalFailure, ArithmeticError)


class TestAsymptotic:
    def test_values(self):
        assert asymptotic_entropy(50, 2) == pytest.approx(0.5 * math.log2(2 * math.pi * math.e * 25))
        assert abs(asymptotic_entropy(50, 2) - 4.369) < 1e-3
        assert asymptotic_entropy(1 / (2 * math.pi * math.e), 1) == pytest.approx(0.0, abs=1e-14)
        assert asymptotic_entropy(100, 4) == pytest.approx(asymptotic_entropy(50, 2))

    @pytest.mark.parametrize("R", [2, 3, 4])
    def test_law_at_large_filling(self, R):
        lam = 50.0 * R
        exact = entropy_bits(multimode_pdc(lam, R), Bipartition.of([0], R))
        assert abs(exact - asymptotic_entropy(lam, R)) / exact < 0.01


class TestMultipartite:
    def test_multimode_genuine(self):
        rep = genuine_multipartite_check(multimode_pdc(1.0, 3))
        assert len(rep.entropies) == 3
        assert rep.genuine

    def test_bell_plus_vacuum(self):
        b = build_support_basis(3, [(0, 1, 0), (1, 0, 0)])
        s = QuantumState.from_mapping(b, {(0, 1, 0): 1, (1, 0, 0): 1})
        rep = genuine_multipartite_check(s)
        assert not rep.genuine
        assert rep.entropies[(0, 1)] == pytest.approx(0.0, abs=1e-12)

    def test_sf_product(self):
        rep = genuine_multipartite_check(sf_product([1, 2, 3]))
        assert all(v == 0 for v in rep.entropies.values())


class TestSwap:
    def test_product(self):
        assert moments_via_swap(gutzwiller_sf(2, 1.0, n_max=6), CUT2, 2).moment == pytest.approx(1.0, abs=1e-12)

    def test_bell(self):
        res = moments_via_swap(bell(), CUT2, 2)
        assert res.moment == pytest.approx(0.5)
        assert res.p_excited == pytest.approx(0.25)

    def test_pdc_cube(self):
        p = np.array([1 / math.factorial(n) ** 2 for n in range(30)])
        p /= p.sum()
        assert moments_via_swap(pdc_state(1.0), CUT2, 3).moment == pytest.approx((p ** 3).sum(), abs=1e-12)

    @given(st.integers(2, 6), st.integers(2, 6), st.sampled_from([2, 3, 4]), st.integers(0, 2 ** 16))
    def test_matches_spectrum(self, da, db, m, seed):
        s = random_two_mode(np.random.default_rng(seed), da, db)
        p = schmidt_spectrum(s, CUT2)
        assert abs(moments_via_swap(s, CUT2, m).moment - (p ** m).sum()) < 1e-10

    def test_capacity(self):
        with pytest.raises(CapacityError):
            moments_via_swap(gutzwiller_sf(2, 4.0), CUT2, 4, capacity=10)

    def test_bad_order(self):
        with pytest.raises(ValueError):
            moments_via_swap(bell(), CUT2, 5)


class TestRenyi:
    def test_values(self):
        assert renyi_entropy(1.0, 3) == 0
        assert renyi_entropy(0.5, 2) == pytest.approx(1.0)

    def test_pdc_order_three(self):
        s = pdc_state(1.0)
        mom = moments_via_swap(s, CUT2, 3).moment
        p = schmidt_spectrum(s, CUT2)
        direct = math.log2((p ** 3).sum()) / (1 - 3)
        assert abs(renyi_entropy(mom, 3) - direct) < 1e-10

    def test_range(self):
        with pytest.raises(ValueError):
            renyi_entropy(0.0, 2)
        with pytest.raises(ValueError):
            renyi_entropy(1.5, 2)
        with pytest.raises(ValueError):
            renyi_entropy(0.5, 1)
