import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import poisson

from backaction.basis import (
    CapacityError,
    ModePartition,
    QuantumState,
    build_capped_basis,
    build_fixed_n_basis,
    build_support_basis,
    default_cap,
    embed,
    expand_to_sites,
    fidelity,
    poisson_cap,
    reduce_to_modes,
    tensor_product,
)
from backaction.states import gutzwiller_sf, sf_product


def brute_fixed_n(slots, N):
    return sorted(t for t in itertools.product(range(N + 1), repeat=slots) if sum(t) == N)


class TestFixedN:
    def test_two_slots_one_atom(self):
        b = build_fixed_n_basis(2, 1)
        assert [tuple(r) for r in b.states] == [(0, 1), (1, 0)]
        assert b.dim == 2

    def test_vacuum(self):
        b = build_fixed_n_basis(3, 0)
        assert [tuple(r) for r in b.states] == [(0, 0, 0)]

    def test_three_slots_four_atoms(self):
        assert build_fixed_n_basis(3, 4).dim == len(brute_fixed_n(3, 4)) == 15

    @given(st.integers(1, 4), st.integers(0, 6))
    def test_matches_enumeration(self, slots, N):
        b = build_fixed_n_basis(slots, N)
        assert [tuple(r) for r in b.states] == brute_fixed_n(slots, N)
        assert b.dim == math.comb(N + slots - 1, slots - 1)
        for i, row in enumerate(b.states):
            assert b.index_of(row) == i

    def test_capacity(self):
        with pytest.raises(CapacityError):
            build_fixed_n_basis(20, 20)

    def test_immutable(self):
        b = build_fixed_n_basis(2, 2)
        with pytest.raises(AttributeError):
            b.N = 3
        with pytest.raises(ValueError):
            b.states[0, 0] = 5


class TestCapped:
    def test_small(self):
        assert build_capped_basis(2, 1).dim == 4
        assert [tuple(r) for r in build_capped_basis(1, 3).states] == [(0,), (1,), (2,), (3,)]
        assert build_capped_basis(3, 2).dim == len(list(itertools.product(range(3), repeat=3)))

    def test_lexicographic(self):
        b = build_capped_basis(2, 2)
        assert [tuple(r) for r in b.states] == list(itertools.product(range(3), repeat=2))

    def test_capacity(self):
        with pytest.raises(CapacityError):
            build_capped_basis(6, 20, capacity=1000)


def test_support_basis_rejects_duplicates():
    b = build_support_basis(2, [(1, 0), (0, 1), (1, 0)])
    assert b.dim == 2


@given(st.sampled_from(["fixed_n", "capped", "support"]), st.integers(1, 3), st.integers(0, 3))
def test_state_json_round_trip(kind, slots, n):
    if kind == "fixed_n":
        b = build_fixed_n_basis(slots, n)
    elif kind == "capped":
        b = build_capped_basis(slots, n)
    else:
        b = build_support_basis(slots, [tuple([n] * slots), tuple([0] * slots)])
    rng = np.random.default_rng(slots * 10 + n)
    amps = rng.normal(size=b.dim) + 1j * rng.normal(size=b.dim)
    s = QuantumState(b, amps).normalized()
    back = QuantumState.from_json(s.to_json())
    assert back.basis == s.basis
    assert np.array_equal(back.amplitudes, s.amplitudes)
    assert abs(back.norm - 1.0) < 1e-12
    json.loads(s.to_json())


def test_overlap_across_bases():
    a = QuantumState.from_mapping(build_support_basis(2, [(0, 1), (1, 0)]), {(0, 1): 1, (1, 0): 1})
    b = QuantumState.from_mapping(build_fixed_n_basis(2, 1), {(1, 0): 1})
    assert fidelity(a, b) == pytest.approx(0.5, abs=1e-14)


def test_embed_rejects_lost_mass():
    s = QuantumState.fock(build_capped_basis(2, 2), (2, 2))
    with pytest.raises(ValueError):
        embed(s, build_fixed_n_basis(2, 2))


def test_poisson_cap_guarantees_tail():
    for lam in (0.5, 1.0, 25.0, 200.0):
        cap = poisson_cap(lam, 2)
        assert cap >= default_cap(lam)
        assert 1 - (1 - poisson.sf(cap, lam)) ** 2 < 1e-10


class TestReduceToModes:
    def test_single_fock(self):
        s = QuantumState.fock(build_fixed_n_basis(4, 2), (1, 0, 1, 0))
        m, exact = reduce_to_modes(s, ModePartition(4, 2))
        assert exact
        assert m.amplitude((2, 0)) == pytest.approx(1.0)

    def test_two_site_superposition(self):
        s = QuantumState.from_mapping(build_fixed_n_basis(2, 1), {(1, 0): 1, (0, 1): 1})
        m, exact = reduce_to_modes(s, ModePartition(2, 2))
        assert exact
        assert m.probabilities()[m.basis.index_of((1, 0))] == pytest.approx(0.5)
        assert m.probabilities()[m.basis.index_of((0, 1))] == pytest.approx(0.5)

    def test_gutzwiller_marginals_are_poisson(self):
        # four sites at filling 1/2: each two-site mode is Poisson(1)
        s = gutzwiller_sf(4, 0.5)
        m, exact = reduce_to_modes(s, ModePartition(4, 2))
        assert exact
        p = m.probabilities()
        assert abs(p.sum() - 1.0) < 1e-12
        for r in range(2):
            marg = np.bincount(m.basis.states[:, r], weights=p)
            n = np.arange(len(marg))
            oracle = poisson.pmf(n, 1.0)
            assert np.max(np.abs(marg - oracle)) < 1e-9

    def test_gutzwiller_reduces_to_mode_gutzwiller(self):
        # a site Gutzwiller product is exactly the mode Gutzwiller product with lambda = 2 nu
        m, _ = reduce_to_modes(gutzwiller_sf(4, 0.5), ModePartition(4, 2))
        assert fidelity(m, gutzwiller_sf(2, 1.0, n_max=m.basis.n_max)) > 1 - 1e-9

    def test_mode_mixing_state_is_flagged_inexact(self):
        b = build_fixed_n_basis(4, 2)
        s = QuantumState.from_mapping(b, {(2, 0, 0, 0): 1, (1, 0, 1, 0): 1j, (0, 0, 2, 0): 1,
                                          (1, 1, 0, 0): 1})
        m, exact = reduce_to_modes(s, ModePartition(4, 2))
        assert abs(m.norm - 1.0) < 1e-12

    def test_partition_mismatch(self):
        with pytest.raises(ValueError):
            reduce_to_modes(QuantumState.fock(build_fixed_n_basis(3, 1), (1, 0, 0)), ModePartition(4, 2))

    @given(st.lists(st.integers(0, 3), min_size=2, max_size=2))
    def test_expand_then_reduce(self, occ):
        part = ModePartition(4, 2)
        site = expand_to_sites(sf_product(occ), part)
        assert abs(site.norm - 1.0) < 1e-12
        m, exact = reduce_to_modes(site, part)
        assert exact
        assert abs(abs(m.amplitude(tuple(occ))) - 1.0) < 1e-12


def test_expand_mode_binomial_amplitudes():
    # mode with 2 atoms over 2 sites: sqrt(C(2,k))/2 on (k, 2-k)
    part = ModePartition(2, 1)
    site = expand_to_sites(sf_product([2]), part)
    for k in range(3):
        assert site.amplitude((k, 2 - k)).real == pytest.approx(math.sqrt(math.comb(2, k)) / 2, abs=1e-14)


def test_non_illuminated_sites_form_passive_mode():
    part = ModePartition(5, 2, illuminated=(0, 1, 2, 3))
    assert part.n_modes == 3
    assert part.sites_of(2) == (4,)
    occ = part.mode_occupations(np.array([[1, 2, 3, 4, 5]]))
    assert occ.tolist() == [[4, 6, 5]]


def test_tensor_product_is_product():
    a = gutzwiller_sf(1, 1.0, n_max=8)
    t = tensor_product(a, a)
    two = gutzwiller_sf(2, 1.0, n_max=8)
    assert fidelity(t, two) > 1 - 1e-12


def test_basis_pickles():
    import pickle
    for b in (build_fixed_n_basis(3, 2), build_capped_basis(2, 3), build_support_basis(2, [(4, 1)])):
        back = pickle.loads(pickle.dumps(b))
        assert back == b and back.kind == b.kind and back.index_of(b.states[-1]) == b.dim - 1
