"""Mode entanglement: reduced states, Schmidt spectra, Renyi moments.

All entropies are in bits. A state's Schmidt matrix for a cut is built only
over the subsystem occupations that actually appear in its support, so thin
supports (diagonal multimode states) stay cheap even at large filling.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .basis import CapacityError, QuantumState

EIGEN_FLOOR = 1e-14
SWAP_CAPACITY = 20_000_000


class NumericalFailure(ArithmeticError):
    """A reduced density matrix failed a positivity or symmetry check."""


@dataclass(frozen=True)
class Bipartition:
    part_A: tuple[int, ...]
    part_B: tuple[int, ...]

    def __post_init__(self):
        a, b = tuple(sorted(self.part_A)), tuple(sorted(self.part_B))
        object.__setattr__(self, "part_A", a)
        object.__setattr__(self, "part_B", b)
        if not a or not b:
            raise ValueError("both parts must be nonempty")
        if set(a) & set(b):
            raise ValueError("parts must be disjoint")
        if sorted(a + b) != list(range(len(a) + len(b))):
            raise ValueError("parts must cover slots 0..n-1")

    @classmethod
    def of(cls, part_A: Sequence[int], n_slots: int) -> "Bipartition":
        a = tuple(sorted(set(int(i) for i in part_A)))
        return cls(a, tuple(i for i in range(n_slots) if i not in a))

    @property
    def n_slots(self) -> int:
        return len(self.part_A) + len(self.part_B)


def schmidt_matrix(state: QuantumState, cut: Bipartition,
                   capacity: int = 50_000_000) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Amplitude matrix ``psi[a, b]`` with row/column occupation labels."""
    basis = state.basis
    if cut.n_slots != basis.slots:
        raise ValueError(f"cut covers {cut.n_slots} slots, state has {basis.slots}")
    k = len(cut.part_A)
    if basis.kind == "capped" and cut.part_A == tuple(range(k)):
        # lexicographic capped enumeration: a plain reshape separates the leading slots
        side = basis.n_max + 1
        labels = basis.states[:: side ** (basis.slots - k), :k]
        rest = basis.states[: side ** (basis.slots - k), k:]
        return state.amplitudes.reshape(side ** k, -1), labels, rest
    nz = np.flatnonzero(state.amplitudes)
    if len(nz) == 0:
        raise ValueError("zero state")
    sub = state.basis.states[nz]
    keys_a, ia = np.unique(sub[:, list(cut.part_A)], axis=0, return_inverse=True)
    keys_b, ib = np.unique(sub[:, list(cut.part_B)], axis=0, return_inverse=True)
    if len(keys_a) * len(keys_b) > capacity:
        raise CapacityError(f"Schmidt matrix {len(keys_a)}x{len(keys_b)} exceeds capacity")
    mat = np.zeros((len(keys_a), len(keys_b)), dtype=np.complex128)
    mat[ia.ravel(), ib.ravel()] = state.amplitudes[nz]
    return mat, keys_a, keys_b


def reduced_density(state: QuantumState, cut: Bipartition) -> tuple[np.ndarray, np.ndarray]:
    """``rho_A`` over the part-A occupations present in the support, and those labels."""
    mat, keys_a, _ = schmidt_matrix(state, cut)
    rho = mat @ mat.conj().T
    return rho / np.trace(rho).real, keys_a


def _entropy_from_spectrum(p: np.ndarray) -> float:
    p = p[p > EIGEN_FLOOR]
    p = p / p.sum()
    return max(0.0, float(-(p * np.log2(p)).sum()))


def schmidt_spectrum(state: QuantumState, cut: Bipartition) -> np.ndarray:
    """Descending squared Schmidt coefficients via SVD (fast path, no checks)."""
    mat, _, _ = schmidt_matrix(state, cut)
    s = np.linalg.svd(mat, compute_uv=False) ** 2
    return s / s.sum()


def entropy_bits(state: QuantumState, cut: Bipartition) -> float:
    return _entropy_from_spectrum(schmidt_spectrum(state, cut))


def renyi_from_spectrum(p: np.ndarray, m: int) -> float:
    p = p[p > EIGEN_FLOOR]
    p = p / p.sum()
    return renyi_entropy(float(np.sum(p ** m)), m)


@dataclass
class EntropyReport:
    von_neumann_bits: float
    renyi: dict[int, float]
    schmidt_spectrum: np.ndarray = field(repr=False)

    @property
    def schmidt_rank(self) -> int:
        return int(np.count_nonzero(self.schmidt_spectrum > EIGEN_FLOOR))

    def to_json(self) -> str:
        return json.dumps({
            "von_neumann_bits": self.von_neumann_bits,
            "renyi": {str(m): v for m, v in self.renyi.items()},
            "schmidt_spectrum": [float(x) for x in self.schmidt_spectrum],
        })


def entanglement_entropy(state: QuantumState, cut: Bipartition,
                         orders: Sequence[int] = (2, 3, 4)) -> EntropyReport:
    """Von Neumann and Renyi entropies of ``rho_A``; checks ``S(rho_A) = S(rho_B)``."""
    mat, _, _ = schmidt_matrix(state, cut)
    mat = mat / np.linalg.norm(mat)
    spectra = []
    for rho in (mat @ mat.conj().T, mat.conj().T @ mat):
        ev = np.linalg.eigvalsh(rho)
        if ev.min() < -1e-10:
            raise NumericalFailure(f"reduced state has eigenvalue {ev.min():.3e}")
        spectra.append(np.clip(ev, 0.0, None))
    s_a, s_b = (_entropy_from_spectrum(sp.copy()) for sp in spectra)
    if abs(s_a - s_b) > 1e-8:
        raise NumericalFailure(f"S(rho_A)={s_a} differs from S(rho_B)={s_b}")
    spec = np.sort(spectra[0])[::-1]
    spec = spec[spec > EIGEN_FLOOR]
    spec = spec / spec.sum()
    return EntropyReport(s_a, {int(m): renyi_from_spectrum(spec, int(m)) for m in orders}, spec)


def asymptotic_entropy(lam: float, R: int) -> float:
    """Large-filling entropy ``(1/2) log2(2 pi e lam / R)`` of the R-mode PDC state.

    Only meaningful for ``lam / R >> 1``; it goes negative below ``1/(2 pi e)``.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    return 0.5 * math.log2(2.0 * math.pi * math.e * lam / R)


@dataclass
class MultipartiteReport:
    entropies: dict[tuple[int, ...], float]
    threshold: float

    @property
    def genuine(self) -> bool:
        return all(v > self.threshold for v in self.entropies.values())


def genuine_multipartite_check(state: QuantumState, threshold: float = 1e-6) -> MultipartiteReport:
    """Entropy across every bipartition (part A always contains slot 0)."""
    R = state.basis.slots
    if R < 2 or R > 6:
        raise ValueError("need 2 <= R <= 6 modes")
    ent = {}
    rest = list(range(1, R))
    for k in range(0, R - 1):
        for extra in itertools.combinations(rest, k):
            part_a = (0,) + extra
            ent[part_a] = entropy_bits(state, Bipartition.of(part_a, R))
    return MultipartiteReport(ent, threshold)


@dataclass
class SwapMoment:
    moment: float
    p_excited: float


def moments_via_swap(state: QuantumState, cut: Bipartition, m: int,
                     capacity: int = SWAP_CAPACITY) -> SwapMoment:
    """``Tr(rho_A^m)`` as the expectation of a cyclic shift of the A factors over m copies.

    Also returns the ancilla excitation probability ``(1 - Re Tr rho_A^m)/2``
    of the controlled-permutation interferometer.
    """
    if m not in (2, 3, 4):
        raise ValueError("m must be 2, 3 or 4")
    psi, _, _ = schmidt_matrix(state, cut)
    psi = psi / np.linalg.norm(psi)
    da, db = psi.shape
    if (da * db) ** m > capacity:
        raise CapacityError(f"{m} copies of a {da}x{db} state exceed capacity")
    copies = psi
    for _ in range(m - 1):
        copies = np.multiply.outer(copies, psi)
    # axes are (a_0, b_0, a_1, b_1, ...); move a_k into the slot of a_{k+1}
    axes = list(range(2 * m))
    for k in range(m):
        axes[2 * ((k + 1) % m)] = 2 * k
    shifted = np.transpose(copies, axes)
    value = complex(np.vdot(copies, shifted))
    return SwapMoment(value.real, 0.5 * (1.0 - value.real))


def renyi_entropy(moment: float, m: int) -> float:
    """``log2(Tr rho^m) / (1 - m)``."""
    if m < 2:
        raise ValueError("m must be >= 2")
    if not (0.0 < moment <= 1.0 + 1e-12):
        raise ValueError(f"moment {moment} outside (0, 1]")
    return math.log2(min(moment, 1.0)) / (1 - m)
