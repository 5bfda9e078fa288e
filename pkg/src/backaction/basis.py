"""Occupation-number bases, quantum states over them, and the site-to-mode map.

Three basis kinds are supported:

``fixed_n``
    every tuple sums to a fixed atom number ``N``;
``capped``
    every entry lies in ``[0, n_max]``;
``support``
    an explicit, lexicographically sorted list of tuples. Used by the
    closed-form state factories whose support is a thin slice of a huge
    capped space (e.g. ``|n>^{(x)R}`` for large fillings).

All bases enumerate their states lexicographically, so serialized amplitude
vectors are reproducible across runs.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

DEFAULT_CAPACITY = 5_000_000
TRUNCATION_TOL = 1e-10


class CapacityError(ValueError):
    """Raised when a basis or tensor would exceed the configured size limit."""


class TruncationError(ValueError):
    """Raised when a truncated Poisson tail carries too much probability."""


def _fixed_n_tuples(slots: int, N: int):
    if slots == 1:
        yield (N,)
        return
    for first in range(N + 1):
        for rest in _fixed_n_tuples(slots - 1, N - first):
            yield (first,) + rest


class OccupationBasis:
    """Immutable, ordered list of occupation tuples with a dense index map.

    Use the module-level constructors (:func:`build_fixed_n_basis`,
    :func:`build_capped_basis`, :func:`build_support_basis`) rather than
    calling this directly.
    """

    __slots__ = ("kind", "slots", "N", "n_max", "_states", "_index")

    def __init__(self, kind: str, slots: int, states: np.ndarray,
                 N: int | None = None, n_max: int | None = None):
        states = np.ascontiguousarray(states, dtype=np.int64).reshape(-1, slots)
        states.setflags(write=False)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "slots", int(slots))
        object.__setattr__(self, "N", N)
        object.__setattr__(self, "n_max", n_max)
        object.__setattr__(self, "_states", states)
        index = {tuple(int(v) for v in row): i for i, row in enumerate(states)}
        if len(index) != len(states):
            raise ValueError("basis contains duplicate tuples")
        object.__setattr__(self, "_index", index)

    def __setattr__(self, name, value):
        raise AttributeError("OccupationBasis is immutable")

    def __reduce__(self):
        return (OccupationBasis, (self.kind, self.slots, np.array(self._states), self.N, self.n_max))

    @property
    def states(self) -> np.ndarray:
        """Read-only ``(dim, slots)`` integer array of occupation tuples."""
        return self._states

    @property
    def dim(self) -> int:
        return self._states.shape[0]

    def __len__(self) -> int:
        return self.dim

    def index_of(self, occupation: Sequence[int]) -> int:
        try:
            return self._index[tuple(int(v) for v in occupation)]
        except KeyError:
            raise KeyError(f"{tuple(occupation)} is not in the basis") from None

    def __contains__(self, occupation) -> bool:
        return tuple(int(v) for v in occupation) in self._index

    def totals(self) -> np.ndarray:
        return self._states.sum(axis=1)

    def __eq__(self, other) -> bool:
        if not isinstance(other, OccupationBasis):
            return NotImplemented
        return (self.slots == other.slots and self.dim == other.dim
                and np.array_equal(self._states, other._states))

    def __hash__(self):
        return hash((self.kind, self.slots, self.dim, self.N, self.n_max))

    def __repr__(self) -> str:
        extra = {"fixed_n": f"N={self.N}", "capped": f"n_max={self.n_max}"}.get(self.kind, "")
        return f"OccupationBasis({self.kind}, slots={self.slots}, {extra}, dim={self.dim})"

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "slots": self.slots}
        if self.kind == "fixed_n":
            d["N"] = self.N
        elif self.kind == "capped":
            d["n_max"] = self.n_max
        else:
            d["states"] = self._states.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OccupationBasis":
        kind = d["kind"]
        if kind == "fixed_n":
            return build_fixed_n_basis(d["slots"], d["N"])
        if kind == "capped":
            return build_capped_basis(d["slots"], d["n_max"])
        if kind == "support":
            return build_support_basis(d["slots"], d["states"])
        raise ValueError(f"unknown basis kind {kind!r}")


def fixed_n_dimension(slots: int, N: int) -> int:
    return math.comb(N + slots - 1, slots - 1)


def build_fixed_n_basis(slots: int, N: int, capacity: int = DEFAULT_CAPACITY) -> OccupationBasis:
    """All ``slots``-tuples of non-negative integers summing to ``N``, in lex order."""
    if slots < 1:
        raise ValueError("slots must be >= 1")
    if N < 0:
        raise ValueError("N must be non-negative")
    dim = fixed_n_dimension(slots, N)
    if dim > capacity:
        raise CapacityError(f"fixed-N basis dimension {dim} exceeds capacity {capacity}")
    states = np.fromiter(itertools.chain.from_iterable(_fixed_n_tuples(slots, N)),
                         dtype=np.int64, count=dim * slots)
    return OccupationBasis("fixed_n", slots, states, N=N)


def build_capped_basis(slots: int, n_max: int, capacity: int = DEFAULT_CAPACITY) -> OccupationBasis:
    """All ``slots``-tuples with entries in ``[0, n_max]``, in lex order."""
    if slots < 1:
        raise ValueError("slots must be >= 1")
    if n_max < 0:
        raise ValueError("n_max must be non-negative")
    dim = (n_max + 1) ** slots
    if dim > capacity:
        raise CapacityError(f"capped basis dimension {dim} exceeds capacity {capacity}")
    grids = np.meshgrid(*([np.arange(n_max + 1)] * slots), indexing="ij")
    states = np.stack([g.ravel() for g in grids], axis=1)
    return OccupationBasis("capped", slots, states, n_max=n_max)


def build_support_basis(slots: int, tuples: Iterable[Sequence[int]],
                        capacity: int = DEFAULT_CAPACITY) -> OccupationBasis:
    """Basis over an explicit set of tuples (sorted, deduplicated)."""
    arr = np.asarray(list(tuples), dtype=np.int64).reshape(-1, slots)
    if len(arr) == 0:
        raise ValueError("support basis needs at least one tuple")
    if (arr < 0).any():
        raise ValueError("occupations must be non-negative")
    arr = np.unique(arr, axis=0)  # lexicographic row order
    if len(arr) > capacity:
        raise CapacityError(f"support basis dimension {len(arr)} exceeds capacity {capacity}")
    return OccupationBasis("support", slots, arr)


def default_cap(mean: float) -> int:
    """Per-slot cap for a Poisson(mean) occupation: ceil(mean + 8 sqrt(mean))."""
    return int(math.ceil(mean + 8.0 * math.sqrt(mean)))


def poisson_tail_mass(mean: float, n_max: int) -> float:
    """Probability that a Poisson(mean) variable exceeds ``n_max``."""
    from scipy.stats import poisson

    return float(poisson.sf(n_max, mean))


def poisson_cap(mean: float, slots: int = 1, tol: float = TRUNCATION_TOL) -> int:
    """Smallest cap >= :func:`default_cap` whose dropped product mass is below ``tol``."""
    n_max = default_cap(mean)
    step = max(1, int(math.ceil(math.sqrt(mean))))
    while -math.expm1(slots * math.log1p(-poisson_tail_mass(mean, n_max))) >= tol:
        n_max += step
    return n_max


@dataclass
class QuantumState:
    """Complex amplitude vector over an :class:`OccupationBasis`."""

    basis: OccupationBasis
    amplitudes: np.ndarray
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=np.complex128).ravel()
        if amps.shape[0] != self.basis.dim:
            raise ValueError(f"{amps.shape[0]} amplitudes for a basis of dimension {self.basis.dim}")
        self.amplitudes = amps

    @classmethod
    def fock(cls, basis: OccupationBasis, occupation: Sequence[int]) -> "QuantumState":
        amps = np.zeros(basis.dim, dtype=np.complex128)
        amps[basis.index_of(occupation)] = 1.0
        return cls(basis, amps)

    @classmethod
    def from_mapping(cls, basis: OccupationBasis, mapping: dict, normalize: bool = True) -> "QuantumState":
        amps = np.zeros(basis.dim, dtype=np.complex128)
        for occ, a in mapping.items():
            amps[basis.index_of(occ)] += a
        st = cls(basis, amps)
        return st.normalized() if normalize else st

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.vdot(self.amplitudes, self.amplitudes).real))

    def normalized(self) -> "QuantumState":
        nrm = self.norm
        if nrm == 0.0 or not np.isfinite(nrm):
            raise ValueError("cannot normalize a zero or non-finite state")
        return QuantumState(self.basis, self.amplitudes / nrm, dict(self.meta))

    def copy(self) -> "QuantumState":
        return QuantumState(self.basis, self.amplitudes.copy(), dict(self.meta))

    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def expect_diagonal(self, values: np.ndarray) -> complex:
        return complex(np.dot(self.probabilities(), values))

    def amplitude(self, occupation: Sequence[int]) -> complex:
        if occupation not in self.basis:
            return 0.0j
        return complex(self.amplitudes[self.basis.index_of(occupation)])

    def support(self, tol: float = 0.0) -> list[tuple[int, ...]]:
        idx = np.flatnonzero(np.abs(self.amplitudes) > tol)
        return [tuple(int(v) for v in self.basis.states[i]) for i in idx]

    def density_matrix(self) -> np.ndarray:
        return np.outer(self.amplitudes, self.amplitudes.conj())

    def to_dict(self) -> dict:
        return {
            "basis": self.basis.to_dict(),
            "amplitudes": [[float(a.real), float(a.imag)] for a in self.amplitudes],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "QuantumState":
        basis = OccupationBasis.from_dict(d["basis"])
        amps = np.array([complex(re, im) for re, im in d["amplitudes"]], dtype=np.complex128)
        return cls(basis, amps)

    @classmethod
    def from_json(cls, text: str) -> "QuantumState":
        return cls.from_dict(json.loads(text))


def overlap(a: QuantumState, b: QuantumState) -> complex:
    """``<a|b>`` for states over possibly different bases of equal slot count."""
    if a.basis.slots != b.basis.slots:
        raise ValueError("states have different slot counts")
    if a.basis is b.basis or a.basis == b.basis:
        return complex(np.vdot(a.amplitudes, b.amplitudes))
    small, large = (a, b) if a.basis.dim <= b.basis.dim else (b, a)
    total = 0.0j
    for i in np.flatnonzero(small.amplitudes):
        occ = tuple(int(v) for v in small.basis.states[i])
        if occ in large.basis:
            j = large.basis.index_of(occ)
            total += np.conj(small.amplitudes[i]) * large.amplitudes[j]
    return total if small is a else np.conj(total)


def fidelity(a: QuantumState, b: QuantumState) -> float:
    """``|<a|b>|^2`` for normalized pure states."""
    return abs(overlap(a, b)) ** 2


def embed(state: QuantumState, basis: OccupationBasis, tol: float = 0.0) -> QuantumState:
    """Copy ``state`` into ``basis``; amplitude outside the target basis must be <= tol."""
    amps = np.zeros(basis.dim, dtype=np.complex128)
    lost = 0.0
    for i in np.flatnonzero(state.amplitudes):
        occ = tuple(int(v) for v in state.basis.states[i])
        if occ in basis:
            amps[basis.index_of(occ)] = state.amplitudes[i]
        else:
            lost += abs(state.amplitudes[i]) ** 2
    if lost > tol:
        raise ValueError(f"target basis drops probability {lost:.3e}")
    return QuantumState(basis, amps, dict(state.meta))


def tensor_product(*states: QuantumState) -> QuantumState:
    """Product state over the concatenated slots, on a support basis."""
    tuples = [()]
    amps = np.ones(1, dtype=np.complex128)
    for st in states:
        nz = np.flatnonzero(st.amplitudes)
        sub = [tuple(int(v) for v in st.basis.states[i]) for i in nz]
        tuples = [t + s for t in tuples for s in sub]
        amps = np.outer(amps, st.amplitudes[nz]).ravel()
    slots = sum(st.basis.slots for st in states)
    basis = build_support_basis(slots, tuples)
    order = [basis.index_of(t) for t in tuples]
    out = np.zeros(basis.dim, dtype=np.complex128)
    out[order] = amps
    return QuantumState(basis, out)


@dataclass(frozen=True)
class ModePartition:
    """Assignment of lattice sites to spatial modes by ``j mod R``.

    Illuminated site ``j`` belongs to mode ``j % R``. Sites that are not
    illuminated are lumped into one extra passive mode with index ``R``.
    """

    M: int
    R: int
    illuminated: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.M < 1 or self.R < 1:
            raise ValueError("M and R must be positive")
        ill = tuple(range(self.M)) if self.illuminated is None else tuple(sorted(set(self.illuminated)))
        if any(j < 0 or j >= self.M for j in ill):
            raise ValueError("illuminated sites must lie in [0, M)")
        object.__setattr__(self, "illuminated", ill)

    @property
    def K(self) -> int:
        return len(self.illuminated)

    @property
    def non_illuminated(self) -> tuple[int, ...]:
        lit = set(self.illuminated)
        return tuple(j for j in range(self.M) if j not in lit)

    @property
    def n_modes(self) -> int:
        return self.R + (1 if self.non_illuminated else 0)

    @property
    def site_to_mode(self) -> np.ndarray:
        out = np.full(self.M, self.R, dtype=np.int64)
        for j in self.illuminated:
            out[j] = j % self.R
        return out

    def sites_of(self, mode: int) -> tuple[int, ...]:
        s2m = self.site_to_mode
        return tuple(int(j) for j in np.flatnonzero(s2m == mode))

    def mode_occupations(self, site_states: np.ndarray) -> np.ndarray:
        """Map ``(dim, M)`` site tuples to ``(dim, n_modes)`` mode tuples."""
        site_states = np.atleast_2d(site_states)
        if site_states.shape[1] != self.M:
            raise ValueError(f"expected {self.M} sites, got {site_states.shape[1]}")
        onehot = np.zeros((self.M, self.n_modes), dtype=np.int64)
        onehot[np.arange(self.M), self.site_to_mode] = 1
        return site_states @ onehot


def _sf_amplitudes(sub: np.ndarray) -> np.ndarray:
    """Amplitudes of the symmetric fixed-N state over len(sub[0]) sites."""
    sub = np.atleast_2d(sub)
    n_sites = sub.shape[1]
    N = sub.sum(axis=1)
    from scipy.special import gammaln

    log_amp = 0.5 * (gammaln(N + 1) - gammaln(sub + 1).sum(axis=1)) - 0.5 * N * np.log(n_sites)
    return np.exp(log_amp)


def expand_to_sites(mode_state: QuantumState, partition: ModePartition) -> QuantumState:
    """Expand a mode-occupation state into site space, each mode a fixed-N superfluid.

    A mode with ``N_r`` atoms over ``s`` sites becomes ``(sum_j b_j^dag)^N_r |0>``
    normalized, i.e. site amplitudes ``sqrt(N_r! / prod k_j!) / s^(N_r/2)``.
    """
    if mode_state.basis.slots != partition.n_modes:
        raise ValueError("mode state slot count does not match the partition")
    mode_sites = [partition.sites_of(r) for r in range(partition.n_modes)]
    rows, amps = [], []
    for i in np.flatnonzero(mode_state.amplitudes):
        occ = mode_state.basis.states[i]
        per_mode = []
        for r, sites in enumerate(mode_sites):
            sub = np.array(list(_fixed_n_tuples(len(sites), int(occ[r]))), dtype=np.int64)
            per_mode.append((sites, sub, _sf_amplitudes(sub)))
        for combo in itertools.product(*[range(len(p[1])) for p in per_mode]):
            site = np.zeros(partition.M, dtype=np.int64)
            a = mode_state.amplitudes[i]
            for (sites, sub, sfa), k in zip(per_mode, combo):
                site[list(sites)] = sub[k]
                a = a * sfa[k]
            rows.append(tuple(int(v) for v in site))
            amps.append(a)
    totals = {sum(r) for r in rows}
    if len(totals) == 1:
        basis = build_fixed_n_basis(partition.M, totals.pop())
    else:
        basis = build_support_basis(partition.M, rows)
    out = np.zeros(basis.dim, dtype=np.complex128)
    for r, a in zip(rows, amps):
        out[basis.index_of(r)] += a
    return QuantumState(basis, out)


def _mode_basis_for(site_basis: OccupationBasis, partition: ModePartition,
                    mode_tuples: np.ndarray) -> OccupationBasis:
    if site_basis.kind == "fixed_n":
        return build_fixed_n_basis(partition.n_modes, site_basis.N)
    if site_basis.kind == "capped":
        per_mode = max(len(partition.sites_of(r)) for r in range(partition.n_modes))
        cap = site_basis.n_max * per_mode
        if (cap + 1) ** partition.n_modes <= DEFAULT_CAPACITY:
            return build_capped_basis(partition.n_modes, cap)
    return build_support_basis(partition.n_modes, mode_tuples)


def _factorize_class(vec: np.ndarray, sub_tuples: list[np.ndarray]):
    """Try to write ``vec`` (over the site tuples of one mode class) as a product
    over modes. Returns per-mode (keys, vector) pairs or None."""
    factors = []
    product = np.ones(1, dtype=np.complex128)
    keys_per_mode = []
    inv_per_mode = []
    for sub in sub_tuples:
        keys, inv = np.unique(sub, axis=0, return_inverse=True)
        keys_per_mode.append(keys)
        inv_per_mode.append(inv.ravel())
    # dense tensor over per-mode keys
    shape = tuple(len(k) for k in keys_per_mode)
    tensor = np.zeros(shape, dtype=np.complex128)
    tensor[tuple(inv_per_mode)] = vec
    if not np.isclose(np.vdot(tensor, tensor).real, np.vdot(vec, vec).real, rtol=1e-12, atol=0):
        return None
    for r in range(len(shape)):
        mat = np.moveaxis(tensor, r, 0).reshape(shape[r], -1)
        u, s, _ = np.linalg.svd(mat, full_matrices=False)
        factors.append((keys_per_mode[r], u[:, 0]))
        product = np.multiply.outer(product, u[:, 0]).ravel()
    nrm = np.linalg.norm(vec)
    if abs(abs(np.vdot(product, tensor.ravel())) - nrm) > 1e-10 * max(nrm, 1.0):
        return None
    return factors


def reduce_to_modes(state: QuantumState, partition: ModePartition) -> tuple[QuantumState, bool]:
    """Map a site-space state to mode-occupation space.

    Returns ``(mode_state, exact)``. When the state is mode-factorized, i.e.
    inside every mode-occupation class it is a product of per-mode internal
    states that depend only on that mode's occupation, amplitudes (with
    relative phases) are transferred exactly and ``exact`` is True.
    Otherwise the result carries only the diagonal occupation distribution
    (amplitudes ``sqrt(p)``) and ``exact`` is False: intramode phase
    information is lost, and the true reduction would be a partial trace.
    """
    if state.basis.slots != partition.M:
        raise ValueError(f"state has {state.basis.slots} sites, partition expects {partition.M}")
    mode_occ = partition.mode_occupations(state.basis.states)
    keys, inv = np.unique(mode_occ, axis=0, return_inverse=True)
    inv = inv.ravel()
    probs = np.bincount(inv, weights=state.probabilities(), minlength=len(keys))
    mode_basis = _mode_basis_for(state.basis, partition, keys)
    mode_sites = [list(partition.sites_of(r)) for r in range(partition.n_modes)]

    reference: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
    coeffs = np.zeros(len(keys), dtype=np.complex128)
    exact = True
    for c in range(len(keys)):
        members = np.flatnonzero(inv == c)
        vec = state.amplitudes[members]
        if not np.any(vec):
            continue
        subs = [state.basis.states[members][:, s] for s in mode_sites]
        factors = _factorize_class(vec, subs)
        if factors is None:
            exact = False
            break
        for r, (fkeys, fvec) in enumerate(factors):
            key = (r, int(keys[c][r]))
            if key not in reference:
                k0 = int(np.argmax(np.abs(fvec)))
                ref = fvec * np.exp(-1j * np.angle(fvec[k0]))
                reference[key] = (fkeys, ref)
            rkeys, rvec = reference[key]
            if rkeys.shape != fkeys.shape or not np.array_equal(rkeys, fkeys):
                exact = False
                break
            ov = np.vdot(rvec, fvec)
            if abs(abs(ov) - 1.0) > 1e-10:
                exact = False
                break
        if not exact:
            break
        # coefficient = projection onto the product of reference internal states
        prod_ref = np.ones(1, dtype=np.complex128)
        for r, (fkeys, fvec) in enumerate(factors):
            prod_ref = np.multiply.outer(prod_ref, reference[(r, int(keys[c][r]))][1]).ravel()
        shape = tuple(len(f[0]) for f in factors)
        tensor = np.zeros(shape, dtype=np.complex128)
        idx = []
        for (fkeys, _), sub in zip(factors, subs):
            lookup = {tuple(k): i for i, k in enumerate(fkeys.tolist())}
            idx.append(np.array([lookup[tuple(row)] for row in sub.tolist()]))
        tensor[tuple(idx)] = vec
        coeffs[c] = np.vdot(prod_ref, tensor.ravel())

    amps = np.zeros(mode_basis.dim, dtype=np.complex128)
    pos = np.array([mode_basis.index_of(k) for k in keys])
    if exact:
        amps[pos] = coeffs
    else:
        amps[pos] = np.sqrt(probs)
    out = QuantumState(mode_basis, amps, {"phase_exact": exact})
    return out, exact
