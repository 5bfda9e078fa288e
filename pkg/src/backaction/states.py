"""Closed-form factories for the measurement-engineered states.

Two-mode conventions: slot 0 is the even-site mode and slot 1 the odd-site
mode, and ``delta_n = N_1 - N_0``. The delta = pi scatter eigenvalue is
``N_0 - N_1 = -delta_n``.

Poisson-weighted factories work in log space and fix the global phase so that
the lexicographically lowest supported amplitude is real and positive.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np
from scipy.special import gammaln

from .basis import (
    TRUNCATION_TOL,
    QuantumState,
    TruncationError,
    build_capped_basis,
    build_support_basis,
    poisson_cap,
    poisson_tail_mass,
)

FAMILIES = (
    "gutzwiller_sf",
    "pdc_postselected",
    "pdc_deterministic",
    "multimode_pdc",
    "sf_product_dicke",
    "cat_superposition",
    "generalized_squeezed",
    "two_sf_entangled",
)


def _from_log_amplitudes(basis, log_amps: np.ndarray, signs: np.ndarray | None = None) -> QuantumState:
    amps = np.exp(log_amps - np.max(log_amps)).astype(np.complex128)
    if signs is not None:
        amps *= signs
    amps /= np.linalg.norm(amps)
    nz = np.flatnonzero(np.abs(amps) > 0)
    if len(nz):
        amps *= np.exp(-1j * np.angle(amps[nz[0]]))
    return QuantumState(basis, amps)


def _tail_mass(log_w: callable, n_max: int, extra: int) -> float:
    n_in = np.arange(n_max + 1)
    n_out = np.arange(n_max + 1, n_max + 1 + extra)
    lw_in, lw_out = log_w(n_in), log_w(n_out)
    top = max(lw_in.max(), lw_out.max())
    inside = np.exp(lw_in - top).sum()
    outside = np.exp(lw_out - top).sum()
    return float(outside / (inside + outside))


def _limit(n_max: int | None, max_dropped: float | None) -> float | None:
    # automatic caps always meet the default tolerance; explicit caps are checked only on request
    return TRUNCATION_TOL if n_max is None else max_dropped


def _raise_if_truncated(dropped: float, n_max: int, limit: float | None) -> None:
    if limit is not None and dropped >= limit:
        raise TruncationError(f"n_max={n_max} drops probability {dropped:.3e}")


def _check_truncation(log_w: callable, lam: float, n_max: int, limit: float | None) -> float:
    dropped = _tail_mass(log_w, n_max, extra=int(10 * math.sqrt(lam + 1)) + 40)
    _raise_if_truncated(dropped, n_max, limit)
    return dropped


def gutzwiller_sf(slots: int, mean: float, n_max: int | None = None,
                  max_dropped: float | None = None) -> QuantumState:
    """Product of per-slot coherent-state (Poisson-amplitude) states on a capped basis.

    ``mean`` is the filling per slot: nu for lattice sites, lambda for modes.
    Without ``n_max`` the cap is chosen so the dropped Poisson mass is below
    1e-10. An explicit ``n_max`` is honoured as given; the dropped mass is
    recorded in ``meta["dropped_mass"]`` and checked against ``max_dropped``
    when that is set.
    """
    if mean <= 0:
        raise ValueError("mean occupation must be positive")
    limit = _limit(n_max, max_dropped)
    if n_max is None:
        n_max = poisson_cap(mean, slots)
    per_slot = poisson_tail_mass(mean, n_max)
    dropped = -math.expm1(slots * math.log1p(-per_slot))
    _raise_if_truncated(dropped, n_max, limit)
    basis = build_capped_basis(slots, n_max)
    n = basis.states
    log_amps = (0.5 * n * math.log(mean) - 0.5 * gammaln(n + 1)).sum(axis=1)
    st = _from_log_amplitudes(basis, log_amps)
    st.meta.update(family="gutzwiller_sf", mean=mean, dropped_mass=dropped)
    return st


def pdc_state(lam: float, delta_n: int = 0, n_max: int | None = None,
              max_dropped: float | None = None) -> QuantumState:
    """Two-mode state with fixed occupation difference ``delta_n = N_1 - N_0``.

    Amplitudes are proportional to ``lam^n / sqrt(n! (n+|dN|)!)`` on
    ``|n, n+dN>`` (or the mirrored tuple for negative ``dN``); ``dN = 0`` is
    the post-selected form with amplitudes ``lam^n / n!``.
    """
    if lam <= 0:
        raise ValueError("lambda must be positive")
    d = abs(int(delta_n))
    limit = _limit(n_max, max_dropped)
    if n_max is None:
        n_max = poisson_cap(lam)

    def log_w(n):
        return 2 * n * math.log(lam) - gammaln(n + 1) - gammaln(n + d + 1)

    dropped = _check_truncation(log_w, lam, n_max, limit)
    n = np.arange(n_max + 1)
    if delta_n >= 0:
        tuples = np.stack([n, n + d], axis=1)
    else:
        tuples = np.stack([n + d, n], axis=1)
    basis = build_support_basis(2, tuples)
    log_amps = np.empty(basis.dim)
    order = [basis.index_of(t) for t in tuples]
    log_amps[order] = 0.5 * log_w(n)
    st = _from_log_amplitudes(basis, log_amps)
    st.meta.update(family="pdc_postselected" if d == 0 else "pdc_deterministic",
                   lam=lam, delta_n=int(delta_n), dropped_mass=dropped)
    return st


def multimode_pdc(lam: float, R: int, n_max: int | None = None,
                  max_dropped: float | None = None) -> QuantumState:
    """``sum_n (e^-lam lam^n / n!)^(R/2) |n>^(x)R`` on its diagonal support."""
    if R < 2:
        raise ValueError("R must be >= 2")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    limit = _limit(n_max, max_dropped)
    if n_max is None:
        n_max = poisson_cap(lam)

    def log_w(n):
        return R * (n * math.log(lam) - gammaln(n + 1))

    dropped = _check_truncation(log_w, lam, n_max, limit)
    n = np.arange(n_max + 1)
    tuples = np.repeat(n[:, None], R, axis=1)
    basis = build_support_basis(R, tuples)
    st = _from_log_amplitudes(basis, 0.5 * log_w(n))
    st.meta.update(family="multimode_pdc", lam=lam, R=R, dropped_mass=dropped)
    return st


def sf_product(N_list: Sequence[int]) -> QuantumState:
    """Sharp mode occupations ``|N_1, ..., N_R>``; each mode is internally a fixed-N superfluid.

    Use :func:`backaction.basis.expand_to_sites` for the site-space form.
    """
    if any(int(N) < 0 for N in N_list):
        raise ValueError("atom numbers must be non-negative")
    occ = tuple(int(N) for N in N_list)
    basis = build_support_basis(len(occ), [occ])
    st = QuantumState(basis, np.ones(1, dtype=np.complex128))
    st.meta.update(family="sf_product_dicke", internal="fixed_n_superfluid")
    return st


def cat_superposition(lam: float, delta_n_abs: int, sign: int = +1, n_max: int | None = None,
                      max_dropped: float | None = None) -> QuantumState:
    """``(|+dN branch> + sign |-dN branch>) / sqrt(2)`` of two fixed-difference states."""
    d = int(delta_n_abs)
    if d <= 0:
        raise ValueError("delta_n_abs must be positive")
    if sign not in (+1, -1):
        raise ValueError("sign must be +1 or -1")
    plus = pdc_state(lam, d, n_max, max_dropped)
    minus = pdc_state(lam, -d, n_max, max_dropped)
    tuples = np.concatenate([plus.basis.states, minus.basis.states])
    basis = build_support_basis(2, tuples)
    amps = np.zeros(basis.dim, dtype=np.complex128)
    for st, s in ((plus, 1.0), (minus, float(sign))):
        idx = [basis.index_of(t) for t in st.basis.states]
        amps[idx] += s * st.amplitudes / math.sqrt(2.0)
    out = QuantumState(basis, amps).normalized()
    out.meta.update(family="cat_superposition", lam=lam, delta_n_abs=d, sign=sign,
                    dropped_mass=plus.meta["dropped_mass"])
    return out


def merge_modes(state: QuantumState, R: int | None = None, tol: float = 0.0) -> QuantumState:
    """Collapse R modes into one by total number, for states of fixed pairwise differences.

    The input support must be ``{base + n (1, ..., 1)}``; the output carries
    amplitude ``c_n`` on ``|N_0 + n R>`` in a single-slot capped basis.
    """
    slots = state.basis.slots
    if R is not None and R != slots:
        raise ValueError(f"state has {slots} modes, expected {R}")
    nz = np.flatnonzero(np.abs(state.amplitudes) > tol)
    if len(nz) == 0:
        raise ValueError("state has empty support")
    tuples = state.basis.states[nz]
    diffs = tuples - tuples[:, :1]
    if np.any(diffs != diffs[0]):
        raise ValueError("support does not have fixed pairwise occupation differences")
    totals = tuples.sum(axis=1)
    basis = build_capped_basis(1, int(totals.max()))
    amps = np.zeros(basis.dim, dtype=np.complex128)
    amps[totals] = state.amplitudes[nz]
    out = QuantumState(basis, amps)
    out.meta.update(family="generalized_squeezed", N0=int(totals.min()), spacing=slots)
    return out


def two_sf_entangled(N_A: int, N_B: int, delta_n: int) -> QuantumState:
    """Two fixed-number superfluids after an odd/even number-difference measurement across both.

    Slots are (A-odd, A-even, B-odd, B-even); ``delta_n = N_even - N_odd``
    summed over both subsystems. Amplitudes are
    ``sqrt(C(N_A, k) C(N_B, l))`` with ``l = (N_A + N_B - delta_n)/2 - k``.
    """
    total = N_A + N_B
    if abs(delta_n) > total or (total - delta_n) % 2:
        raise ValueError("need |delta_n| <= N_A + N_B with matching parity")
    odd_total = (total - delta_n) // 2
    tuples, amps = [], []
    for k in range(N_A + 1):
        l = odd_total - k
        if 0 <= l <= N_B:
            tuples.append((k, N_A - k, l, N_B - l))
            amps.append(math.sqrt(math.comb(N_A, k) * math.comb(N_B, l)))
    if not tuples:
        raise ValueError("no valid configuration for these parameters")
    basis = build_support_basis(4, tuples)
    vec = np.zeros(basis.dim, dtype=np.complex128)
    for t, a in zip(tuples, amps):
        vec[basis.index_of(t)] = a
    out = QuantumState(basis, vec).normalized()
    out.meta.update(family="two_sf_entangled", N_A=N_A, N_B=N_B, delta_n=delta_n)
    return out


@dataclass(frozen=True)
class StateRecipe:
    """Serializable ``{family, params}`` description of a factory call."""

    family: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown state family {self.family!r}")

    def build(self) -> QuantumState:
        p = dict(self.params)
        f = self.family
        if f == "gutzwiller_sf":
            return gutzwiller_sf(int(p["slots"]), float(p["mean"]), p.get("n_max"))
        if f == "pdc_postselected":
            return pdc_state(float(p["lam"]), 0, p.get("n_max"))
        if f == "pdc_deterministic":
            return pdc_state(float(p["lam"]), int(p["delta_n"]), p.get("n_max"))
        if f == "multimode_pdc":
            return multimode_pdc(float(p["lam"]), int(p["R"]), p.get("n_max"))
        if f == "sf_product_dicke":
            return sf_product(p["N_list"])
        if f == "cat_superposition":
            return cat_superposition(float(p["lam"]), int(p["delta_n_abs"]), int(p.get("sign", 1)),
                                     p.get("n_max"))
        if f == "generalized_squeezed":
            inner = multimode_pdc(float(p["lam"]), int(p["R"]), p.get("n_max"))
            return merge_modes(inner)
        return two_sf_entangled(int(p["N_A"]), int(p["N_B"]), int(p["delta_n"]))

    def to_json(self) -> str:
        return json.dumps({"family": self.family, "params": self.params}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "StateRecipe":
        d = json.loads(text)
        return cls(d["family"], d.get("params", {}))
