"""Scattering operator, light amplitudes and occupation reconstruction.

The scattered-light amplitude for a Fock configuration ``n`` is
``alpha_n = C * sum_j w_j n_j``. For travelling probe and detected waves the
site weights are ``w_j = exp(i j delta)``. At ``delta = 2 pi m / R`` the sites
``j, j+R, j+2R, ...`` carry the same weight, so the eigenvalue depends only
on the mode occupations ``N_r = sum_{j mod R = r} n_j``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .basis import ModePartition, OccupationBasis

TWO_PI = 2.0 * math.pi
_QUARTER_TURNS = (1.0 + 0j, 1j, -1.0 + 0j, -1j)


class IncommensurateError(ValueError):
    """delta is not of the form 2 pi m / R."""


class UnderdeterminedError(ValueError):
    """Not enough independent real equations to fix all mode occupations."""


class InconsistentMeasurementError(ValueError):
    """Measured values admit no non-negative integer occupation vector."""


def unit_phase(theta: float) -> complex:
    """``exp(i theta)``, exact at multiples of pi/2."""
    q = theta / (0.5 * math.pi)
    k = round(q)
    if abs(q - k) < 1e-12:
        return _QUARTER_TURNS[k % 4]
    return complex(math.cos(theta), math.sin(theta))


@dataclass(frozen=True)
class ScatterOperator:
    """Diagonal operator ``D = sum_j w_j n_j`` with Rayleigh coefficient ``C``."""

    weights: tuple[complex, ...]
    C: complex = 1.0
    delta: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(complex(w) for w in self.weights))
        object.__setattr__(self, "C", complex(self.C))

    @property
    def M(self) -> int:
        return len(self.weights)

    @property
    def weight_array(self) -> np.ndarray:
        return np.array(self.weights, dtype=np.complex128)

    def eigenvalue(self, n: Sequence[int]) -> complex:
        if len(n) != self.M:
            raise ValueError(f"occupation has {len(n)} entries, operator has {self.M} sites")
        return complex(sum(w * int(k) for w, k in zip(self.weights, n)))

    def eigenvalues(self, basis: OccupationBasis) -> np.ndarray:
        """Eigenvalue of ``D`` (without ``C``) for every basis state."""
        if basis.slots != self.M:
            raise ValueError(f"basis has {basis.slots} slots, operator has {self.M} sites")
        return basis.states @ self.weight_array

    def alphas(self, basis: OccupationBasis) -> np.ndarray:
        return self.C * self.eigenvalues(basis)

    def to_dict(self) -> dict:
        return {
            "weights": [[w.real, w.imag] for w in self.weights],
            "C": [self.C.real, self.C.imag],
            "delta": self.delta,
        }


def travelling_wave_operator(M: int, delta: float, C: complex = 1.0,
                             illuminated: Sequence[int] | None = None) -> ScatterOperator:
    """``w_j = exp(i j delta)`` on illuminated sites, zero elsewhere."""
    if M < 1:
        raise ValueError("M must be >= 1")
    lit = set(range(M)) if illuminated is None else set(illuminated)
    weights = tuple(unit_phase(j * delta) if j in lit else 0j for j in range(M))
    return ScatterOperator(weights, C, float(delta))


def mode_operator(R: int, delta: float, C: complex = 1.0) -> ScatterOperator:
    """Scatter operator acting directly on R mode occupations (mode r has weight exp(i r delta))."""
    return travelling_wave_operator(R, delta, C)


def alpha_of(op: ScatterOperator, n: Sequence[int]) -> complex:
    return op.C * op.eigenvalue(n)


def commensurate_index(delta: float, R: int, tol: float = 1e-9) -> int:
    """Integer ``m`` (mod R) with ``delta = 2 pi m / R``; raises if none exists."""
    q = delta * R / TWO_PI
    m = round(q)
    if abs(q - m) > tol:
        raise IncommensurateError(f"delta={delta} is not a multiple of 2*pi/{R}")
    return int(m) % R


def mode_eigenvalue(op: ScatterOperator, partition: ModePartition, modeN: Sequence[int]) -> complex:
    """Eigenvalue of ``D`` (without ``C``) as a function of the R mode occupations.

    A trailing passive-mode occupation (non-illuminated sites) is accepted and
    contributes nothing.
    """
    if op.delta is None:
        raise IncommensurateError("operator has no travelling-wave angle")
    R = partition.R
    if len(modeN) not in (R, partition.n_modes):
        raise ValueError(f"expected {R} mode occupations, got {len(modeN)}")
    m = commensurate_index(op.delta, R)
    return complex(sum(unit_phase(TWO_PI * m * r / R) * int(modeN[r]) for r in range(R)))


def standard_deltas(R: int) -> list[float]:
    """Angles ``2 pi m / R`` for ``m = 0 .. floor(R/2)``: enough real equations for R modes."""
    if R < 1:
        raise ValueError("R must be >= 1")
    return [TWO_PI * m / R for m in range(R // 2 + 1)]


@dataclass(frozen=True)
class MeasurementSet:
    """Noiseless measured eigenvalues of ``D`` (without ``C``) at several angles."""

    deltas: tuple[float, ...]
    measured: tuple[complex, ...]

    def __post_init__(self):
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        object.__setattr__(self, "measured", tuple(complex(v) for v in self.measured))
        if len(self.deltas) != len(self.measured):
            raise ValueError("deltas and measured values differ in length")
        reduced = [d % TWO_PI for d in self.deltas]
        for i in range(len(reduced)):
            for j in range(i):
                gap = abs(reduced[i] - reduced[j])
                if min(gap, TWO_PI - gap) < 1e-9:
                    raise ValueError("deltas must be pairwise distinct modulo 2*pi")

    def to_json(self) -> str:
        return json.dumps({"deltas": list(self.deltas),
                           "measured": [[v.real, v.imag] for v in self.measured]})

    @classmethod
    def from_json(cls, text: str) -> "MeasurementSet":
        d = json.loads(text)
        return cls(tuple(d["deltas"]), tuple(complex(re, im) for re, im in d["measured"]))


def forward_measurements(modeN: Sequence[int], deltas: Sequence[float] | None = None) -> MeasurementSet:
    """Evaluate the mode eigenvalue at each angle (defaults to :func:`standard_deltas`)."""
    R = len(modeN)
    deltas = standard_deltas(R) if deltas is None else list(deltas)
    part = ModePartition(R, R)
    values = [mode_eigenvalue(ScatterOperator((1.0,) * R, 1.0, d), part, modeN) for d in deltas]
    return MeasurementSet(tuple(deltas), tuple(values))


def _real_system(ms: MeasurementSet, R: int) -> tuple[np.ndarray, np.ndarray]:
    rows, rhs = [], []
    for delta, value in zip(ms.deltas, ms.measured):
        m = commensurate_index(delta, R)
        phases = np.array([unit_phase(TWO_PI * m * r / R) for r in range(R)])
        rows.append(phases.real)
        rhs.append(value.real)
        if np.any(np.abs(phases.imag) > 0):
            rows.append(phases.imag)
            rhs.append(value.imag)
        elif abs(value.imag) > 1e-9:
            raise InconsistentMeasurementError(
                f"real eigenvalue expected at delta={delta}, got imaginary part {value.imag}")
    return np.array(rows, dtype=float), np.array(rhs, dtype=float)


def reconstruct_occupations(ms: MeasurementSet, R: int, N_total: int | None = None,
                            residual_tol: float = 1e-9, rounding_tol: float = 1e-6) -> tuple[int, ...]:
    """Solve the Vandermonde system for the R mode occupations.

    Each non-real angle contributes two real equations (real and imaginary
    parts); angles with purely real phases (0 and, for even R, pi) contribute
    one. ``N_total``, if given, is the delta = 0 value; it is added as an
    equation when the set lacks one and cross-checked otherwise.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    deltas, measured = list(ms.deltas), list(ms.measured)
    has_zero = any(commensurate_index(d, R) == 0 for d in deltas)
    if N_total is not None:
        if has_zero:
            zero_val = next(v for d, v in zip(deltas, measured) if commensurate_index(d, R) == 0)
            if abs(zero_val - N_total) > rounding_tol:
                raise InconsistentMeasurementError(
                    f"total number {N_total} disagrees with delta=0 value {zero_val}")
        else:
            deltas.append(0.0)
            measured.append(complex(N_total))
    A, b = _real_system(MeasurementSet(tuple(deltas), tuple(measured)), R)
    if A.shape[0] < R or np.linalg.matrix_rank(A, tol=1e-9) < R:
        raise UnderdeterminedError(
            f"{A.shape[0]} real equations of rank {np.linalg.matrix_rank(A, tol=1e-9)} cannot fix {R} modes")
    if np.linalg.cond(A) > 1e8:
        raise UnderdeterminedError("measurement system is ill-conditioned")
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    residual = float(np.max(np.abs(A @ sol - b))) if len(b) else 0.0
    if residual > residual_tol * max(1.0, float(np.max(np.abs(b)))):
        raise InconsistentMeasurementError(f"system residual {residual:.3e} exceeds tolerance")
    rounded = np.rint(sol)
    if np.max(np.abs(sol - rounded)) > rounding_tol:
        raise InconsistentMeasurementError(f"non-integer solution {sol}")
    if np.any(rounded < 0):
        raise InconsistentMeasurementError(f"negative occupation in solution {rounded}")
    return tuple(int(v) for v in rounded)
