"""Conditional evolution under continuous photodetection.

Conventions
-----------
The detected field is ``alpha_n + beta`` with ``alpha_n = C <n|D|n>`` and a
local-oscillator offset ``beta`` (zero for plain photon counting). A record
with ``m`` detections over time ``t`` multiplies amplitudes by
``(alpha_n + beta)^m exp(-|alpha_n + beta|^2 kappa t)``. The matching jump
operator obeys ``J^dag J = 2 kappa |C D + beta|^2``, and trajectories are
clocked in the dimensionless time ``tau = 2 |C|^2 kappa t``. In tau units a
class with field ``l = D + beta/C`` jumps at rate ``|l|^2``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .basis import ModePartition, OccupationBasis, QuantumState
from .entanglement import Bipartition, entropy_bits
from .lightmatter import IncommensurateError, ScatterOperator, commensurate_index

P_MAX = 0.1
STEP_FLOOR = 1e-9
NORM_TOL = 1e-10
_UNIFORM_CHUNK = 1 << 16

SCHEME_KINDS = ("photocount", "phase_sensitive", "amplitude_only")


class DegenerateRecordError(ValueError):
    """The measurement record has zero probability for every basis state."""


class StepSizeError(RuntimeError):
    """Adaptive step halving fell below the floor."""


class NormAnomalyError(RuntimeError):
    """Non-Hermitian evolution increased the norm or produced non-finite values."""


class TrajectoryFailure(RuntimeError):
    def __init__(self, index: int, seed: int, cause: BaseException):
        super().__init__(f"trajectory {index} (seed {seed}) failed: {cause!r}")
        self.index = index
        self.seed = seed
        self.cause = cause


@dataclass(frozen=True)
class DetectionScheme:
    """How the scattered light is detected.

    ``photocount`` and ``amplitude_only`` both count photons of the bare
    scattered field and so only resolve ``|alpha|``; ``phase_sensitive``
    mixes in a local oscillator ``lo_offset`` (``None`` picks
    :func:`default_lo_offset` from the initial state at run time).
    """

    kind: str = "photocount"
    lo_offset: complex | None = 0.0
    kappa: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEME_KINDS:
            raise ValueError(f"unknown detection kind {self.kind!r}")
        if self.kind != "phase_sensitive" and self.lo_offset not in (None, 0, 0.0):
            raise ValueError(f"{self.kind} detection has no local oscillator")
        if self.kind != "phase_sensitive":
            object.__setattr__(self, "lo_offset", 0.0)
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")


LO_FACTOR = 6.0


def default_lo_offset(state: QuantumState, op: ScatterOperator) -> complex:
    """``6 C sqrt(<N>)`` with ``<N>`` the mean number of illuminated atoms.

    Counting ``|D + b|^2`` cannot tell ``D`` from its mirror ``-D - 2b``; with
    ``b = 6 sqrt(<N>)`` every mirror lies about 12 standard deviations of the
    initial number difference away, so its prior weight is negligible.
    """
    lit = np.abs(op.weight_array) > 0
    mean_n = float(state.probabilities() @ state.basis.states[:, lit].sum(axis=1))
    return LO_FACTOR * op.C * math.sqrt(mean_n)


def resolve_lo(scheme: DetectionScheme, state: QuantumState, op: ScatterOperator) -> complex:
    if scheme.kind != "phase_sensitive":
        return 0j
    if scheme.lo_offset is None:
        return default_lo_offset(state, op)
    return complex(scheme.lo_offset)


def conditional_update(state: QuantumState, op: ScatterOperator, scheme: DetectionScheme,
                       m: int, t: float) -> QuantumState:
    """Exact conditional state after ``m`` detections in time ``t`` (no Hamiltonian)."""
    if scheme.kind not in ("photocount", "phase_sensitive"):
        raise ValueError("conditional_update needs photocount or phase_sensitive detection")
    if m < 0 or t < 0:
        raise ValueError("m and t must be non-negative")
    beta = resolve_lo(scheme, state, op)
    field_ = op.alphas(state.basis) + beta
    mag = np.abs(field_)
    log_f = np.full(state.basis.dim, -np.inf)
    alive = (np.abs(state.amplitudes) > 0) & ((mag > 0) | (m == 0))
    with np.errstate(divide="ignore"):
        log_f[alive] = (m * np.log(mag[alive]) if m else 0.0) - mag[alive] ** 2 * scheme.kappa * t
    if not np.any(np.isfinite(log_f)):
        raise DegenerateRecordError("record annihilates every amplitude")
    log_f -= np.max(log_f[np.isfinite(log_f)])
    factor = np.exp(log_f) * np.exp(1j * m * np.angle(field_))
    out = QuantumState(state.basis, state.amplitudes * factor, dict(state.meta))
    if out.norm == 0.0:
        raise DegenerateRecordError("record annihilates every amplitude")
    return out.normalized()


@dataclass(frozen=True)
class BhHamiltonian:
    """``-t sum_<ij> (b_i^dag b_j + h.c.) + U sum_i b_i^dag b_i^dag b_i b_i`` on a chain."""

    t_hop: float
    U: float
    M: int
    periodic: bool = False

    @property
    def bonds(self) -> list[tuple[int, int]]:
        bonds = [(i, i + 1) for i in range(self.M - 1)]
        if self.periodic and self.M > 2:
            bonds.append((self.M - 1, 0))
        return bonds

    def matrix(self, basis: OccupationBasis) -> np.ndarray:
        if basis.kind != "fixed_n" or basis.slots != self.M:
            raise ValueError("Hamiltonian needs a fixed-N basis over all M sites")
        H = np.zeros((basis.dim, basis.dim), dtype=np.complex128)
        n = basis.states
        H[np.arange(basis.dim), np.arange(basis.dim)] = self.U * (n * (n - 1)).sum(axis=1)
        for i, j in self.bonds:
            for a, b in ((i, j), (j, i)):
                hop = hopping_operator(basis, a, b)
                H -= self.t_hop * hop
        return H


def hopping_operator(basis: OccupationBasis, i: int, j: int) -> np.ndarray:
    """Dense matrix of ``b_i^dag b_j`` in a fixed-N basis."""
    op = np.zeros((basis.dim, basis.dim))
    for col, occ in enumerate(basis.states):
        if i == j:
            op[col, col] = occ[i]
            continue
        if occ[j] == 0:
            continue
        new = occ.copy()
        new[j] -= 1
        new[i] += 1
        op[basis.index_of(new), col] = math.sqrt(occ[j] * (occ[i] + 1))
    return op


@dataclass
class TrajectoryRecord:
    tau_grid: np.ndarray
    jump_times: np.ndarray
    n_jumps: np.ndarray
    entropy: np.ndarray
    d_mean: np.ndarray
    d_var: np.ndarray
    seed: int
    final_state: QuantumState = field(repr=False)
    states: list[QuantumState] | None = field(default=None, repr=False)

    @property
    def n_jumps_total(self) -> int:
        return int(len(self.jump_times))

    @property
    def final_entropy(self) -> float:
        return float(self.entropy[-1])

    def csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["tau", "n_jumps_cum", "entropy_bits", "re_D_mean", "im_D_mean", "var_D"])
        for row in zip(self.tau_grid, self.n_jumps, self.entropy, self.d_mean, self.d_var):
            tau, nj, s, dm, dv = row
            writer.writerow([repr(float(tau)), int(nj), repr(float(s)), repr(float(dm.real)),
                             repr(float(dm.imag)), repr(float(dv))])
        return buf.getvalue()

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.csv_text())


def _d_stats(probs: np.ndarray, d: np.ndarray) -> tuple[complex, float]:
    mean = complex(probs @ d)
    var = float(probs @ np.abs(d - mean) ** 2)
    return mean, max(var, 0.0)


def _default_cut(state: QuantumState) -> Bipartition:
    return Bipartition.of([0], state.basis.slots)


def _check_norm(norm2: float, where: str) -> None:
    if not np.isfinite(norm2) or norm2 > 1.0 + NORM_TOL:
        raise NormAnomalyError(f"norm^2 {norm2!r} after {where}")


class _Uniforms:
    """Counter-based (Philox) uniform stream handed out in fixed-size blocks."""

    def __init__(self, seed: int):
        self._gen = np.random.Generator(np.random.Philox(seed))

    def block(self) -> np.ndarray:
        return self._gen.random(_UNIFORM_CHUNK)


def _run_diagonal(initial: QuantumState, ell: np.ndarray, d: np.ndarray, grid: np.ndarray,
                  dtau: float, seed: int, cut: Bipartition | None, keep_states: bool) -> TrajectoryRecord:
    probs0 = initial.probabilities()
    keys = np.round(ell.real, 9) + 1j * np.round(ell.imag, 9)
    classes, cls_of = np.unique(keys, return_inverse=True)
    cls_of = cls_of.ravel()
    lvals = np.array([ell[np.flatnonzero(cls_of == k)[0]] for k in range(len(classes))])
    W0 = np.bincount(cls_of, weights=probs0, minlength=len(classes))
    x2 = np.abs(lvals) ** 2
    arg = np.angle(lvals)
    with np.errstate(invalid="ignore", divide="ignore"):
        within = np.where(W0[cls_of] > 0, initial.amplitudes / np.sqrt(W0[cls_of]), 0.0)

    w = W0.copy()
    spacing = float(grid[1] - grid[0]) if len(grid) > 1 else dtau
    h_nom = spacing / math.ceil(spacing / dtau - 1e-9)
    table = _kernels.decay_table(x2, h_nom)
    rng = _Uniforms(seed)
    uniforms = rng.block()
    u_pos = 0
    jump_buf = np.zeros(1024)
    n_jumps = 0
    t = 0.0

    def state_at(m_count: int) -> QuantumState:
        amps = within * np.sqrt(w[cls_of]) * np.exp(1j * m_count * arg[cls_of])
        st = QuantumState(initial.basis, amps, dict(initial.meta))
        if abs(st.norm - 1.0) > NORM_TOL:
            raise NormAnomalyError(f"conditional state norm {st.norm!r}")
        return st

    rows = []
    for k, t_target in enumerate(grid):
        while True:
            t, u_pos, n_jumps, status = _kernels.diagonal_segment(
                w, x2, table, t, float(t_target), h_nom, P_MAX, STEP_FLOOR, NORM_TOL,
                uniforms, u_pos, jump_buf, n_jumps)
            if status == _kernels.DONE:
                break
            if status == _kernels.NEED_UNIFORMS:
                uniforms, u_pos = rng.block(), 0
            elif status == _kernels.NEED_JUMP_BUFFER:
                jump_buf = np.concatenate([jump_buf, np.zeros(len(jump_buf))])
            elif status == _kernels.STEP_FLOOR:
                raise StepSizeError(f"step halving below {STEP_FLOOR} at tau={t}")
            else:
                raise NormAnomalyError(f"class weights lost normalization at tau={t}")
        st = state_at(n_jumps)
        rows.append((n_jumps, st))
    return _assemble(grid, jump_buf[:n_jumps].copy(), rows, d, seed, cut, keep_states)


def _assemble(grid, jump_times, rows, d, seed, cut, keep_states=False) -> TrajectoryRecord:
    n_j, ent, dm, dv = [], [], [], []
    for count, st in rows:
        n_j.append(count)
        ent.append(entropy_bits(st, cut or _default_cut(st)))
        mean, var = _d_stats(st.probabilities(), d)
        dm.append(mean)
        dv.append(var)
    return TrajectoryRecord(
        tau_grid=np.asarray(grid, dtype=float),
        jump_times=np.asarray(jump_times, dtype=float),
        n_jumps=np.asarray(n_j, dtype=np.int64),
        entropy=np.maximum(np.asarray(ent), 0.0),
        d_mean=np.asarray(dm, dtype=np.complex128),
        d_var=np.asarray(dv),
        seed=int(seed),
        final_state=rows[-1][1],
        states=[st for _, st in rows] if keep_states else None,
    )


class _Propagator:
    """Cached ``exp(-i H h)`` via one eigendecomposition of H."""

    def __init__(self, H: np.ndarray):
        self.E, self.V = np.linalg.eigh(H)
        self._cache: dict[float, np.ndarray] = {}

    def __call__(self, h: float) -> np.ndarray:
        U = self._cache.get(h)
        if U is None:
            U = (self.V * np.exp(-1j * self.E * h)) @ self.V.conj().T
            self._cache[h] = U
        return U


def integrate_with_hamiltonian(initial: QuantumState, jump_field: np.ndarray, gamma_scale: float,
                               H: np.ndarray, t_grid: Sequence[float], dt: float, seed: int,
                               on_grid=None):
    """Jump unraveling with Hamiltonian in physical time.

    ``jump_field`` is the diagonal jump amplitude per basis state (any
    overall constant), ``gamma_scale * |jump_field|^2`` the jump rate. Each
    step is Strang-split, ``U(h/2) X U(h/2)`` with ``X = exp(-rate h / 2)``,
    times the jump amplitude when a detection falls in the step; step size is halved until the jump probability is
    at most 0.1. ``on_grid(k, n_jumps, psi)`` is called at every grid time.
    Returns ``(jump_times, n_jumps, psi)``.
    """
    psi = initial.amplitudes.astype(np.complex128).copy()
    psi /= np.linalg.norm(psi)
    rate = gamma_scale * np.abs(jump_field) ** 2
    prop = _Propagator(H)
    rng = _Uniforms(seed)
    uniforms, u_pos = rng.block(), 0
    jumps: list[float] = []
    t = 0.0
    for k, t_target in enumerate(t_grid):
        scale = max(1.0, abs(t_target))
        while t_target - t > 1e-12 * scale:
            h = min(dt, t_target - t)
            probs = np.abs(psi) ** 2
            r = float(probs @ rate)
            while r * h > P_MAX:
                h *= 0.5
                if h < STEP_FLOOR:
                    raise StepSizeError(f"step halving below {STEP_FLOOR} at t={t}")
            if u_pos >= len(uniforms):
                uniforms, u_pos = rng.block(), 0
            u = uniforms[u_pos]
            u_pos += 1
            half = prop(0.5 * h)
            psi = half @ psi
            psi = np.exp(-0.5 * rate * h) * psi
            jumped = u < r * h
            if jumped:
                psi = jump_field * psi
                jumps.append(t + h)
            psi = half @ psi
            norm2 = float(np.vdot(psi, psi).real)
            if not jumped:
                _check_norm(norm2, "no-jump step")
            if not (norm2 > 0) or not np.isfinite(norm2):
                raise NormAnomalyError(f"norm^2 {norm2!r} after jump")
            psi /= math.sqrt(norm2)
            t += h
        t = float(t_target)
        if on_grid is not None:
            on_grid(k, len(jumps), psi)
    return np.asarray(jumps), len(jumps), psi


def run_trajectory(initial: QuantumState, op: ScatterOperator, scheme: DetectionScheme,
                   H: BhHamiltonian | None = None, tau_max: float = 1.0, dtau: float = 1e-3,
                   seed: int = 0, n_grid: int = 100, cut: Bipartition | None = None,
                   keep_states: bool = False) -> TrajectoryRecord:
    """One quantum-jump trajectory sampled on ``n_grid + 1`` equally spaced tau points.

    Without ``H`` the no-jump factor is applied in closed form over
    eigenclasses of the detected field; with ``H`` the state must live in a
    full-lattice fixed-N basis and is integrated by :func:`integrate_with_hamiltonian`.
    The entropy history is taken across ``cut`` (default: slot 0 versus the rest).
    With ``keep_states`` the conditional state at every grid point is kept in
    ``record.states``.
    """
    if tau_max <= 0 or dtau <= 0:
        raise ValueError("tau_max and dtau must be positive")
    if op.C == 0 or scheme.kappa == 0:
        raise ValueError("tau is undefined without measurement (C = 0 or kappa = 0)")
    initial = initial.normalized()
    beta = resolve_lo(scheme, initial, op)
    d = op.eigenvalues(initial.basis)
    ell = d + beta / op.C
    grid = np.linspace(0.0, tau_max, n_grid + 1)
    if H is None:
        return _run_diagonal(initial, ell, d, grid, dtau, seed, cut, keep_states)

    # physical time: t = tau / (2 |C|^2 kappa)
    to_t = 1.0 / (2.0 * abs(op.C) ** 2 * scheme.kappa)
    rows = []

    def on_grid(k, count, psi):
        rows.append((count, QuantumState(initial.basis, psi.copy(), dict(initial.meta))))

    jumps, _, _ = integrate_with_hamiltonian(initial, ell, 1.0 / to_t, H.matrix(initial.basis),
                                             grid * to_t, dtau * to_t, seed, on_grid)
    return _assemble(grid, jumps / to_t, rows, d, seed, cut, keep_states)


@dataclass
class EnsembleResult:
    records: list[TrajectoryRecord]
    seeds: list[int]

    @property
    def final_entropies(self) -> np.ndarray:
        return np.array([r.final_entropy for r in self.records])

    @property
    def mean_final_entropy(self) -> float:
        return float(np.mean(self.final_entropies))

    @property
    def std_final_entropy(self) -> float:
        return float(np.std(self.final_entropies))

    def summary(self) -> dict:
        return {
            "mean_final_entropy": self.mean_final_entropy,
            "std_final_entropy": self.std_final_entropy,
            "n_traj": len(self.records),
            "seeds": list(self.seeds),
        }

    def summary_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def _ensemble_member(args):
    index, seed, kwargs = args
    try:
        return run_trajectory(seed=seed, **kwargs)
    except Exception as exc:  # re-raised with the trajectory index attached
        raise TrajectoryFailure(index, seed, exc) from exc


def run_ensemble(initial: QuantumState, op: ScatterOperator, scheme: DetectionScheme,
                 H: BhHamiltonian | None = None, tau_max: float = 1.0, dtau: float = 1e-3,
                 n_traj: int = 1, base_seed: int = 0, n_grid: int = 100,
                 cut: Bipartition | None = None, jobs: int = 1) -> EnsembleResult:
    """Independent trajectories with seeds ``base_seed + i``; output is independent of ``jobs``."""
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    kwargs = dict(initial=initial, op=op, scheme=scheme, H=H, tau_max=tau_max, dtau=dtau,
                  n_grid=n_grid, cut=cut)
    seeds = [base_seed + i for i in range(n_traj)]
    tasks = [(i, s, kwargs) for i, s in enumerate(seeds)]
    if jobs is None or jobs <= 1:
        records = [_ensemble_member(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(jobs, os.cpu_count() or 1)) as pool:
            records = list(pool.map(_ensemble_member, tasks))
    return EnsembleResult(records, seeds)


def class_probabilities(state: QuantumState, op: ScatterOperator) -> dict[complex, float]:
    """Probability of each eigenvalue of ``D`` (rounded to 1e-9)."""
    d = op.eigenvalues(state.basis)
    keys = np.round(d.real, 9) + 1j * np.round(d.imag, 9)
    out: dict[complex, float] = {}
    for k, p in zip(keys, state.probabilities()):
        out[complex(k)] = out.get(complex(k), 0.0) + float(p)
    return out


def dominant_eigenvalue(state: QuantumState, op: ScatterOperator) -> complex:
    probs = class_probabilities(state, op)
    return max(probs, key=probs.get)


def postselect(records: Sequence[TrajectoryRecord], op: ScatterOperator,
               target: complex = 0.0) -> list[TrajectoryRecord]:
    """Keep records whose final dominant eigenvalue of ``D`` equals ``target``."""
    return [r for r in records if abs(dominant_eigenvalue(r.final_state, op) - target) < 1e-9]


@dataclass
class ZenoReport:
    times: np.ndarray
    measured_mode_mean: np.ndarray
    measured_mode_var: np.ndarray
    free_mode_mean: np.ndarray
    free_mode_var: np.ndarray
    measured_intramode: np.ndarray
    free_intramode: np.ndarray
    intramode_pair: tuple[int, int]

    @property
    def measured_drift(self) -> float:
        return float(np.max(np.abs(self.measured_mode_mean - self.measured_mode_mean[0])))

    @property
    def free_drift(self) -> float:
        return float(np.max(np.abs(self.free_mode_mean - self.free_mode_mean[0])))

    @property
    def suppression(self) -> float:
        return self.free_drift / self.measured_drift if self.measured_drift > 0 else math.inf

    @property
    def intramode_variation(self) -> float:
        c = self.measured_intramode
        return float(np.max(np.abs(c - c[0])))


def _mode_moments(partition: ModePartition, basis: OccupationBasis, psi: np.ndarray):
    modes = partition.mode_occupations(basis.states).astype(float)
    p = np.abs(psi) ** 2
    mean = p @ modes
    var = p @ (modes - mean) ** 2
    return mean, var


def _period_of(delta: float, M: int) -> int:
    """Smallest R <= M with ``delta = 2 pi m / R``."""
    for R in range(1, M + 1):
        try:
            commensurate_index(delta, R)
            return R
        except IncommensurateError:
            continue
    raise IncommensurateError(f"delta={delta} has no period up to M={M}")


def zeno_check(initial: QuantumState, op: ScatterOperator, H: BhHamiltonian, kappa_strong: float,
               tau_max: float = 1.0, partition: ModePartition | None = None, n_grid: int = 50,
               dt: float = 1e-3, seed: int = 0, n_traj: int = 4) -> ZenoReport:
    """Compare measured and free evolution of mode populations on a small lattice.

    Time is in units of ``1/t_hop`` (``tau_max = t_hop * t_max``) and
    ``kappa_strong`` is the measurement strength ``kappa |C|^2``. The free
    evolution is exact (eigendecomposition of H); measured populations are
    averaged over ``n_traj`` trajectories with seeds ``seed + i``.
    """
    basis = initial.basis
    if basis.kind != "fixed_n":
        raise ValueError("zeno_check needs a full-lattice fixed-N basis")
    if basis.slots > 6 or basis.N > 8:
        raise ValueError("zeno_check is limited to M <= 6, N <= 8")
    if partition is None:
        if op.delta is None:
            raise ValueError("pass a partition for operators without a travelling-wave angle")
        partition = ModePartition(basis.slots, _period_of(op.delta, basis.slots))
    t_scale = abs(H.t_hop) if H.t_hop else 1.0
    times = np.linspace(0.0, tau_max / t_scale, n_grid + 1)
    Hm = H.matrix(basis)
    same_mode = [s for s in partition.sites_of(0)]
    pair = (same_mode[0], same_mode[1]) if len(same_mode) > 1 else (same_mode[0], same_mode[0])
    coh_op = hopping_operator(basis, pair[0], pair[1])
    psi0 = initial.normalized().amplitudes

    E, V = np.linalg.eigh(Hm)
    c0 = V.conj().T @ psi0
    f_mean, f_var, f_coh = [], [], []
    for t in times:
        psi = V @ (np.exp(-1j * E * t) * c0)
        mean, var = _mode_moments(partition, basis, psi)
        f_mean.append(mean)
        f_var.append(var)
        f_coh.append(np.vdot(psi, coh_op @ psi))

    field_ = op.eigenvalues(basis)
    gamma_scale = 2.0 * kappa_strong
    m_mean = np.zeros((len(times), partition.n_modes))
    m_var = np.zeros_like(m_mean)
    m_coh = np.zeros(len(times), dtype=np.complex128)
    for i in range(n_traj):
        def on_grid(k, count, psi):
            mean, var = _mode_moments(partition, basis, psi)
            m_mean[k] += mean / n_traj
            m_var[k] += var / n_traj
            m_coh[k] += np.vdot(psi, coh_op @ psi) / n_traj

        integrate_with_hamiltonian(initial, field_, gamma_scale, Hm, times, dt, seed + i, on_grid)
    return ZenoReport(times, m_mean, m_var, np.array(f_mean), np.array(f_var),
                      m_coh, np.array(f_coh), pair)
