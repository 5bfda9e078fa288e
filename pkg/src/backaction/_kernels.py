"""Compiled inner loop for measurement-only (diagonal) jump trajectories."""

import math

import numpy as np
from numba import njit

DONE = 0
NEED_UNIFORMS = 1
NEED_JUMP_BUFFER = 2
STEP_FLOOR = 3
NORM_ANOMALY = 4

N_LEVELS = 24
# weights this small can never recover; zeroing them avoids subnormal arithmetic
FLUSH = 1e-200


def decay_table(x2: np.ndarray, h_nom: float) -> np.ndarray:
    """``exp(-x2 * h_nom / 2^level)`` for every halving level."""
    levels = h_nom / 2.0 ** np.arange(N_LEVELS)
    return np.exp(-np.outer(levels, x2))


@njit(cache=True)
def diagonal_segment(w, x2, table, t, t_end, h_nom, p_max, h_floor, norm_tol,
                     uniforms, u_pos, jump_times, n_jumps):
    """Advance class probabilities ``w`` from ``t`` to ``t_end``.

    ``x2[k]`` is the jump rate of class k and ``table`` the output of
    :func:`decay_table`. Each accepted step consumes exactly one uniform; a
    detection in a step of length h multiplies by ``x2 exp(-x2 h)``, no
    detection by ``exp(-x2 h)``. Returns ``(t, u_pos, n_jumps, status)``;
    ``w`` and ``jump_times`` are updated in place.
    """
    K = w.shape[0]
    n_levels = table.shape[0]
    scale = max(1.0, abs(t_end))
    while t_end - t > 1e-12 * scale:
        if u_pos >= uniforms.shape[0]:
            return t, u_pos, n_jumps, NEED_UNIFORMS
        if n_jumps >= jump_times.shape[0]:
            return t, u_pos, n_jumps, NEED_JUMP_BUFFER
        level = 0
        h = h_nom
        remaining = t_end - t
        if remaining < h * (1.0 - 1e-9):
            h = remaining
            level = -1
        rate = 0.0
        for k in range(K):
            rate += w[k] * x2[k]
        while rate * h > p_max:
            h *= 0.5
            if level >= 0:
                level += 1
            if h < h_floor:
                return t, u_pos, n_jumps, STEP_FLOOR
        if level >= n_levels:
            level = -1
        u = uniforms[u_pos]
        u_pos += 1
        total = 0.0
        jumped = u < rate * h
        for k in range(K):
            decay = table[level, k] if level >= 0 else math.exp(-x2[k] * h)
            if jumped:
                w[k] *= x2[k] * decay
            else:
                w[k] *= decay
            total += w[k]
        if jumped:
            jump_times[n_jumps] = t + h
            n_jumps += 1
        elif total > 1.0 + norm_tol:
            return t, u_pos, n_jumps, NORM_ANOMALY
        if not (total > 0.0) or not math.isfinite(total):
            return t, u_pos, n_jumps, NORM_ANOMALY
        for k in range(K):
            w[k] /= total
            if w[k] < FLUSH:
                w[k] = 0.0
        t += h
    return t_end, u_pos, n_jumps, DONE


def warmup():
    w = np.array([0.5, 0.5])
    x2 = np.array([0.0, 1.0])
    diagonal_segment(w, x2, decay_table(x2, 0.001), 0.0, 0.01, 0.001, 0.1, 1e-9, 1e-10,
                     np.full(16, 0.5), 0, np.zeros(4), 0)
