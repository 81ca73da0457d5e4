"""Log-space CTC: collapse function, forward-backward lattice, loss, gradient,
multi-task total loss, and a brute-force path-enumeration oracle.

Conventions used throughout: a head emitting K labels produces a T x (K+1)
matrix of log-probabilities with the blank at index K (last column). All
dynamic programming runs in log space; there is no probability-space fallback.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

NEG_INF = float("-inf")

BRUTE_FORCE_PATH_GUARD = 10_000_000


class CtcInfeasibleError(ValueError):
    """Target cannot be aligned: T < L + (number of adjacent equal label pairs)."""


def logsumexp(values: np.ndarray, axis=None) -> np.ndarray:
    """Stable log(sum(exp(values))) along an axis. Handles -inf blocks."""
    values = np.asarray(values, dtype=np.float64)
    vmax = np.max(values, axis=axis, keepdims=True)
    vmax_safe = np.where(np.isfinite(vmax), vmax, 0.0)
    out = np.log(np.sum(np.exp(values - vmax_safe), axis=axis, keepdims=True)) + vmax_safe
    out = np.where(np.isfinite(vmax), out, vmax)
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    """Normalize scores into log-probabilities along `axis`."""
    scores = np.asarray(scores, dtype=np.float64)
    return scores - np.expand_dims(logsumexp(scores, axis=axis), axis)


def as_log_prob_matrix(values, tol: float = 1e-6) -> np.ndarray:
    """Validate and return a T x (K+1) float64 log-probability matrix.

    Each row must log-sum-exp to 0 within `tol`; -inf entries (hard zeros)
    are allowed, NaN and +inf are not.
    """
    lp = np.asarray(values, dtype=np.float64)
    if lp.ndim != 2 or lp.shape[0] < 1 or lp.shape[1] < 2:
        raise ValueError(f"expected a T x (K+1) matrix with T >= 1, K >= 1, got shape {lp.shape}")
    if np.isnan(lp).any() or np.isposinf(lp).any():
        raise ValueError("log-probability matrix contains NaN or +inf")
    row_mass = logsumexp(lp, axis=1)
    if np.max(np.abs(row_mass)) > tol:
        worst = int(np.argmax(np.abs(row_mass)))
        raise ValueError(
            f"row {worst} is not a normalized log-distribution "
            f"(logsumexp = {row_mass[worst]:.3e}, tol = {tol:.1e})"
        )
    return lp


def collapse(path, blank: int) -> tuple[int, ...]:
    """Map a frame-level path to a label sequence: merge adjacent repeats,
    then drop blanks."""
    out = []
    prev = None
    for sym in path:
        if sym != prev:
            if sym != blank:
                out.append(sym)
            prev = sym
    return tuple(out)


def extend_labels(labels, blank: int) -> tuple[int, ...]:
    """Interleave blanks around a label sequence: [b, l1, b, ..., lL, b]."""
    ext = [blank]
    for lab in labels:
        if lab == blank:
            raise ValueError(f"label sequence contains the blank index {blank}")
        ext.append(lab)
        ext.append(blank)
    return tuple(ext)


def min_timesteps(labels) -> int:
    """Smallest T able to emit `labels`: L plus one separator per adjacent repeat."""
    labels = tuple(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


@dataclass
class CtcLattice:
    """Forward/backward table over the extended label sequence (length 2L+1).

    alpha[t][s] includes the emission at time t; beta[t][s] covers emissions
    strictly after t, so alpha + beta is a proper cut of the total
    log-likelihood at every timestep.
    """

    ext_labels: tuple[int, ...]
    alpha: np.ndarray
    beta: np.ndarray
    log_likelihood: float


def _check_labels(labels, num_labels: int, T: int) -> tuple[int, ...]:
    labels = tuple(int(x) for x in labels)
    for lab in labels:
        if not 0 <= lab < num_labels:
            raise ValueError(f"label id {lab} out of range [0, {num_labels})")
    need = min_timesteps(labels)
    if T < need:
        raise CtcInfeasibleError(
            f"T={T} is too short for target of length {len(labels)} "
            f"(needs at least {need} timesteps)"
        )
    return labels


def _ladd(a: float, b: float) -> float:
    """logaddexp on two plain floats; the lattice is small enough that the
    interpreter loop beats numpy's per-call overhead here."""
    if a < b:
        a, b = b, a
    if b == NEG_INF:
        return a
    return a + math.log1p(math.exp(b - a))


def _forward_backward(lp: np.ndarray, labels: tuple[int, ...]) -> CtcLattice:
    T, width = lp.shape
    blank = width - 1
    ext = extend_labels(labels, blank)
    S = len(ext)

    # skip transition s-2 -> s allowed when the target state is a label that
    # differs from the label two states back
    can_skip = [s >= 2 and ext[s] != blank and ext[s] != ext[s - 2] for s in range(S)]

    em = lp[:, list(ext)].tolist()  # (T, S) emission log-probs per lattice state

    alpha = [[NEG_INF] * S for _ in range(T)]
    alpha[0][0] = em[0][0]
    if S > 1:
        alpha[0][1] = em[0][1]
    for t in range(1, T):
        prev = alpha[t - 1]
        cur = alpha[t]
        em_t = em[t]
        for s in range(S):
            v = prev[s]
            if s >= 1:
                v = _ladd(v, prev[s - 1])
            if can_skip[s]:
                v = _ladd(v, prev[s - 2])
            cur[s] = v + em_t[s]

    beta = [[NEG_INF] * S for _ in range(T)]
    beta[T - 1][S - 1] = 0.0
    if S > 1:
        beta[T - 1][S - 2] = 0.0
    for t in range(T - 2, -1, -1):
        em_n = em[t + 1]
        b_n = beta[t + 1]
        nxt = [b_n[s] + em_n[s] for s in range(S)]
        cur = beta[t]
        for s in range(S):
            v = nxt[s]
            if s + 1 < S:
                v = _ladd(v, nxt[s + 1])
            if s + 2 < S and can_skip[s + 2]:
                v = _ladd(v, nxt[s + 2])
            cur[s] = v

    last = alpha[T - 1]
    log_likelihood = _ladd(last[S - 1], last[S - 2]) if S > 1 else last[S - 1]
    return CtcLattice(
        ext_labels=ext,
        alpha=np.asarray(alpha),
        beta=np.asarray(beta),
        log_likelihood=float(log_likelihood),
    )


def ctc_loss(log_probs, labels) -> tuple[float, CtcLattice]:
    """Negative log-likelihood -log p(labels | log_probs) plus the DP lattice.

    Raises CtcInfeasibleError when T is too short for the target rather than
    returning an overflowed infinity.
    """
    lp = as_log_prob_matrix(log_probs)
    labels = _check_labels(labels, lp.shape[1] - 1, lp.shape[0])
    lattice = _forward_backward(lp, labels)
    return -lattice.log_likelihood, lattice


def _class_occupancy(lp: np.ndarray, lattice: CtcLattice) -> np.ndarray:
    """Posterior probability of each output class at each timestep (T x (K+1))."""
    T, width = lp.shape
    if not math.isfinite(lattice.log_likelihood):
        raise ValueError("target sequence has zero probability; gradient undefined")
    state_occ = np.exp(lattice.alpha + lattice.beta - lattice.log_likelihood)  # (T, S)
    gamma = np.zeros((T, width))
    ext_arr = np.asarray(lattice.ext_labels)
    np.add.at(gamma.T, ext_arr, state_occ.T)
    return gamma


def _loss_and_grad(lp: np.ndarray, labels: tuple[int, ...]) -> tuple[float, np.ndarray, CtcLattice]:
    lattice = _forward_backward(lp, labels)
    gamma = _class_occupancy(lp, lattice)
    grad = np.exp(lp) - gamma
    return -lattice.log_likelihood, grad, lattice


def ctc_grad(log_probs, labels) -> np.ndarray:
    """Gradient of ctc_loss with respect to the pre-softmax scores behind
    `log_probs` (the alpha-beta occupancy form, softmax minus occupancy).

    Equivalently: nudging entry (t, k) by eps and renormalizing that row
    changes the loss by grad[t, k] * eps to first order.
    """
    lp = as_log_prob_matrix(log_probs)
    labels = _check_labels(labels, lp.shape[1] - 1, lp.shape[0])
    _, grad, _ = _loss_and_grad(lp, labels)
    return grad


@dataclass
class TotalLossResult:
    total: float
    char_loss: float
    row_loss: float | None
    char_grad: np.ndarray
    row_grad: np.ndarray | None


def total_loss(char, row=None, row_weight: float = 1.0) -> TotalLossResult:
    """Multi-task objective: char-head CTC loss plus the row-head CTC loss.

    `char` and `row` are (log_probs, labels) pairs from the two heads; `row`
    is None in baseline (single-head) mode. The heads must share T. With the
    default weight 1.0 the total is bit-exactly char_loss + row_loss.
    """
    char_lp = as_log_prob_matrix(char[0])
    char_labels = _check_labels(char[1], char_lp.shape[1] - 1, char_lp.shape[0])
    char_loss_value, char_grad, _ = _loss_and_grad(char_lp, char_labels)
    if row is None:
        return TotalLossResult(char_loss_value, char_loss_value, None, char_grad, None)

    row_lp = as_log_prob_matrix(row[0])
    if row_lp.shape[0] != char_lp.shape[0]:
        raise ValueError(
            f"head timestep mismatch: char T={char_lp.shape[0]}, row T={row_lp.shape[0]}"
        )
    row_labels = _check_labels(row[1], row_lp.shape[1] - 1, row_lp.shape[0])
    row_loss_value, row_grad, _ = _loss_and_grad(row_lp, row_labels)
    total = char_loss_value + row_weight * row_loss_value
    return TotalLossResult(total, char_loss_value, row_loss_value, char_grad, row_weight * row_grad)


def brute_force_likelihood(log_probs, labels) -> float:
    """p(labels | log_probs) by literal enumeration of every length-T path.

    Exponential in T; guarded at (K+1)^T <= 10^7. Exists as an independent
    oracle for the lattice recursion and is never called on hot paths.
    """
    lp = as_log_prob_matrix(log_probs)
    T, width = lp.shape
    blank = width - 1
    target = tuple(int(x) for x in labels)
    if width**T > BRUTE_FORCE_PATH_GUARD:
        raise ValueError(f"path count (K+1)^T = {width}**{T} exceeds enumeration guard")
    rows = lp.tolist()
    total = 0.0
    for path in itertools.product(range(width), repeat=T):
        if collapse(path, blank) != target:
            continue
        acc = 0.0
        for t, sym in enumerate(path):
            acc += rows[t][sym]
        total += math.exp(acc)
    return total
