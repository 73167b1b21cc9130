"""Hot numeric kernels with a numba fast path and a pure-Python/numpy fallback.

The transducer lattice recursions and the edit-distance fill are the only
sequential inner loops in the package; everything else is vectorized numpy.
Backend selection:

    CTXASR_BACKEND=numba   force jit kernels (error if numba is missing)
    CTXASR_BACKEND=numpy   force the fallback path
    unset / auto           numba when importable, fallback otherwise

Every public function also takes a per-call ``backend`` override, which the
benchmark uses to time both paths in one process.

Lattice convention: a path interleaves T blank moves with U label moves in
any order (C(T+U, U) paths). State (b, u) counts blanks and labels emitted so
far; a blank from (b, u) reads frame b, a label reads frame min(b, T-1), so
labels trailing the final blank re-read the last frame.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def deco(f):
            return f

        return deco if not args else deco(*args)


NEG_INF = -math.inf


def _resolve_backend(name: str | None) -> str:
    if name in (None, "", "auto"):
        name = os.environ.get("CTXASR_BACKEND", "auto").strip().lower() or "auto"
    if name == "auto":
        return "numba" if HAS_NUMBA else "numpy"
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("CTXASR_BACKEND=numba but numba is not importable")
        return "numba"
    if name == "numpy":
        return "numpy"
    raise ValueError(f"unknown kernel backend {name!r}; use 'numba', 'numpy' or 'auto'")


def active_backend(backend: str | None = None) -> str:
    """The backend a call with this override would run on."""
    return _resolve_backend(backend)


# -- kernel bodies ------------------------------------------------------------
# Written once in numba-compatible Python; the fallback runs them as-is.


def _alpha_fill(lpb, lpl, alpha):
    # lpb (T, U+1): blank log-prob at (frame, labels emitted)
    # lpl (T, U):   log-prob of label u read at a given frame
    # alpha ((T+1), (U+1)): alpha[b, u] = log-prob of emitting b blanks, u labels
    T = lpb.shape[0]
    U = lpl.shape[1]
    alpha[0, 0] = 0.0
    for b in range(T + 1):
        for u in range(U + 1):
            if b == 0 and u == 0:
                continue
            best = NEG_INF
            if b > 0:
                best = alpha[b - 1, u] + lpb[b - 1, u]
            if u > 0:
                f = b if b < T else T - 1
                v = alpha[b, u - 1] + lpl[f, u - 1]
                if best == NEG_INF:
                    best = v
                elif v != NEG_INF:
                    if v > best:
                        best, v = v, best
                    best = best + math.log1p(math.exp(v - best))
            alpha[b, u] = best


def _beta_fill(lpb, lpl, beta):
    # beta[b, u] = log-prob of completing the path from state (b, u)
    T = lpb.shape[0]
    U = lpl.shape[1]
    beta[T, U] = 0.0
    for b in range(T, -1, -1):
        for u in range(U, -1, -1):
            if b == T and u == U:
                continue
            best = NEG_INF
            if b < T:
                best = lpb[b, u] + beta[b + 1, u]
            if u < U:
                f = b if b < T else T - 1
                v = lpl[f, u] + beta[b, u + 1]
                if best == NEG_INF:
                    best = v
                elif v != NEG_INF:
                    if v > best:
                        best, v = v, best
                    best = best + math.log1p(math.exp(v - best))
            beta[b, u] = best


def _occupancy_fill(lpb, lpl, alpha, beta, loglik, g_blank, g_label):
    # g_blank[t, u]: posterior mass of the blank edge read at (frame t, u)
    # g_label[t, u]: posterior mass of label edges read at (frame t, u);
    # the states b = T-1 and b = T both read frame T-1, hence accumulation.
    T = lpb.shape[0]
    U = lpl.shape[1]
    for b in range(T):
        for u in range(U + 1):
            v = alpha[b, u] + lpb[b, u] + beta[b + 1, u] - loglik
            if v > -700.0:
                g_blank[b, u] = math.exp(v)
    for b in range(T + 1):
        for u in range(U):
            f = b if b < T else T - 1
            v = alpha[b, u] + lpl[f, u] + beta[b, u + 1] - loglik
            if v > -700.0:
                g_label[f, u] += math.exp(v)


def _edit_fill(a, b, dist):
    # dist ((n+1), (m+1)): unit-cost Levenshtein table over int-coded words
    n = a.shape[0]
    m = b.shape[0]
    for i in range(n + 1):
        dist[i, 0] = i
    for j in range(m + 1):
        dist[0, j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            best = dist[i - 1, j - 1] + cost
            up = dist[i - 1, j] + 1
            if up < best:
                best = up
            left = dist[i, j - 1] + 1
            if left < best:
                best = left
            dist[i, j] = best


if HAS_NUMBA:
    _alpha_fill_nb = njit(cache=True)(_alpha_fill)
    _beta_fill_nb = njit(cache=True)(_beta_fill)
    _occupancy_fill_nb = njit(cache=True)(_occupancy_fill)
    _edit_fill_nb = njit(cache=True)(_edit_fill)


def _impl(py_fn, nb_fn, backend):
    return nb_fn if _resolve_backend(backend) == "numba" and HAS_NUMBA else py_fn


# -- public entry points -------------------------------------------------------


def rnnt_alpha(lp_blank: np.ndarray, lp_label: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Forward lattice scores; alpha[T, U] is the total log-likelihood."""
    T, U1 = lp_blank.shape
    U = U1 - 1
    alpha = np.full((T + 1, U + 1), NEG_INF)
    fill = _impl(_alpha_fill, _alpha_fill_nb if HAS_NUMBA else None, backend)
    fill(lp_blank, lp_label, alpha)
    return alpha


def rnnt_beta(lp_blank: np.ndarray, lp_label: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Suffix lattice scores; beta[0, 0] equals alpha[T, U]."""
    T, U1 = lp_blank.shape
    U = U1 - 1
    beta = np.full((T + 1, U + 1), NEG_INF)
    fill = _impl(_beta_fill, _beta_fill_nb if HAS_NUMBA else None, backend)
    fill(lp_blank, lp_label, beta)
    return beta


def rnnt_loglik_grads(
    lp_blank: np.ndarray, lp_label: np.ndarray, backend: str | None = None
) -> tuple[float, np.ndarray, np.ndarray]:
    """Log-likelihood plus its gradients w.r.t. the two read matrices.

    Returns (loglik, d loglik / d lp_blank, d loglik / d lp_label), all for
    the summed-over-paths likelihood.
    """
    T, U1 = lp_blank.shape
    U = U1 - 1
    alpha = rnnt_alpha(lp_blank, lp_label, backend)
    beta = rnnt_beta(lp_blank, lp_label, backend)
    loglik = alpha[T, U]
    g_blank = np.zeros_like(lp_blank)
    g_label = np.zeros_like(lp_label)
    if math.isfinite(loglik):
        fill = _impl(_occupancy_fill, _occupancy_fill_nb if HAS_NUMBA else None, backend)
        fill(lp_blank, lp_label, alpha, beta, loglik, g_blank, g_label)
    return float(loglik), g_blank, g_label


def edit_distance_matrix(a: np.ndarray, b: np.ndarray, backend: str | None = None) -> np.ndarray:
    """Full unit-cost Levenshtein table for backtracing an alignment."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    dist = np.zeros((a.shape[0] + 1, b.shape[0] + 1), dtype=np.int64)
    fill = _impl(_edit_fill, _edit_fill_nb if HAS_NUMBA else None, backend)
    fill(a, b, dist)
    return dist


def warmup(backend: str | None = None):
    """Trigger jit compilation outside timed sections."""
    lpb = np.log(np.full((3, 3), 0.5))
    lpl = np.log(np.full((3, 2), 0.25))
    rnnt_loglik_grads(lpb, lpl, backend)
    edit_distance_matrix(np.array([1, 2]), np.array([1, 3]), backend)
