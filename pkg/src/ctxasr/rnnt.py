"""Transducer negative log-likelihood over the (T, U+1, V) emission lattice.

``transducer_loss`` runs the log-space lattice recursion (numba or numpy via
``kernels``) and is differentiable through numkit with a hand-derived
occupancy gradient. ``brute_force_loss`` enumerates every alignment path in
plain Python and exists purely as an independent oracle for the recursion;
it must never share code with the fast path.

A path interleaves T blank emissions with U label emissions in any order,
giving C(T+U, U) monotone paths; blank number b is read at frame b and a
label following b blanks is read at frame min(b, T-1). The loss is the
negative log of the summed path probabilities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import kernels, numkit
from .numkit import Tensor

BLANK_ID = 0

ENUM_LIMIT = 12  # max T+U the oracle will enumerate


@dataclass
class EmissionLattice:
    """Log-probabilities from the joiner plus the target token sequence.

    log_probs: Tensor of shape (T, U+1, V), log-softmax over the last axis.
    targets: U token ids, each in 1..V-1 (blank is index 0).
    """

    log_probs: Tensor
    targets: np.ndarray

    def __post_init__(self):
        if not isinstance(self.log_probs, Tensor):
            self.log_probs = Tensor(self.log_probs)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        lp = self.log_probs.data
        if lp.ndim != 3:
            raise ValueError(f"lattice must be (T, U+1, V), got shape {lp.shape}")
        T, U1, V = lp.shape
        if T < 1 or V < 2:
            raise ValueError(f"lattice needs T >= 1 and V >= 2, got shape {lp.shape}")
        if self.targets.ndim != 1 or self.targets.shape[0] != U1 - 1:
            raise ValueError(
                f"target length {self.targets.shape} does not match lattice U+1 = {U1}"
            )
        if not np.all(np.isfinite(lp)):
            raise ValueError("lattice entries must be finite log-probabilities")
        if self.targets.size and (self.targets.min() < 1 or self.targets.max() >= V):
            raise ValueError("target tokens must lie in 1..V-1")
        totals = np.exp(lp).sum(axis=-1)
        if not np.allclose(totals, 1.0, atol=1e-10):
            worst = float(np.abs(totals - 1.0).max())
            raise ValueError(f"lattice slices must be normalized (max deviation {worst:.3e})")

    @property
    def T(self) -> int:
        return self.log_probs.data.shape[0]

    @property
    def U(self) -> int:
        return self.log_probs.data.shape[1] - 1


def _read_matrices(lattice: EmissionLattice) -> tuple[np.ndarray, np.ndarray]:
    lp = lattice.log_probs.data
    T, U1, _ = lp.shape
    lp_blank = np.ascontiguousarray(lp[:, :, BLANK_ID])
    if lattice.U:
        lp_label = np.ascontiguousarray(lp[:, np.arange(lattice.U), lattice.targets])
    else:
        lp_label = np.zeros((T, 0))
    return lp_blank, lp_label


def transducer_loss(lattice: EmissionLattice, backend: str | None = None) -> Tensor:
    """Negative log-likelihood of the target sequence, differentiable."""
    lp_blank, lp_label = _read_matrices(lattice)
    loglik, g_blank, g_label = kernels.rnnt_loglik_grads(lp_blank, lp_label, backend)
    targets = lattice.targets
    log_probs = lattice.log_probs
    T, U1, V = log_probs.data.shape

    def bwd(g):
        scale = -float(g)
        full = np.zeros((T, U1, V))
        full[:, :, BLANK_ID] = scale * g_blank
        if targets.size:
            full[:, np.arange(targets.size), targets] += scale * g_label
        log_probs._accumulate(full)

    return numkit.custom_op((log_probs,), np.float64(-loglik).reshape(()), bwd)


def brute_force_loss(lattice: EmissionLattice) -> float:
    """Oracle: enumerate every monotone blank/label interleaving.

    Refuses lattices with T + U over the enumeration bound. Kept free of the
    recursion code on purpose.
    """
    T, U = lattice.T, lattice.U
    if T + U > ENUM_LIMIT:
        raise ValueError(f"enumeration limited to T + U <= {ENUM_LIMIT}, got {T + U}")
    lp = lattice.log_probs.data
    targets = lattice.targets
    path_scores = []
    moves = T + U
    for label_positions in combinations(range(moves), U):
        label_set = set(label_positions)
        b = 0
        u = 0
        score = 0.0
        for step in range(moves):
            if step in label_set:
                frame = min(b, T - 1)
                score += lp[frame, u, targets[u]]
                u += 1
            else:
                score += lp[b, u, BLANK_ID]
                b += 1
        path_scores.append(score)
    return -numkit.logsumexp(path_scores)


def path_count(T: int, U: int) -> int:
    """Number of monotone alignments for a (T, U) lattice."""
    return math.comb(T + U, U)
