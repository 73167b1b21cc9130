import math

import numpy as np
import pytest

from ctxasr import kernels
from ctxasr.numkit import Tensor, finite_diff_check, log_softmax
from ctxasr.rnnt import (
    EmissionLattice,
    brute_force_loss,
    path_count,
    transducer_loss,
)


def random_lattice(rng, T, U, V):
    logits = rng.normal(size=(T, U + 1, V)) * 2.0
    log_probs = log_softmax(Tensor(logits))
    targets = rng.integers(1, V, size=U)
    return EmissionLattice(log_probs, targets)


def uniform_lattice(T, U, V):
    log_probs = np.full((T, U + 1, V), math.log(1.0 / V))
    targets = np.ones(U, dtype=np.int64)
    return EmissionLattice(Tensor(log_probs), targets)


class TestClosedForms:
    def test_single_blank_alignment(self):
        rng = np.random.default_rng(0)
        lat = random_lattice(rng, T=1, U=0, V=4)
        expected = -float(lat.log_probs.data[0, 0, 0])
        assert abs(transducer_loss(lat).item() - expected) < 1e-12
        assert abs(brute_force_loss(lat) - expected) < 1e-12

    def test_uniform_t2_u1_v3_is_ln9(self):
        lat = uniform_lattice(T=2, U=1, V=3)
        assert abs(transducer_loss(lat).item() - math.log(9.0)) < 1e-12

    def test_path_counts(self):
        assert path_count(2, 1) == 3
        assert path_count(3, 2) == math.comb(5, 2) == 10

    def test_uniform_general_closed_form(self):
        # With every entry 1/V, each of the C(T+U, U) paths scores V^-(T+U).
        for T, U, V in [(3, 2, 4), (4, 3, 5), (2, 0, 3)]:
            lat = uniform_lattice(T, U, V)
            expected = -math.log(path_count(T, U) * V ** -(T + U))
            assert abs(transducer_loss(lat).item() - expected) < 1e-12
            assert abs(brute_force_loss(lat) - expected) < 1e-12


class TestOracleAgreement:
    def test_dp_matches_enumeration(self):
        rng = np.random.default_rng(123)
        for _ in range(120):
            T = int(rng.integers(1, 5))
            U = int(rng.integers(0, 4))
            V = int(rng.integers(2, 6))
            lat = random_lattice(rng, T, U, V)
            assert abs(transducer_loss(lat).item() - brute_force_loss(lat)) < 1e-10

    def test_loss_nonnegative_when_normalized(self):
        rng = np.random.default_rng(321)
        for _ in range(30):
            lat = random_lattice(rng, int(rng.integers(1, 5)), int(rng.integers(0, 4)), 5)
            assert transducer_loss(lat).item() >= 0.0

    def test_enumeration_bound_enforced(self):
        lat = uniform_lattice(T=10, U=3, V=3)
        with pytest.raises(ValueError) as exc:
            brute_force_loss(lat)
        assert "12" in str(exc.value)


class TestGradient:
    def test_finite_diff_through_log_softmax(self):
        rng = np.random.default_rng(5)
        T, U, V = 3, 2, 4
        targets = rng.integers(1, V, size=U)
        x = Tensor(rng.normal(size=(T, U + 1, V)), requires_grad=True)

        def f(logits):
            return transducer_loss(EmissionLattice(log_softmax(logits), targets))

        assert finite_diff_check(f, x, eps=1e-5) < 1e-6

    def test_gradient_deterministic(self):
        rng = np.random.default_rng(6)
        logits = rng.normal(size=(3, 3, 4))
        targets = np.array([1, 2])

        def run():
            x = Tensor(logits.copy(), requires_grad=True)
            loss = transducer_loss(EmissionLattice(log_softmax(x), targets))
            loss.backward()
            return x.grad.copy()

        np.testing.assert_array_equal(run(), run())


class TestValidation:
    def test_rejects_nonfinite(self):
        lp = np.full((2, 2, 3), math.log(1 / 3.0))
        lp[0, 0, 0] = -np.inf
        with pytest.raises(ValueError):
            EmissionLattice(Tensor(lp), np.array([1]))

    def test_rejects_blank_target(self):
        lp = np.full((2, 2, 3), math.log(1 / 3.0))
        with pytest.raises(ValueError):
            EmissionLattice(Tensor(lp), np.array([0]))

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError):
            EmissionLattice(Tensor(np.zeros((2, 2, 3))), np.array([1]))


class TestBackends:
    def test_numpy_and_numba_agree(self):
        if not kernels.HAS_NUMBA:
            pytest.skip("numba unavailable")
        rng = np.random.default_rng(9)
        for _ in range(20):
            T = int(rng.integers(1, 6))
            U = int(rng.integers(0, 5))
            lat = random_lattice(rng, T, U, 5)
            a = transducer_loss(lat, backend="numpy").item()
            b = transducer_loss(lat, backend="numba").item()
            assert abs(a - b) < 1e-12

    def test_grad_backends_agree(self):
        if not kernels.HAS_NUMBA:
            pytest.skip("numba unavailable")
        rng = np.random.default_rng(10)
        logits = rng.normal(size=(4, 3, 5))
        targets = np.array([2, 3])
        grads = {}
        for backend in ("numpy", "numba"):
            x = Tensor(logits.copy(), requires_grad=True)
            transducer_loss(
                EmissionLattice(log_softmax(x), targets), backend=backend
            ).backward()
            grads[backend] = x.grad.copy()
        np.testing.assert_allclose(grads["numpy"], grads["numba"], atol=1e-13)

    def test_backend_resolution(self):
        assert kernels.active_backend("numpy") == "numpy"
        if kernels.HAS_NUMBA:
            assert kernels.active_backend("numba") == "numba"
            assert kernels.active_backend(None) in ("numba", "numpy")
        with pytest.raises(ValueError):
            kernels.active_backend("metal")

    def test_alpha_beta_consistency(self):
        rng = np.random.default_rng(11)
        lat = random_lattice(rng, 4, 3, 5)
        from ctxasr.rnnt import _read_matrices

        lpb, lpl = _read_matrices(lat)
        alpha = kernels.rnnt_alpha(lpb, lpl)
        beta = kernels.rnnt_beta(lpb, lpl)
        assert abs(alpha[-1, -1] - beta[0, 0]) < 1e-10
