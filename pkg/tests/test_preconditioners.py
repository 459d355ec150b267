import numpy as np
import pytest

from psgdkit.curvature import TangentPair
from psgdkit.errors import ContractViolationError, DegenerateCurvatureError
from psgdkit.preconditioners import (
    DensePrecond,
    DiagPrecond,
    DirectSumPrecond,
    KronPrecond,
    ScanPrecond,
    SpluPrecond,
    closed_form_diagonal,
    direct_sum_route,
    estimation_criterion,
    make_preconditioner,
    scan_q2_matvec,
    splu_matvec,
)
from psgdkit.problems import ParamBlock, ParamLayout
from psgdkit.verify import min_group_diagonal


def fresh_variants():
    return [
        DensePrecond(6),
        DiagPrecond(6),
        KronPrecond(2, 3),
        ScanPrecond(2, 3),
        SpluPrecond(6, 2),
        DirectSumPrecond([("a", KronPrecond(2, 2)), ("b", DiagPrecond(2))]),
    ]


def random_pair(rng, dim, scale=1.0):
    dt = rng.standard_normal(dim)
    return TangentPair(dt, scale * rng.standard_normal(dim))


class TestApply:
    def test_fresh_state_is_identity(self):
        rng = np.random.default_rng(0)
        for p in fresh_variants():
            g = rng.standard_normal(p.dim)
            np.testing.assert_allclose(p.apply(g), g, rtol=0, atol=1e-14)
            np.testing.assert_allclose(p.apply_inv(g), g, rtol=0, atol=1e-14)

    def test_diag_squares_factor(self):
        p = DiagPrecond(2)
        p.q = np.array([2.0, 3.0])
        np.testing.assert_allclose(p.apply(np.array([1.0, 1.0])), [4.0, 9.0])

    def test_dense_factored_product(self):
        p = DensePrecond(2)
        p.q = np.array([[1.0, 1.0], [0.0, 1.0]])
        np.testing.assert_allclose(p.apply(np.array([1.0, 0.0])), [1.0, 1.0])

    def test_apply_is_positive_definite_action(self):
        # v^T P v = ||Q v||^2 > 0 on any reachable state
        rng = np.random.default_rng(1)
        for p in fresh_variants():
            for _ in range(50):
                p.update(random_pair(rng, p.dim, scale=rng.uniform(0.2, 3.0)), 0.3)
            for _ in range(1000):
                v = rng.standard_normal(p.dim)
                assert v @ p.apply(v) > 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ContractViolationError):
            DensePrecond(3).apply(np.ones(2))


class TestUpdate:
    def test_dense_whitened_probe_is_fixed_point(self):
        p = DensePrecond(3)
        e1 = np.array([1.0, 0.0, 0.0])
        p.update(TangentPair(e1, e1), 0.1)
        np.testing.assert_array_equal(p.q, np.eye(3))

    def test_dense_single_axis_step(self):
        # gradient is triu(4 e1 e1^T - e1 e1^T) = 3 e1 e1^T, normalized step
        # multiplies Q11 by (1 - mu0)
        p = DensePrecond(2)
        e1 = np.array([1.0, 0.0])
        p.update(TangentPair(e1, 2.0 * e1), 0.25)
        np.testing.assert_allclose(p.q[0, 0], 0.75)
        np.testing.assert_allclose(p.q[1, 1], 1.0)

    def test_diag_converges_to_closed_form_scalar(self):
        rng = np.random.default_rng(2)
        p = DiagPrecond(1)
        for _ in range(10_000):
            dt = rng.standard_normal(1)
            p.update(TangentPair(dt, 2.0 * dt), 0.01)
        assert abs(p.q[0] - 1.0 / np.sqrt(2.0)) <= 0.02 / np.sqrt(2.0)

    def test_step_out_of_range(self):
        p = DiagPrecond(2)
        with pytest.raises(ContractViolationError):
            p.update(TangentPair(np.ones(2), np.ones(2)), 1.5)

    def test_update_rejected_when_diagonal_would_collapse(self):
        p = DiagPrecond(1)
        p.q = np.array([1.5e-150])
        # a pure shrink step (curvature response dominates) would multiply the
        # factor by (1 - mu0) and cross the floor, so the state is kept
        p.update(TangentPair(np.array([1e-320]), np.array([1.0])), 0.5)
        np.testing.assert_array_equal(p.q, [1.5e-150])

    def test_collapsed_state_raises_on_update(self):
        from psgdkit.errors import DegenerateStateError
        p = DensePrecond(2)
        p.q = np.diag([1e-301, 1.0])
        with pytest.raises(DegenerateStateError):
            p.update(TangentPair(np.ones(2), np.ones(2)), 0.1)


class TestClosedFormDiagonal:
    def test_direct_substitution(self):
        np.testing.assert_allclose(
            closed_form_diagonal(np.array([1.0, 1.0]), np.array([4.0, 9.0])),
            [0.5, 1.0 / 3.0])

    def test_unit(self):
        np.testing.assert_allclose(closed_form_diagonal(np.ones(1), np.ones(1)), [1.0])

    def test_monte_carlo_moments(self):
        h = np.diag([2.0, -5.0])
        rng = np.random.default_rng(3)
        dts = rng.standard_normal((100_000, 2))
        dgs = dts @ h.T
        p = closed_form_diagonal((dts * dts).mean(axis=0), (dgs * dgs).mean(axis=0))
        np.testing.assert_allclose(p, [0.5, 0.2], rtol=0.02)

    def test_zero_curvature_rejected(self):
        with pytest.raises(DegenerateCurvatureError):
            closed_form_diagonal(np.ones(2), np.array([1.0, 0.0]))


class TestSpluMatvec:
    def test_fresh_identity(self):
        p = SpluPrecond(7, 3)
        v = np.arange(7.0)
        for which in ("q", "qt", "qinv", "qinvt"):
            np.testing.assert_allclose(splu_matvec(p, v, which), v)

    def test_round_trip(self):
        rng = np.random.default_rng(4)
        p = SpluPrecond(12, 3)
        for _ in range(300):
            p.update(random_pair(rng, 12, scale=rng.uniform(0.3, 2.0)), 0.3)
        for _ in range(10):
            v = rng.standard_normal(12)
            np.testing.assert_allclose(
                splu_matvec(p, splu_matvec(p, v, "q"), "qinv"), v, atol=1e-10)
            np.testing.assert_allclose(
                splu_matvec(p, splu_matvec(p, v, "qt"), "qinvt"), v, atol=1e-10)

    def test_dense_materialization_agreement(self):
        rng = np.random.default_rng(5)
        p = SpluPrecond(8, 2)
        for _ in range(300):
            p.update(random_pair(rng, 8, scale=rng.uniform(0.3, 2.0)), 0.3)
        q = p.materialize_q()
        for _ in range(10):
            v = rng.standard_normal(8)
            np.testing.assert_allclose(splu_matvec(p, v, "q"), q @ v, atol=1e-12)
            np.testing.assert_allclose(splu_matvec(p, v, "qt"), q.T @ v, atol=1e-12)
            np.testing.assert_allclose(splu_matvec(p, v, "qinv"),
                                       np.linalg.solve(q, v), atol=1e-12)
            np.testing.assert_allclose(splu_matvec(p, v, "qinvt"),
                                       np.linalg.solve(q.T, v), atol=1e-12)

    def test_bad_selector(self):
        with pytest.raises(ContractViolationError):
            splu_matvec(SpluPrecond(4, 2), np.ones(4), "p")


class TestScanQ2Matvec:
    def test_feature_normalization(self):
        nu = np.array([1.0, -2.0])
        sigma = np.array([2.0, 4.0])
        p = ScanPrecond(1, 3)
        p.d2 = np.array([1.0 / sigma[0], 1.0 / sigma[1], 1.0])
        p.c2 = np.array([-nu[0] / sigma[0], -nu[1] / sigma[1]])
        x = np.array([3.0, 2.0, 1.0])
        np.testing.assert_allclose(
            scan_q2_matvec(p, x), [(3.0 - 1.0) / 2.0, (2.0 + 2.0) / 4.0, 1.0])

    def test_identity(self):
        p = ScanPrecond(2, 4)
        x = np.arange(4.0)
        np.testing.assert_allclose(scan_q2_matvec(p, x), x)

    def test_small_example(self):
        p = ScanPrecond(1, 2)
        p.d2 = np.array([2.0, 1.0])
        p.c2 = np.array([3.0])
        np.testing.assert_allclose(scan_q2_matvec(p, np.array([1.0, 1.0])), [5.0, 1.0])

    def test_matches_dense_factor(self):
        rng = np.random.default_rng(6)
        p = ScanPrecond(2, 5)
        p.d2 = 0.5 + rng.random(5)
        p.c2 = rng.standard_normal(4)
        x = rng.standard_normal(5)
        np.testing.assert_allclose(scan_q2_matvec(p, x), p.materialize_q2() @ x)


class TestDirectSum:
    def test_routing_slices(self):
        p = DirectSumPrecond([("a", DiagPrecond(2)), ("b", DiagPrecond(3))])
        pair = TangentPair(np.array([1.0, 2.0, 3.0, 4.0, 5.0]),
                           np.array([5.0, 4.0, 3.0, 2.0, 1.0]))
        sub = direct_sum_route(p, pair)
        np.testing.assert_array_equal(sub[0].delta_theta, [1.0, 2.0])
        np.testing.assert_array_equal(sub[1].delta_theta, [3.0, 4.0, 5.0])
        np.testing.assert_array_equal(sub[0].delta_g, [5.0, 4.0])
        np.testing.assert_array_equal(sub[1].delta_g, [3.0, 2.0, 1.0])

    def test_single_block_identity_routing(self):
        p = DirectSumPrecond([("only", DiagPrecond(4))])
        pair = TangentPair(np.arange(1.0, 5.0), np.arange(4.0, 0.0, -1.0))
        (sub,) = direct_sum_route(p, pair)
        np.testing.assert_array_equal(sub.delta_theta, pair.delta_theta)
        np.testing.assert_array_equal(sub.delta_g, pair.delta_g)

    def test_scatter_gather_round_trip(self):
        p = DirectSumPrecond([("a", DiagPrecond(2)), ("b", DiagPrecond(3))])
        pair = TangentPair(np.arange(1.0, 6.0), np.arange(5.0, 0.0, -1.0))
        sub = direct_sum_route(p, pair)
        np.testing.assert_array_equal(
            np.concatenate([s.delta_theta for s in sub]), pair.delta_theta)
        np.testing.assert_array_equal(
            np.concatenate([s.delta_g for s in sub]), pair.delta_g)

    def test_blocks_update_independently(self):
        rng = np.random.default_rng(7)
        p = DirectSumPrecond([("a", DiagPrecond(2)), ("b", DiagPrecond(3))])
        solo = DiagPrecond(2)
        for _ in range(20):
            pair = random_pair(rng, 5, scale=2.0)
            p.update(pair, 0.1)
            solo.update(TangentPair(pair.delta_theta[:2], pair.delta_g[:2]), 0.1)
        np.testing.assert_allclose(p.blocks[0][1].q, solo.q)


class TestParamCount:
    def test_table_values(self):
        assert ScanPrecond(4, 3).param_count() == 9
        assert KronPrecond(1, 1).param_count() == 2
        assert DensePrecond(2).param_count() == 3       # matrix shape (2, 1)
        assert DiagPrecond(12).param_count() == 12
        assert SpluPrecond(12, 3).param_count() == 2 * 4 * 12 - 9 - 6
        assert KronPrecond(4, 3).param_count() == (16 + 9 + 4 + 3) // 2

    def test_direct_sum_sums_blocks(self):
        p = DirectSumPrecond([("a", KronPrecond(2, 3)), ("b", DiagPrecond(4))])
        assert p.param_count() == KronPrecond(2, 3).param_count() + 4


class TestFactory:
    def test_whole_theta_variants(self):
        layout = ParamLayout([ParamBlock("w1", (2, 3)), ParamBlock("w2", (4,))])
        assert isinstance(make_preconditioner("dense", layout), DensePrecond)
        assert isinstance(make_preconditioner("diag", layout), DiagPrecond)
        p = make_preconditioner("splu", layout, splu_order=20)
        assert isinstance(p, SpluPrecond) and p.r == layout.size

    def test_per_block_factored_variants(self):
        layout = ParamLayout([ParamBlock("w1", (2, 3)), ParamBlock("w2", (4,))])
        p = make_preconditioner("kron", layout)
        assert isinstance(p, DirectSumPrecond)
        assert isinstance(p.blocks[0][1], KronPrecond)
        assert (p.blocks[1][1].m, p.blocks[1][1].n) == (4, 1)
        s = make_preconditioner("scan", layout)
        assert isinstance(s.blocks[0][1], ScanPrecond)

    def test_per_block_flat_variants(self):
        layout = ParamLayout([ParamBlock("w1", (2, 3)), ParamBlock("w2", (4,))])
        p = make_preconditioner("diag", layout, per_block=True)
        assert isinstance(p, DirectSumPrecond)
        assert [b.dim for _, b in p.blocks] == [6, 4]


class TestGroupInvariants:
    @pytest.mark.parametrize("maker", [
        lambda: DensePrecond(8),
        lambda: DiagPrecond(16),
        lambda: KronPrecond(4, 3),
        lambda: ScanPrecond(4, 3),
        lambda: SpluPrecond(12, 3),
        lambda: DirectSumPrecond([("a", KronPrecond(2, 3)), ("b", DiagPrecond(4))]),
    ])
    def test_positivity_survives_adversarial_steps(self, maker):
        p = maker()
        rng = np.random.default_rng(8)
        for _ in range(10_000):
            p.update(random_pair(rng, p.dim, scale=rng.uniform(0.1, 3.0)), 0.5)
            assert min_group_diagonal(p) > 0.0


class TestCriterionDescent:
    @pytest.mark.parametrize("maker", [
        lambda: DensePrecond(6),
        lambda: DiagPrecond(6),
        lambda: KronPrecond(2, 3),
        lambda: ScanPrecond(2, 3),
        lambda: SpluPrecond(6, 2),
    ])
    def test_best_criterion_non_increasing(self, maker):
        h = np.diag([1.0, -2.0, 3.0, -4.0, 5.0, -6.0])
        rng = np.random.default_rng(9)
        pairs = []
        for _ in range(256):
            dt = rng.standard_normal(6)
            pairs.append(TangentPair(dt, h @ dt))
        p = maker()
        values = [estimation_criterion(p, pairs)]
        for _ in range(20):
            for pair in pairs:
                p.update(pair, 0.01)
            values.append(estimation_criterion(p, pairs))
        best = np.minimum.accumulate(values)
        assert np.all(np.diff(best) <= 1e-9)
        # the trend must actually descend, not just stall
        assert values[-1] < 0.75 * values[0]


class TestEsgdEquivalence:
    def test_adaptive_diag_matches_closed_form(self):
        h = np.diag([2.0, -5.0])
        rng = np.random.default_rng(10)
        p = DiagPrecond(2)
        m2 = np.zeros(2)
        n = 50_000
        for _ in range(n):
            dt = rng.standard_normal(2)
            dg = h @ dt
            m2 += dg * dg
            p.update(TangentPair(dt, dg), 0.01)
        closed = closed_form_diagonal(np.ones(2), m2 / n)
        np.testing.assert_allclose(p.q * p.q, closed, rtol=0.05)


class TestFixedPointMoments:
    def test_whitening_residual_small_at_fixed_point(self):
        h = np.diag([1.0, -2.0, 3.0, -4.0, 5.0, -6.0])
        rng = np.random.default_rng(11)
        p = DensePrecond(6)
        for _ in range(5000):
            dt = rng.standard_normal(6)
            p.update(TangentPair(dt, h @ dt), 0.01)
        # refine with a small step and average the tail: estimates the state
        # where the expected update vanishes
        pbar = np.zeros((6, 6))
        navg = 0
        for k in range(60_000):
            dt = rng.standard_normal(6)
            p.update(TangentPair(dt, h @ dt), 0.001)
            if k >= 40_000:
                pbar += p.q.T @ p.q
                navg += 1
        pbar /= navg
        n = 20_000
        dts = rng.standard_normal((n, 6))
        dgs = dts @ h.T
        mg = dgs.T @ dgs / n
        mt = dts.T @ dts / n
        resid = np.linalg.norm(pbar @ mg @ pbar - mt) / np.linalg.norm(mt)
        assert resid <= 0.10


class TestNoiseAmplification:
    def test_inverse_hessian_overamplifies(self):
        # H^{-1} E[dg dg^T] H^{-1} - E[dt dt^T] stays nonnegative definite
        dim = 5
        rng = np.random.default_rng(12)
        a = rng.standard_normal((dim, dim))
        h = 0.5 * (a + a.T) + np.diag([3.0, -3.0, 2.0, -2.0, 4.0])
        hinv = np.linalg.inv(h)
        noise = 0.5
        n = 100_000
        acc_g = np.zeros((dim, dim))
        acc_t = np.zeros((dim, dim))
        for _ in range(n):
            raw = rng.standard_normal((dim, dim))
            s = np.triu(raw) + np.triu(raw, 1).T
            dt = rng.standard_normal(dim)
            hg = hinv @ ((h + noise * s) @ dt)
            acc_g += np.outer(hg, hg)
            acc_t += np.outer(dt, dt)
        diff = (acc_g - acc_t) / n
        w = np.linalg.eigvalsh(0.5 * (diff + diff.T))
        assert w.min() >= -1e-6


class TestPatternClosure:
    def test_scan_q2_pattern_closed_under_product(self):
        rng = np.random.default_rng(13)
        n = 6
        for _ in range(50):
            mats = []
            for _ in range(2):
                m = np.diag(0.5 + rng.random(n))
                m[:-1, -1] = rng.standard_normal(n - 1)
                mats.append(m)
            prod = mats[0] @ mats[1]
            allowed = np.eye(n, dtype=bool)
            allowed[:-1, -1] = True
            assert np.all(prod[~allowed] == 0.0)

    @pytest.mark.parametrize("lower", [True, False])
    def test_splu_patterns_closed_under_product(self, lower):
        rng = np.random.default_rng(14)
        n, r = 7, 2
        allowed = np.eye(n, dtype=bool)
        if lower:
            allowed |= np.tril(np.ones((n, n), dtype=bool)) & (np.arange(n)[None, :] < r)
        else:
            allowed |= np.triu(np.ones((n, n), dtype=bool)) & (np.arange(n)[:, None] < r)
        for _ in range(50):
            mats = []
            for _ in range(2):
                m = np.zeros((n, n))
                m[allowed] = rng.standard_normal(np.count_nonzero(allowed))
                np.fill_diagonal(m, 0.5 + rng.random(n))
                mats.append(m)
            prod = mats[0] @ mats[1]
            assert np.all(prod[~allowed] == 0.0)
