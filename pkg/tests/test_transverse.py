import numpy as np
import pytest

from ctrlgeom import (
    ControlAffineSystem,
    LevelSetManifold,
    NotOnManifoldError,
    TransverseManifold,
    find_equilibria,
    parse_vector,
    transversality_to_D,
    transversality_to_sigma,
    transverse_dynamics,
)

from conftest import canonical_system


class TestTransversalityToD:
    def test_sloped_graph_always_transverse(self, pendulum):
        for c in (0.1, 0.5, 2.0, -1.0):
            W = TransverseManifold.from_strings(
                ["x1", "x2"], ind=[0], dep=[1], h=[f"{-c}*x1"]
            )
            p = [1.0, -c * 1.0]
            check = transversality_to_D(W, pendulum, p)
            assert check.transverse
            # oracle: smallest singular value of [[1, 0], [-c, 1]]
            expected = np.linalg.svd(np.array([[1.0, 0.0], [-c, 1.0]]), compute_uv=False)[-1]
            assert check.margin == pytest.approx(expected, rel=1e-12)

    def test_horizontal_control_needs_nonzero_slope(self):
        # D = span(e1): transverse iff h' != 0
        sys = ControlAffineSystem.from_strings(["x1", "x2"], ["0", "0"], [["1", "0"]])
        W = TransverseManifold.from_strings(["x1", "x2"], ind=[0], dep=[1], h=["x1^2"])
        flat = transversality_to_D(W, sys, [0.0, 0.0])
        assert not flat.transverse
        assert flat.margin < 1e-12
        sloped = transversality_to_D(W, sys, [1.0, 1.0])
        assert sloped.transverse

    def test_canonical_linear_graphs_always_transverse(self, rng):
        # every linear graph over (x1 .. x_{n-1}) is transverse to span(e_n)
        for n in (3, 5):
            sys, _ = canonical_system(n, rng=rng)
            for _ in range(10):
                k = rng.standard_normal(n - 1)
                h = " + ".join(f"{k[i]}*x{i+1}" for i in range(n - 1))
                W = TransverseManifold.from_strings(
                    sys.states, ind=list(range(n - 1)), dep=[n - 1], h=[h]
                )
                chart = rng.uniform(-2, 2, n - 1)
                check = transversality_to_D(W, sys, W.lift(chart))
                assert check.transverse

    def test_point_off_manifold_rejected(self, pendulum, pendulum_surface):
        with pytest.raises(NotOnManifoldError):
            transversality_to_D(pendulum_surface, pendulum, [1.0, 1.0])


class TestTransverseDynamics:
    def test_canonical_chart_field(self, rng):
        # chart dynamics of the integrator chain: shift plus the graph row
        sys, _ = canonical_system(3, rng=rng)
        k1, k2 = -2.0, -3.0
        W = TransverseManifold.from_strings(
            sys.states, ind=[0, 1], dep=[2], h=[f"{k1}*x1 + {k2}*x2"]
        )
        dyn = transverse_dynamics(W, sys)
        for _ in range(5):
            a, b = rng.uniform(-2, 2, 2)
            np.testing.assert_allclose(
                dyn.velocity([a, b]), [b, k1 * a + k2 * b], atol=1e-12
            )
        np.testing.assert_allclose(
            dyn.jacobian([0.3, -0.7]), [[0.0, 1.0], [k1, k2]], atol=1e-8
        )

    def test_pendulum_hand_decomposition(self, pendulum):
        # f(p) = (-c x1, -sin x1) = alpha (1, -c) + beta (0, 1)  =>  alpha = -c x1
        c = 0.5
        W = TransverseManifold.from_strings(["x1", "x2"], ind=[0], dep=[1], h=[f"{-c}*x1"])
        dyn = transverse_dynamics(W, pendulum)
        for x1 in (-2.0, 0.7, 1.3):
            np.testing.assert_allclose(dyn.velocity([x1]), [-c * x1], atol=1e-13)

    def test_zero_drift_point_gives_zero_velocity(self, pendulum, pendulum_surface):
        np.testing.assert_allclose(
            transverse_dynamics(pendulum_surface, pendulum).velocity([0.0]), [0.0],
            atol=1e-15,
        )

    def test_direct_sum_residual(self, pendulum, canonical3, rng):
        cases = [
            (pendulum, TransverseManifold.from_strings(
                ["x1", "x2"], ind=[0], dep=[1], h=["-0.5*x1"])),
            (canonical3, TransverseManifold.from_strings(
                canonical3.states, ind=[0, 1], dep=[2], h=["-2.0*x1 - 3.0*x2"])),
        ]
        for sys, W in cases:
            dyn = transverse_dynamics(W, sys)
            for _ in range(10):
                chart = rng.uniform(-2, 2, sys.n - sys.m)
                p = W.lift(chart)
                v_w, v_d = dyn.split_velocity(p)
                f = sys.eval_drift(p)
                scale = max(1.0, float(np.linalg.norm(f)))
                assert np.linalg.norm(v_w + v_d - f) < 1e-12 * scale


class TestFindEquilibria:
    def test_pendulum_unique_origin(self, pendulum, pendulum_surface):
        records = find_equilibria(
            pendulum_surface, pendulum,
            seeds=[[1.0, 0.3], [-2.0, 0.5], [0.5, -0.5], [0.0, 0.0]],
        )
        assert len(records) == 1
        record = records[0]
        np.testing.assert_allclose(record.point, [0.0, 0.0], atol=1e-9)
        np.testing.assert_allclose(record.eigenvalues, [-0.5], atol=1e-8)
        assert record.index == 0
        assert record.isolated

    def test_canonical_companion_oracle(self, rng):
        sys, _ = canonical_system(3, rng=rng)
        W = TransverseManifold.from_strings(
            sys.states, ind=[0, 1], dep=[2], h=["-2.0*x1 + -3.0*x2"]
        )
        records = find_equilibria(W, sys, seeds=[[0.5, 0.5, 0.5]])
        assert len(records) == 1
        record = records[0]
        np.testing.assert_allclose(record.point, np.zeros(3), atol=1e-9)
        # chart polynomial s^2 + 3 s + 2; roots via the numpy oracle
        expected = np.sort(np.roots([1.0, 3.0, 2.0]))
        np.testing.assert_allclose(np.sort(record.eigenvalues.real), expected, atol=1e-6)
        assert np.abs(record.eigenvalues.imag).max() < 1e-8
        assert record.index == 0

    def test_parabola_two_equilibria(self, parabola):
        W = TransverseManifold.from_strings(["x1", "x2"], ind=[0], dep=[1], h=["-1.0"])
        records = find_equilibria(W, parabola, seeds=[[-1.5, 0.0], [1.5, 0.0], [0.2, 0.0]])
        assert len(records) == 2
        records.sort(key=lambda r: r.chart_point[0])
        np.testing.assert_allclose(records[0].point, [-1.0, -1.0], atol=1e-9)
        np.testing.assert_allclose(records[1].point, [1.0, -1.0], atol=1e-9)
        np.testing.assert_allclose(records[0].eigenvalues.real, [-2.0], atol=1e-6)
        np.testing.assert_allclose(records[1].eigenvalues.real, [2.0], atol=1e-6)
        assert [records[0].index, records[1].index] == [0, 1]

    def test_seeds_deduplicated(self, pendulum, pendulum_surface):
        seeds = [[0.1 * k, 0.05] for k in range(-3, 4)]
        records = find_equilibria(pendulum_surface, pendulum, seeds)
        assert len(records) == 1


class TestTransversalityToSigma:
    def test_pendulum_sloped_graph(self, pendulum, pendulum_surface):
        records = find_equilibria(pendulum_surface, pendulum, [[0.2, 0.1]])
        check = transversality_to_sigma(pendulum_surface, pendulum, records[0])
        assert check.transverse
        # oracle: combined rows (0.5, 1) and (0, 1)
        expected = np.linalg.svd(np.array([[0.5, 1.0], [0.0, 1.0]]), compute_uv=False)[-1]
        assert check.margin == pytest.approx(expected, rel=1e-10)

    def test_fold_point_not_transverse(self, parabola):
        W = TransverseManifold.from_strings(["x1", "x2"], ind=[0], dep=[1], h=["0"])
        check = transversality_to_sigma(W, parabola, np.array([0.0, 0.0]))
        assert not check.transverse
        assert check.margin < 1e-12

    def test_surface_equal_to_singular_set_margin_zero(self, pendulum):
        W = TransverseManifold.from_strings(["x1", "x2"], ind=[0], dep=[1], h=["0"])
        check = transversality_to_sigma(W, pendulum, np.array([0.3, 0.0]))
        assert check.margin < 1e-12


class TestNonIsolationDetection:
    def test_tangent_surface_flags_continuum(self, pendulum):
        # W coincides with the singular set: every point of it is an equilibrium
        W = TransverseManifold.from_strings(["x1", "x2"], ind=[0], dep=[1], h=["0"])
        seeds = [[dx, 0.01] for dx in np.linspace(-5e-4, 5e-4, 7)]
        records = find_equilibria(W, pendulum, seeds, dedup_radius=1e-8)
        assert records, "expected converged equilibria on the continuum"
        margin = transversality_to_sigma(W, pendulum, records[0]).margin
        assert margin < 1e-6
        distinct_close = (
            len(records) >= 2
            and np.linalg.norm(records[0].point - records[1].point) < 1e-3
        )
        continuum_flag = any(not r.isolated for r in records)
        assert distinct_close or continuum_flag


class TestChartInvariance:
    def test_pendulum_swapped_split(self, pendulum):
        # x2 = -0.5 x1 and x1 = -2 x2 describe the same line
        Wa = TransverseManifold.from_strings(["x1", "x2"], ind=[0], dep=[1], h=["-0.5*x1"])
        Wb = TransverseManifold.from_strings(["x1", "x2"], ind=[1], dep=[0], h=["-2.0*x2"])
        ra = find_equilibria(Wa, pendulum, [[0.4, 0.1]])
        rb = find_equilibria(Wb, pendulum, [[0.4, 0.1]])
        assert len(ra) == len(rb) == 1
        assert np.linalg.norm(ra[0].point - rb[0].point) < 1e-8
        ea = np.sort_complex(ra[0].eigenvalues)
        eb = np.sort_complex(rb[0].eigenvalues)
        np.testing.assert_allclose(ea, eb, atol=1e-6)


class TestParametrizedFamily:
    def test_with_mu_binds_parameter(self, parabola):
        W = TransverseManifold.from_strings(
            ["x1", "x2"], ind=[0], dep=[1], h=["-mu"], param="mu"
        )
        bound = W.with_mu(1.0)
        np.testing.assert_allclose(bound.lift([2.0]), [2.0, -1.0])
        with pytest.raises(ValueError, match="unbound"):
            W.lift([2.0])

    def test_no_parameter_error(self, pendulum_surface):
        with pytest.raises(ValueError, match="no deformation parameter"):
            pendulum_surface.with_mu(0.5)


class TestLevelSetManifold:
    def test_matches_graph_form(self, pendulum):
        equations = parse_vector(["x2 + 0.5*x1"], ["x1", "x2"])
        W = LevelSetManifold.from_point(["x1", "x2"], equations, at=[0.0, 0.0])
        assert W.dep == (1,)  # the better-conditioned column
        graph = TransverseManifold.from_strings(["x1", "x2"], ind=[0], dep=[1], h=["-0.5*x1"])
        for x1 in (-1.0, 0.3, 2.0):
            np.testing.assert_allclose(W.lift([x1]), graph.lift([x1]), atol=1e-12)
        records = find_equilibria(W, pendulum, [[0.5, 0.2]])
        assert len(records) == 1
        np.testing.assert_allclose(records[0].point, [0.0, 0.0], atol=1e-9)
        np.testing.assert_allclose(records[0].eigenvalues, [-0.5], atol=1e-6)

    def test_curved_level_set_protocol(self):
        # dep block conditioning picks x1 near (2, 4); lift solves the graph branch
        equations = parse_vector(["x2 - x1^2"], ["x1", "x2"])
        W = LevelSetManifold.from_point(["x1", "x2"], equations, at=[2.0, 4.0])
        assert W.dep == (0,)
        lifted = W.lift([4.0])
        np.testing.assert_allclose(lifted, [2.0, 4.0], atol=1e-10)
        assert abs(np.linalg.norm(W.defining_residual(lifted))) < 1e-10
        # tangent annihilated by the defining Jacobian
        T = W.tangent_basis(lifted)
        assert np.linalg.norm(W.defining_jacobian(lifted) @ T) < 1e-10

    def test_no_valid_split_rejected(self):
        equations = parse_vector(["x1^2 + x2^2"], ["x1", "x2"])
        with pytest.raises(NotOnManifoldError, match="rank deficient"):
            LevelSetManifold.from_point(["x1", "x2"], equations, at=[0.0, 0.0])
