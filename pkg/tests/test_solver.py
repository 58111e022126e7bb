import numpy as np
import pytest
import scipy.sparse as sp

from xvariational import frame as fr
from xvariational import integrand as ig
from xvariational import mesh
from xvariational import solver as so


def _identity(m, n=None):
    return ig.quadratic(ig.OperatorCoefficients.constant(np.eye(m), n=n))


def _variable_2d():
    return ig.quadratic(ig.OperatorCoefficients.scalar(
        lambda x: 2 + np.sin(2 * np.pi * x[:, 0]) * np.cos(np.pi * x[:, 1]), n=2, m=2, c0=1, c1=3))


@pytest.fixture(scope="module")
def square():
    return mesh.build_grid([(0, 1), (0, 1)], 16)


# -- assembly -------------------------------------------------------------------


@pytest.mark.parametrize("frame,box", [(fr.euclidean(2), [(0, 1), (0, 2)]),
                                       (fr.heisenberg(1), [(-1, 1)] * 3)])
def test_affine_value_exact(frame, box):
    g = mesh.build_grid(box, 6)
    eta = (1.5, -0.5)
    prob = so.DiscreteProblem.build(g, frame, _identity(2, frame.n), None, fr.HAffine(eta))
    value, _ = so.assemble_functional(prob)
    z = fr.HAffine(eta)(g.nodes)[prob.interior]
    exact = 0.5 * (eta[0] ** 2 + eta[1] ** 2) * g.volume
    assert abs(value(z) - exact) <= 1e-13 * exact


def test_zero_problem(square):
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), _identity(2),
                                    ig.linear_quadratic(1.0, 0.0), 0.0)
    value, gradient = so.assemble_functional(prob)
    z = np.zeros(prob.interior.size)
    assert value(z) == 0.0
    assert np.all(gradient(z) == 0.0)


@pytest.mark.parametrize("case", ["p3", "heisenberg", "shifted"])
def test_gradient_matches_finite_differences(case):
    rng = np.random.default_rng(0)
    if case == "p3":
        g = mesh.build_grid([(0, 1), (0, 1)], 8)
        prob = so.DiscreteProblem.build(g, fr.euclidean(2), ig.p_power(1.0, 3.0, 2),
                                        ig.power_term(0.5, 3.0), fr.HAffine((1.0, -2.0)))
    elif case == "heisenberg":
        g = mesh.build_grid([(-1, 1)] * 3, 4)
        f = ig.quadratic(ig.OperatorCoefficients.scalar(lambda x: 2 + np.cos(np.pi * x[:, 0]),
                                                        n=3, m=2, c0=1, c1=3))
        prob = so.DiscreteProblem.build(g, fr.heisenberg(1), f, ig.linear_quadratic(1.0, 2.0))
    else:
        g = mesh.build_grid([(0, 1), (0, 1)], 8)
        phi = mesh.GradientField.on_grid(g, rng.normal(size=(g.cell_count, 2)))
        prob = so.DiscreteProblem.build(g, fr.euclidean(2), ig.shift(ig.p_power(1.0, 2.5, 2), phi))
    value, gradient = so.assemble_functional(prob)
    z = rng.normal(size=prob.interior.size)
    gz = gradient(z)
    for _ in range(20):
        v = rng.normal(size=z.size)
        t = 1e-5
        fd = (value(z + t * v) - value(z - t * v)) / (2 * t)
        exact = gz @ v
        assert abs(fd - exact) <= 1e-6 * max(abs(exact), 1.0)


def test_stiffness_symmetric_psd(square):
    xop = mesh.build_x_operator(square, fr.euclidean(2))
    f = _variable_2d()
    k = so.stiffness_matrix(xop, f.matrix_fn)
    assert abs(k - k.T).max() <= 1e-12
    rng = np.random.default_rng(1)
    interior = square.interior_index
    lam = so.poincare_constant(square, fr.euclidean(2)).lambda_min
    w = square.quad_weights
    for _ in range(100):
        u = rng.normal(size=square.node_count)
        assert u @ (k @ u) >= -1e-12 * (u @ u)
        ui = np.zeros_like(u)
        ui[interior] = u[interior]
        # a >= 1 everywhere, so u^T K u >= lambda u^T M u on zero-trace fields
        assert ui @ (k @ ui) >= (1 - 1e-10) * lam * (ui @ (w * ui))


def test_heisenberg_stiffness_symmetric():
    g = mesh.build_grid([(-1, 1)] * 3, 6)
    xop = mesh.build_x_operator(g, fr.heisenberg(1))
    a = ig.OperatorCoefficients.constant([[2.0, 0.3], [0.3, 1.0]], n=3)
    k = so.stiffness_matrix(xop, a.a)
    assert abs(k - k.T).max() <= 1e-12


# -- quadratic solves -----------------------------------------------------------


def test_poisson_1d():
    g = mesh.build_grid([(0, 1)], 256)
    prob = so.DiscreteProblem.build(g, fr.euclidean(1), _identity(1), ig.linear_quadratic(0.0, 1.0))
    rep = so.solve_quadratic(prob)
    assert rep.converged
    assert abs(rep.minimizer.at([0.5]) - 0.125) <= 1e-6
    exact = g.nodes[:, 0] * (1 - g.nodes[:, 0]) / 2
    assert np.max(np.abs(rep.minimizer.values - exact)) <= 1e-6


def test_zero_rhs_gives_zero(square):
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), _variable_2d(),
                                    ig.linear_quadratic(0.0, 0.0))
    rep = so.solve_quadratic(prob)
    assert np.all(rep.minimizer.values == 0.0)
    assert rep.min_value == 0.0


def test_harmonic_affine(square):
    eta = (0.7, -1.3)
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), _identity(2), None, fr.HAffine(eta))
    rep = so.solve_quadratic(prob)
    np.testing.assert_allclose(rep.minimizer.values, fr.HAffine(eta)(square.nodes), atol=1e-10)
    assert rep.min_value == pytest.approx(0.5 * (eta[0] ** 2 + eta[1] ** 2), rel=1e-10)


def test_converged_means_small_residual(square):
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), _variable_2d(),
                                    ig.linear_quadratic(0.5, 1.0), fr.HAffine((1.0, 2.0)))
    rep = so.solve_quadratic(prob, tol=1e-9)
    assert rep.converged and rep.final_grad_norm <= 1e-9
    assert rep.to_dict()["method"] == "pcg"


def test_euler_lagrange_identity(square):
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), _variable_2d(),
                                    ig.linear_quadratic(1.0, lambda x: np.sin(3 * x[:, 0])),
                                    fr.HAffine((1.0, 0.5)))
    rep = so.solve_quadratic(prob)
    _, gradient = so.assemble_functional(prob)
    gu = gradient(rep.minimizer.values[prob.interior])
    g0 = gradient(np.zeros(prob.interior.size))
    rng = np.random.default_rng(2)
    for _ in range(50):
        v = rng.normal(size=gu.size)
        assert abs(gu @ v) <= 1e-8 * np.linalg.norm(g0) * np.linalg.norm(v)


def test_not_spd_detection():
    a = sp.diags([1.0, -2.0, 1.0]).tocsr()
    with pytest.raises(so.NotSPDError, match="test assembly"):
        so.pcg(a.dot, np.array([1.0, 1.0, 1.0]), label="test assembly")
    g = mesh.build_grid([(0, 1)], 8)
    neg = ig.Integrand(n=1, m=1, p=2.0, value_fn=lambda x, e: -0.5 * np.sum(e * e, axis=1),
                       grad_fn=lambda x, e: -e, c0=0.5, c1=0.5,
                       matrix_fn=lambda x: -np.ones((len(x), 1, 1)))
    prob = so.DiscreteProblem.build(g, fr.euclidean(1), neg, ig.linear_quadratic(0.0, 1.0))
    with pytest.raises(so.NotSPDError):
        so.solve_quadratic(prob, precondition=False)


# -- quasi-Newton ---------------------------------------------------------------


def test_lbfgs_matches_cg(square):
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), _variable_2d(),
                                    ig.linear_quadratic(0.5, 1.0), fr.HAffine((1.0, -1.0)))
    cg = so.solve_quadratic(prob)
    qn = so.minimize_convex(prob)
    assert qn.converged
    assert np.max(np.abs(cg.minimizer.values - qn.minimizer.values)) <= 1e-8


def test_p3_affine_minimizer(square):
    eta = (1.0, 2.0)
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), ig.p_power(1.0, 3.0, 2), None,
                                    fr.HAffine(eta))
    rep = so.minimize_convex(prob, init=np.zeros(square.node_count))
    exact = np.hypot(*eta) ** 3 * square.volume
    assert rep.converged
    assert abs(rep.min_value - exact) <= 1e-10 * exact
    affine = fr.HAffine(eta)(square.nodes)
    assert np.max(np.abs(rep.minimizer.values - affine)) <= 1e-4
    value, _ = so.assemble_functional(prob)
    rng = np.random.default_rng(3)
    z = affine[prob.interior]
    for scale in (1e-3, 1e-1, 1.0):
        for _ in range(20):
            assert value(z + scale * rng.normal(size=z.size)) >= value(z)


def test_init_at_solution(square):
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), ig.p_power(1.0, 3.0, 2), None,
                                    fr.HAffine((1.0, 2.0)))
    rep = so.minimize_convex(prob)
    assert rep.iterations <= 1
    again = so.minimize_convex(prob, init=rep.minimizer)
    assert again.iterations <= 1


def test_energy_monotone(square):
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), ig.p_power(1.0, 3.0, 2),
                                    ig.power_term(1.0, 3.0), fr.HAffine((2.0, -1.0)))
    rep = so.minimize_convex(prob, init=np.zeros(square.node_count))
    h = np.array(rep.history)
    assert np.all(np.diff(h) <= 1e-13 * (1 + np.abs(h[:-1])))


def test_uniqueness_quadratic(square):
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), _variable_2d(),
                                    ig.linear_quadratic(1.0, 1.0))
    rng = np.random.default_rng(4)
    runs = [so.minimize_convex(prob, init=rng.normal(size=square.node_count) * 10, tol=1e-10)
            for _ in range(2)]
    assert all(r.converged for r in runs)
    assert np.max(np.abs(runs[0].minimizer.values - runs[1].minimizer.values)) <= 1e-6


def test_uniqueness_p3(square):
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), ig.p_power(1.0, 3.0, 2),
                                    ig.power_term(1.0, 3.0), fr.HAffine((1.0, 1.0)))
    rng = np.random.default_rng(5)
    tol = 1e-8
    runs = [so.minimize_convex(prob, init=rng.normal(size=square.node_count), tol=tol)
            for _ in range(2)]
    assert all(r.converged for r in runs)
    assert abs(runs[0].min_value - runs[1].min_value) <= 10 * tol


def test_solve_dispatch(square):
    quad = so.DiscreteProblem.build(square, fr.euclidean(2), _identity(2), ig.linear_quadratic(0, 1))
    assert so.solve(quad).method == "pcg"
    nonq = quad.with_integrand(ig.p_power(1.0, 3.0, 2))
    assert so.solve(nonq).method == "lbfgs"


# -- Poincare and coercivity ----------------------------------------------------


def test_poincare_interval():
    g = mesh.build_grid([(0, 1)], 1024)
    res = so.poincare_constant(g, fr.euclidean(1))
    assert abs(res.lambda_min - np.pi ** 2) <= 0.01 * np.pi ** 2
    assert res.converged


def test_poincare_square():
    g = mesh.build_grid([(0, 1), (0, 1)], 128)
    res = so.poincare_constant(g, fr.euclidean(2))
    assert abs(res.lambda_min - 2 * np.pi ** 2) <= 0.02 * 2 * np.pi ** 2


def test_poincare_scaling():
    small = so.poincare_constant(mesh.build_grid([(0, 1), (0, 1)], 32), fr.euclidean(2))
    big = so.poincare_constant(mesh.build_grid([(0, 2), (0, 2)], 32), fr.euclidean(2))
    assert abs(big.lambda_min / small.lambda_min - 0.25) <= 0.02 * 0.25


def test_poincare_eigenfield_normalized():
    g = mesh.build_grid([(0, 1)], 128)
    res = so.poincare_constant(g, fr.euclidean(1))
    v = res.eigenfield.values
    assert g.quad_weights @ (v * v) == pytest.approx(1.0, rel=1e-12)
    assert np.all(v[g.boundary_mask] == 0)


def test_well_posedness_flag(square):
    f = _identity(2)
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), f, ig.linear_quadratic(0.0, 1.0))
    assert not prob.well_posed()[0]
    assert prob.well_posed(poincare=2 * np.pi ** 2)[0]
    assert not prob.well_posed(poincare=0.5)[0]


def test_coercivity_zero_datum(square):
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), _identity(2))
    rep = so.coercivity_margin(prob, 0.0)
    assert rep.passed and rep.worst_margin >= 0
    assert rep.details["margins"][0] == 0.0
    candidate = min(1.0, rep.poincare) / 2
    assert rep.k1 >= candidate
    assert so.coercivity_margin(prob, 0.0, k1=candidate, k2=0.0).passed


def test_coercivity_with_datum(square):
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), _identity(2), None,
                                    fr.HAffine((1.0, -2.0), 0.5))
    rep = so.coercivity_margin(prob, 5.0)
    assert rep.passed and 0 < rep.k1 < 1 and rep.k2 > 0


def test_coercivity_violation_above_eigenvalue(square):
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), _identity(2))
    poinc = so.poincare_constant(square, fr.euclidean(2))
    rep = so.coercivity_margin(prob, 1.5 * poinc.lambda_min, poincare=poinc, k1=0.1, k2=0.0)
    assert not rep.passed
    assert rep.details["margins"][1] < 0


def test_coercivity_surrogate_warning(square):
    prob = so.DiscreteProblem.build(square, fr.euclidean(2), ig.p_power(1.0, 3.0, 2))
    with pytest.warns(UserWarning):
        rep = so.coercivity_margin(prob, 0.0, n_probes=10)
    assert rep.surrogate
