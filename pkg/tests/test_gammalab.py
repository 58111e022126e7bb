import numpy as np
import pytest
from scipy.integrate import quad

from xvariational import frame as fr
from xvariational import gammalab as gl
from xvariational import integrand as ig
from xvariational import mesh


def _oscillating_coeffs():
    return ig.OperatorCoefficients.scalar(lambda y: 2 + np.sin(2 * np.pi * y[:, 0]), n=1, m=1,
                                          c0=1, c1=3)


def _harmonic_mean():
    integral, _ = quad(lambda y: 1.0 / (2 + np.sin(2 * np.pi * y)), 0.0, 1.0, epsabs=1e-13)
    return 1.0 / integral


def test_harmonic_mean_oracle():
    assert _harmonic_mean() == pytest.approx(np.sqrt(3), rel=1e-12)


# -- cell estimates -------------------------------------------------------------


def test_constant_integrand_is_its_own_limit():
    f = ig.quadratic(ig.OperatorCoefficients.constant([[2.0, 0.5], [0.5, 3.0]]))
    est = gl.effective_integrand(f, fr.euclidean(2), (1.0, -2.0), [0.5, 0.25], 8)
    exact = f([0.0, 0.0], [1.0, -2.0])
    np.testing.assert_allclose(est.values, exact, rtol=1e-10)
    np.testing.assert_allclose(est.affine_bounds, exact, rtol=1e-12)


def test_oscillating_1d_estimate():
    f = ig.quadratic(_oscillating_coeffs())
    est = gl.effective_integrand(f, fr.euclidean(1), 1.0, gl.DEFAULT_EPS, 4096)
    target = 0.5 * _harmonic_mean()
    assert abs(est.extrapolated - target) <= 0.01 * target
    assert est.richardson is not None
    assert len(est.increments) == len(gl.DEFAULT_EPS) - 1
    for v, b in zip(est.values, est.affine_bounds):
        assert v <= b * (1 + 1e-12)
        assert f.c0 <= v <= f.c1


def test_zero_slope():
    f = ig.quadratic(_oscillating_coeffs())
    est = gl.effective_integrand(f, fr.euclidean(1), 0.0, [0.25, 0.125], 256)
    assert est.values == [0.0, 0.0]


def test_eps_must_decrease():
    f = ig.quadratic(_oscillating_coeffs())
    with pytest.raises(gl.ExperimentError):
        gl.effective_integrand(f, fr.euclidean(1), 1.0, [0.125, 0.25], 64)


def test_effective_matrix_constant():
    f = ig.quadratic(ig.OperatorCoefficients.constant(np.diag([2.0, 3.0])))
    est = gl.effective_matrix(f, fr.euclidean(2), [0.5, 0.25], 8)
    np.testing.assert_allclose(est.estimates[(0,)].values, 1.0, rtol=1e-10)
    np.testing.assert_allclose(est.estimates[(1,)].values, 1.5, rtol=1e-10)
    np.testing.assert_allclose(est.estimates[(0, 1)].values, 2.5, rtol=1e-10)
    np.testing.assert_allclose(est.matrix, np.diag([2.0, 3.0]), atol=1e-9)
    assert est.in_bounds


def test_effective_matrix_1d():
    f = ig.quadratic(_oscillating_coeffs())
    est = gl.effective_matrix(f, fr.euclidean(1), gl.DEFAULT_EPS, 4096)
    assert abs(est.matrix[0, 0] - _harmonic_mean()) <= 0.01 * _harmonic_mean()


def test_checkerboard_bounds():
    alpha, beta = 1.0, 4.0

    def a(y):
        return np.where(y[:, 0] * y[:, 1] >= 0, alpha, beta)

    f = ig.quadratic(ig.OperatorCoefficients.scalar(a, n=2, m=2, c0=alpha, c1=beta))
    est = gl.effective_matrix(f, fr.euclidean(2), [0.5, 0.25], 32)
    # harmonic and arithmetic means of the two phases
    lower, upper = 2 / (1 / alpha + 1 / beta), (alpha + beta) / 2
    np.testing.assert_allclose(est.matrix, est.matrix.T, atol=0)
    assert lower - 1e-9 <= est.eigenvalues[0] and est.eigenvalues[-1] <= upper + 1e-9


def test_p_power_estimate_properties():
    c = lambda y: 2 + np.sin(2 * np.pi * y[:, 0])  # noqa: E731
    f = ig.p_power(c, 3.0, 1, c_bounds=(1.0, 3.0))
    frame = fr.euclidean(1)
    eps = [0.25, 0.125]

    def f0(eta):
        return gl.effective_integrand(f, frame, eta, eps, 128, tol=1e-10)

    e1, e2 = f0(1.0), f0(-0.5)
    for est, eta in ((e1, 1.0), (e2, -0.5)):
        for v, b in zip(est.values, est.affine_bounds):
            assert f.c0 * abs(eta) ** 3 <= v <= f.c1 * abs(eta) ** 3
            assert v <= b + 1e-10
    for t in (0.25, 0.5, 0.75):
        mid = f0(t * 1.0 + (1 - t) * -0.5)
        for k in range(len(eps)):
            assert mid.values[k] <= t * e1.values[k] + (1 - t) * e2.values[k] + 1e-8


# -- weak pairings --------------------------------------------------------------


def _line(res):
    return mesh.build_grid([(0, 1)], res)


def test_pairing_identical_fields():
    g = _line(64)
    phi = mesh.GradientField.on_grid(g, np.sin(g.centers))
    bat = gl.TestFieldBattery.default(g, 1)
    out = gl.weak_pairing_residual(phi, phi, bat)
    assert out.max_residual == 0.0 and out.strong_distance == 0.0


def test_pairing_weak_not_strong():
    g = _line(1024)
    x = g.centers[:, 0]
    seq = mesh.GradientField.on_grid(g, np.sin(8 * np.pi * x))
    zero = seq.like(np.zeros_like(x))
    ones = gl.TestFieldBattery.from_functions(g.centers, g.site_weights, 1,
                                              [lambda s: np.ones(len(s))])
    out = gl.weak_pairing_residual(seq, zero, ones)
    assert out.max_residual <= 1e-12
    assert out.strong_distance == pytest.approx(1 / np.sqrt(2), rel=1e-12)

    lin = gl.TestFieldBattery.from_functions(g.centers, g.site_weights, 1, [lambda s: s[:, 0]])
    # int_0^1 x sin(8 pi x) dx = -1/(8 pi), and ||x||_2 = 1/sqrt(3)
    out = gl.weak_pairing_residual(seq, zero, lin)
    assert out.max_residual == pytest.approx(np.sqrt(3) / (8 * np.pi), rel=1e-4)


def test_default_battery():
    g = mesh.build_grid([(0, 1), (0, 2)], 8)
    bat = gl.TestFieldBattery.default(g, 2)
    assert bat.count == 2 * (1 + 3 * 2)
    for psi in bat.fields:
        norm = np.sqrt(psi.weights @ np.sum(psi.samples ** 2, axis=1))
        assert norm == pytest.approx(1.0, rel=1e-12)


# -- experiments ----------------------------------------------------------------


def test_homogenization_constant_coefficients():
    g = _line(128)
    f = ig.quadratic(ig.OperatorCoefficients.constant([[2.0]]))
    rep = gl.homogenization_experiment(f, fr.euclidean(1), ig.linear_quadratic(0.0, 1.0), 0.0,
                                       [0.25, 0.125], g, 64)
    assert rep.validate() and not rep.partial
    for s in rep.steps:
        assert s.min_gap <= 1e-12
        assert s.l2_minimizer_err <= 1e-10
        assert s.max_pairing_residual <= 1e-10
        assert s.strong_momenta_dist <= 1e-10


def test_homogenization_momenta_identity():
    g = _line(512)
    f = ig.quadratic(_oscillating_coeffs())
    rep = gl.homogenization_experiment(f, fr.euclidean(1), ig.linear_quadratic(0.0, 1.0), 0.0,
                                       [0.25, 0.125, 0.0625], g, 512)
    xop = mesh.build_x_operator(g, fr.euclidean(1))
    for s in rep.steps:
        fe = ig.periodic_compose(f, fr.euclidean(1), s.index)
        mom = ig.momentum_map(fe, mesh.apply_x(xop, s.minimizer))
        assert np.array_equal(mom.samples, s.momenta.samples)
    assert rep.gap_trend_ok()


def test_homogenization_needs_effective_for_nonquadratic():
    g = _line(32)
    f = ig.p_power(1.0, 3.0, 1)
    with pytest.raises(gl.ExperimentError):
        gl.homogenization_experiment(f, fr.euclidean(1), None, 0.0, [0.25], g, 32)
    rep = gl.homogenization_experiment(f, fr.euclidean(1), ig.power_term(1.0, 3.0),
                                       fr.HAffine((1.0,)), [0.25], g, 32, effective=f)
    assert rep.steps[0].min_gap <= 1e-8


def test_hconv_zero_solution():
    g = _line(256)
    fam = gl.PeriodicFamily(_oscillating_coeffs(), fr.euclidean(1), [0.25, 0.125], cell_res=256)
    rep = gl.hconvergence_experiment(fam, fr.euclidean(1), 1.0, 0.0, g)
    for s in rep.steps:
        assert np.max(np.abs(s.minimizer.values)) <= 1e-10
        assert s.l2_minimizer_err <= 1e-10 and s.max_pairing_residual <= 1e-10


def test_hconv_constant_family():
    g = _line(128)
    a = ig.OperatorCoefficients.constant([[1.5]])
    rep = gl.hconvergence_experiment([a, a, a], fr.euclidean(1), 0.0, 1.0, g, reference=a)
    assert rep.indices == [1, 2, 3]
    for s in rep.steps:
        assert s.l2_minimizer_err == 0.0 and s.max_pairing_residual == 0.0


def test_hconv_requires_reference():
    g = _line(32)
    a = ig.OperatorCoefficients.constant([[1.5]])
    with pytest.raises(gl.ExperimentError):
        gl.hconvergence_experiment([a], fr.euclidean(1), 0.0, 1.0, g)


def test_gamma_scaled_family():
    g = _line(256)
    half = ig.quadratic(ig.OperatorCoefficients.constant([[1.0]]))
    hs = [1, 2, 4, 8, 16]
    seq = [ig.quadratic(ig.OperatorCoefficients.constant([[1 + 1 / h]])) for h in hs]
    rep = gl.pointwise_gamma_experiment(seq, half, ig.linear_quadratic(0.0, 1.0), 0.0, g,
                                        fr.euclidean(1), indices=hs)
    for h, s in zip(hs, rep.steps):
        assert s.min_gap / abs(rep.reference_min) == pytest.approx(1 / (h + 1), rel=1e-8)
    err = rep.column("l2_minimizer_err")
    assert all(b < a for a, b in zip(err, err[1:]))


def test_gamma_added_family():
    g = _line(256)
    lim = ig.quadratic(ig.OperatorCoefficients.constant([[1.0]]))
    hs = [1, 2, 4, 8]
    seq = [ig.quadratic(ig.OperatorCoefficients.constant([[1 + 2 / h]])) for h in hs]
    rep = gl.pointwise_gamma_experiment(seq, lim, ig.linear_quadratic(0.0, 1.0), 0.0, g,
                                        fr.euclidean(1), indices=hs)
    ref_norm = mesh.l2_norm(g, rep.reference.minimizer)
    # u_h = u_inf / (1 + 2/h), so ||u_h - u_inf|| = ||u_inf|| * 2 / (h + 2)
    for h, s in zip(hs, rep.steps):
        assert s.l2_minimizer_err == pytest.approx(ref_norm * 2 / (h + 2), rel=1e-8)


def test_gamma_constant_family():
    g = _line(64)
    f = ig.quadratic(ig.OperatorCoefficients.constant([[2.0]]))
    rep = gl.pointwise_gamma_experiment([f, f], f, ig.linear_quadratic(0.0, 1.0), 0.0, g,
                                        fr.euclidean(1))
    assert rep.column("min_value")[0] == rep.column("min_value")[1] == rep.reference_min
    assert rep.column("l2_minimizer_err") == [0.0, 0.0]
