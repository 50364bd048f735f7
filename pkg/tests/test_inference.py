import numpy as np
import pandas as pd
import pytest
from scipy.optimize import brentq

from jointfit.basis import CenterScale, Level, build_basis, rw2_precision
from jointfit.data import (
    AssociationComponent,
    JointDataset,
    Kind,
    ModelSpec,
    validate_and_join,
)
from jointfit.inference import (
    CalibratedComponent,
    Calibration,
    InferenceError,
    LatentField,
    ModelProblem,
    calibrate,
    fit,
    optimize_hyperparameters,
    posterior_curve,
    shared_component_summary,
)


def _lmm_dataset(n_subjects=6, n_per=4, sigma_e=0.3, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    surv = []
    for i in range(n_subjects):
        x = float(rng.integers(0, 2))
        b = rng.normal(scale=(0.8, 0.3))
        times = np.arange(n_per) * 0.7
        for t in times:
            eta = 0.2 + b[0] + (0.3 + b[1]) * t + 0.5 * x + 0.2 * x * t
            rows.append({"id": i, "time": t, "y": eta + rng.normal(scale=sigma_e), "X": x})
        surv.append({"id": i, "time": times[-1] + 0.5, "event": int(rng.integers(0, 2)), "X": x})
    return validate_and_join(pd.DataFrame(rows), pd.DataFrame(surv))


def _joint_spec(level=Level.LINEAR, kinds=(Kind.CURRENT_VALUE,), baseline_knots=5):
    comps = tuple(AssociationComponent(k, level) for k in kinds)
    return ModelSpec(fixed_effects=("X", "X:time"), association=comps, baseline_knots=baseline_knots)


def _manual_calibration(problem, spec, rng):
    comps = []
    for ci, comp in enumerate(spec.association):
        nu = rng.normal(scale=1.5, size=problem.ns)
        lo, hi = float(nu.min()), float(nu.max())
        bas = build_basis(rw2_precision(comp.knots), (lo, hi)) if comp.level is Level.SPLINE else None
        comps.append(
            CalibratedComponent(
                kind=comp.kind, level=comp.level, nu_tilde=nu, domain=(lo, hi),
                knots=np.linspace(lo, hi, comp.knots),
                center_scale=CenterScale(0.5 * (lo + hi), hi - lo), basis=bas,
            )
        )
    return Calibration(components=tuple(comps))


def test_lmm_mode_and_covariance_match_conjugate_closed_form():
    ds = _lmm_dataset()
    spec = _joint_spec()
    problem = ModelProblem(ds, spec, include_survival=False)
    theta = np.array([np.log(1.0 / 0.09), np.log(0.8), np.log(0.3), np.arctanh(0.3)])
    lf, precision = problem.gaussian_approximation(theta)

    # Conjugate oracle: assemble the dense Gaussian system directly.
    N, p, r = problem.N, problem.p, problem.r
    n_lat = p + N * r
    A = np.zeros((ds.n_longitudinal, n_lat))
    A[:, :p] = problem.X
    for j, sub in enumerate(problem.sub_l):
        A[j, p + r * sub : p + r * (sub + 1)] = problem.Zl[j]
    tau_e = np.exp(theta[0])
    P = np.zeros((n_lat, n_lat))
    P[:p, :p] = np.eye(p) / 100.0
    s0, s1, rho = np.exp(theta[1]), np.exp(theta[2]), np.tanh(theta[3])
    Sigma = np.array([[s0**2, rho * s0 * s1], [rho * s0 * s1, s1**2]])
    Sinv = np.linalg.inv(Sigma)
    for i in range(N):
        P[p + r * i : p + r * (i + 1), p + r * i : p + r * (i + 1)] = Sinv
    H = tau_e * A.T @ A + P
    mean = np.linalg.solve(H, tau_e * A.T @ problem.y)

    got = np.concatenate([lf.beta, lf.b.ravel()])
    assert np.max(np.abs(got - mean)) < 1e-8
    cov = np.linalg.inv(H)
    cov_engine = np.linalg.inv(precision.toarray())
    assert np.max(np.abs(cov_engine - cov)) < 1e-8
    sds = problem.latent_sds(problem._inner(theta))
    assert np.allclose(
        np.concatenate([sds.beta, sds.b.ravel()]), np.sqrt(np.diag(cov)), atol=1e-8
    )


def test_laplace_value_matches_quadrature_on_gaussian_toy():
    # Three observations at t=0, intercept-only latent field (no random
    # effects, no survival): the Laplace value is exact, quadrature is the
    # independent oracle.
    lng = pd.DataFrame({"id": [1, 2, 3], "time": [0.0, 0.0, 0.0], "y": [0.4, -0.1, 0.7]})
    srv = pd.DataFrame({"id": [1, 2, 3], "time": [1.0, 1.0, 1.0], "event": [0, 0, 0]})
    ds = validate_and_join(lng, srv)
    spec = ModelSpec(random_intercept=False, random_slope=False)
    problem = ModelProblem(ds, spec, include_survival=False)
    theta = np.array([np.log(1.0 / 0.25)])

    lap = problem.log_marginal_posterior(theta) - problem._log_hyperprior(theta)
    grid0 = np.linspace(-4.0, 4.0, 801)
    grid1 = np.linspace(-60.0, 60.0, 1201)
    vals = np.empty((grid0.size, grid1.size))
    for i, b0 in enumerate(grid0):
        for j, b1 in enumerate(grid1):
            lf = LatentField(
                beta=np.array([b0, b1]), b=np.zeros((3, 0)),
                phi=np.zeros(0), log_baseline=np.zeros(0),
            )
            vals[i, j] = problem.objective(problem._state(theta), *problem.latent_vectors(lf))
    peak = vals.max()
    integral = np.trapezoid(np.trapezoid(np.exp(vals - peak), grid1, axis=1), grid0)
    oracle = peak + np.log(integral)
    assert lap == pytest.approx(oracle, rel=1e-4)


def test_joint_log_density_hand_value_gaussian_only():
    lng = pd.DataFrame({"id": [1, 1, 2], "time": [0.0, 1.0, 0.0], "y": [0.0, 0.0, 0.0]})
    srv = pd.DataFrame({"id": [1, 2], "time": [2.0, 2.0], "event": [0, 0]})
    ds = validate_and_join(lng, srv)
    spec = ModelSpec(random_intercept=False, random_slope=False)
    problem = ModelProblem(ds, spec, include_survival=False)
    sigma2 = 0.09
    theta = np.array([np.log(1.0 / sigma2)])
    lf = LatentField(beta=np.zeros(2), b=np.zeros((2, 0)), phi=np.zeros(0), log_baseline=np.zeros(0))
    got = problem.joint_log_density(lf, theta)
    # y = 0 at the zero field: Gaussian normalizing constants plus the
    # zero-mean prior constants for the two fixed effects.
    expected = 3 * (-0.5 * np.log(2 * np.pi * sigma2)) + 2 * (-0.5 * np.log(2 * np.pi * 100.0))
    assert got == pytest.approx(expected, abs=1e-12)


def test_joint_log_density_level1_weights_are_constant_scaling():
    ds = _lmm_dataset(n_subjects=4, n_per=3, seed=3)
    spec = _joint_spec()
    problem = ModelProblem(ds, spec)
    theta = problem.default_init()
    gamma1 = 0.37
    theta[-1] = gamma1
    st = problem._state(theta)
    assert np.allclose(st.weights[0], gamma1)
    assert np.allclose(st.Xs_eff, gamma1 * problem._comp_designs[0][0])


def test_poisson_mean_scales_with_exposure():
    ds = _lmm_dataset(n_subjects=4, n_per=3, seed=4)
    spec = _joint_spec()
    problem = ModelProblem(ds, spec)
    theta = problem.default_init()
    st = problem._state(theta)
    c = np.zeros(problem.g)
    b = np.zeros((problem.N, problem.r))
    base = problem.objective(st, c, b)
    # Doubling all exposures with zero counts lowers the Poisson term by
    # exactly the sum of the means (counts here are not all zero, so compare
    # against the analytic difference).
    psi = problem._psi(st, c, b)
    problem.logE = problem.logE + np.log(2.0)
    bumped = problem.objective(st, c, b)
    analytic = float(problem.count.sum() * np.log(2.0) - np.exp(psi).sum() * (2.0 - 1.0))
    assert bumped - base == pytest.approx(analytic, rel=1e-12)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(42)
    ds = _lmm_dataset(n_subjects=5, n_per=4, seed=7)
    spec = _joint_spec(level=Level.SPLINE, kinds=(Kind.CURRENT_VALUE, Kind.CURRENT_SLOPE))
    probe = ModelProblem(ds, spec.at_level(Level.LINEAR))
    calib = _manual_calibration(probe, spec, rng)
    problem = ModelProblem(ds, spec, calibration=calib)

    theta = problem.default_init()
    theta += 0.1 * rng.normal(size=theta.size)
    st = problem._state(theta)

    def pack(lf):
        return np.concatenate([lf.beta, lf.phi, lf.log_baseline, lf.b.ravel()])

    def unpack(vec):
        p, q, B, N, r = problem.p, problem.q, problem.B, problem.N, problem.r
        return LatentField(
            beta=vec[:p], phi=vec[p : p + q], log_baseline=vec[p + q : p + q + B],
            b=vec[p + q + B :].reshape(N, r),
        )

    n_lat = problem.n_latent
    worst = 0.0
    for _ in range(20):
        point = 0.3 * rng.normal(size=n_lat)
        lf = unpack(point)
        grad = problem.joint_log_density_grad(lf, theta)
        g_analytic = pack(grad)
        g_fd = np.zeros(n_lat)
        for k in range(n_lat):
            h = 1e-6 * (1.0 + abs(point[k]))
            up, dn = point.copy(), point.copy()
            up[k] += h
            dn[k] -= h
            fu = problem.objective(st, *problem.latent_vectors(unpack(up)))
            fd = problem.objective(st, *problem.latent_vectors(unpack(dn)))
            g_fd[k] = (fu - fd) / (2.0 * h)
        err = np.max(np.abs(g_analytic - g_fd) / (1.0 + np.abs(g_analytic)))
        worst = max(worst, err)
    assert worst < 1e-5


def test_newton_mode_is_stationary_scalar_bisection():
    # Hold every coordinate at the mode except one and locate the root of
    # the scalar score by bisection; it must coincide with the mode.
    ds = _lmm_dataset(n_subjects=5, n_per=3, seed=11)
    spec = _joint_spec()
    problem = ModelProblem(ds, spec)
    theta = problem.default_init()
    theta[-1] = 0.3
    inner = problem._inner(theta)
    assert inner.grad_norm < 1e-6
    st = problem._state(theta)

    for coord in (0, problem.p + problem.q + 1):
        def score(x, coord=coord):
            c = inner.c.copy()
            c[coord] = x
            eps = 1e-5
            cp, cm = c.copy(), c.copy()
            cp[coord] += eps
            cm[coord] -= eps
            return (problem.objective(st, cp, inner.b) - problem.objective(st, cm, inner.b)) / (2 * eps)

        root = brentq(score, inner.c[coord] - 0.5, inner.c[coord] + 0.5, xtol=1e-10)
        assert root == pytest.approx(inner.c[coord], abs=1e-6)


def test_newton_matches_derivative_free_optimizer_on_tiny_joint_model():
    from scipy.optimize import minimize

    lng = pd.DataFrame(
        {
            "id": [1, 1, 2, 2],
            "time": [0.0, 1.0, 0.0, 1.5],
            "y": [0.2, 0.5, -0.3, 0.1],
        }
    )
    srv = pd.DataFrame({"id": [1, 2], "time": [2.0, 3.0], "event": [1, 0]})
    ds = validate_and_join(lng, srv)
    spec = ModelSpec(random_intercept=True, random_slope=False, baseline_knots=3)
    problem = ModelProblem(ds, spec)
    theta = problem.default_init()
    theta[-1] = 0.25
    st = problem._state(theta)
    inner = problem._inner(theta)

    def neg(vec):
        c = vec[: problem.g]
        b = vec[problem.g :].reshape(problem.N, problem.r)
        return -problem.objective(st, c, b)

    x0 = np.zeros(problem.n_latent)
    res = minimize(neg, x0, method="Powell", options={"xtol": 1e-10, "ftol": 1e-12, "maxfev": 200000})
    assert np.max(np.abs(np.concatenate([inner.c, inner.b.ravel()]) - res.x)) < 1e-4


def test_location_invariance_of_residual_precision_profile():
    ds = _lmm_dataset(n_subjects=6, n_per=4, seed=21)
    spec = _joint_spec()
    problem = ModelProblem(ds, spec, include_survival=False)
    # The intercept prior is proper, so invariance is exact only in the
    # flat-prior limit; a modest shift keeps the prior effect below 1e-6.
    shifted = JointDataset(
        longitudinal=ds.longitudinal.assign(y=ds.longitudinal["y"] + 0.5),
        survival=ds.survival,
        subject_index=ds.subject_index,
    )
    problem2 = ModelProblem(shifted, spec, include_survival=False)
    grid = np.linspace(np.log(5.0), np.log(20.0), 5)
    base_theta = np.array([0.0, np.log(0.8), np.log(0.3), 0.0])
    prof1, prof2 = [], []
    for x in grid:
        th = base_theta.copy()
        th[0] = x
        prof1.append(problem.log_marginal_posterior(th))
        prof2.append(problem2.log_marginal_posterior(th))
    prof1, prof2 = np.array(prof1), np.array(prof2)
    assert np.max(np.abs((prof1 - prof1[0]) - (prof2 - prof2[0]))) < 1e-5


def test_laplace_prior_term_in_hyperprior():
    ds = _lmm_dataset(n_subjects=4, n_per=3, seed=13)
    spec = _joint_spec(level=Level.SPLINE)
    probe = ModelProblem(ds, spec.at_level(Level.LINEAR))
    calib = _manual_calibration(probe, spec, np.random.default_rng(0))
    problem = ModelProblem(ds, spec, calibration=calib)
    theta = problem.default_init()
    base = problem._log_hyperprior(theta)
    bumped = theta.copy()
    bumped[-1] = 0.2  # one deviation coefficient
    # Relative to gamma_k = 0 the Laplace term changes by -30 * |0.2|.
    assert problem._log_hyperprior(bumped) - base == pytest.approx(-30.0 * 0.2, abs=1e-12)
    # And the absolute contribution of a deviation coefficient at value x is
    # log(15) - 30 |x|.
    with_dev = problem._log_hyperprior(bumped)
    spec_l2 = _joint_spec(level=Level.QUADRATIC)
    problem_l2 = ModelProblem(ds, spec_l2, calibration=calib)
    theta_l2 = problem_l2.default_init()
    theta_l2[-2:] = theta[problem.gamma_slices()[0][0] : problem.gamma_slices()[0][0] + 2]
    base_l2 = problem_l2._log_hyperprior(theta_l2)
    assert with_dev - base_l2 == pytest.approx(
        3 * np.log(15.0) - 30.0 * 0.2, abs=1e-10
    )


def test_optimizer_recovers_residual_sd_and_is_stationary():
    ds = _lmm_dataset(n_subjects=150, n_per=6, sigma_e=0.3, seed=31)
    spec = _joint_spec()
    problem = ModelProblem(ds, spec, include_survival=False)
    opt = optimize_hyperparameters(problem)
    sigma_e = np.exp(-0.5 * opt.theta[0])
    # Oracle: residual spread of the generating model.
    assert sigma_e == pytest.approx(0.3, rel=0.05)
    assert opt.converged
    f0 = problem.log_marginal_posterior(opt.theta)
    assert opt.objective >= opt.trace[0][1]
    restart = optimize_hyperparameters(problem, init=opt.theta)
    assert abs(restart.objective - f0) < 1e-5


def _simulate_joint(n_subjects, seed, gamma=0.6, sigma_e=0.3):
    rng = np.random.default_rng(seed)
    rows, surv = [], []
    for i in range(n_subjects):
        x = float(rng.integers(0, 2))
        b0 = rng.normal(scale=0.7)
        b1 = rng.normal(scale=0.25)
        a_i = 0.1 + b0 + 0.4 * x
        s_i = 0.25 + b1 + 0.15 * x
        # Event intensity rises with the current trajectory value.
        t, event, t_max = 0.0, 0, 6.0
        lam0 = 0.10
        while t < t_max:
            lam = lam0 * np.exp(gamma * (a_i + s_i * t))
            gap = rng.exponential(1.0 / lam)
            if t + gap > t_max:
                t = t_max
                break
            t, event = t + gap, 1
            break
        cens = rng.uniform(1.0, t_max)
        if event and cens < t:
            t, event = cens, 0
        t = max(t, 0.05)
        for tt in np.arange(0.0, t + 1e-9, 0.5):
            rows.append({"id": i, "time": tt, "y": a_i + s_i * tt + rng.normal(scale=sigma_e), "X": x})
        surv.append({"id": i, "time": t, "event": event, "X": x})
    return validate_and_join(pd.DataFrame(rows), pd.DataFrame(surv))


def test_fit_smoke_structure_and_determinism():
    ds = _simulate_joint(50, seed=5)
    spec = _joint_spec(baseline_knots=5)
    r1 = fit(ds, spec, seed=42, n_draws=200)
    r2 = fit(ds, spec, seed=42, n_draws=200)
    assert np.array_equal(r1.theta, r2.theta)
    assert np.array_equal(r1.pointwise.waic_contrib, r2.pointwise.waic_contrib)
    assert r1.dic == r2.dic and r1.waic == r2.waic
    assert r1.pointwise.waic_contrib.size == r1.n_longitudinal + r1.n_survival_rows
    assert r1.converged
    assert np.isfinite(r1.waic) and np.isfinite(r1.dic)
    assert r1.latent_mode.b.shape == (50, 2)
    different = fit(ds, spec, seed=43, n_draws=200)
    assert not np.array_equal(
        different.pointwise.waic_contrib, r1.pointwise.waic_contrib
    )


def test_calibrate_produces_domains_and_tracks_trajectories():
    ds = _simulate_joint(80, seed=9)
    spec = _joint_spec(level=Level.SPLINE, baseline_knots=5)
    calib = calibrate(ds, spec)
    comp = calib.components[0]
    assert comp.level is Level.SPLINE
    assert comp.basis is not None
    assert comp.domain[0] < comp.domain[1]
    assert comp.nu_tilde.size > 0
    assert np.all(comp.knots >= comp.domain[0]) and np.all(comp.knots <= comp.domain[1])


def test_posterior_curve_anchor_and_level1_linearity():
    ds = _simulate_joint(50, seed=15)
    spec = _joint_spec(baseline_knots=5)
    res = fit(ds, spec, seed=1, n_draws=200)
    lo, hi = res.calibration.components[0].domain
    grid = np.array([lo, 0.0, hi])
    curve = posterior_curve(res, 0, grid=grid)
    at_zero = curve[curve.nu == 0.0]
    assert float(at_zero.f_mean.iloc[0]) == 0.0
    assert float(at_zero.f_lo.iloc[0]) == 0.0 and float(at_zero.f_hi.iloc[0]) == 0.0
    # Level 1 curves are lines through the origin.
    full = posterior_curve(res, 0)
    nz = full[np.abs(full.nu) > 1e-6]
    slopes = nz.f_mean / nz.nu
    assert np.max(np.abs(slopes - slopes.iloc[0])) < 1e-9
    with pytest.raises(InferenceError):
        posterior_curve(res, 3)
    with pytest.raises(InferenceError):
        posterior_curve(res, 0, grid=np.array([hi + (hi - lo)]))


def test_shared_component_summary_percentile_convention():
    ds = _simulate_joint(30, seed=19)
    spec = _joint_spec(baseline_knots=5)
    res = fit(ds, spec, seed=1, n_draws=100)
    res.calibration.components[0].nu_tilde = np.arange(1.0, 101.0)
    summary = shared_component_summary(res, 0)
    assert summary["percentiles"]["P50"] == pytest.approx(50.5)
    assert sum(summary["hist_counts"]) == 100
