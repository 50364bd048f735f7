import numpy as np
import pandas as pd
import pytest

from jointfit.basis import Level
from jointfit.data import (
    AssociationComponent,
    DataError,
    JointDataset,
    Kind,
    ModelSpec,
    default_priors,
    design_matrices,
    expand_survival,
    validate_and_join,
)


def _toy_frames():
    lng = pd.DataFrame(
        {
            "id": ["a", "a", "b"],
            "time": [0.0, 1.0, 0.5],
            "y": [1.0, 1.5, -0.2],
            "X": [1.0, 1.0, 0.0],
        }
    )
    srv = pd.DataFrame({"id": ["a", "b"], "time": [2.0, 1.5], "event": [1, 0], "X": [1.0, 0.0]})
    return lng, srv


def test_validate_and_join_happy_path():
    lng, srv = _toy_frames()
    ds = validate_and_join(lng, srv)
    assert ds.n_subjects == 2
    assert ds.n_longitudinal == 3
    assert ds.subject_index == {"a": 0, "b": 1}
    assert list(ds.longitudinal["_subject"]) == [0, 0, 1]


def test_validate_and_join_orphan_subject():
    lng, srv = _toy_frames()
    lng.loc[2, "id"] = "c"
    with pytest.raises(DataError, match="no survival record"):
        validate_and_join(lng, srv)


def test_validate_and_join_measurement_past_follow_up():
    lng, srv = _toy_frames()
    lng.loc[1, "time"] = 2.5
    with pytest.raises(DataError, match="exceeds follow-up"):
        validate_and_join(lng, srv)


def test_validate_and_join_duplicate_survival():
    lng, srv = _toy_frames()
    srv = pd.concat([srv, srv.iloc[[0]]], ignore_index=True)
    with pytest.raises(DataError, match="duplicate survival"):
        validate_and_join(lng, srv)


def test_expand_survival_full_and_partial_intervals():
    srv = pd.DataFrame({"id": [1, 2], "time": [2.0, 3.0], "event": [1, 0]})
    exp = expand_survival(srv, n_intervals=3)
    # Grid spans [0, 3] with width 1. Subject 1: T=2, event; subject 2: T=3 censored.
    assert np.allclose(exp.grid, [0.0, 1.0, 2.0, 3.0])
    s1 = exp.subject == 0
    assert np.allclose(exp.exposure[s1], [1.0, 1.0])
    assert list(exp.count[s1]) == [0, 1]
    s2 = exp.subject == 1
    assert np.allclose(exp.exposure[s2], [1.0, 1.0, 1.0])
    assert list(exp.count[s2]) == [0, 0, 0]


def test_expand_survival_partial_last_interval():
    srv = pd.DataFrame({"id": [1, 2], "time": [1.5, 3.0], "event": [0, 1]})
    exp = expand_survival(srv, n_intervals=3)
    s1 = exp.subject == 0
    assert np.allclose(exp.exposure[s1], [1.0, 0.5])
    assert list(exp.count[s1]) == [0, 0]
    assert exp.t_mid[s1][1] == pytest.approx(1.25)


def test_expand_survival_conserves_exposure_and_counts():
    rng = np.random.default_rng(5)
    times = rng.uniform(0.05, 10.0, size=200)
    events = rng.integers(0, 2, size=200)
    srv = pd.DataFrame({"id": np.arange(200), "time": times, "event": events})
    for n_int in (2, 7, 15, 40):
        exp = expand_survival(srv, n_intervals=n_int)
        sums = np.bincount(exp.subject, weights=exp.exposure, minlength=200)
        assert np.max(np.abs(sums - times)) < 1e-9
        counts = np.bincount(exp.subject, weights=exp.count, minlength=200)
        assert np.array_equal(counts, events)
        assert np.all(exp.exposure > 0)


def test_expand_survival_constant_hazard_mle():
    # Poisson-trick oracle: total events / total exposure estimates the rate.
    rng = np.random.default_rng(99)
    lam, n = 0.25, 10_000
    true_t = rng.exponential(1.0 / lam, size=n)
    cens = np.full(n, 8.0)
    t = np.minimum(true_t, cens)
    d = (true_t <= cens).astype(int)
    srv = pd.DataFrame({"id": np.arange(n), "time": t, "event": d})
    exp = expand_survival(srv, n_intervals=15)
    mle = exp.count.sum() / exp.exposure.sum()
    assert mle == pytest.approx(d.sum() / t.sum(), rel=1e-12)
    assert mle == pytest.approx(lam, rel=0.05)


def test_design_matrices_rows():
    lng = pd.DataFrame(
        {"id": [1, 1], "time": [0.0, 2.0], "y": [0.0, 1.0], "X": [1.0, 1.0]}
    )
    srv = pd.DataFrame({"id": [1], "time": [3.0], "event": [1], "X": [1.0]})
    ds = validate_and_join(lng, srv)
    spec = ModelSpec(fixed_effects=("X", "X:time"))
    exp = expand_survival(srv, n_intervals=3)
    dm = design_matrices(spec, ds, exp)
    assert np.allclose(dm.X_long[1], [1.0, 2.0, 1.0, 2.0])
    assert np.allclose(dm.Z_long[1], [1.0, 2.0])
    # Derivative rows: d/dt of (1, t, X, X t) is (0, 1, 0, X).
    assert np.allclose(dm.dX_surv, np.column_stack([np.zeros(3), np.ones(3), np.zeros(3), np.ones(3)]))
    assert np.allclose(dm.Z_surv[:, 0], np.ones(3))
    assert np.allclose(dm.Z_surv[:, 1], exp.t_mid)
    assert dm.beta_names == ("intercept", "time", "X", "X:time")


def test_design_matrices_missing_covariate():
    lng, srv = _toy_frames()
    ds = validate_and_join(lng, srv)
    spec = ModelSpec(fixed_effects=("Z",))
    with pytest.raises(DataError, match="'Z'"):
        design_matrices(spec, ds, expand_survival(srv, 4))


def test_design_determinism():
    lng, srv = _toy_frames()
    ds = validate_and_join(lng, srv)
    spec = ModelSpec(fixed_effects=("X",), survival_covariates=("X",))
    exp = expand_survival(srv, 5)
    a = design_matrices(spec, ds, exp)
    b = design_matrices(spec, ds, exp)
    for name in ("X_long", "Z_long", "W_surv", "X_surv", "dX_surv"):
        assert np.array_equal(getattr(a, name), getattr(b, name))


def test_default_priors_table_values():
    pr = default_priors()
    assert pr.gamma_dev_rate == 30.0
    assert pr.fixed_effect_variance == 100.0
    assert pr.residual_shape == 1.0 and pr.residual_scale == 5e-5
    assert pr.re_df == 3.0
    assert pr.baseline_pc_rate == pytest.approx(-np.log(0.01) / 0.5)
    assert pr.baseline_pc_rate == pytest.approx(9.2103, abs=5e-5)


def test_model_spec_validation():
    with pytest.raises(DataError):
        ModelSpec(association=())
    with pytest.raises(DataError):
        AssociationComponent(Kind.CURRENT_VALUE, Level.SPLINE, knots=2)
    spec = ModelSpec(association=(AssociationComponent("cv", 1), AssociationComponent("cs", 3)))
    lifted = spec.at_level(Level.SPLINE)
    assert all(c.level is Level.SPLINE for c in lifted.association)
    assert spec.association[0].level is Level.LINEAR
