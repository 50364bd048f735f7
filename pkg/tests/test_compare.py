import numpy as np
import pytest

from jointfit.compare import (
    CompareError,
    WaicAccumulator,
    compute_dic,
    compute_waic,
    pairwise_waic_test,
)


def test_waic_zero_variance():
    ll = np.tile(np.array([-1.0, -2.0, -0.5]), (4, 1))
    out = compute_waic(ll)
    assert out.p_waic == pytest.approx(0.0, abs=1e-12)
    assert out.waic == pytest.approx(-2.0 * ll[0].sum())
    assert np.allclose(out.waic_contrib, -2.0 * ll[0])


def test_waic_two_draw_hand_example():
    ll = np.array([[0.0], [np.log(3.0)]])
    out = compute_waic(ll)
    assert out.lppd == pytest.approx(np.log(2.0), abs=1e-12)
    assert out.p_waic == pytest.approx(np.log(3.0) ** 2 / 2.0, abs=1e-12)
    assert out.waic == pytest.approx(-2.0 * (np.log(2.0) - np.log(3.0) ** 2 / 2.0), abs=1e-12)


def test_waic_additivity_under_duplication():
    rng = np.random.default_rng(3)
    ll = rng.normal(-1.0, 0.3, size=(50, 20))
    once = compute_waic(ll)
    twice = compute_waic(np.hstack([ll, ll]))
    assert twice.waic == pytest.approx(2.0 * once.waic, rel=1e-12)


def test_waic_accumulator_matches_single_pass():
    rng = np.random.default_rng(17)
    ll = rng.normal(-2.0, 1.5, size=(1000, 37))
    direct = compute_waic(ll)
    acc = WaicAccumulator(37)
    for chunk in np.array_split(ll, 7, axis=0):
        acc.add(chunk)
    streamed = acc.finalize()
    assert streamed.lppd == pytest.approx(direct.lppd, abs=1e-9)
    assert streamed.p_waic == pytest.approx(direct.p_waic, abs=1e-9)
    assert np.allclose(streamed.waic_contrib, direct.waic_contrib, atol=1e-9)


def test_dic_degenerate_and_hand_example():
    ll = np.tile(np.array([-1.5, -0.25]), (6, 1))
    dic, p_dic = compute_dic(ll, ll[0])
    assert p_dic == pytest.approx(0.0, abs=1e-12)
    assert dic == pytest.approx(-2.0 * ll[0].sum(), abs=1e-12)
    # Two draws with total log densities -1 and -3; at the mean, -1.8.
    ll = np.array([[-1.0], [-3.0]])
    dic, p_dic = compute_dic(ll, np.array([-1.8]))
    assert (dic, p_dic) == (pytest.approx(4.4), pytest.approx(0.4))


def test_dic_additivity():
    rng = np.random.default_rng(8)
    ll = rng.normal(-1.0, 0.2, size=(30, 10))
    at_mean = ll.mean(axis=0)
    dic1, _ = compute_dic(ll, at_mean)
    dic2, _ = compute_dic(np.hstack([ll, ll]), np.concatenate([at_mean, at_mean]))
    assert dic2 == pytest.approx(2.0 * dic1, rel=1e-12)


def _criteria_from_contrib(contrib):
    contrib = np.asarray(contrib, dtype=float)
    from jointfit.compare import PointwiseCriteria

    return PointwiseCriteria(
        waic_contrib=contrib, lppd=0.0, p_waic=0.0, waic=float(contrib.sum())
    )


def test_pairwise_identical_models():
    a = _criteria_from_contrib([1.0, 2.0, 3.0])
    res = pairwise_waic_test(a, _criteria_from_contrib([1.0, 2.0, 3.0]))
    assert res.delta == 0.0 and res.z == 0.0 and res.p == 1.0


def test_pairwise_hand_example():
    a = _criteria_from_contrib([2.0, 0.0, 2.0, 0.0])
    b = _criteria_from_contrib([0.0, 0.0, 0.0, 0.0])
    res = pairwise_waic_test(a, b)
    assert res.delta == pytest.approx(4.0)
    assert res.se == pytest.approx(1.1547 / 2.0, abs=1e-4)
    assert res.z == pytest.approx(1.7321, abs=1e-4)
    assert res.p == pytest.approx(0.0833, abs=1e-3)
    assert res.z == pytest.approx(res.delta / (res.n * res.se), rel=1e-12)


def test_pairwise_antisymmetry_and_scale():
    rng = np.random.default_rng(4)
    ca = rng.normal(size=40)
    cb = ca + rng.normal(scale=0.5, size=40)
    ab = pairwise_waic_test(_criteria_from_contrib(ca), _criteria_from_contrib(cb))
    ba = pairwise_waic_test(_criteria_from_contrib(cb), _criteria_from_contrib(ca))
    assert ab.z == pytest.approx(-ba.z, rel=1e-12)
    assert ab.p == pytest.approx(ba.p, rel=1e-12)
    scaled = pairwise_waic_test(
        _criteria_from_contrib(3.0 * ca), _criteria_from_contrib(3.0 * cb)
    )
    assert scaled.z == pytest.approx(ab.z, rel=1e-12)
    assert scaled.delta == pytest.approx(3.0 * ab.delta, rel=1e-12)


def test_pairwise_consistency_with_total_waic():
    rng = np.random.default_rng(12)
    lla = rng.normal(-1.0, 0.4, size=(60, 25))
    llb = rng.normal(-1.1, 0.4, size=(60, 25))
    a, b = compute_waic(lla), compute_waic(llb)
    res = pairwise_waic_test(a, b)
    assert res.delta == pytest.approx(a.waic - b.waic, abs=1e-9)


def test_pairwise_length_mismatch():
    with pytest.raises(CompareError):
        pairwise_waic_test(_criteria_from_contrib([1.0]), _criteria_from_contrib([1.0, 2.0]))


def test_waic_rejects_non_finite():
    ll = np.zeros((3, 2))
    ll[1, 1] = np.inf
    with pytest.raises(CompareError, match="observation 1"):
        compute_waic(ll)
