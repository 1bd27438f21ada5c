from __future__ import annotations

import json
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gammabound.core import AteEstimate, Dataset, DatasetKind, RngSpec, SensitivityInterval, Target
from gammabound.errors import DomainError, EmptyDataset
from gammabound.stattest import (
    Session,
    TestConfig,
    bootstrap_interval_se,
    bootstrap_se,
    decide,
    make_bags,
    normal_quantile,
    rct_ate,
    run_test,
    standardized_statistics,
)
from gammabound.synthetic import SyntheticSpec
from gammabound.experiments import synthetic_session


def _mp_quantile(p):
    mpmath.mp.dps = 40
    return mpmath.findroot(lambda z: mpmath.ncdf(z) - p, mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(p) - 1))


def test_normal_quantile_examples():
    assert normal_quantile(0.5) == 0.0
    assert normal_quantile(0.025) == pytest.approx(-1.959964, abs=1e-6)
    assert normal_quantile(0.975) == pytest.approx(-normal_quantile(0.025), abs=1e-12)
    for bad in (0.0, 1.0, -0.1, 2.0):
        with pytest.raises(DomainError):
            normal_quantile(bad)


def test_normal_quantile_against_high_precision():
    gen = np.random.default_rng(0)
    ps = np.concatenate([gen.uniform(1e-12, 1 - 1e-12, 300), 10.0 ** -gen.uniform(1, 12, 100)])
    for p in ps:
        assert abs(normal_quantile(p) - float(_mp_quantile(p))) < 1e-9


def _trial(t, y, pi=0.5):
    n = len(t)
    return Dataset(x=np.zeros((n, 1)), t=t, y=y, kind=DatasetKind.RCT, pi=pi)


def test_rct_ate_examples():
    assert rct_ate(_trial([1, 0], [1.0, 1.0])).value == 0.0
    single = _trial([1], [2.0])
    assert rct_ate(single).value == 4.0
    assert rct_ate(single).se == 0.0
    assert rct_ate(single, w=np.array([2.0])).value == 8.0
    with pytest.raises(EmptyDataset):
        rct_ate(Dataset(x=np.zeros((0, 1)), t=np.zeros(0, int), y=np.zeros(0), kind=DatasetKind.RCT, pi=0.5))


def test_rct_ate_se_is_estimator_scale():
    gen = np.random.default_rng(1)
    n = 500
    t, y = gen.integers(0, 2, n), gen.normal(size=n)
    est = rct_ate(_trial(t, y, 0.5))
    terms = y * (t / 0.5 - (1 - t) / 0.5)
    assert est.se == pytest.approx(terms.std(ddof=1) / math.sqrt(n), rel=1e-12)


def test_bags_fixed_by_rng():
    a = make_bags(50, 20, RngSpec(3, "b"))
    b = make_bags(50, 20, RngSpec(3, "b"))
    assert np.array_equal(a, b)
    assert np.all(a.sum(axis=1) == 50)
    assert not a.flags.writeable


def test_bootstrap_se_of_mean():
    y = np.random.default_rng(2).normal(size=400)
    se = bootstrap_se(lambda f: np.dot(f, y) / f.sum(), 400, 500, RngSpec(4))
    assert abs(se - 1 / 20) <= 0.15 / 20


def _obs(n=300, seed=0, const=False):
    gen = np.random.default_rng(seed)
    x = gen.uniform(-1, 1, (n, 1))
    t = np.tile([0, 1], n // 2)
    y = np.ones(n) if const else x[:, 0] + t + gen.normal(size=n)
    if const:
        x = np.zeros((n, 1))
    return Dataset(x=x, t=t, y=y)


@pytest.mark.parametrize("estimator", ["qb", "zsb"])
def test_bootstrap_interval_degenerate_and_deterministic(estimator):
    iv = bootstrap_interval_se(_obs(40, const=True), 2.0, estimator, 10, RngSpec(0))
    assert iv.se_lower == pytest.approx(0.0, abs=1e-12) and iv.se_upper == pytest.approx(0.0, abs=1e-12)
    d = _obs(200, seed=5)
    a = bootstrap_interval_se(d, 2.0, estimator, 20, RngSpec(9))
    b = bootstrap_interval_se(d, 2.0, estimator, 20, RngSpec(9))
    assert (a.se_lower, a.se_upper) == (b.se_lower, b.se_upper)
    with pytest.raises(ValueError):
        bootstrap_interval_se(d, 2.0, estimator, 1, RngSpec(9))


def test_statistics_inside_interval_accept():
    ate = AteEstimate(1.0, 0.1, Target.OBS_RESTRICTED)
    iv = SensitivityInterval(2.0, 0.5, 1.5, 0.1, 0.1)
    sp, sm = standardized_statistics(ate, iv, Target.OBS_RESTRICTED)
    assert sp > 0 and sm > 0
    assert decide(sp, sm, 0.05)[0] is False


@pytest.mark.parametrize("target", [Target.RCT, Target.OBS_RESTRICTED])
def test_statistic_minus_three(target):
    s, s_up = 0.3, 0.4
    scale = math.sqrt(s_up**2 + s**2 + (2 * s_up * s if target is Target.RCT else 0.0))
    ate = AteEstimate(2.0, s, target)
    iv = SensitivityInterval(2.0, -5.0, 2.0 - 3 * scale, 0.1, s_up)
    sp, _ = standardized_statistics(ate, iv, target)
    assert sp == pytest.approx(-3.0, abs=1e-12)
    reject, z = decide(sp, 10.0, 0.05)
    assert reject and z == pytest.approx(-1.959964, abs=1e-6)


def test_zero_scale_gives_signed_infinity():
    ate = AteEstimate(3.0, 0.0, Target.OBS_RESTRICTED)
    sp, sm = standardized_statistics(ate, SensitivityInterval(1.0, 0.0, 1.0), Target.OBS_RESTRICTED)
    assert sp == -math.inf and sm == math.inf
    sp, sm = standardized_statistics(AteEstimate(1.0, 0.0, "rct"), SensitivityInterval(1.0, 1.0, 1.0), Target.RCT)
    assert sp == 0.0 and sm == 0.0


finite = st.floats(-50, 50)


@given(finite, finite, st.floats(0.001, 0.5))
def test_one_sided_and_union_bound(sp, sm, alpha):
    two, z = decide(sp, sm, alpha)
    one, _ = decide(sp, sm, alpha, one_sided=True)
    assert one == (sp < z)
    if two:
        assert sp < z or sm < z
    # each side at alpha / 2
    assert two == ((sp < normal_quantile(alpha / 2)) or (sm < normal_quantile(alpha / 2)))


def test_config_validation():
    with pytest.raises(ValueError):
        TestConfig(alpha=0.0)
    with pytest.raises(ValueError):
        TestConfig(target="rct", estimator="qb")
    with pytest.raises(ValueError):
        TestConfig(target="obs_restricted", estimator="cate_learner")
    with pytest.raises(ValueError):
        TestConfig(n_bs=1)
    assert TestConfig(target="rct", estimator="cate_learner", n_bs=0).target is Target.RCT


def _session(estimator, seed, target="obs_restricted", n=1000, gamma_star=5.0):
    cfg = TestConfig(target=target, estimator=estimator, n_bs=30, rng=RngSpec(seed, "test"))
    spec = SyntheticSpec(gamma_star=gamma_star, n_rct=n, n_obs=n, seed=seed)
    return synthetic_session(spec, cfg)[0]


@pytest.mark.parametrize("estimator", ["qb", "zsb"])
def test_session_reuses_bags_and_result_json(estimator):
    s = _session(estimator, 1)
    bags = s.bags
    r1 = s.test(1.0)
    r2 = s.test(2.0)
    assert s.bags is bags
    rec = r2.to_json()
    for key in ("gamma", "stat_plus", "stat_minus", "threshold", "reject", "mu_hat", "se_mu",
                "bound_lower", "bound_upper", "se_lower", "se_upper", "target", "estimator"):
        assert key in rec
    json.dumps(rec)
    assert r1.reject == (min(r1.stat_plus, r1.stat_minus) < r1.threshold)


def test_session_matches_run_test():
    s = _session("zsb", 2)
    cfg = s.cfg
    r = run_test(s.d_rct, s.d_obs, 3.0, cfg)
    assert r.to_json() == s.test(3.0).to_json()


@pytest.mark.parametrize("seed", range(4))
def test_zsb_rejection_region_downward_closed(seed):
    s = _session("zsb", 10 + seed)
    rejects = [s.test(g).reject for g in np.arange(1.0, 8.01, 0.5)]
    first_accept = rejects.index(False) if False in rejects else len(rejects)
    assert not any(rejects[first_accept:])


def test_cate_learner_target():
    s = _session("cate_learner", 3, target="rct", n=800)
    r = s.test(2.0)
    assert r.ate.target is Target.RCT
    assert r.interval.se_upper > 0
    wider = s.test(4.0).interval
    assert wider.upper >= r.interval.upper - 1e-9 and wider.lower <= r.interval.lower + 1e-9


def test_weights_enter_trial_estimate():
    s = _session("zsb", 4)
    w = np.full(s.d_rct.n, 2.0)
    doubled = Session(s.d_rct, s.d_obs, s.cfg, rct_weights=w)
    assert doubled.ate.value == pytest.approx(2 * s.ate.value, rel=1e-12)
