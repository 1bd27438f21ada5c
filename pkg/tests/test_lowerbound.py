from __future__ import annotations

import json

import numpy as np
import pytest

from gammabound.core import Dataset, RngSpec
from gammabound.experiments import synthetic_session
from gammabound.lowerbound import (
    GammaGrid,
    LowerBoundResult,
    critical_value,
    flag_decisions,
    gamma_lower_bound,
    infinite_sample_lower_bound,
    walk_grid,
)
from gammabound.stattest import Session, TestConfig
from gammabound.synthetic import SyntheticPopulation, SyntheticSpec


def test_grid_points():
    pts = GammaGrid(step=0.5, max=3.0).points()
    assert list(pts) == [1.0, 1.5, 2.0, 2.5, 3.0]
    assert GammaGrid().points()[-1] == 20.0
    assert len(GammaGrid().points()) == 381
    for bad in (dict(step=0.0), dict(max=0.5), dict(start=2.0)):
        with pytest.raises(ValueError):
            GammaGrid(**bad)


def test_injected_tests():
    grid = GammaGrid(step=0.5, max=20.0)
    assert gamma_lower_bound(None, None, grid, test=lambda g: False).gamma_lb == 1.0
    res = gamma_lower_bound(None, None, grid, test=lambda g: g < 5)
    assert res.gamma_lb == 5.0
    assert res.last_rejected == 4.5
    assert [e.reject for e in res.trace] == [True] * 8 + [False]
    never = gamma_lower_bound(None, None, grid, test=lambda g: True)
    assert never.gamma_lb is None
    rec = never.to_json()
    assert rec["gamma_lb"] is None and rec["searched_max"] == 20.0
    json.dumps(rec)


def test_full_trace_evaluates_whole_grid():
    grid = GammaGrid(step=1.0, max=6.0)
    res = walk_grid(lambda g: g < 3, grid, full_trace=True)
    assert res.gamma_lb == 3.0 and len(res.trace) == 6


def test_flag_decisions_published_values():
    assert flag_decisions(1.224, 1.164) == (1, 1)
    assert flag_decisions(1.009, 1.017) == (0, 1)
    assert flag_decisions(1.5, 1.5) == (0, 1)
    assert flag_decisions(1.0, 1.0) == (0, 0)
    assert flag_decisions(None, 2.0) == (1, 1)
    assert flag_decisions(2.0, None) == (0, 1)


@pytest.mark.parametrize("lb", [1.0, 1.05, 2.0, 7.5, None])
@pytest.mark.parametrize("ct", [1.0, 1.5, 3.0, None])
def test_psi_sens_implies_psi_bin(lb, ct):
    sens, binary = flag_decisions(lb, ct)
    assert sens <= binary


def _session(seed, estimator="qb", n=1000, alpha=0.05, gamma_star=5.0, mode="adversarial"):
    cfg = TestConfig(alpha=alpha, estimator=estimator, n_bs=30, rng=RngSpec(seed, "test"))
    return synthetic_session(SyntheticSpec(gamma_star=gamma_star, n_rct=n, n_obs=n, seed=seed, mode=mode), cfg)[0]


@pytest.mark.parametrize("seed", range(3))
def test_real_trace_is_prefix(seed):
    s = _session(seed)
    res = gamma_lower_bound(None, None, GammaGrid(step=0.5, max=10.0), session=s, full_trace=True)
    rejects = [e.reject for e in res.trace]
    k = rejects.index(False) if False in rejects else len(rejects)
    assert not any(rejects[k:])
    assert res.gamma_lb == (res.trace[k].gamma if k < len(rejects) else None)


def test_lower_bound_nonincreasing_in_alpha():
    grid = GammaGrid(step=0.25, max=10.0)
    lbs = []
    for alpha in (0.01, 0.05, 0.2):
        lb = gamma_lower_bound(None, None, grid, session=_session(7, alpha=alpha)).gamma_lb
        lbs.append(np.inf if lb is None else lb)
    # a stricter level rejects less
    assert lbs[0] <= lbs[1] <= lbs[2]


def _strong_effect_obs(seed=0, n=600):
    gen = np.random.default_rng(seed)
    x = gen.uniform(-1, 1, (n, 1))
    t = (gen.random(n) < 0.5).astype(int)
    y = 1.0 * t + 0.5 * x[:, 0] + gen.normal(size=n)
    return Dataset(x=x, t=t, y=y)


@pytest.mark.parametrize("estimator", ["qb", "zsb"])
def test_critical_value_matches_bisection(estimator):
    d = _strong_effect_obs()
    cfg = TestConfig(estimator=estimator, n_bs=2)
    s = Session(None, d, cfg)
    step = 0.25
    ct = critical_value(d, GammaGrid(step=step, max=20.0), session=s)
    assert ct is not None and ct > 1.0
    lo, hi = 1.0, 20.0
    while hi - lo > 1e-3:
        mid = 0.5 * (lo + hi)
        if s.point_interval(mid).contains(0.0):
            hi = mid
        else:
            lo = mid
    assert ct - step < hi <= ct + 1e-3


def test_critical_value_edge_cases():
    gen = np.random.default_rng(1)
    half = 200
    x, y = gen.uniform(-1, 1, (half, 1)), gen.normal(size=half)
    # both arms carry the same records, so the unconfounded contrast is exactly 0
    d0 = Dataset(x=np.vstack([x, x]), t=np.repeat([1, 0], half), y=np.concatenate([y, y]))
    s0 = Session(None, d0, TestConfig(estimator="zsb"), e_hat=np.full(2 * half, 0.5))
    assert critical_value(d0, GammaGrid(step=0.5, max=5.0), session=s0) == 1.0
    d = _strong_effect_obs(2)
    assert critical_value(d, GammaGrid(step=0.5, max=1.5), estimator="zsb") is None


def test_result_json_contract():
    res = LowerBoundResult(2.5, GammaGrid(step=0.5), [], gamma_ct=None, psi_sens=0, psi_bin=1)
    rec = res.to_json()
    for key in ("version", "gamma_lb", "gamma_ct", "psi_sens", "psi_bin", "grid", "trace"):
        assert key in rec
    assert rec["searched_max"] == 20.0


def test_oracle_unconfounded_and_independent():
    rng = RngSpec(3, "oracle")
    assert infinite_sample_lower_bound(SyntheticPopulation(1.0), mc_n=50_000, rng=rng) == 1.0
    pop = SyntheticPopulation(3.0, mode="independent")
    assert infinite_sample_lower_bound(pop, mc_n=100_000, rng=rng) == 1.0


def test_oracle_tight_case_and_validity():
    rng = RngSpec(4, "oracle")
    tight = infinite_sample_lower_bound(SyntheticPopulation(2.0, mode="potential_outcome"), mc_n=200_000, rng=rng)
    assert abs(tight - 2.0) < 0.02
    loose = infinite_sample_lower_bound(SyntheticPopulation(2.0, mode="adversarial"), mc_n=200_000, rng=rng)
    assert 1.0 < loose <= 2.0
