"""Seeded replicate suites over the synthetic benchmark."""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .core import Dataset, RngSpec, Target, restrict_support
from .errors import GammaboundError
from .lowerbound import GammaGrid, gamma_lower_bound
from .nuisance import NuisanceSpec
from .stattest import Session, TestConfig
from .synthetic import RCT_RANGE, SyntheticSpec, correlation_uy, generate

SCENARIOS = ("validity_curve", "power_curve", "lb_vs_nobs", "lb_vs_correlation", "coverage")


@dataclass
class ResultRow:
    scenario: str
    seed: int
    gamma: float | None = None
    reject: int | None = None
    gamma_lb: float | None = None
    rho_uy: float | None = None
    n_obs: int | None = None
    sigma2_y: float | None = None
    wall: float = 0.0
    error: str = ""

    FIELDS = ("scenario", "seed", "gamma", "reject", "gamma_lb", "rho_uy", "n_obs", "sigma2_y", "wall", "error")

    def as_list(self) -> list:
        return ["" if getattr(self, f) is None else getattr(self, f) for f in self.FIELDS]


def build_test_config(cfg: dict, seed: int) -> TestConfig:
    return TestConfig(
        alpha=cfg["test.alpha"],
        target=cfg["test.target"],
        n_bs=cfg["test.n_bs"],
        rng=RngSpec(seed, "test"),
        estimator=cfg["bounds.estimator"],
        one_sided=cfg["test.one_sided"],
        nuisance=NuisanceSpec(
            propensity_lambda=cfg["propensity.lambda"],
            quantile_kind=cfg["quantile.kind"],
            knn_k=cfg["quantile.knn_k"],
            folds=cfg["crossfit.folds"],
            regressor=cfg["bounds.regressor"],
        ),
    )


def analysis_pair(d_rct: Dataset, d_obs: Dataset, target: Target) -> tuple[Dataset, Dataset]:
    """Analyst views; for the restricted target the observational sample is cut to the trial support."""
    d_rct, d_obs = d_rct.analyst_view(), d_obs.analyst_view()
    if Target(target) is Target.OBS_RESTRICTED:
        d_obs = restrict_support(d_obs, [(-RCT_RANGE, RCT_RANGE)] * d_obs.d)
    return d_rct, d_obs


def synthetic_session(spec: SyntheticSpec, tcfg: TestConfig) -> tuple[Session, object]:
    d_rct, d_obs, oracle = generate(spec)
    d_rct, d_obs = analysis_pair(d_rct, d_obs, tcfg.target)
    return Session(d_rct, d_obs, tcfg), oracle


def _spec(cfg: dict, seed: int, **kw) -> SyntheticSpec:
    base = dict(gamma_star=cfg["synthetic.gamma_star"], n_rct=cfg["synthetic.n_rct"],
                n_obs=cfg["synthetic.n_obs"], sigma2_y=cfg["synthetic.sigma2_y"],
                seed=seed, mode=cfg["synthetic.mode"])
    base.update(kw)
    return SyntheticSpec(**base)


def _grid(cfg: dict) -> GammaGrid:
    return GammaGrid(step=cfg["grid.step"], max=cfg["grid.max"])


def run_replicate(cfg: dict, replicate: int) -> list[ResultRow]:
    scenario = cfg["experiment.scenario"]
    seed = int(cfg["seed"]) + replicate
    t0 = time.perf_counter()
    try:
        rows = _replicate(cfg, scenario, seed)
    except (GammaboundError, ValueError, np.linalg.LinAlgError) as exc:
        return [ResultRow(scenario, seed, wall=time.perf_counter() - t0, error=f"{type(exc).__name__}: {exc}")]
    wall = time.perf_counter() - t0
    for r in rows:
        r.wall = wall / len(rows)
    return rows


def _replicate(cfg, scenario, seed) -> list[ResultRow]:
    tcfg = build_test_config(cfg, seed)
    if scenario in ("validity_curve", "power_curve"):
        session, _ = synthetic_session(_spec(cfg, seed), tcfg)
        return [ResultRow(scenario, seed, gamma=g, reject=int(session.test(g).reject))
                for g in cfg["experiment.gammas"]]
    if scenario == "coverage":
        session, _ = synthetic_session(_spec(cfg, seed), tcfg)
        lb = gamma_lower_bound(None, None, _grid(cfg), session=session).gamma_lb
        return [ResultRow(scenario, seed, gamma_lb=lb, n_obs=cfg["synthetic.n_obs"])]
    if scenario == "lb_vs_nobs":
        rows = []
        for n_obs in cfg["experiment.n_obs_values"]:
            session, _ = synthetic_session(_spec(cfg, seed, n_obs=n_obs), tcfg)
            lb = gamma_lower_bound(None, None, _grid(cfg), session=session).gamma_lb
            rows.append(ResultRow(scenario, seed, gamma_lb=lb, n_obs=n_obs))
        return rows
    if scenario == "lb_vs_correlation":
        gen = RngSpec(seed, "noise-variance").generator()
        s2 = float(gen.uniform(cfg["experiment.sigma2_low"], cfg["experiment.sigma2_high"]))
        session, oracle = synthetic_session(_spec(cfg, seed, sigma2_y=s2), tcfg)
        lb = gamma_lower_bound(None, None, _grid(cfg), session=session).gamma_lb
        rho = correlation_uy(oracle.u, oracle.y1)
        return [ResultRow(scenario, seed, gamma_lb=lb, rho_uy=rho, sigma2_y=s2)]
    raise ValueError(f"unknown scenario {scenario!r}")


def resolve_jobs(jobs: int | None) -> int:
    if not jobs:
        jobs = int(os.environ.get("GAMMABOUND_JOBS", "0") or 0)
    return jobs if jobs > 0 else (os.cpu_count() or 1)


def run_experiment(cfg: dict, jobs: int | None = None) -> list[ResultRow]:
    """All replicates, fanned out across processes; rows come back in seed order."""
    if cfg["experiment.scenario"] not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}")
    n = int(cfg["experiment.seeds"])
    if n < 1:
        raise ValueError("experiment.seeds must be >= 1")
    jobs = resolve_jobs(jobs or cfg.get("jobs"))
    if jobs == 1:
        batches = [run_replicate(cfg, r) for r in range(n)]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            batches = list(pool.map(run_replicate, [cfg] * n, range(n)))
    return [row for batch in batches for row in batch]


# ---------------------------------------------------------------------------
# summaries


def _mean_se(v) -> dict:
    v = np.asarray(v, float)
    se = float(v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return {"mean": float(v.mean()), "se": se, "count": int(len(v))}


def spearman_permutation(a, b, n_perm: int = 10000, rng: RngSpec = RngSpec(0, "permutation")) -> tuple[float, float]:
    """Spearman correlation and its one-sided (positive) rank-permutation p-value."""
    ra = stats.rankdata(a)
    rb = stats.rankdata(b)
    rho = float(np.corrcoef(ra, rb)[0, 1])
    gen = rng.generator()
    perms = np.array([np.corrcoef(ra, gen.permutation(rb))[0, 1] for _ in range(n_perm)])
    p = float((1 + np.sum(perms >= rho)) / (n_perm + 1))
    return rho, p


@dataclass
class Summary:
    scenario: str
    replicates: int
    failed: int
    stats: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"scenario": self.scenario, "replicates": self.replicates, "failed": self.failed, **self.stats}


def summarize(cfg: dict, rows: list[ResultRow]) -> Summary:
    scenario = cfg["experiment.scenario"]
    ok = [r for r in rows if not r.error]
    failed = len({r.seed for r in rows if r.error})
    out: dict = {}
    if scenario in ("validity_curve", "power_curve"):
        per = {}
        for g in cfg["experiment.gammas"]:
            v = [r.reject for r in ok if r.gamma == g]
            if v:
                per[str(g)] = _mean_se(v)
        out["rejection_rate"] = per
    elif scenario in ("coverage", "lb_vs_correlation"):
        lbs = [r.gamma_lb if r.gamma_lb is not None else math.inf for r in ok]
        finite = [v for v in lbs if math.isfinite(v)]
        out["gamma_lb"] = _mean_se(finite) if finite else None
        out["not_found"] = len(lbs) - len(finite)
        gs = cfg["synthetic.gamma_star"]
        if scenario == "coverage":
            out["coverage"] = _mean_se([v <= gs for v in lbs])
        else:
            pairs = [(r.rho_uy, r.gamma_lb if r.gamma_lb is not None else cfg["grid.max"] + 1) for r in ok]
            if len(pairs) > 2:
                rho, p = spearman_permutation([a for a, _ in pairs], [b for _, b in pairs])
                out["spearman"] = {"rho": rho, "p_value": p}
    elif scenario == "lb_vs_nobs":
        per = {}
        for n in cfg["experiment.n_obs_values"]:
            v = [r.gamma_lb for r in ok if r.n_obs == n and r.gamma_lb is not None]
            if v:
                per[str(n)] = _mean_se(v)
        out["gamma_lb_by_n_obs"] = per
    return Summary(scenario, int(cfg["experiment.seeds"]), failed, out)
