"""Flat ``key=value`` configuration with dotted keys.

Blank lines and ``#`` comments are ignored.  Values are typed by the
default they override; list-valued keys take comma-separated values.
"""

from __future__ import annotations

from pathlib import Path

DEFAULTS: dict[str, object] = {
    "seed": 0,
    "jobs": 0,
    "propensity.lambda": 1e-6,
    "quantile.kind": "linear",
    "quantile.knn_k": 50,
    "crossfit.folds": 5,
    "bounds.estimator": "qb",
    "bounds.regressor": "linear",
    "test.alpha": 0.05,
    "test.target": "obs_restricted",
    "test.n_bs": 100,
    "test.one_sided": False,
    "grid.step": 0.05,
    "grid.max": 20.0,
    "synthetic.gamma_star": 5.0,
    "synthetic.n_rct": 2000,
    "synthetic.n_obs": 2000,
    "synthetic.sigma2_y": 0.1,
    "synthetic.mode": "adversarial",
    "experiment.scenario": "validity_curve",
    "experiment.seeds": 200,
    "experiment.gammas": [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 8.0],
    "experiment.n_obs_values": [5000, 10000, 20000],
    "experiment.sigma2_low": 0.0,
    "experiment.sigma2_high": 1.0,
}

HELP: dict[str, str] = {
    "seed": "base seed; replicate r uses seed + r",
    "jobs": "worker processes (0 = logical cores)",
    "propensity.lambda": "ridge weight of the logistic propensity fit",
    "quantile.kind": "conditional quantile model: linear | binary | knn",
    "quantile.knn_k": "neighbours for the knn quantile model and regressor",
    "crossfit.folds": "cross-fitting folds (1 = in-sample)",
    "bounds.estimator": "qb | zsb | cate_learner",
    "bounds.regressor": "final-stage and counterfactual regressions: linear | knn",
    "test.alpha": "significance level",
    "test.target": "obs_restricted | rct",
    "test.n_bs": "bootstrap replicates",
    "test.one_sided": "test only the upper statistic",
    "grid.step": "additive step of the gamma grid",
    "grid.max": "largest gamma searched",
    "synthetic.gamma_star": "designed confounding strength",
    "synthetic.n_rct": "trial sample size",
    "synthetic.n_obs": "observational sample size",
    "synthetic.sigma2_y": "outcome noise variance",
    "synthetic.mode": "adversarial | potential_outcome | independent",
    "experiment.scenario": "validity_curve | power_curve | lb_vs_nobs | lb_vs_correlation | coverage",
    "experiment.seeds": "number of replicates R",
    "experiment.gammas": "gamma values tested by the curve scenarios",
    "experiment.n_obs_values": "observational sizes swept by lb_vs_nobs",
    "experiment.sigma2_low": "lower end of the noise-variance draw in lb_vs_correlation",
    "experiment.sigma2_high": "upper end of the noise-variance draw in lb_vs_correlation",
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, list):
            kind = type(default[0])
            return [kind(v) for v in raw.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def parse_assignments(lines, base: dict | None = None) -> dict:
    cfg = dict(DEFAULTS if base is None else base)
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        cfg[key] = _coerce(key, value)
    return cfg


def load_config(path: str | Path | None = None, overrides=()) -> dict:
    """Defaults, then the file, then ``key=value`` overrides."""
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg = parse_assignments(Path(path).read_text(encoding="utf-8").splitlines(), cfg)
    return parse_assignments(list(overrides), cfg)


def dump_config(cfg: dict) -> str:
    out = []
    for key in DEFAULTS:
        v = cfg[key]
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        out.append(f"{key}={v}")
    return "\n".join(out) + "\n"


def help_text() -> str:
    return "\n".join(f"  {k}={dump_config(DEFAULTS).splitlines()[i].split('=', 1)[1]}  {HELP[k]}"
                     for i, k in enumerate(DEFAULTS))
