"""Command-line entry point.

Exit codes: 0 success (``test``: accept), 3 ``test`` rejected, 1 error
(a JSON error record goes to stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .core import DatasetKind, RngSpec, Target, read_csv, restrict_support, validate_dataset, write_csv
from .errors import GammaboundError, IoError
from .experiments import ResultRow, build_test_config, run_experiment, summarize
from .lowerbound import GammaGrid, critical_value, flag_decisions, gamma_lower_bound, infinite_sample_lower_bound
from .stattest import VERSION, Session
from .subsample import SubsampleSpec, rejection_subsample
from .synthetic import SyntheticPopulation, SyntheticSpec, generate

EXIT_OK, EXIT_ERROR, EXIT_REJECT = 0, 1, 3


def _emit(obj: dict, stream=None) -> None:
    stream = stream or sys.stdout
    stream.write(json.dumps({"version": VERSION, **obj}, indent=2, default=float) + "\n")


def _outdir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise IoError(f"cannot write to {out}: {exc.strerror}") from None
    return out


def _read(path: str, kind: DatasetKind, pi: float | None = None):
    if not Path(path).is_file():
        raise IoError(f"cannot read {path}: no such file")
    return read_csv(path, kind=kind, pi=pi)


# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    spec = SyntheticSpec(gamma_star=args.gamma_star, n_rct=args.n_rct, n_obs=args.n_obs,
                         sigma2_y=args.sigma2_y, seed=args.seed, mode=args.mode)
    out = _outdir(args.out)
    d_rct, d_obs, oracle = generate(spec)
    write_csv(d_rct, out / "rct.csv", include_hidden=args.keep_hidden)
    write_csv(d_obs, out / "obs.csv", include_hidden=args.keep_hidden)
    with (out / "oracle.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["u", "y0", "y1", "e", "e_plus"])
        for row in zip(oracle.u, oracle.y0, oracle.y1, oracle.e, oracle.e_plus):
            w.writerow(repr(float(v)) for v in row)
    (out / "spec.json").write_text(json.dumps({"version": VERSION, **spec.to_json()}, indent=2) + "\n")
    _emit({"written": [str(out / n) for n in ("rct.csv", "obs.csv", "oracle.csv", "spec.json")]})
    return EXIT_OK


def cmd_subsample(args) -> int:
    d = _read(args.input, DatasetKind.OBS)
    spec = SubsampleSpec(args.gamma, args.confounder, args.kind, args.sign,
                         RngSpec(args.seed, "subsample"), until_stable=args.until_stable)
    obs, audit = rejection_subsample(d, spec)
    out = Path(args.out)
    _outdir(str(out.parent))
    write_csv(obs, out)
    record = {"version": VERSION, **audit.to_json()}
    audit_path = Path(args.audit) if args.audit else out.with_suffix(".audit.json")
    audit_path.write_text(json.dumps(record, indent=2) + "\n")
    _emit(record)
    return EXIT_OK


def _load_cfg(args) -> dict:
    overrides = list(args.set or [])
    for key, attr in (("test.alpha", "alpha"), ("test.target", "target"), ("bounds.estimator", "estimator"),
                      ("test.n_bs", "n_bs"), ("seed", "seed"), ("crossfit.folds", "folds"),
                      ("grid.step", "grid_step"), ("grid.max", "grid_max")):
        v = getattr(args, attr, None)
        if v is not None:
            overrides.append(f"{key}={v}")
    if getattr(args, "one_sided", False):
        overrides.append("test.one_sided=true")
    cfg = config_mod.load_config(args.config, overrides)
    if cfg["test.target"] == "rct" and cfg["bounds.estimator"] != "cate_learner":
        cfg["bounds.estimator"] = "cate_learner"
    return cfg


def _session(args, cfg) -> Session:
    d_rct = _read(args.rct, DatasetKind.OBS)
    pi = args.pi if args.pi is not None else float(np.mean(d_rct.t))
    d_rct = validate_dataset(d_rct.with_kind(DatasetKind.RCT, pi=pi))
    d_obs = _read(args.obs, DatasetKind.OBS)
    tcfg = build_test_config(cfg, int(cfg["seed"]))
    d_rct, d_obs = d_rct.analyst_view(), d_obs.analyst_view()
    if tcfg.target is Target.OBS_RESTRICTED:
        bounds = [(float(lo), float(hi)) for lo, hi in zip(d_rct.x.min(axis=0), d_rct.x.max(axis=0))]
        d_obs = restrict_support(d_obs, bounds)
    weights = None
    if args.rct_weights:
        weights = np.loadtxt(args.rct_weights, dtype=float, ndmin=1)
        if len(weights) != d_rct.n:
            raise IoError(f"{args.rct_weights}: expected {d_rct.n} weights, found {len(weights)}")
    return Session(d_rct, d_obs, tcfg, weights)


def cmd_test(args) -> int:
    cfg = _load_cfg(args)
    result = _session(args, cfg).test(args.gamma)
    _emit(result.to_json())
    return EXIT_REJECT if result.reject else EXIT_OK


def cmd_lower_bound(args) -> int:
    cfg = _load_cfg(args)
    session = _session(args, cfg)
    grid = GammaGrid(step=cfg["grid.step"], max=cfg["grid.max"])
    res = gamma_lower_bound(None, None, grid, session=session, full_trace=args.full_trace)
    if args.flag:
        if cfg["bounds.estimator"] == "cate_learner":
            # the critical value is a property of the observational study alone
            d_obs = _read(args.obs, DatasetKind.OBS).analyst_view()
            ct_cfg = build_test_config({**cfg, "bounds.estimator": "qb", "test.target": "obs_restricted"},
                                       int(cfg["seed"]))
            res.gamma_ct = critical_value(d_obs, grid, "qb", ct_cfg)
        else:
            res.gamma_ct = critical_value(session.d_obs, grid, session=session)
        res.psi_sens, res.psi_bin = flag_decisions(res.gamma_lb, res.gamma_ct)
    _emit(res.to_json())
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = config_mod.load_config(args.config, list(args.set or []))
    if args.seed is not None:
        cfg["seed"] = args.seed
    out = _outdir(args.out)
    rows = run_experiment(cfg, args.jobs)
    with (out / "results.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ResultRow.FIELDS)
        for r in rows:
            w.writerow(r.as_list())
    summary = summarize(cfg, rows)
    record = {"version": VERSION, **summary.to_json(), "config": config_mod.dump_config(cfg).splitlines()}
    (out / "summary.json").write_text(json.dumps(record, indent=2) + "\n")
    _emit(record)
    return EXIT_ERROR if summary.failed > 0.1 * summary.replicates else EXIT_OK


def cmd_oracle_lb(args) -> int:
    pop = SyntheticPopulation(args.gamma_star, args.sigma2_y, args.mode)
    lb = infinite_sample_lower_bound(pop, args.mc_n, RngSpec(args.seed, "oracle"))
    _emit({"gamma_star": args.gamma_star, "mode": args.mode, "mc_n": args.mc_n, "gamma_lb_inf": lb})
    return EXIT_OK


# ---------------------------------------------------------------------------


def _add_test_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--rct", required=True, help="trial CSV (columns t, y, x0..)")
    p.add_argument("--obs", required=True, help="observational CSV")
    p.add_argument("--pi", type=float, help="trial assignment probability (default: treated share)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--target", choices=[t.value for t in Target])
    p.add_argument("--estimator", choices=["qb", "zsb", "cate_learner"])
    p.add_argument("--n-bs", dest="n_bs", type=int, help="bootstrap replicates")
    p.add_argument("--folds", type=int, help="cross-fitting folds")
    p.add_argument("--seed", type=int)
    p.add_argument("--one-sided", action="store_true", help="test the upper statistic only")
    p.add_argument("--rct-weights", help="file with one importance weight per trial record")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gammabound",
        description="Test and lower-bound hidden confounding of an observational study against a trial.",
        epilog="config keys:\n" + config_mod.help_text(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic trial/observational pair")
    p.add_argument("--out", required=True)
    p.add_argument("--gamma-star", type=float, default=5.0)
    p.add_argument("--n-rct", type=int, default=2000)
    p.add_argument("--n-obs", type=int, default=2000)
    p.add_argument("--sigma2-y", type=float, default=0.1)
    p.add_argument("--mode", default="adversarial", choices=["adversarial", "potential_outcome", "independent"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--keep-hidden", action="store_true", help="also write the hidden u column")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("subsample", help="rejection-sample a trial CSV into a confounded study")
    p.add_argument("--input", required=True)
    p.add_argument("--confounder", required=True, help="column used as hidden confounder (e.g. u0 or x1)")
    p.add_argument("--kind", default="continuous", choices=["continuous", "binary"])
    p.add_argument("--sign", default="pos", choices=["pos", "neg"])
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="obs.csv")
    p.add_argument("--audit", help="audit JSON path (default: next to --out)")
    p.add_argument("--until-stable", action="store_true", help="repeat passes until none discards")
    p.set_defaults(func=cmd_subsample)

    p = sub.add_parser("test", help="run the level-alpha test at one gamma (exit 0 accept, 3 reject)")
    _add_test_flags(p)
    p.add_argument("--gamma", type=float, required=True)
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("lower-bound", help="grid-search lower bound on the confounding strength")
    _add_test_flags(p)
    p.add_argument("--grid-step", type=float)
    p.add_argument("--grid-max", type=float)
    p.add_argument("--flag", action="store_true", help="also compute the critical value and flags")
    p.add_argument("--full-trace", action="store_true", help="evaluate the whole grid")
    p.set_defaults(func=cmd_lower_bound)

    p = sub.add_parser("experiment", help="run a replicate suite from a config file")
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", default="results")
    p.add_argument("--jobs", type=int, help="worker processes (env GAMMABOUND_JOBS; default logical cores)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("oracle-lb", help="population lower bound of a synthetic design")
    p.add_argument("--gamma-star", type=float, default=2.0)
    p.add_argument("--mode", default="potential_outcome", choices=["adversarial", "potential_outcome", "independent"])
    p.add_argument("--sigma2-y", type=float, default=0.1)
    p.add_argument("--mc-n", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_lb)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GammaboundError, ValueError, OSError) as exc:
        _emit({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
