"""Command-line driver for the open-loop, sweep and convergence experiments.

Every experiment writes plot-ready CSV files (17 significant digits) and a
small gnuplot script into the output directory.  Files are written to a
temporary name first and renamed into place.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ocp import MODES, OCPSpec, solve_ocp
from .odefilter import ode_filter_smoother
from .prior import IWPModel
from .problem import Grids, InputPolicy, load_problem
from .reference import ground_truth_terms

log = logging.getLogger("pnocp")

DEFAULT_SWEEP = (20, 40, 60, 80, 120, 160)
DEFAULT_STEPS = (40, 80, 160, 320, 640)
DEFAULT_ORDER = 2


@dataclass
class ExperimentConfig:
    problem: object = "logistic"
    modes: tuple = MODES
    n_int: tuple = ()
    policy: str | None = None
    smoother: str = "eks"
    out: Path = Path(".")
    order: int = DEFAULT_ORDER
    orders: tuple = (1, 2)
    steps: tuple = DEFAULT_STEPS
    theta0: list | None = None
    max_iter: int = 500
    extra: dict = field(default_factory=dict)

    def load(self):
        ivp, defaults = load_problem(self.problem)
        if self.policy is not None:
            defaults.policy_kind = self.policy
        return ivp, defaults

    def spec(self, defaults, n_int, mode) -> OCPSpec:
        grids = Grids.uniform(self._T, defaults.N, n_int)
        return OCPSpec(
            defaults.Q_cost,
            defaults.R_cost,
            grids,
            IWPModel(self.order, self._d),
            mode=mode,
            smoother_mode=self.smoother,
            bounds=defaults.bounds,
            policy_kind=defaults.policy_kind,
            max_iter=self.max_iter,
        )

    def bind(self, ivp):
        self._T, self._d = ivp.T, ivp.d
        return self


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def write_csv(path: Path, header, rows):
    """Write ``rows`` under ``header`` atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([_fmt(v) for v in row])
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _write_text(path: Path, text: str):
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


_GNUPLOT = {
    "openloop": """set datafile separator ','
set key autotitle columnhead
set multiplot layout 3,1
plot for [m in "{modes}"] 'openloop_'.m.'.csv' using 1:2 with lines title m
plot for [m in "{modes}"] 'openloop_'.m.'.csv' using 1:7 with lines title m.' predicted', \\
     for [m in "{modes}"] 'openloop_'.m.'.csv' using 1:8 with lines dt 2 title m.' ground truth'
plot for [m in "{modes}"] 'openloop_'.m.'.csv' using 1:6 with steps title m
unset multiplot
""",
    "sweep": """set datafile separator ','
set logscale x
plot for [m in "{modes}"] 'sweep.csv' using ($2 eq m ? $1 : NaN):3 with linespoints title m.' predicted', \\
     for [m in "{modes}"] 'sweep.csv' using ($2 eq m ? $1 : NaN):4 with linespoints dt 2 title m.' ground truth'
""",
    "convergence": """set datafile separator ','
set logscale xy
plot for [p in "{orders}"] 'convergence.csv' using ($1 == p ? $2 : NaN):3 with linespoints title 'p='.p
""",
}


def _initial_theta(cfg, spec, ivp=None, defaults=None):
    if cfg.theta0 is None:
        if defaults is None or defaults.warm_start is None:
            return None
        return defaults.warm_start(ivp, spec.grids.control, spec.policy_kind, spec.bounds)
    theta0 = np.asarray(cfg.theta0, dtype=float)
    if theta0.size != spec.n_params:
        raise ValueError(f"theta0 has {theta0.size} entries, the policy needs {spec.n_params}")
    return theta0


# --- experiments ----------------------------------------------------------------------


def openloop_rows(spec, ivp, result):
    """Per-control-node rows for one solved OCP."""
    rep = result.report
    post = rep.posterior
    policy = spec.policy(result.theta)
    idx = spec.grids.control_index
    tc = spec.grids.control
    x = post.state_means[idx]
    sd = post.state_sd()[idx]
    gt_terms, _ = ground_truth_terms(spec, ivp, result.theta)
    gt_cum = np.concatenate([[0.0], np.cumsum(gt_terms.sum(axis=1))])
    pred_cum = rep.cumulative
    rows = []
    for k, t in enumerate(tc):
        rows.append([t, *x[k], *sd[k], *policy(t), pred_cum[k], gt_cum[k]])
    return rows


def openloop_header(d, n_u):
    xs = [f"x{j + 1}_mean" for j in range(d)]
    sds = [f"x{j + 1}_sd" for j in range(d)]
    us = ["u"] if n_u == 1 else [f"u{j + 1}" for j in range(n_u)]
    return ["t", *xs, *sds, *us, "cumulative_predicted_cost", "cumulative_ground_truth_cost"]


def run_openloop(cfg: ExperimentConfig) -> list:
    ivp, defaults = cfg.load()
    cfg.bind(ivp)
    n_int = cfg.n_int[0] if cfg.n_int else defaults.N_int
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for mode in cfg.modes:
        spec = cfg.spec(defaults, n_int, mode)
        res = solve_ocp(spec, ivp, _initial_theta(cfg, spec, ivp, defaults))
        rows = openloop_rows(spec, ivp, res)
        path = out / f"openloop_{mode}.csv"
        write_csv(path, openloop_header(ivp.d, spec.n_u), rows)
        log.info("%s: predicted %.6g, ground truth %.6g -> %s", mode, rows[-1][-2], rows[-1][-1], path)
        written.append(path)
    _write_text(out / "openloop.gp", _GNUPLOT["openloop"].format(modes=" ".join(cfg.modes)))
    return written


def sweep_point(cfg, ivp, defaults, n_int, mode):
    spec = cfg.spec(defaults, n_int, mode)
    res = solve_ocp(spec, ivp, _initial_theta(cfg, spec, ivp, defaults))
    gt_terms, _ = ground_truth_terms(spec, ivp, res.theta)
    return res.report.total, float(gt_terms.sum())


def run_sweep(cfg: ExperimentConfig) -> Path:
    ivp, defaults = cfg.load()
    cfg.bind(ivp)
    grid = cfg.n_int or DEFAULT_SWEEP
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    header = ["n_int", "mode", "predicted_cost", "ground_truth_cost"]
    rows, ok = [], 0
    for n_int in grid:
        for mode in cfg.modes:
            try:
                pred, gt = sweep_point(cfg, ivp, defaults, n_int, mode)
                ok += 1
            except Exception as exc:  # a failed point must not stop the sweep
                log.warning("sweep point n_int=%d mode=%s failed: %s", n_int, mode, exc)
                pred = gt = math.nan
            rows.append([n_int, mode, pred, gt])
            write_csv(path, header, rows)
    _write_text(out / "sweep.gp", _GNUPLOT["sweep"].format(modes=" ".join(cfg.modes)))
    if ok == 0:
        raise RuntimeError("every sweep point failed")
    return path


def convergence_rows(ivp, exact, orders, steps):
    rows = []
    for p in orders:
        model = IWPModel(p, ivp.d)
        for n in steps:
            grids = Grids.uniform(ivp.T, 1, n)
            post = ode_filter_smoother(ivp, InputPolicy(grids.control), grids, model)
            err = np.max(np.abs(post.state_means - exact(grids.integration)))
            rows.append([p, n, err])
    return rows


def run_convergence(cfg: ExperimentConfig) -> Path:
    ivp, defaults = cfg.load()
    exact = defaults.extra.get("solution")
    if exact is None:
        raise ValueError(f"problem {cfg.problem!r} has no closed-form solution for the convergence study")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "convergence.csv"
    write_csv(path, ["p", "n_steps", "max_error"], convergence_rows(ivp, exact, cfg.orders, cfg.steps))
    _write_text(out / "convergence.gp", _GNUPLOT["convergence"].format(orders=" ".join(map(str, cfg.orders))))
    return path


EXPERIMENTS = {"openloop": run_openloop, "sweep": run_sweep, "convergence": run_convergence}


# --- argument handling ----------------------------------------------------------------


def _int_list(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pnocp", description=__doc__.splitlines()[0])
    ap.add_argument("experiment", choices=sorted(EXPERIMENTS))
    ap.add_argument("--problem", help="registered problem name or JSON problem file")
    ap.add_argument("--config", type=Path, help="JSON experiment config; flags override its entries")
    ap.add_argument("--mode", choices=("classical", "proposed", "both"))
    ap.add_argument("--n-int", type=_int_list, help="integration steps, e.g. '20,40,60'")
    ap.add_argument("--policy", choices=("pwc", "hermite"))
    ap.add_argument("--smoother", choices=("eks", "ieks"))
    ap.add_argument("--order", type=int, help=f"prior order p (default {DEFAULT_ORDER})")
    ap.add_argument("--out", type=Path)
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _modes(value):
    if value in (None, "both"):
        return MODES
    if isinstance(value, str):
        return (value,)
    return tuple(value)


def make_config(args, default_problem) -> ExperimentConfig:
    raw = json.loads(args.config.read_text()) if args.config else {}
    unknown = set(raw) - {"problem", "mode", "modes", "n_int", "policy", "smoother", "out", "order", "orders",
                          "steps", "theta0", "max_iter"}
    if unknown:
        raise ValueError(f"unknown config entries: {sorted(unknown)}")
    cfg = ExperimentConfig(problem=raw.get("problem", default_problem))
    cfg.modes = _modes(raw.get("modes", raw.get("mode")))
    n_int = raw.get("n_int", ())
    cfg.n_int = (int(n_int),) if isinstance(n_int, (int, float)) else tuple(int(v) for v in n_int)
    cfg.policy = raw.get("policy")
    cfg.smoother = raw.get("smoother", "eks")
    cfg.out = Path(raw.get("out", "."))
    cfg.order = int(raw.get("order", DEFAULT_ORDER))
    cfg.orders = tuple(raw.get("orders", (1, 2)))
    cfg.steps = tuple(raw.get("steps", DEFAULT_STEPS))
    cfg.theta0 = raw.get("theta0")
    cfg.max_iter = int(raw.get("max_iter", 500))
    if args.problem is not None:
        cfg.problem = args.problem
    if args.mode is not None:
        cfg.modes = _modes(args.mode)
    if args.n_int is not None:
        cfg.n_int = args.n_int
    if args.policy is not None:
        cfg.policy = args.policy
    if args.smoother is not None:
        cfg.smoother = args.smoother
    if args.order is not None:
        cfg.order = args.order
    if args.out is not None:
        cfg.out = args.out
    if any(n <= 0 for n in cfg.n_int):
        raise ValueError("integration step counts must be positive")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    default_problem = "logistic1d" if args.experiment == "convergence" else "logistic"
    try:
        cfg = make_config(args, default_problem)
        EXPERIMENTS[args.experiment](cfg)
    except Exception as exc:
        print(f"pnocp {args.experiment}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
