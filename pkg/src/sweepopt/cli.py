"""Command-line front end.

Subcommands ``simulate``, ``optimize``, ``certify``, ``sweep`` and
``oracle-compare``. Every run is configured by an optional ``key = value``
file plus ``--set key=value`` overrides; see :data:`DEFAULTS` for the keys.

Exit codes: 0 success, 1 certificate failed, 2 integration failed,
3 configuration violation, 4 optimizer stalled, 5 I/O or parse error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import backend as _backend
from .certificate import analytic_candidate, certify, continuation_candidate, validate_report
from .controls import GridControl
from .dynamics import (integrate_catching_up, integrate_penalized, invariant_summary, refinement_slope,
                       sup_error, weak_errors)
from .errors import (BlowUp, GammaTooSmall, GridMismatch, LeftC, NoClosedForm, NonFinite, OutsideProxRadius,
                     Stalled, SweepError, UnknownInstance)
from .instance import ProblemInstance, builtin, closed_form_solution
from .io import (ParseError, read_config, read_control, read_json, read_trajectory, read_csv, write_control,
                 write_csv, write_json, write_trajectory)
from .optimizer import SUMMARY_HEADER, StageOptions, continuation_solve, default_initial_control
from .schedule import alpha_of, first_inner_start, first_stage_where, make_schedule, shift_initial_point

log = logging.getLogger("sweepopt")

EXIT_OK, EXIT_CERT, EXIT_INTEGRATION, EXIT_CONFIG, EXIT_STALLED, EXIT_IO = range(6)

DEFAULTS = {
    "instance": "annulus_example",
    "N": "2000",
    "seed": "0",
    "outdir": "out",
    "backend": "auto",
    "gamma": "1e4",
    "control": "auto",
    "schedule.gamma0": "auto",
    "schedule.growth": "3",
    "schedule.count": "8",
    "optimizer.mode": "bootstrap",
    "optimizer.max_iter": "60",
    "optimizer.stage_tol": "1e-7",
    "optimizer.mu0": "10",
    "oracle.ns": "500,1000,2000,4000",
}

SWEEP_HEADER = ["gamma", "sup_err_x", "xi_weak_err_1", "xi_weak_err_t", "xi_weak_err_t2", "max_psi", "max_xi"]
ORACLE_HEADER = ["N", "h", "sup_dist", "err_catching_up", "err_penalized"]


class ConfigError(SweepError):
    """Configuration value out of range or unknown key."""


@dataclass
class RunConfig:
    instance: str = "annulus_example"
    params: dict = field(default_factory=dict)
    N: int = 2000
    seed: int = 0
    outdir: Path = Path("out")
    backend: str = "auto"
    gamma: float = 1e4
    control: str = "auto"
    gamma0: Optional[float] = None
    growth: float = 3.0
    count: int = 8
    mode: str = "bootstrap"
    max_iter: int = 60
    stage_tol: float = 1e-7
    mu0: float = 10.0
    oracle_ns: tuple = (500, 1000, 2000, 4000)

    @classmethod
    def from_mapping(cls, raw: dict) -> "RunConfig":
        kv = dict(DEFAULTS)
        kv.update(raw)
        params = {}
        for k in list(kv):
            if k.startswith("instance."):
                params[k.split(".", 1)[1]] = _num(k, kv.pop(k))
        unknown = set(kv) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        cfg = cls(
            instance=kv["instance"],
            params=params,
            N=_int(kv, "N", lo=1),
            seed=_int(kv, "seed", lo=0),
            outdir=Path(kv["outdir"]),
            backend=kv["backend"].lower(),
            gamma=_pos(kv, "gamma"),
            control=kv["control"],
            gamma0=None if kv["schedule.gamma0"] == "auto" else _pos(kv, "schedule.gamma0"),
            growth=_pos(kv, "schedule.growth"),
            count=_int(kv, "schedule.count", lo=1),
            mode=kv["optimizer.mode"].lower(),
            max_iter=_int(kv, "optimizer.max_iter", lo=1),
            stage_tol=_pos(kv, "optimizer.stage_tol"),
            mu0=_pos(kv, "optimizer.mu0"),
            oracle_ns=tuple(_int({"n": s}, "n", lo=2) for s in kv["oracle.ns"].split(",") if s.strip()),
        )
        if cfg.growth <= 1.0:
            raise ConfigError("schedule.growth must exceed 1")
        if cfg.mode not in ("bootstrap", "verify"):
            raise ConfigError(f"optimizer.mode must be bootstrap or verify, got {cfg.mode!r}")
        if cfg.backend not in ("auto", "python", "compiled"):
            raise ConfigError(f"backend must be auto, python or compiled, got {cfg.backend!r}")
        if len(cfg.oracle_ns) < 2:
            raise ConfigError("oracle.ns needs at least two grid sizes")
        return cfg


def _num(key, value) -> float:
    try:
        v = float(value)
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if not math.isfinite(v):
        raise ConfigError(f"{key}: must be finite")
    return v


def _pos(kv, key) -> float:
    v = _num(key, kv[key])
    if v <= 0:
        raise ConfigError(f"{key} must be positive, got {v}")
    return v


def _int(kv, key, lo=0) -> int:
    v = _num(key, kv[key])
    if v != int(v) or v < lo:
        raise ConfigError(f"{key} must be an integer >= {lo}, got {kv[key]!r}")
    return int(v)


def load_config(path=None, sets=()) -> RunConfig:
    raw = read_config(path) if path else {}
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        raw[k] = v
    return RunConfig.from_mapping(raw)


# ---------------------------------------------------------------------------
# shared plumbing


def _instance(cfg: RunConfig) -> ProblemInstance:
    return builtin(cfg.instance, cfg.params)


def _closed_form(cfg: RunConfig):
    try:
        return closed_form_solution(cfg.instance)
    except NoClosedForm:
        return None


def _kernels(cfg: RunConfig, inst: ProblemInstance):
    try:
        return _backend.kernels_for(inst.rhs_model(), cfg.backend)
    except RuntimeError as exc:
        raise ConfigError(str(exc)) from None


def _control(cfg: RunConfig, inst: ProblemInstance, grid) -> GridControl:
    kind = cfg.control
    if kind == "auto":
        kind = "reference" if _closed_form(cfg) is not None else "midpoint"
    if kind == "reference":
        cf = _closed_form(cfg)
        if cf is None:
            raise ConfigError(f"control=reference needs a closed form for {cfg.instance}")
        return GridControl.from_function(grid, cf.u)
    if kind == "midpoint":
        return default_initial_control(inst, grid)
    u = read_control(kind)
    if u.grid.shape != grid.shape or not np.allclose(u.grid, grid, rtol=0, atol=1e-12):
        raise ConfigError(f"control file {kind} does not match the grid with N={cfg.N}")
    return GridControl(grid, u.values)


def _start(inst: ProblemInstance, gamma: float):
    x0 = inst.C0.project(np.zeros(inst.n)) if inst.C0.kind != "whole" else np.zeros(inst.n)
    rho = alpha_of(gamma, inst.M_bar, inst.geometry.eta) / inst.geometry.eta
    return shift_initial_point(inst.geometry, x0, rho)


def _check_gamma(inst: ProblemInstance, gamma: float):
    thr = 2.0 * inst.M_bar / inst.geometry.eta
    if not gamma > thr:
        raise GammaTooSmall(f"gamma={gamma:.6g} must exceed 2 M_bar / eta = {thr:.6g}")


def _schedule(cfg: RunConfig, inst: ProblemInstance):
    return make_schedule(inst.M_bar, inst.geometry.eta, cfg.gamma0, cfg.growth, cfg.count)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: RunConfig, out: Optional[str] = None) -> int:
    inst = _instance(cfg)
    _check_gamma(inst, cfg.gamma)
    grid = inst.grid(cfg.N)
    u = _control(cfg, inst, grid)
    traj = integrate_penalized(inst, _start(inst, cfg.gamma), u, cfg.gamma, kernels=_kernels(cfg, inst))
    path = Path(out) if out else cfg.outdir / "trajectory.csv"
    write_trajectory(path, traj)
    summary = invariant_summary(inst, traj)
    summary["gamma"] = cfg.gamma
    summary["x_end"] = traj.x_end
    write_json(path.with_suffix(".summary.json"), summary)
    print(f"wrote {path}")
    for k in ("max_psi", "max_xi", "max_speed"):
        print(f"{k} = {summary[k]:.6g}")
    return EXIT_OK


def cmd_optimize(cfg: RunConfig) -> int:
    inst = _instance(cfg)
    sched = _schedule(cfg, inst)
    grid = inst.grid(cfg.N)
    reference, u_init = None, None
    if cfg.mode == "verify":
        cf = _closed_form(cfg)
        if cf is None:
            raise ConfigError(f"optimizer.mode=verify needs a closed form for {cfg.instance}")
        reference = (cf.x, cf.u)
    elif cfg.control != "auto":
        u_init = _control(cfg, inst, grid)
    opts = StageOptions(max_iter=cfg.max_iter, stage_tol=cfg.stage_tol, mu0=cfg.mu0)
    stage_dir = cfg.outdir / "stages"

    def on_stage(k, state):
        write_trajectory(stage_dir / f"stage_{k:02d}.csv", state.trajectory)
        print(f"stage {k}: gamma={state.gamma:.6g} cost={state.cost:.6g} iters={state.iterations}")

    res = continuation_solve(inst, sched, grid, reference=reference, u_init=u_init, options=opts,
                             kernels=_kernels(cfg, inst), on_stage=on_stage)
    write_csv(cfg.outdir / "continuation.csv", SUMMARY_HEADER, res.summary_rows())
    write_candidate(cfg.outdir / "candidate", res.candidate)
    print(f"wrote {cfg.outdir / 'continuation.csv'} and {cfg.outdir / 'candidate'}")
    return EXIT_OK


def write_candidate(directory: Path, cand) -> None:
    """``trajectory.csv`` (t, x, u, xi), ``control.csv``, ``adjoint.csv`` and ``multipliers.json``."""
    directory = Path(directory)
    header = ["t"] + [f"x{i + 1}" for i in range(cand.x.shape[1])] + \
             [f"u{j + 1}" for j in range(cand.u.m)] + ["xi"]
    write_csv(directory / "trajectory.csv", header, np.column_stack([cand.grid, cand.x, cand.u.values, cand.xi]))
    write_control(directory / "control.csv", cand.u)
    write_csv(directory / "adjoint.csv", ["t"] + [f"p{i + 1}" for i in range(cand.p.shape[1])],
              np.column_stack([cand.grid, cand.p]))
    doc = {"lambda": cand.lam, "gamma": cand.gamma}
    if cand.xi_cells is not None:
        doc["xi_cells"] = cand.xi_cells
    write_json(directory / "multipliers.json", doc)


def read_candidate(inst: ProblemInstance, directory: Path):
    directory = Path(directory)
    grid, x, u, xi = read_trajectory(directory / "trajectory.csv")
    _, pdata = read_csv(directory / "adjoint.csv", expect_prefix=["t"])
    if pdata.shape[0] != grid.size or not np.allclose(pdata[:, 0], grid, rtol=0, atol=1e-12):
        raise ParseError(f"{directory / 'adjoint.csv'}: grid differs from trajectory.csv")
    doc = read_json(directory / "multipliers.json")
    try:
        lam = float(doc["lambda"])
        gamma = float(doc["gamma"])
        xi_cells = np.asarray(doc["xi_cells"], dtype=float) if "xi_cells" in doc else None
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{directory / 'multipliers.json'}: {exc}") from None
    if xi_cells is not None and xi_cells.shape != (grid.size - 1,):
        raise ParseError(f"{directory / 'multipliers.json'}: xi_cells needs {grid.size - 1} entries")
    return continuation_candidate(inst, grid, x, u, xi, pdata[:, 1:], lam, gamma, xi_cells)


def cmd_certify(cfg: RunConfig, candidate_dir: Optional[str], analytic: bool, variant: str,
                out: Optional[str] = None) -> int:
    inst = _instance(cfg)
    if analytic:
        cand = analytic_candidate(cfg.instance, cfg.N, variant, inst=inst)
    elif candidate_dir:
        cand = read_candidate(inst, candidate_dir)
    else:
        raise ConfigError("certify needs --analytic or a candidate directory")
    report = certify(inst, cand)
    doc = report.to_json()
    validate_report(doc)
    path = Path(out) if out else cfg.outdir / "certificate.json"
    write_json(path, doc)
    for name, c in report.checks.items():
        print(f"{name:15s} residual={c.residual:.3e} tol={c.tolerance:.1e} {'PASS' if c.passed else 'FAIL'}")
    print(f"overall {'PASS' if report.passed else 'FAIL'}; wrote {path}")
    return EXIT_OK if report.passed else EXIT_CERT


def sweep_rows(cfg: RunConfig, inst: ProblemInstance):
    cf = _closed_form(cfg)
    sched = _schedule(cfg, inst)
    grid = inst.grid(cfg.N)
    u = _control(cfg, inst, grid)
    K = _kernels(cfg, inst)
    rows = []
    for gamma in sched.gammas:
        traj = integrate_penalized(inst, _start(inst, gamma), u, gamma, kernels=K)
        summ = invariant_summary(inst, traj)
        if cf is not None:
            err = sup_error(traj, cf.x)
            target = np.array([cf.xi(t) for t in grid], dtype=float)
            w = weak_errors(grid, traj.xi, target)
        else:
            err, w = float("nan"), [float("nan")] * 3
        rows.append([gamma, err, *w, summ["max_psi"], summ["max_xi"]])
    return rows


def cmd_sweep(cfg: RunConfig) -> int:
    inst = _instance(cfg)
    rows = sweep_rows(cfg, inst)
    path = cfg.outdir / "sweep.csv"
    write_csv(path, SWEEP_HEADER, rows)
    for r in rows:
        print("  ".join(f"{v:.4g}" for v in r))
    sched = _schedule(cfg, inst)
    x0 = inst.C0.project(np.zeros(inst.n)) if inst.C0.kind != "whole" else np.zeros(inst.n)
    k_start = first_inner_start(inst.geometry, sched, x0)
    k_in = first_stage_where(r[5] <= inst.geometry.bdry_tol for r in rows)
    print(f"shifted start inside C(k) from stage {k_start}; trajectory inside C from stage {k_in}")
    print(f"wrote {path}")
    return EXIT_OK


def oracle_rows(cfg: RunConfig, inst: ProblemInstance):
    _check_gamma(inst, cfg.gamma)
    cf = _closed_form(cfg)
    K = _kernels(cfg, inst)
    rows = []
    for N in cfg.oracle_ns:
        grid = inst.grid(N)
        u = _control(cfg, inst, grid)
        x0 = inst.C0.project(np.zeros(inst.n)) if inst.C0.kind != "whole" else np.zeros(inst.n)
        cu = integrate_catching_up(inst, x0, u)
        pen = integrate_penalized(inst, _start(inst, cfg.gamma), u, cfg.gamma, kernels=K)
        dist = float(np.linalg.norm(cu.states - pen.states, axis=1).max())
        if cf is not None:
            e_cu, e_pen = sup_error(cu, cf.x), sup_error(pen, cf.x)
        else:
            e_cu = e_pen = float("nan")
        rows.append([N, float(grid[1] - grid[0]), dist, e_cu, e_pen])
    return rows


def cmd_oracle_compare(cfg: RunConfig) -> int:
    inst = _instance(cfg)
    rows = oracle_rows(cfg, inst)
    path = cfg.outdir / "oracle.csv"
    write_csv(path, ORACLE_HEADER, rows)
    for r in rows:
        print("  ".join(f"{v:.4g}" for v in r))
    errs = [r[3] for r in rows]
    if all(math.isfinite(e) and e > 0 for e in errs):
        print(f"catching-up refinement slope = {refinement_slope([r[0] for r in rows], errs):.3f}")
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a configuration key (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="sweepopt", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="integrate the penalized system for one gamma")
    s.add_argument("--out", help="trajectory CSV path (default OUTDIR/trajectory.csv)")

    sub.add_parser("optimize", parents=[common], help="run penalty continuation")

    c = sub.add_parser("certify", parents=[common], help="check optimality conditions of a candidate")
    c.add_argument("candidate", nargs="?", help="directory written by optimize (OUTDIR/candidate)")
    c.add_argument("--analytic", action="store_true", help="certify the closed-form candidate")
    c.add_argument("--variant", default="exact", choices=["exact", "u_pi", "xi_zero", "p_radial"],
                   help="perturbation of the closed-form candidate")
    c.add_argument("--out", help="report path (default OUTDIR/certificate.json)")

    sub.add_parser("sweep", parents=[common], help="penalized trajectories across the schedule")
    sub.add_parser("oracle-compare", parents=[common], help="penalty vs catching-up on refined grids")
    return p


def _dispatch(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.command == "simulate":
        return cmd_simulate(cfg, args.out)
    if args.command == "optimize":
        return cmd_optimize(cfg)
    if args.command == "certify":
        return cmd_certify(cfg, args.candidate, args.analytic, args.variant, args.out)
    if args.command == "sweep":
        return cmd_sweep(cfg)
    return cmd_oracle_compare(cfg)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, GammaTooSmall, UnknownInstance, GridMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Stalled as exc:
        print(f"optimizer stalled at stage {exc.stage}: {exc}", file=sys.stderr)
        return EXIT_STALLED
    except (BlowUp, LeftC, NonFinite, OutsideProxRadius) as exc:
        print(f"integration failed: {exc}", file=sys.stderr)
        return EXIT_INTEGRATION


if __name__ == "__main__":
    sys.exit(main())
