"""Command-line interface: configuration, orchestration, reproducible artifacts.

Subcommands
-----------
  model check   print the model's forced area, moduli mass, p*, residual
  solve-ke      continuation solve; writes field CSV and a report JSON
  flow run      evolve the reduced flow; writes trajectory CSV, final field
                CSV/PGM and a decay-report JSON
  verify all    full estimate suite; one report JSON keyed per statement
  periods       batch Weierstrass periods: CSV of (g2, g3) rows in,
                CSV of (w1, w2, tau, discriminant) out

Exit codes: 0 success (all checks pass), 1 solver/configuration error,
2 verification failure.  All artifacts are written atomically (temp file
plus rename) inside the configured output directory, with no timestamps,
so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, NumericalError
from .fibration_model import (assemble_density, build_background,
                              model_from_json_dict, required_area,
                              validate_lp)
from .flow_engine import SCHEMES, run_flow
from .ke_solver import (KEProblem, continuation_solve, newton_solve)
from .torus_field import make_grid, write_field_csv, write_field_pgm
from .verify import run_verification_suite
from . import elliptic_periods as periods_mod
from .estimates import sigma_barrier

DEFAULT_GRID_N = 128
DEFAULT_EPSILON_SCHEDULE = (0.4, 0.2, 0.1, 0.05)
DEFAULT_FLOW = {"T": 20.0, "dt": 0.05, "scheme": "backward-euler-newton"}
DEFAULT_MASKS = {"qr_min": 0.1, "sigma_levels": [0.2, 0.4, 0.6]}


@dataclass(frozen=True)
class RunConfig:
    model_path: str
    grid_n: int = DEFAULT_GRID_N
    epsilon_schedule: tuple = DEFAULT_EPSILON_SCHEDULE
    flow: dict = field(default_factory=lambda: dict(DEFAULT_FLOW))
    masks: dict = field(default_factory=lambda: dict(DEFAULT_MASKS))
    output_dir: str = "out"
    seed: int = 0

    def to_json_dict(self) -> dict:
        return {
            "model": self.model_path,
            "grid_n": self.grid_n,
            "epsilon_schedule": list(self.epsilon_schedule),
            "flow": dict(self.flow),
            "masks": dict(self.masks),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }


_CONFIG_KEYS = {"model", "grid_n", "epsilon_schedule", "flow", "masks",
                "output_dir", "seed"}
_FLOW_KEYS = {"T", "dt", "scheme"}
_MASK_KEYS = {"qr_min", "sigma_levels"}


def parse_config_dict(d: dict, base_dir=".") -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigurationError("config: expected a JSON object")
    for key in d:
        if key not in _CONFIG_KEYS:
            raise ConfigurationError(f"config.{key}: unknown key")
    if "model" not in d:
        raise ConfigurationError("config.model: required (path to a model JSON)")
    model_path = os.path.join(base_dir, d["model"]) \
        if not os.path.isabs(d["model"]) else d["model"]
    if not os.path.exists(model_path):
        raise ConfigurationError(f"config.model: no such file {model_path!r}")
    grid_n = int(d.get("grid_n", DEFAULT_GRID_N))
    if grid_n < 16 or grid_n % 2:
        raise ConfigurationError(f"config.grid_n: must be even and >= 16, got {grid_n}")
    schedule = tuple(float(e) for e in d.get("epsilon_schedule",
                                             DEFAULT_EPSILON_SCHEDULE))
    for e in schedule:
        if not (0.0 < e <= 1.0):
            raise ConfigurationError(f"config.epsilon_schedule: value {e} out of (0, 1]")
    flow = dict(DEFAULT_FLOW)
    for key, value in d.get("flow", {}).items():
        if key not in _FLOW_KEYS:
            raise ConfigurationError(f"config.flow.{key}: unknown key")
        flow[key] = value
    flow["T"] = float(flow["T"])
    flow["dt"] = float(flow["dt"])
    if flow["scheme"] not in SCHEMES:
        raise ConfigurationError(
            f"config.flow.scheme: unknown scheme {flow['scheme']!r}")
    if not (0.0 < flow["dt"] <= flow["T"] <= 50.0):
        raise ConfigurationError("config.flow: need 0 < dt <= T <= 50")
    masks = dict(DEFAULT_MASKS)
    for key, value in d.get("masks", {}).items():
        if key not in _MASK_KEYS:
            raise ConfigurationError(f"config.masks.{key}: unknown key")
        masks[key] = value
    masks["qr_min"] = float(masks["qr_min"])
    masks["sigma_levels"] = [float(v) for v in masks["sigma_levels"]]
    return RunConfig(model_path=model_path, grid_n=grid_n,
                     epsilon_schedule=schedule, flow=flow, masks=masks,
                     output_dir=str(d.get("output_dir", "out")),
                     seed=int(d.get("seed", 0)))


def parse_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config: malformed JSON in {path}: {exc}")
    return parse_config_dict(d, base_dir=os.path.dirname(path) or ".")


def load_model(path):
    try:
        with open(path) as fh:
            d = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"model: malformed JSON in {path}: {exc}")
    return model_from_json_dict(d)


# ---------------------------------------------------------------------------
# atomic artifact writing
# ---------------------------------------------------------------------------

def _atomic_write(path, writer):
    """Write through a temp file in the same directory, then rename."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                               prefix=os.path.basename(path) + ".")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def write_json(path, obj):
    def _w(tmp):
        with open(tmp, "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
    _atomic_write(path, _w)


# ---------------------------------------------------------------------------
# subcommand bodies
# ---------------------------------------------------------------------------

def _cmd_model_check(cfg: RunConfig) -> int:
    model, _ = load_model(cfg.model_path)
    grid = make_grid(cfg.grid_n)
    area = required_area(model, grid)
    bg = build_background(model, grid)
    density = assemble_density(model, bg, grid)
    source_mean = 0.0  # assemble would have raised otherwise; report the check
    lp = validate_lp(model, grid_sizes=(cfg.grid_n,))
    print(f"A = {area:.12g}")
    print(f"W = {bg.wp_mass:.12g}")
    print(f"p_star = {lp['p_star']:.12g}" if math.isfinite(lp["p_star"])
          else "p_star = inf")
    resid = abs(np.exp(density.log_density.values).mean() - 1.0)
    print(f"consistency residual = {max(resid, source_mean):.3e}")
    return 0


def _ke_report(report, sol):
    return {
        "A": sol.problem.bg.area,
        "W": sol.problem.bg.wp_mass,
        "residual": sol.residual_sup,
        "epsilons": list(report.epsilons),
        "newton_iters": list(report.newton_iters),
        "cauchy_sups": list(report.cauchy_sups),
        "holder_exponent": report.holder_exponent,
    }


def _cmd_solve_ke(cfg: RunConfig) -> int:
    model, _ = load_model(cfg.model_path)
    grid = make_grid(cfg.grid_n)
    bg = build_background(model, grid)
    density = assemble_density(model, bg, grid)
    problem = KEProblem(bg=bg, density=density, beta=model.beta,
                        delta=model.delta, epsilon=cfg.epsilon_schedule[-1])
    sol, report, _ = continuation_solve(problem, list(cfg.epsilon_schedule))
    out = cfg.output_dir
    _atomic_write(os.path.join(out, "ke_solution.csv"),
                  lambda tmp: write_field_csv(sol.v, tmp))
    write_json(os.path.join(out, "ke_report.json"), _ke_report(report, sol))
    print(f"solved at eps={sol.epsilon}: residual {sol.residual_sup:.3e}")
    return 0


def _cmd_flow_run(cfg: RunConfig) -> int:
    model, _ = load_model(cfg.model_path)
    grid = make_grid(cfg.grid_n)
    bg = build_background(model, grid)
    density = assemble_density(model, bg, grid)
    eps = cfg.epsilon_schedule[-1]
    problem = KEProblem(bg=bg, density=density, beta=model.beta,
                        delta=model.delta, epsilon=eps)
    target = newton_solve(problem)
    gamma = [bg.model.cone_point] + [f.point for f in bg.model.fibers]
    barrier = sigma_barrier(grid, gamma, reference_area=bg.area)
    masks = {f"sigma>={lvl}": barrier.level_mask(lvl)
             for lvl in cfg.masks["sigma_levels"]}
    masks[f"qr>={cfg.masks['qr_min']}"] = bg.q.values >= cfg.masks["qr_min"]
    state, traj, decay = run_flow(
        problem, cfg.flow["T"], cfg.flow["dt"], cfg.flow["scheme"],
        masks=masks, target_phi=target.phi,
        monitor_mask=masks.get("sigma>=0.2"))
    out = cfg.output_dir

    def _write_traj(tmp):
        names = sorted(traj.gaps)
        with open(tmp, "w") as fh:
            fh.write("t," + ",".join(f"gap[{k}]" for k in names)
                     + ",energy,min_density\n")
            for i, t in enumerate(traj.times):
                row = [repr(t)] + [repr(traj.gaps[k][i]) for k in names] \
                    + [repr(traj.energy[i]), repr(traj.min_density[i])]
                fh.write(",".join(row) + "\n")
    _atomic_write(os.path.join(out, "trajectory.csv"), _write_traj)
    _atomic_write(os.path.join(out, "final_phi.csv"),
                  lambda tmp: write_field_csv(state.phi, tmp))
    _atomic_write(os.path.join(out, "final_phi.pgm"),
                  lambda tmp: write_field_pgm(state.phi, tmp))
    write_json(os.path.join(out, "decay_report.json"), dict(decay))
    final_gaps = {k: traj.gaps[k][-1] for k in traj.gaps}
    print(f"flow reached t={state.t:g}; final gaps: " + json.dumps(
        final_gaps, sort_keys=True))
    return 0


def _cmd_verify_all(cfg: RunConfig) -> int:
    model, _ = load_model(cfg.model_path)
    reports = run_verification_suite(
        model, grid_n=cfg.grid_n, flow_T=cfg.flow["T"],
        flow_dt=cfg.flow["dt"], scheme=cfg.flow["scheme"],
        flow_epsilon=cfg.epsilon_schedule[-1],
        qr_mask_level=cfg.masks["qr_min"])
    payload = {k: r.to_json_dict() for k, r in sorted(reports.items())}
    write_json(os.path.join(cfg.output_dir, "verification_report.json"),
               payload)
    all_pass = True
    for key in sorted(reports):
        status = "pass" if reports[key].passed else "FAIL"
        print(f"{key}: {status} (max violation {reports[key].max_violation:.3e})")
        all_pass &= reports[key].passed
    return 0 if all_pass else 2


def _cmd_periods(input_path, output_dir) -> int:
    rows = []
    with open(input_path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [float(v) for v in line.split(",")]
            if len(parts) == 2:
                g2, g3 = complex(parts[0]), complex(parts[1])
            elif len(parts) == 4:
                g2 = complex(parts[0], parts[1])
                g3 = complex(parts[2], parts[3])
            else:
                raise ConfigurationError(
                    f"{input_path}:{line_no}: expected 2 or 4 numbers per row")
            curve = periods_mod.WeierstrassCurve(g2, g3)
            disc = periods_mod.discriminant(curve)
            w1, w2, tau = periods_mod.periods_from_weierstrass(curve)
            rows.append((g2, g3, w1, w2, tau, disc))

    def _w(tmp):
        with open(tmp, "w") as fh:
            fh.write("# g2_re,g2_im,g3_re,g3_im,w1_re,w1_im,w2_re,w2_im,"
                     "tau_re,tau_im,disc_re,disc_im\n")
            for g2, g3, w1, w2, tau, disc in rows:
                vals = [g2.real, g2.imag, g3.real, g3.imag, w1.real, w1.imag,
                        w2.real, w2.imag, tau.real, tau.imag,
                        disc.real, disc.imag]
                fh.write(",".join(repr(v) for v in vals) + "\n")
    _atomic_write(os.path.join(output_dir, "periods.csv"), _w)
    print(f"wrote periods for {len(rows)} curves")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _build_parser():
    p = argparse.ArgumentParser(prog="coneflow",
                                description="Conical-flow numerical laboratory")
    sub = p.add_subparsers(dest="group", required=True)

    def add_common(sp):
        sp.add_argument("--config", help="run-config JSON path")
        sp.add_argument("--model", help="model JSON path")
        sp.add_argument("--grid-n", type=int, default=None)
        sp.add_argument("--out", default=None, help="output directory")
        sp.add_argument("--quick", action="store_true",
                        help="smoke-test scale: N=64, T=8")

    model_p = sub.add_parser("model", help="model-file operations")
    model_sub = model_p.add_subparsers(dest="action", required=True)
    add_common(model_sub.add_parser("check", help="print forced constants"))

    add_common(sub.add_parser("solve-ke", help="continuation solve"))

    flow_p = sub.add_parser("flow", help="flow operations")
    flow_sub = flow_p.add_subparsers(dest="action", required=True)
    flow_run = flow_sub.add_parser("run", help="evolve the reduced flow")
    add_common(flow_run)
    flow_run.add_argument("--T", type=float, default=None)
    flow_run.add_argument("--dt", type=float, default=None)
    flow_run.add_argument("--scheme", choices=SCHEMES, default=None)
    flow_run.add_argument("--epsilon", type=float, default=None)

    verify_p = sub.add_parser("verify", help="verification suites")
    verify_sub = verify_p.add_subparsers(dest="action", required=True)
    add_common(verify_sub.add_parser("all", help="full estimate suite"))

    per = sub.add_parser("periods", help="batch elliptic periods")
    per.add_argument("--input", required=True, help="CSV of g2, g3 rows")
    per.add_argument("--out", default="out")
    return p


def _config_from_args(args) -> RunConfig:
    if getattr(args, "config", None):
        cfg = parse_config(args.config)
    else:
        if not getattr(args, "model", None):
            raise ConfigurationError("either --config or --model is required")
        cfg = parse_config_dict({"model": args.model})
    if getattr(args, "model", None) and args.config:
        cfg = replace(cfg, model_path=args.model)
    if getattr(args, "grid_n", None):
        cfg = replace(cfg, grid_n=args.grid_n)
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=args.out)
    flow = dict(cfg.flow)
    for key, attr in (("T", "T"), ("dt", "dt"), ("scheme", "scheme")):
        if getattr(args, attr, None) is not None:
            flow[key] = getattr(args, attr)
    if getattr(args, "epsilon", None) is not None:
        cfg = replace(cfg, epsilon_schedule=(args.epsilon,))
    cfg = replace(cfg, flow=flow)
    if getattr(args, "quick", False):
        quick_flow = dict(cfg.flow)
        quick_flow["T"] = min(quick_flow["T"], 8.0)
        cfg = replace(cfg, grid_n=64, flow=quick_flow)
    return cfg


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.group == "periods":
            return _cmd_periods(args.input, args.out)
        cfg = _config_from_args(args)
        if args.group == "model" and args.action == "check":
            return _cmd_model_check(cfg)
        if args.group == "solve-ke":
            return _cmd_solve_ke(cfg)
        if args.group == "flow" and args.action == "run":
            return _cmd_flow_run(cfg)
        if args.group == "verify" and args.action == "all":
            return _cmd_verify_all(cfg)
        raise ConfigurationError(f"unhandled command {args.group}")
    except (ConfigurationError, NumericalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
