"""The ``rmtlab`` command line.

Subcommands build an experiment config and hand it to the orchestration
layer, so flag-driven runs and ``rmtlab run --config exp.json`` share one
code path. Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 statistical-acceptance failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import (
    CollisionError,
    ConfigError,
    ConvergenceError,
    EigensolverError,
    ParameterError,
    RmtlabError,
    SamplingError,
    StatisticalFailure,
    StepSizeError,
)
from .experiments import ExperimentConfig, raise_on_failure, run_experiment

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_STATISTICAL = 4

_NUMERIC_ERRORS = (
    ConvergenceError,
    EigensolverError,
    SamplingError,
    CollisionError,
    StepSizeError,
    ParameterError,
)


def _seed_list(base, count):
    return list(range(base, base + count))


def _out_split(out, default_name):
    """Split an --out path into (directory, report file name)."""
    out = Path(out)
    if out.suffix:
        return str(out.parent if str(out.parent) != "" else "."), out.name
    return str(out), default_name


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="rmtlab",
        description="numerical laboratory for sparse random-matrix spectra",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sample = sub.add_parser("sample", help="draw a graph adjacency matrix")
    p_sample.add_argument("--model", required=True, choices=["er", "regular"])
    p_sample.add_argument("--n", required=True, type=int)
    p_sample.add_argument("--p", required=True, type=float)
    p_sample.add_argument("--seed", type=int, default=0)
    p_sample.add_argument("--seeds", type=int, default=1, help="number of seeds")
    p_sample.add_argument("--out", required=True, help="adjacency output file")
    p_sample.add_argument(
        "--method", default="auto", choices=["auto", "rejection", "repair"]
    )

    p_flow = sub.add_parser("flow", help="apply a matrix flow")
    p_flow.add_argument("--in", dest="in_file", required=True)
    p_flow.add_argument(
        "--variant", required=True, choices=["additive", "ou", "constrained"]
    )
    p_flow.add_argument("--t", required=True, type=float)
    p_flow.add_argument("--dt", type=float, default=1e-4)
    p_flow.add_argument("--f", type=float, default=0.0, help="OU mean level")
    p_flow.add_argument("--seed", type=int, default=0)
    p_flow.add_argument("--out", required=True, help="flowed matrix output file")
    p_flow.add_argument(
        "--trajectory",
        action="store_true",
        help="also integrate the spectral SDE and dump a per-step CSV",
    )

    p_fc = sub.add_parser("fc", help="solve the free convolution on a grid")
    p_fc.add_argument("--atoms", required=True, help="text file, one atom per line")
    p_fc.add_argument("--t", required=True, type=float)
    p_fc.add_argument(
        "--grid",
        required=True,
        help="E0,r,eta_min,eta_max,nE,nEta",
    )
    p_fc.add_argument("--out", required=True)

    p_mf = sub.add_parser("momentflow", help="integrate the master equation")
    p_mf.add_argument("--n-sites", required=True, type=int)
    p_mf.add_argument("--n-particles", required=True, type=int)
    p_mf.add_argument("--lambda-path", required=True, help="CSV: time, lambda_1..N")
    p_mf.add_argument("--ell", type=int, default=None)
    p_mf.add_argument("--t0", required=True, type=float)
    p_mf.add_argument("--t1", required=True, type=float)
    p_mf.add_argument("--dt", required=True, type=float)
    p_mf.add_argument("--init", required=True, help="flat or delta:IDX")
    p_mf.add_argument("--out", required=True)

    p_verify = sub.add_parser("verify", help="statistical verification suites")
    p_verify.add_argument(
        "kind", choices=["normality", "que", "rigidity", "locallaw", "general"]
    )
    p_verify.add_argument("--model", default="er", choices=["er", "regular", "goe"])
    p_verify.add_argument("--n", type=int, help="matrix size (or comma list for que)")
    p_verify.add_argument("--n-list", help="comma list of sizes (que trend)")
    p_verify.add_argument("--p", type=float)
    p_verify.add_argument("--p-exponent", type=float, default=0.55)
    p_verify.add_argument("--t", type=float, default=0.0)
    p_verify.add_argument("--kappa", type=float, default=0.1)
    p_verify.add_argument("--seeds", type=int, default=20)
    p_verify.add_argument("--seed-base", type=int, default=0)
    p_verify.add_argument("--n-indices", type=int, default=40)
    p_verify.add_argument("--q-seed", type=int, default=1)
    p_verify.add_argument("--psi-exponent", type=float, default=0.1)
    p_verify.add_argument("--c-exponent", type=float, default=0.2)
    p_verify.add_argument("--bound-constant", type=float, default=10.0)
    p_verify.add_argument("--include-raw", action="store_true")
    p_verify.add_argument("--out", required=True)

    p_run = sub.add_parser("run", help="run an experiment from a JSON config")
    p_run.add_argument("--config", required=True)

    return parser


def _config_from_args(args):
    if args.command == "sample":
        out_dir = str(Path(args.out).parent or ".")
        return ExperimentConfig(
            name=f"sample-{args.model}",
            suite="sample",
            parameters={
                "model": args.model,
                "n": args.n,
                "p": args.p,
                "method": args.method,
                "out_file": str(Path(args.out).name)
                if args.seeds == 1
                else None,
            },
            seeds=_seed_list(args.seed, args.seeds),
            output_dir=out_dir,
            report_name="sample_report.json",
        )
    if args.command == "flow":
        out_dir = str(Path(args.out).parent or ".")
        return ExperimentConfig(
            name=f"flow-{args.variant}",
            suite="flow",
            parameters={
                "in_file": args.in_file,
                "variant": args.variant,
                "t": args.t,
                "dt": args.dt,
                "f": args.f,
                "trajectory": bool(args.trajectory),
                "out_file": str(Path(args.out).name),
            },
            seeds=[args.seed],
            output_dir=out_dir,
            report_name="flow_report.json",
        )
    if args.command == "fc":
        parts = args.grid.split(",")
        if len(parts) != 6:
            raise ConfigError("--grid needs E0,r,eta_min,eta_max,nE,nEta")
        grid = {
            "E0": float(parts[0]),
            "r": float(parts[1]),
            "eta_min": float(parts[2]),
            "eta_max": float(parts[3]),
            "n_e": int(parts[4]),
            "n_eta": int(parts[5]),
        }
        out_dir, report = _out_split(args.out, "fc_report.json")
        return ExperimentConfig(
            name="fc",
            suite="fc",
            parameters={"atoms_file": args.atoms, "t": args.t, "grid": grid},
            seeds=[0],
            output_dir=out_dir,
            report_name=report,
        )
    if args.command == "momentflow":
        out_dir, report = _out_split(args.out, "momentflow_report.json")
        params = {
            "n_sites": args.n_sites,
            "n_particles": args.n_particles,
            "lambda_path_file": args.lambda_path,
            "t0": args.t0,
            "t1": args.t1,
            "dt": args.dt,
            "init": args.init,
        }
        if args.ell is not None:
            params["ell"] = args.ell
        return ExperimentConfig(
            name="momentflow",
            suite="momentflow",
            parameters=params,
            seeds=[0],
            output_dir=out_dir,
            report_name=report,
        )
    if args.command == "verify":
        out_dir, report = _out_split(args.out, "report.json")
        params = {
            "kind": args.kind,
            "model": args.model,
            "t": args.t,
            "kappa": args.kappa,
            "q_seed": args.q_seed,
            "psi_exponent": args.psi_exponent,
            "c_exponent": args.c_exponent,
            "bound_constant": args.bound_constant,
            "n_indices": args.n_indices,
            "include_raw": bool(args.include_raw),
        }
        if args.n is not None:
            params["n"] = args.n
        if args.n_list:
            params["n_list"] = [int(x) for x in args.n_list.split(",")]
        if args.p is not None:
            params["p"] = args.p
        else:
            params["p_exponent"] = args.p_exponent
        if args.kind != "que" and args.n is None:
            raise ConfigError("verify needs --n", key="n")
        if args.kind == "que" and not (args.n or args.n_list):
            raise ConfigError("que needs --n or --n-list", key="n")
        if args.kind == "normality" and args.p is None:
            raise ConfigError("normality needs --p", key="p")
        return ExperimentConfig(
            name=f"verify-{args.kind}",
            suite="verify",
            parameters=params,
            seeds=_seed_list(args.seed_base, args.seeds),
            output_dir=out_dir,
            report_name=report,
        )
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            config = ExperimentConfig.from_json(args.config)
        else:
            config = _config_from_args(args)
        result = run_experiment(config)
        raise_on_failure(result)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StatisticalFailure as exc:
        print(f"statistical acceptance failure: {exc}", file=sys.stderr)
        return EXIT_STATISTICAL
    except _NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except RmtlabError as exc:  # safety net for new error types
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"report: {Path(config.output_dir) / config.report_name}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
