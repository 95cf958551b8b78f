"""Experiment orchestration: configs, seed fan-out, persistence, reports.

An :class:`ExperimentConfig` fully determines every numeric output
(tool version aside); per-seed tasks run in a worker pool capped by the
``RMTLAB_THREADS`` environment variable, and the aggregate report is always
written atomically, last.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, plotting
from .ensembles import (
    EnsembleParams,
    normalize_er,
    normalize_regular,
    sample_er,
    sample_goe,
    sample_regular,
    unit_vector_perp_flat,
)
from .errors import ConfigError, ParameterError, StatisticalFailure
from .flows import (
    constrained_flow_regular,
    dbm_exact_sample,
    integrate_eigen_sde,
    ou_flow_sample,
)
from .freeconv import EmpiricalMeasure, classical_locations, fc_density, solve_state
from .linalg import SpectralDomain, eigendecompose, load_matrix, save_matrix
from .momentflow import ConfigurationSpace, MomentFunction, evolve_master
from . import stats as st

SUITES = ("sample", "flow", "fc", "momentflow", "verify")

_REQUIRED = {
    "sample": ("model", "n", "p"),
    "flow": ("variant", "t"),
    "fc": ("t", "grid"),
    "momentflow": ("n_sites", "n_particles", "t0", "t1", "dt", "init"),
    "verify": ("kind",),
}

_VERIFY_KINDS = ("normality", "que", "rigidity", "locallaw", "general")


@dataclass(frozen=True)
class ExperimentConfig:
    """A named, seeded, suite-tagged experiment description."""

    name: str
    suite: str
    parameters: dict
    seeds: list
    output_dir: str
    report_name: str = "report.json"

    def validate(self):
        if self.suite not in SUITES:
            raise ConfigError(f"unknown suite {self.suite!r}", key="suite")
        if not self.seeds:
            raise ConfigError("seeds must be nonempty", key="seeds")
        for key in _REQUIRED[self.suite]:
            if key not in self.parameters:
                raise ConfigError(
                    f"suite {self.suite!r} needs parameter {key!r}", key=key
                )
        if self.suite == "verify":
            kind = self.parameters["kind"]
            if kind not in _VERIFY_KINDS:
                raise ConfigError(f"unknown verify kind {kind!r}", key="kind")

    def canonical_json(self):
        payload = {
            "name": self.name,
            "suite": self.suite,
            "parameters": self.parameters,
            "seeds": list(self.seeds),
            "report_name": self.report_name,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        unknown = set(raw) - {
            "name", "suite", "parameters", "seeds", "output_dir", "report_name",
        }
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        for key in ("suite", "seeds", "output_dir"):
            if key not in raw:
                raise ConfigError(f"config needs key {key!r}", key=key)
        seeds = raw["seeds"]
        if isinstance(seeds, dict):
            seeds = list(range(seeds["base"], seeds["base"] + seeds["count"]))
        cfg = cls(
            name=raw.get("name", "experiment"),
            suite=raw["suite"],
            parameters=raw.get("parameters", {}),
            seeds=seeds,
            output_dir=raw["output_dir"],
            report_name=raw.get("report_name", "report.json"),
        )
        cfg.validate()
        return cfg


@dataclass
class RunResult:
    """Everything a finished experiment produced."""

    config: ExperimentConfig
    config_hash: str
    per_seed: list
    aggregate: dict
    wall_clock: float
    version: str = __version__

    @property
    def failed_seeds(self):
        return [r for r in self.per_seed if "error" in r]

    @property
    def passed(self):
        return bool(self.aggregate.get("pass", True)) and not self.failed_seeds


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    return obj


def _atomic_write_json(path, payload):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(_jsonable(payload), fh, sort_keys=True, indent=1)
        fh.write("\n")
    os.replace(tmp, path)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
    return str(path)


def thread_cap():
    raw = os.environ.get("RMTLAB_THREADS", "")
    if raw.strip():
        try:
            cap = int(raw)
        except ValueError:
            raise ConfigError("RMTLAB_THREADS must be an integer") from None
        return max(1, cap)
    return os.cpu_count() or 1


# -- per-task work -------------------------------------------------------------


def _task_list(config):
    """One task per seed; the que trend fans out over (N, seed) pairs."""
    if config.suite == "verify" and config.parameters["kind"] == "que":
        sizes = config.parameters.get("n_list") or [config.parameters["n"]]
        return [
            {"seed": s, "n": int(n)} for n in sizes for s in config.seeds
        ]
    return [{"seed": s} for s in config.seeds]


def _run_task(suite, parameters, task, output_dir):
    seed = task["seed"]
    if suite == "sample":
        return _seed_sample(parameters, seed, output_dir)
    if suite == "flow":
        return _seed_flow(parameters, seed, output_dir)
    if suite == "fc":
        return _seed_fc(parameters, seed, output_dir)
    if suite == "momentflow":
        return _seed_momentflow(parameters, seed, output_dir)
    kind = parameters["kind"]
    if kind == "normality":
        return _seed_normality(parameters, seed)
    if kind == "que":
        return _seed_que(parameters, task["n"], seed)
    if kind in ("rigidity", "locallaw"):
        return _seed_locallaw(parameters, seed, kind)
    return _seed_general(parameters, seed)


def _pool_run(config, tasks):
    workers = min(thread_cap(), len(tasks))
    records = [None] * len(tasks)

    def finish(idx, outcome):
        records[idx] = outcome

    if workers <= 1:
        for idx, task in enumerate(tasks):
            finish(idx, _guarded_task(config.suite, config.parameters, task,
                                      config.output_dir))
        return records
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [
            pool.submit(_guarded_task, config.suite, config.parameters, task,
                        config.output_dir)
            for task in tasks
        ]
        for idx, fut in enumerate(futures):
            finish(idx, fut.result())
    return records


def _guarded_task(suite, parameters, task, output_dir):
    try:
        record = _run_task(suite, parameters, task, output_dir)
        record.update(task)
        return _jsonable(record)
    except Exception as exc:  # per-seed failures become records, not crashes
        failure = {"error": f"{type(exc).__name__}: {exc}"}
        failure.update(task)
        return _jsonable(failure)


def run_experiment(config):
    """Run every seed task, aggregate, and persist the report atomically.

    Per-seed artifacts and figures land in ``config.output_dir``; the
    aggregate report (named by ``config.report_name``) is written last via a
    rename, so an interrupted run never leaves a parseable-but-incomplete
    report. Failed seeds are recorded per seed and surfaced on the result.
    """
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    config_file = Path(config.report_name).stem + ".config.json"
    persisted = json.loads(config.canonical_json())
    persisted["config_hash"] = config.hash()
    _atomic_write_json(out / config_file, persisted)

    tasks = _task_list(config)
    records = _pool_run(config, tasks)

    good = [r for r in records if "error" not in r]
    aggregate = _aggregate(config, good, out) if good else {"pass": False}
    aggregate["n_failed_seeds"] = len(records) - len(good)
    wall = time.time() - started

    report = {
        "name": config.name,
        "suite": config.suite,
        "config_hash": config.hash(),
        "version": __version__,
        "parameters": config.parameters,
        "seeds": list(config.seeds),
        "per_seed": records,
        "aggregate": aggregate,
        "wall_clock_seconds": wall,
    }
    _atomic_write_json(out / config.report_name, report)
    return RunResult(
        config=config,
        config_hash=config.hash(),
        per_seed=records,
        aggregate=aggregate,
        wall_clock=wall,
    )


# -- sample / flow / fc / momentflow suites ------------------------------------


def _seed_sample(params, seed, output_dir):
    model = params["model"]
    n, p = int(params["n"]), params["p"]
    ens = EnsembleParams(N=n, p=p)
    if model == "er":
        sample = sample_er(ens, seed)
    elif model == "regular":
        sample = sample_regular(ens, seed, method=params.get("method", "auto"))
    else:
        raise ParameterError(f"unknown sample model {model!r}")
    name = params.get("out_file") or f"adjacency_seed{seed}.mat"
    path = Path(name) if os.path.isabs(name) else Path(output_dir) / name
    save_matrix(path, sample.edges)
    return {
        "file": str(path),
        "edge_count": int(sample.edges.sum() / 2),
        "model": model,
    }


def _load_input_matrix(params, seed):
    if "in_file" in params:
        return load_matrix(params["in_file"])
    model = params.get("model", "goe")
    n = int(params["n"])
    if model == "er":
        return normalize_er(sample_er(EnsembleParams(N=n, p=params["p"]), seed))
    if model == "regular":
        return normalize_regular(
            sample_regular(EnsembleParams(N=n, p=params["p"]), seed)
        )
    return sample_goe(n, seed)


def _seed_flow(params, seed, output_dir):
    h0 = _load_input_matrix(params, seed)
    t = float(params["t"])
    variant = params["variant"]
    if variant == "additive":
        h_t = dbm_exact_sample(h0, t, seed)
    elif variant == "ou":
        h_t = ou_flow_sample(h0, t, float(params.get("f", 0.0)), seed)
    elif variant == "constrained":
        h_t = constrained_flow_regular(h0, t, seed)
    else:
        raise ParameterError(f"unknown flow variant {variant!r}")
    name = params.get("out_file") or f"flow_seed{seed}.mat"
    path = Path(name) if os.path.isabs(name) else Path(output_dir) / name
    save_matrix(path, h_t)
    record = {
        "file": str(path),
        "entry_mean": float(np.mean(h_t)),
        "entry_var": float(np.var(h_t)),
    }
    if params.get("trajectory"):
        dt = float(params.get("dt", 1e-4))
        traj = integrate_eigen_sde(eigendecompose(h0), t, dt, seed)
        csv_path = Path(output_dir) / f"trajectory_seed{seed}.csv"
        n = h0.shape[0]
        write_csv(
            csv_path,
            ["time"] + [f"lambda_{k + 1}" for k in range(n)],
            [[traj.times[i]] + list(traj.lambdas[i]) for i in range(len(traj.times))],
        )
        plotting.render_trajectory(
            traj.times, traj.lambdas, Path(output_dir) / f"trajectory_seed{seed}.png"
        )
        record["trajectory"] = str(csv_path)
        record["halvings"] = traj.halvings
    return record


def _fc_atoms(params, seed):
    if "atoms_file" in params:
        return np.loadtxt(params["atoms_file"]).ravel()
    if "atoms" in params:
        return np.asarray(params["atoms"], dtype=float)
    h = _load_input_matrix(params, seed)
    return eigendecompose(h).eigenvalues


def _seed_fc(params, seed, output_dir):
    atoms = _fc_atoms(params, seed)
    mu = EmpiricalMeasure(atoms)
    t = float(params["t"])
    grid = params["grid"]
    energies = np.linspace(
        grid["E0"] - grid["r"], grid["E0"] + grid["r"], int(grid["n_e"])
    )
    etas = np.geomspace(grid["eta_min"], grid["eta_max"], int(grid["n_eta"]))
    ee, hh = np.meshgrid(energies, etas)
    state = solve_state(mu, t, ee + 1j * hh)
    gamma = classical_locations(mu, t)
    rho = fc_density(mu, t, energies)

    out = Path(output_dir)
    write_csv(
        out / f"density_seed{seed}.csv",
        ["E", "density"],
        list(zip(energies.tolist(), rho.tolist())),
    )
    plotting.render_density(
        energies, rho, out / f"density_seed{seed}.png", gamma=gamma.gamma
    )
    return {
        "t": t,
        "grid": grid,
        "m_re": state.solutions.real.tolist(),
        "m_im": state.solutions.imag.tolist(),
        "residual_max": state.residual_max,
        "gamma": gamma.gamma.tolist(),
    }


def _momentflow_initial(params, space):
    init = params["init"]
    if init == "flat":
        return MomentFunction(space=space, values=np.ones(space.size))
    if isinstance(init, str) and init.startswith("delta:"):
        idx = int(init.split(":", 1)[1])
        values = np.zeros(space.size)
        values[idx] = 1.0
        return MomentFunction(space=space, values=values)
    raise ParameterError(f"unknown momentflow init {init!r}")


def _momentflow_path(params):
    if "lambda_path_file" in params:
        data = np.loadtxt(params["lambda_path_file"], delimiter=",", skiprows=1)
        data = np.atleast_2d(data)
        return (data[:, 0], data[:, 1:])
    return np.asarray(params["lambdas"], dtype=float)


def _seed_momentflow(params, seed, output_dir):
    space = ConfigurationSpace(int(params["n_sites"]), int(params["n_particles"]))
    f0 = _momentflow_initial(params, space)
    path = _momentflow_path(params)
    ell = params.get("ell")
    f1 = evolve_master(
        f0,
        path,
        float(params["t0"]),
        float(params["t1"]),
        float(params["dt"]),
        ell=int(ell) if ell else None,
    )
    pi = space.equilibrium()
    out = Path(output_dir)
    write_csv(
        out / f"moments_seed{seed}.csv",
        ["state_index"]
        + [f"eta_{k + 1}" for k in range(space.n_sites)]
        + ["value"],
        [
            [i] + list(map(int, space.states[i])) + [float(f1.values[i])]
            for i in range(space.size)
        ],
    )
    return {
        "states": space.size,
        "pi_mass": float(pi @ f1.values),
        "value_min": float(np.min(f1.values)),
        "value_max": float(np.max(f1.values)),
        "values": f1.values.tolist(),
    }


# -- verify suites --------------------------------------------------------------


def _verify_common(params):
    n = int(params["n"])
    kappa = float(params.get("kappa", 0.1))
    q = unit_vector_perp_flat(n, int(params.get("q_seed", 1)))
    return n, kappa, q


def _seed_normality(params, seed):
    n, kappa, q = _verify_common(params)
    window = st.bulk_indices(n, kappa)
    count = int(params.get("n_indices", 40))
    picks = window[np.linspace(0, window.size - 1, count).astype(int)]
    overlaps = st.projection_single(
        params["model"],
        n,
        params["p"],
        picks,
        seed,
        t=float(params.get("t", 0.0)),
        q=q,
    )
    return {"overlaps": overlaps.tolist(), "indices": picks.tolist()}


def _seed_que(params, n, seed):
    p = params.get("p")
    if p is None:
        p = float(n) ** float(params.get("p_exponent", 0.55))
    kappa = float(params.get("kappa", 0.1))
    h = normalize_er(sample_er(EnsembleParams(N=n, p=p), seed))
    decomp = eigendecompose(h)
    a = st.alternating_weights(n)
    window = st.bulk_indices(n, kappa)
    vals = [abs(st.que_statistic(decomp.eigenvectors[:, k], a)) for k in window]
    return {"median_abs": float(np.median(vals)), "p": float(p)}


def _seed_locallaw(params, seed, kind):
    n, kappa, q = _verify_common(params)
    t = float(params.get("t", 0.3))
    domain = SpectralDomain(
        E0=float(params.get("E0", 0.0)),
        r=float(params.get("r", 1.5)),
        kappa=kappa,
        eta_min=float(
            params.get("eta_min", (n ** float(params.get("psi_exponent", 0.1))) ** 4 / n)
        ),
        eta_max=float(params.get("eta_max", 0.8)),
        psi_exponent=float(params.get("psi_exponent", 0.1)),
    )
    lam0 = eigendecompose(sample_goe(n, seed)).eigenvalues
    mu0 = EmpiricalMeasure(lam0)
    h_t = dbm_exact_sample(np.diag(lam0), t, seed + 7_000_000)
    decomp = eigendecompose(h_t)

    record = {}
    gamma = classical_locations(mu0, t)
    record["rigidity_error"] = st.rigidity_error(decomp, gamma, domain)
    if kind == "locallaw":
        ll = st.local_law_error(decomp, mu0, t, domain)
        iso = st.isotropic_law_error(decomp, q, q**2, mu0, t, domain)
        record["local_law_ratio"] = ll["max_ratio"]
        record["isotropic_ratio"] = iso["max_ratio"]
        record["eta_profile"] = [
            [
                float(iso["etas"][row, 0]),
                float(np.max(iso["error"][row])),
                float(np.min(iso["envelope"][row])),
            ]
            for row in range(iso["etas"].shape[0])
        ]
    return record


def _seed_general(params, seed):
    n, _, q = _verify_common(params)
    h = _load_input_matrix(params, seed)
    decomp = eigendecompose(h)
    report = st.general_check(
        decomp,
        q,
        float(params.get("c_exponent", 0.2)),
        float(params.get("bound_constant", 10.0)),
    )
    return report


# -- aggregation -----------------------------------------------------------------


def _aggregate(config, records, out):
    suite = config.suite
    if suite == "verify":
        kind = config.parameters["kind"]
        if kind == "normality":
            return _aggregate_normality(config, records, out)
        if kind == "que":
            return _aggregate_que(config, records, out)
        if kind in ("rigidity", "locallaw"):
            return _aggregate_locallaw(config, records, out, kind)
        return _aggregate_general(records)
    if suite == "momentflow":
        ok = all(abs(r["pi_mass"] - records[0]["pi_mass"]) < 1e-8 for r in records)
        return {"pass": ok, "pi_mass": records[0]["pi_mass"]}
    if suite == "fc":
        return {
            "pass": all(r["residual_max"] <= 1e-12 for r in records),
            "residual_max": max(r["residual_max"] for r in records),
        }
    return {"pass": True, "count": len(records)}


def _aggregate_normality(config, records, out):
    params = config.parameters
    values = np.array([r["overlaps"] for r in records])
    indices = np.array(records[0]["indices"])
    samples = st.ProjectionSampleSet(values=values, indices=indices)
    moments = st.moment_test(samples, degrees=(1, 2, 3))
    ks_stat, ks_p = st.ks_test_chisq(samples)
    pairs = [(2 * k, 2 * k + 1) for k in range(min(5, indices.size // 2))]
    joint = st.joint_moment_test(samples, pairs=pairs)

    hist_rows = plotting.histogram_rows(samples.pooled())
    write_csv(
        out / "histogram.csv",
        ["bin_left", "bin_right", "empirical_density", "chisq1_density"],
        hist_rows,
    )
    plotting.render_histogram(
        hist_rows,
        out / "histogram.png",
        title=f"{params['model']} N={params['n']} overlaps",
    )

    deg_pass = {row["degree"]: row["pass"] for row in moments["moments"]}
    joint_pass = all(row["pass"] for row in joint["cross_moments"])
    overall = deg_pass[1] and deg_pass[2] and ks_p > 0.01 and joint_pass
    agg = {
        "pass": bool(overall),
        "moments": moments,
        "ks_statistic": ks_stat,
        "ks_pvalue": ks_p,
        "joint": joint,
        "histogram_rows": hist_rows,
        "tolerances": {
            "moment1": 0.05,
            "moment2": 0.2,
            "ks_p_threshold": 0.01,
            "joint": 0.1,
        },
    }
    if params.get("include_raw"):
        agg["samples"] = values.tolist()
    return agg


def _aggregate_que(config, records, out):
    by_n = {}
    for r in records:
        by_n.setdefault(int(r["n"]), []).append(r["median_abs"])
    sizes = sorted(by_n)
    trend = [(n, float(np.median(by_n[n]))) for n in sizes]
    decreasing = all(b[1] < a[1] for a, b in zip(trend, trend[1:]))
    write_csv(out / "trend.csv", ["N", "median_abs_statistic"], trend)
    plotting.render_trend(
        trend, out / "trend.png", title="ergodicity statistic", ylabel="median |Z|"
    )
    return {
        "pass": bool(decreasing) if len(trend) > 1 else True,
        "trend_rows": trend,
        "strictly_decreasing": bool(decreasing),
    }


def _aggregate_locallaw(config, records, out, kind):
    params = config.parameters
    n = int(params["n"])
    psi = float(n) ** float(params.get("psi_exponent", 0.1))
    rig_cap = float(params.get("rigidity_cap", 10.0)) * psi
    rig = np.array([r["rigidity_error"] for r in records])
    rig_frac = float(np.mean(rig <= rig_cap))
    agg = {
        "psi": psi,
        "rigidity_errors": rig.tolist(),
        "rigidity_cap": rig_cap,
        "rigidity_pass_fraction": rig_frac,
        "pass": rig_frac >= 0.9,
        "tolerances": {"rigidity_cap": rig_cap, "seed_fraction": 0.9},
    }
    if kind == "locallaw":
        iso = np.array([r["isotropic_ratio"] for r in records])
        iso_frac = float(np.mean(iso <= 1.0))
        profiles = np.array([r["eta_profile"] for r in records])
        mean_profile = profiles.mean(axis=0)
        rows = sorted(
            [(float(a), float(b), float(c)) for a, b, c in mean_profile]
        )
        write_csv(out / "envelope.csv", ["eta", "error", "envelope"], rows)
        plotting.render_envelope(rows, out / "envelope.png")
        agg.update(
            {
                "isotropic_ratios": iso.tolist(),
                "isotropic_pass_fraction": iso_frac,
                "local_law_ratios": [r["local_law_ratio"] for r in records],
                "envelope_rows": rows,
                "pass": bool(agg["pass"] and iso_frac >= 0.9),
            }
        )
    return agg


def _aggregate_general(records):
    frac = float(np.mean([bool(r["general"]) for r in records]))
    return {
        "pass": frac >= 0.95,
        "general_fraction": frac,
        "delocalized_fraction": float(np.mean([bool(r["delocalized"]) for r in records])),
        "non_accumulating_fraction": float(
            np.mean([bool(r["non_accumulating"]) for r in records])
        ),
    }


# -- plot-ready data --------------------------------------------------------------


def emit_plot_data(result, kind, path=None):
    """Write one columnar CSV from a finished run.

    Kinds: "histogram" (bin_left, bin_right, empirical_density,
    chisq1_density), "envelope" (eta, error, envelope; eta ascending), and
    "trend" (N, statistic). Raises if the aggregate lacks the data.
    """
    agg = result.aggregate
    out = Path(result.config.output_dir)
    if kind == "histogram":
        rows = agg.get("histogram_rows")
        header = ["bin_left", "bin_right", "empirical_density", "chisq1_density"]
    elif kind == "envelope":
        rows = agg.get("envelope_rows")
        if rows is not None:
            rows = sorted(rows)
        header = ["eta", "error", "envelope"]
    elif kind == "trend":
        rows = agg.get("trend_rows")
        header = ["N", "statistic"]
    else:
        raise ParameterError(f"unknown plot kind {kind!r}")
    if rows is None:
        raise ParameterError(f"result holds no {kind!r} data (incomplete run?)")
    path = path or out / f"{kind}.csv"
    return write_csv(path, header, rows)


def raise_on_failure(result):
    """Map a finished run onto the error taxonomy for exit codes."""
    if result.failed_seeds:
        messages = "; ".join(str(r["error"]) for r in result.failed_seeds[:3])
        raise ParameterError(
            f"{len(result.failed_seeds)} seed task(s) failed: {messages}"
        )
    if not result.aggregate.get("pass", True):
        raise StatisticalFailure(
            f"suite {result.config.suite!r} failed its acceptance thresholds"
        )
