"""Command-line orchestration: assemble -> ensemble -> train -> oracle ->
validate -> report, plus a gradient fidelity check.

Every artifact filename carries a hash of the configuration sections it
depends on, which makes re-runs with an identical config no-ops and runs
with edited configs produce fresh artifacts next to the old ones.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:          # Python < 3.11
    import tomli as tomllib

from . import bilinear_benchmark as bench
from .core_types import (ConfigurationError, EnsembleSet, PenaltyConfig,
                         make_uniform_grid)
from .learning import (TraceLogger, ensemble_objective,
                       ensemble_objective_gradient, cost_to_go)
from .metrics_report import (LearnedRollout, MetricsReport, OracleReference,
                             compute_metrics, emit_tables)
from .ode_solvers import NodeData, integrate_adjoint, integrate_closed_loop_ensemble
from .openloop_oracle import (OracleTriple, load_oracle_triples,
                              save_oracle_triples, solve_open_loop_ensemble)
from .optimize import BBConfig, bb_minimize
from .value_models import ResidualNetModel, load_theta, save_theta

DEFAULTS = {
    "problem": {"kind": "bilinear", "n_modes": 10, "T": 2.0, "beta": 0.01,
                "alpha": 0.25},
    "grid": {"n_steps": 100},
    "model": {"family": "resnet", "hidden": [60], "activation": "sin_plus_cos",
              "init_seed": 0},
    "penalty": {"gamma1": 0.0, "gamma2": 0.0, "gamma_eps": 0.0,
                "phi_terminal": "derived_T"},
    "train_bb": {"max_iters": 400, "grad_tol": 1e-6, "step_init": 0.02,
                 "step_min": 1e-12, "step_max": 100.0, "variant": "alternating",
                 "nonmonotone_window": 10},
    "oracle_bb": {"max_iters": 400, "grad_tol": 1e-6, "step_init": 0.1,
                  "step_min": 1e-12, "step_max": 1000.0,
                  "variant": "alternating", "nonmonotone_window": 10},
    "ensemble": {"total": 130, "train_count": 30, "radius": 1.0, "seed": 2024},
    "run": {"output_dir": "runs", "threads": 0},
}


class RunConfig:
    """Validated nested key-value configuration with section hashing."""

    def __init__(self, data: dict):
        cfg = {}
        for section, defaults in DEFAULTS.items():
            given = data.pop(section, {})
            if not isinstance(given, dict):
                raise ConfigurationError(f"section [{section}] must be a table")
            merged = dict(defaults)
            for key, value in given.items():
                if key not in defaults:
                    raise ConfigurationError(f"unknown key '{key}' in [{section}]")
                merged[key] = value
            cfg[section] = merged
        if data:
            raise ConfigurationError(f"unknown config sections: {sorted(data)}")
        if cfg["problem"]["kind"] not in ("bilinear",):
            raise ConfigurationError("only the bilinear benchmark is wired to the CLI")
        if cfg["model"]["family"] != "resnet":
            raise ConfigurationError("CLI training supports the resnet family")
        self.cfg = cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "rb") as fh:
            return cls(tomllib.load(fh))

    def __getitem__(self, section):
        return self.cfg[section]

    def section_hash(self, *sections) -> str:
        payload = json.dumps({s: self.cfg[s] for s in sorted(sections)},
                             sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:12]

    # the dependency chains behind each artifact
    def hash_benchmark(self):
        return self.section_hash("problem")

    def hash_ensemble(self):
        return self.section_hash("problem", "ensemble")

    def hash_train(self):
        return self.section_hash("problem", "grid", "model", "penalty",
                                 "train_bb", "ensemble")

    def hash_oracle(self):
        return self.section_hash("problem", "grid", "ensemble", "oracle_bb")

    def hash_validate(self):
        return self.section_hash("problem", "grid", "model", "penalty",
                                 "train_bb", "ensemble", "oracle_bb")


def _threads(config, override=None):
    if override:
        return int(override)
    t = int(config["run"]["threads"])
    return t if t > 0 else None


def _bb_from(section) -> BBConfig:
    return BBConfig(max_iters=int(section["max_iters"]),
                    grad_tol=float(section["grad_tol"]),
                    step_init=float(section["step_init"]),
                    step_min=float(section["step_min"]),
                    step_max=float(section["step_max"]),
                    variant=section["variant"],
                    nonmonotone_window=int(section["nonmonotone_window"]))


def _build_problem(config):
    prob = config["problem"]
    bspec = bench.assemble(int(prob["n_modes"]))
    spec = bench.dynamics_callbacks(bspec, T=float(prob["T"]),
                                    beta=float(prob["beta"]),
                                    alpha=float(prob["alpha"]))
    return bspec, spec


def _build_model(config, spec):
    return ResidualNetModel.for_problem(spec, hidden=tuple(config["model"]["hidden"]))


def _grid(config, spec):
    return make_uniform_grid(spec.T, int(config["grid"]["n_steps"]))


def _penalties(config) -> PenaltyConfig:
    pen = config["penalty"]
    return PenaltyConfig(gamma1=float(pen["gamma1"]), gamma2=float(pen["gamma2"]),
                         gamma_eps=float(pen["gamma_eps"]),
                         phi_terminal=pen["phi_terminal"])


def _ensure_out(args, config):
    out = args.out or config["run"]["output_dir"]
    os.makedirs(out, exist_ok=True)
    return out


def _ensemble_path(out, config):
    return os.path.join(out, f"ensemble_{config.hash_ensemble()}.json")


def _theta_path(out, config):
    return os.path.join(out, f"theta_{config.hash_train()}.json")


def _oracle_dir(out, config):
    return os.path.join(out, f"oracle_{config.hash_oracle()}")


def _require(path, producer):
    if not os.path.exists(path):
        raise ConfigurationError(
            f"missing artifact {path}; run `hjbfl {producer}` with this config first")


def _load_ensemble(path) -> EnsembleSet:
    with open(path) as fh:
        doc = json.load(fh)
    return EnsembleSet(points=np.asarray(doc["points"]),
                       weights=np.asarray(doc["weights"]),
                       tags=tuple(doc["tags"]), seed=int(doc["seed"]),
                       center=np.asarray(doc["center"]),
                       radius=float(doc["radius"]))


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_assemble(args, config):
    out = _ensure_out(args, config)
    path = os.path.join(out, f"benchmark_{config.hash_benchmark()}.json")
    if os.path.exists(path) and not args.force:
        print(f"assemble: cached at {path}")
        return 0
    bspec, _ = _build_problem(config)
    bench.save_cache(bspec, path)
    print(f"assemble: wrote {path}")
    return 0


def cmd_ensemble(args, config):
    out = _ensure_out(args, config)
    path = _ensemble_path(out, config)
    if os.path.exists(path) and not args.force:
        print(f"ensemble: cached at {path}")
        return 0
    bspec, _ = _build_problem(config)
    ens_cfg = config["ensemble"]
    seed = int(args.seed) if args.seed is not None else int(ens_cfg["seed"])
    ens = bench.generate_ensemble(bspec.Ybar0, total=int(ens_cfg["total"]),
                                  radius=float(ens_cfg["radius"]), seed=seed,
                                  train_count=int(ens_cfg["train_count"]))
    doc = {"points": ens.points.tolist(), "weights": ens.weights.tolist(),
           "tags": list(ens.tags), "seed": ens.seed,
           "center": ens.center.tolist(), "radius": ens.radius}
    with open(path, "w") as fh:
        json.dump(doc, fh)
    print(f"ensemble: wrote {path} ({ens.n_train} train / "
          f"{len(ens.tags) - ens.n_train} validation)")
    return 0


def cmd_train(args, config):
    out = _ensure_out(args, config)
    theta_path = _theta_path(out, config)
    if os.path.exists(theta_path) and not args.force:
        print(f"train: cached at {theta_path}")
        return 0
    ens_path = _ensemble_path(out, config)
    _require(ens_path, "ensemble")
    ens = _load_ensemble(ens_path)
    _, spec = _build_problem(config)
    model = _build_model(config, spec)
    grid = _grid(config, spec)
    pen = _penalties(config)
    threads = _threads(config, args.threads)
    rng = np.random.default_rng(int(config["model"]["init_seed"]))
    theta0 = model.default_theta(rng)
    h = config.hash_train()
    trace_csv = os.path.join(out, f"train_trace_{h}.csv")
    trace_jsonl = os.path.join(out, f"train_trace_{h}.jsonl")

    logger = TraceLogger(trace_jsonl)

    def fun_grad(th):
        try:
            value, grad, bundle = ensemble_objective_gradient(
                spec, pen, model, th, ens, grid, threads=threads)
        except (RuntimeError, FloatingPointError):
            return np.inf, None
        fun_grad.last_bundle = bundle
        return value, grad

    def f_only(th):
        try:
            value, _ = ensemble_objective(spec, pen, model, th, ens, grid,
                                          threads=threads)
            return value
        except (RuntimeError, FloatingPointError):
            return np.inf

    def callback(k, x, f, gnorm):
        comp = getattr(fun_grad, "last_bundle", None)
        logger.log(k, f, gnorm, comp.components() if comp else None)

    theta, trace = bb_minimize(fun_grad, theta0, _bb_from(config["train_bb"]),
                               f_only=f_only, callback=callback)
    logger.close()
    trace.to_csv(trace_csv)
    save_theta(theta_path, model, theta)
    print(f"train: J_N={trace.values[-1]:.6f} |grad|={trace.grad_norms[-1]:.3e} "
          f"after {trace.iters[-1]} iterations; wrote {theta_path}")
    return 0


def cmd_oracle(args, config):
    out = _ensure_out(args, config)
    odir = _oracle_dir(out, config)
    done = os.path.join(odir, "summary.json")
    if os.path.exists(done) and not args.force:
        print(f"oracle: cached at {odir}")
        return 0
    ens_path = _ensemble_path(out, config)
    _require(ens_path, "ensemble")
    ens = _load_ensemble(ens_path)
    _, spec = _build_problem(config)
    grid = _grid(config, spec)
    triples = solve_open_loop_ensemble(spec, ens.points, grid,
                                       _bb_from(config["oracle_bb"]))
    save_oracle_triples(odir, triples)
    J = np.array([t.J for t in triples])
    print(f"oracle: {len(triples)} members, mean J = {J.mean():.6f}; wrote {odir}")
    return 0


def _learned_rollouts(spec, model, theta, ens, grid, oracle):
    """Closed-loop rollouts + model evaluations for every ensemble member."""
    ys = integrate_closed_loop_ensemble(spec, model, theta, ens.points, grid)
    learned, reference = [], []
    from .core_types import ControlTrajectory
    from .learning import running_cost
    for i, y in enumerate(ys):
        V, vy, vyy = model.eval_nodes_x(theta, grid.nodes, y.values)
        nd = NodeData(spec, model, theta, y, model_xcache=(vy, vyy))
        u = ControlTrajectory(grid, nd.F)
        p = integrate_adjoint(spec, model, theta, y, node_data=nd)
        learned.append(LearnedRollout(
            y=y, p=p, u=u, J=running_cost(spec, y, u),
            J_t=cost_to_go(spec, y, u), v_model=V, vy_model=vy))
        tr = oracle[i]
        Vo, vyo = model.value_grad_y_batch(theta, grid.nodes, tr.y.values)
        reference.append(OracleReference(
            y=tr.y, u=tr.u, p=tr.p, J=tr.J, J_t=cost_to_go(spec, tr.y, tr.u),
            v_model=Vo, vy_model=vyo))
    return learned, reference


def cmd_validate(args, config):
    out = _ensure_out(args, config)
    theta_path = _theta_path(out, config)
    odir = _oracle_dir(out, config)
    _require(theta_path, "train")
    _require(os.path.join(odir, "summary.json"), "oracle")
    ens_path = _ensemble_path(out, config)
    _require(ens_path, "ensemble")
    ens = _load_ensemble(ens_path)
    _, spec = _build_problem(config)
    model = _build_model(config, spec)
    theta = load_theta(theta_path, model)
    grid = _grid(config, spec)
    oracle = load_oracle_triples(odir)
    learned, reference = _learned_rollouts(spec, model, theta, ens, grid, oracle)
    pen = config["penalty"]
    h = config.hash_validate()
    for split in ("train", "validation"):
        idx = [i for i, t in enumerate(ens.tags) if t == split]
        rep = compute_metrics([learned[i] for i in idx],
                              [reference[i] for i in idx], split,
                              gamma1=float(pen["gamma1"]),
                              gamma2=float(pen["gamma2"]))
        path = os.path.join(out, f"metrics_{h}_{split}.json")
        rep.to_json(path, config_hash=h)
        print(f"validate[{split}]: Err_J_avg={rep.err_J_avg:.4%} "
              f"Err_V={rep.err_V:.4%} d_V={rep.d_V:.4%}; wrote {path}")
    return 0


def cmd_report(args, configs):
    reports = {"train": [], "validation": []}
    out = None
    for config in configs:
        out = _ensure_out(args, config)
        h = config.hash_validate()
        for split in reports:
            path = os.path.join(out, f"metrics_{h}_{split}.json")
            _require(path, "validate")
            reports[split].append(MetricsReport.from_json(path))
    tag = configs[0].hash_validate()
    for split, reps in reports.items():
        md, _ = emit_tables(reps,
                            markdown_path=os.path.join(out, f"report_{tag}_{split}.md"),
                            csv_path=os.path.join(out, f"report_{tag}_{split}.csv"))
        print(f"# {split}\n{md}")
    return 0


def cmd_gradcheck(args, config):
    _, spec = _build_problem(config)
    model = _build_model(config, spec)
    grid = _grid(config, spec)
    pen = _penalties(config)
    threads = _threads(config, args.threads)
    ens_cfg = config["ensemble"]
    bspec, _ = _build_problem(config)
    seed = int(args.seed) if args.seed is not None else int(ens_cfg["seed"])
    ens = bench.generate_ensemble(bspec.Ybar0, total=int(ens_cfg["train_count"]),
                                  radius=float(ens_cfg["radius"]), seed=seed,
                                  train_count=int(ens_cfg["train_count"]))
    rng = np.random.default_rng(seed)
    theta = model.default_theta(rng)
    value, grad, _ = ensemble_objective_gradient(spec, pen, model, theta, ens,
                                                 grid, threads=threads)
    gnorm = np.linalg.norm(grad)
    fd_step = 1e-5
    tol = 1e-3
    worst = 0.0
    for j in range(args.dirs):
        d = rng.standard_normal(model.n_params)
        d /= np.linalg.norm(d)
        fp, _ = ensemble_objective(spec, pen, model, theta + fd_step * d, ens,
                                   grid, threads=threads)
        fm, _ = ensemble_objective(spec, pen, model, theta - fd_step * d, ens,
                                   grid, threads=threads)
        fd = (fp - fm) / (2.0 * fd_step)
        an = float(grad @ d)
        rel = abs(fd - an) / max(abs(fd), abs(an), gnorm)
        worst = max(worst, rel)
        status = "ok" if rel <= tol else "FAIL"
        print(f"direction {j}: analytic {an:+.8e}  fd {fd:+.8e}  rel {rel:.3e} {status}")
    print(f"gradcheck: worst relative error {worst:.3e} (tolerance {tol:g})")
    return 0 if worst <= tol else 2


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="hjbfl",
        description="Feedback-law learning pipeline for control-affine systems")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("assemble", "ensemble", "train", "oracle", "validate",
                 "report", "gradcheck"):
        p = sub.add_parser(name)
        p.add_argument("--config", action="append", required=True,
                       help="TOML config file (repeatable for `report`)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", default=None, type=int, help="seed override")
        p.add_argument("--threads", default=None, type=int)
        p.add_argument("--force", action="store_true",
                       help="recompute even if a cached artifact exists")
        if name == "gradcheck":
            p.add_argument("--dirs", default=10, type=int,
                           help="number of random directions")
    args = parser.parse_args(argv)

    try:
        configs = [RunConfig.load(path) for path in args.config]
        if args.command == "report":
            return cmd_report(args, configs)
        if len(configs) != 1:
            raise ConfigurationError(f"`{args.command}` takes exactly one --config")
        handler = {
            "assemble": cmd_assemble, "ensemble": cmd_ensemble,
            "train": cmd_train, "oracle": cmd_oracle,
            "validate": cmd_validate, "gradcheck": cmd_gradcheck,
        }[args.command]
        return handler(args, configs[0])
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:   # runtime failures keep exit code 1
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
