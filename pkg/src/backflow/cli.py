"""Command-line front end: ``backflow {gamma,baseline,oct,train,eval,report}``.

Runs are described by a TOML file of flat dotted keys, for example::

    seed = 42
    output_dir = "runs/powell"
    model.gamma_coupling = 5.0
    method.name = "powell"
    method.powell.max_outer_iterations = 50

Every data file a run writes is a deterministic function of the resolved
configuration; wall-clock timings go to a separate ``timing.json``.
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .agents.common import evaluate_policy, load_policy, save_policy
from .agents.ppo import PPOConfig, default_env_factory, ppo_train
from .agents.sac import SACConfig, sac_train
from .dynamics import PropagationConfig, ReservoirParams, decay_rate, negativity_windows
from .env import EnvConfig
from .exceptions import ConfigError, DivergenceError, PoleError, PositivityError
from .oct import BackflowObjective, OCTConfig, lbfgsb_optimize, powell_optimize
from .pulse import Pulse, random_pulse, write_pulse_csv

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("backflow")

OUTPUT_ENV_VAR = "BACKFLOW_OUTPUT_DIR"
METHODS = ("baseline", "powell", "lbfgsb", "ppo", "sac")
GAMMA_GRID = 2000

MODEL_DEFAULTS = {
    "model.gamma_coupling": 5.0,
    "model.lambda_width": 1.0,
    "model.detuning": 1.0,
    "model.horizon": 7.0,
    "model.control_bins": 70,
    "model.substeps": 20,
    "model.engine": "pseudomode",
    "model.mode_cutoff": 4,
    "model.omega_min": -5.0,
    "model.omega_max": 5.0,
}
ENV_DEFAULTS = {
    "env.alpha": 0.0,
    "env.beta": 0.0,
    "env.action_min": -5.0,
    "env.action_max": 5.0,
    "env.random_initial_amplitude": True,
}
OTHER_DEFAULTS = {
    "seed": 42,
    "method.name": "baseline",
    "method.init": "zero",
}
POWELL_KEYS = ("max_outer_iterations", "line_search_tol", "ftol", "xtol")
LBFGSB_KEYS = ("max_iterations", "memory", "fd_step", "gtol", "ftol", "initial_step",
               "max_backtracks", "armijo")


def _fields(cls):
    return tuple(f.name for f in dataclasses.fields(cls))


SUBCONFIG_KEYS = {
    "powell": POWELL_KEYS,
    "lbfgsb": LBFGSB_KEYS,
    "ppo": _fields(PPOConfig),
    "sac": _fields(SACConfig),
}


def _flatten(table, prefix=""):
    flat = {}
    for key, value in table.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def load_config(path=None, seed=None):
    """Read and validate a run config; returns a flat dict with defaults filled in."""
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = _flatten(tomllib.load(fh))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    cfg = {**MODEL_DEFAULTS, **ENV_DEFAULTS, **OTHER_DEFAULTS}
    for key, value in raw.items():
        known = key in cfg or key == "output_dir"
        parts = key.split(".")
        if len(parts) == 3 and parts[0] == "method" and parts[1] in SUBCONFIG_KEYS:
            known = parts[2] in SUBCONFIG_KEYS[parts[1]]
        if not known:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = value
    if seed is not None:
        cfg["seed"] = seed
    if cfg["method.name"] not in METHODS:
        raise ConfigError(f"method.name must be one of {METHODS}, got {cfg['method.name']!r}")
    if isinstance(cfg["seed"], bool) or not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {cfg['seed']!r}")
    for key in cfg:
        if key.startswith("method.") and key.count(".") == 2:
            block = key.split(".")[1]
            if block != cfg["method.name"]:
                raise ConfigError(f"{key} does not belong to method {cfg['method.name']!r}")
    # build every object once so that invalid values surface as config errors
    build_model(cfg)
    build_env_config(cfg)
    method_config(cfg)
    return cfg


def _canonical(cfg, keys):
    return "\n".join(f"{k} = {json.dumps(cfg[k], sort_keys=True)}" for k in sorted(keys)) + "\n"


def config_hash(cfg):
    """sha256 of the canonical text of the resolved config (output location excluded)."""
    keys = [k for k in cfg if k != "output_dir"]
    return hashlib.sha256(_canonical(cfg, keys).encode()).hexdigest()


def model_hash(cfg):
    keys = [k for k in cfg if k.startswith("model.")]
    return hashlib.sha256(_canonical(cfg, keys).encode()).hexdigest()


def build_model(cfg):
    """``(ReservoirParams, PropagationConfig, bounds)`` from the model block."""
    try:
        params = ReservoirParams(cfg["model.gamma_coupling"], cfg["model.lambda_width"],
                                 cfg["model.detuning"])
        prop = PropagationConfig(cfg["model.horizon"], cfg["model.control_bins"],
                                 cfg["model.substeps"], cfg["model.engine"],
                                 cfg["model.mode_cutoff"])
        bounds = (cfg["model.omega_min"], cfg["model.omega_max"])
        Pulse(np.zeros(1) + min(max(0.0, bounds[0]), bounds[1]), prop.horizon, bounds)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model block: {exc}") from exc
    return params, prop, bounds


def build_env_config(cfg, random_initial=None):
    params, prop, bounds = build_model(cfg)
    try:
        return EnvConfig(params, prop, bounds, (cfg["env.action_min"], cfg["env.action_max"]),
                         cfg["env.alpha"], cfg["env.beta"],
                         bool(cfg["env.random_initial_amplitude"] if random_initial is None
                              else random_initial),
                         min(max(0.0, bounds[0]), bounds[1]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid env block: {exc}") from exc


def method_config(cfg):
    """The optimizer or trainer config for ``method.name`` (``None`` for baseline)."""
    name = cfg["method.name"]
    prefix = f"method.{name}."
    kwargs = {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}
    if "hidden_sizes" in kwargs:
        kwargs["hidden_sizes"] = tuple(kwargs["hidden_sizes"])
    if cfg["method.init"] not in ("zero", "random"):
        raise ConfigError(f"method.init must be 'zero' or 'random', got {cfg['method.init']!r}")
    try:
        if name in ("powell", "lbfgsb"):
            return OCTConfig(**kwargs)
        if name == "ppo":
            return PPOConfig(**kwargs)
        if name == "sac":
            return SACConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} block: {exc}") from exc
    return None


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_trajectory(path, record):
    write_csv(path, ["k", "t", "Omega", "D", "Ddot", "gamma", "n_loc"], record.rows())


def read_trajectory(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {key: np.array([float(r[key]) for r in rows]) for key in rows[0]}


class Run:
    """Output directory bookkeeping for one subcommand invocation."""

    def __init__(self, command, cfg, out):
        self.command = command
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files = []
        self.started = time.perf_counter()

    def path(self, name):
        self.files.append(name)
        return self.out / name

    def base_summary(self):
        return {"command": self.command, "method": self.cfg["method.name"],
                "seed": self.cfg["seed"], "config_hash": config_hash(self.cfg),
                "model_hash": model_hash(self.cfg)}

    def finish(self, summary):
        write_json(self.path("config.json"), {k: v for k, v in self.cfg.items() if k != "output_dir"})
        summary = {**self.base_summary(), **summary}
        summary["files"] = sorted(set(self.files + ["summary.json"]))
        write_json(self.out / "summary.json", summary)
        write_json(self.out / "timing.json",
                   {"wall_time_s": round(time.perf_counter() - self.started, 3)})
        logger.info("wrote %s", ", ".join(summary["files"]))
        return summary


def resolve_output_dir(args, cfg):
    if args.out:
        return args.out
    if os.environ.get(OUTPUT_ENV_VAR):
        return os.environ[OUTPUT_ENV_VAR]
    return cfg.get("output_dir") or os.path.join("runs", args.command)


def uncontrolled(cfg):
    params, prop, bounds = build_model(cfg)
    return BackflowObjective(params, prop, bounds).trajectory(np.zeros(prop.control_bins))


def cmd_gamma(cfg, out):
    run = Run("gamma", cfg, out)
    params, prop, _ = build_model(cfg)
    t = np.linspace(0.0, prop.horizon, GAMMA_GRID)
    write_csv(run.path("gamma.csv"), ["t", "gamma"], zip(t, decay_rate(params, t)))
    windows = [list(w) for w in negativity_windows(params, prop.horizon, GAMMA_GRID)]
    write_json(run.path("windows.json"), windows)
    return run.finish({"n_windows": len(windows), "regime": params.regime})


def cmd_baseline(cfg, out):
    run = Run("baseline", cfg, out)
    record = uncontrolled(cfg)
    write_trajectory(run.path("trajectory.csv"), record)
    return run.finish({"n_tot": record.n_total, "uncontrolled_n_tot": record.n_total,
                       "evaluations": 1})


def cmd_oct(cfg, out):
    name = cfg["method.name"]
    if name not in ("powell", "lbfgsb"):
        raise ConfigError(f"oct needs method.name = 'powell' or 'lbfgsb', got {name!r}")
    run = Run("oct", cfg, out)
    params, prop, bounds = build_model(cfg)
    objective = BackflowObjective(params, prop, bounds)
    if cfg["method.init"] == "random":
        x0 = random_pulse(cfg["seed"], bounds, prop.control_bins, prop.horizon).amplitudes
    else:
        x0 = np.clip(np.zeros(prop.control_bins), *bounds)
    optimize = powell_optimize if name == "powell" else lbfgsb_optimize
    x, history = optimize(objective, x0, bounds, method_config(cfg))
    history.write_csv(run.path("convergence.csv"))
    write_pulse_csv(Pulse(x, prop.horizon, bounds), run.path("pulse.csv"))
    record = objective.trajectory(x)
    write_trajectory(run.path("trajectory.csv"), record)
    base = uncontrolled(cfg).n_total
    return run.finish({"n_tot": record.n_total, "initial_n_tot": history.values[0],
                       "uncontrolled_n_tot": base, "evaluations": history.evaluations[-1],
                       "iterations": history.iterations[-1],
                       "termination_reason": history.termination_reason})


def _evaluate_and_export(run, cfg, policy):
    eval_config = build_env_config(cfg, random_initial=False)
    value, env = evaluate_policy(policy, eval_config)
    pulse = env.pulse()
    write_pulse_csv(pulse, run.path("pulse.csv"))
    params, prop, bounds = build_model(cfg)
    record = BackflowObjective(params, prop, bounds).trajectory(pulse.amplitudes)
    write_trajectory(run.path("trajectory.csv"), record)
    return value, record


def cmd_train(cfg, out):
    name = cfg["method.name"]
    if name not in ("ppo", "sac"):
        raise ConfigError(f"train needs method.name = 'ppo' or 'sac', got {name!r}")
    run = Run("train", cfg, out)
    factory = default_env_factory(build_env_config(cfg))
    eval_config = build_env_config(cfg, random_initial=False)
    trainer = ppo_train if name == "ppo" else sac_train
    base = uncontrolled(cfg).n_total
    try:
        policy, history = trainer(factory, method_config(cfg), cfg["seed"], eval_config)
    except DivergenceError as exc:
        run.finish({"status": "failed", "failure_step": exc.step, "error": str(exc),
                    "uncontrolled_n_tot": base})
        raise
    history.write_csv(run.path("convergence.csv"))
    rng_state = None
    if history.rng_state is not None:
        rng_state = np.random.default_rng()
        rng_state.bit_generator.state = history.rng_state
    save_policy(run.path("checkpoint.json"), policy, rng=rng_state)
    value, record = _evaluate_and_export(run, cfg, policy)
    return run.finish({"status": "ok", "n_tot": record.n_total, "eval_n_tot": value,
                       "uncontrolled_n_tot": base, "env_steps": history.env_steps[-1],
                       "episodes": history.episodes[-1], "updates": history.updates[-1]})


def cmd_eval(cfg, out, run_dir):
    run_dir = Path(run_dir)
    checkpoint = run_dir / "checkpoint.json"
    if not checkpoint.exists():
        raise ConfigError(f"no checkpoint.json in {run_dir}")
    policy, _, _ = load_policy(checkpoint)
    run = Run("eval", cfg, out)
    value, record = _evaluate_and_export(run, cfg, policy)
    return run.finish({"n_tot": record.n_total, "eval_n_tot": value,
                       "checkpoint": str(checkpoint)})


RL_METHODS = ("ppo", "sac")
OCT_METHODS = ("powell", "lbfgsb")


def cmd_report(out, run_dirs, threshold=1e-6):
    """Compare runs on one model: comparison.csv, n_loc.csv and report.json."""
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    runs = []
    for d in run_dirs:
        path = Path(d) / "summary.json"
        if not path.exists():
            raise ConfigError(f"no summary.json in {d}")
        with open(path) as fh:
            summary = json.load(fh)
        if "n_tot" not in summary or not (Path(d) / "trajectory.csv").exists():
            raise ConfigError(f"{d} holds no trajectory (command {summary.get('command')!r})")
        runs.append((Path(d), summary, read_trajectory(Path(d) / "trajectory.csv")))
    hashes = sorted({s["model_hash"] for _, s, _ in runs})
    if len(hashes) > 1:
        raise ConfigError("runs use different model configurations: " + ", ".join(hashes))

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    labels = []
    for d, s, _ in runs:
        label = s["method"]
        if label in labels or sum(1 for _, t, _ in runs if t["method"] == label) > 1:
            label = f"{label}@{d.name}"
        labels.append(label)
    support = {}
    rows = []
    for label, (d, s, traj) in zip(labels, runs):
        n_loc = traj["n_loc"][:-1]
        support[label] = int(np.sum(n_loc > threshold))
        rows.append((label, s["method"], s["n_tot"], s.get("uncontrolled_n_tot", ""),
                     s.get("evaluations", ""), s.get("env_steps", ""), s.get("episodes", ""),
                     s.get("updates", ""), support[label]))
    write_csv(out / "comparison.csv",
              ["label", "method", "n_tot", "uncontrolled_n_tot", "evaluations", "env_steps",
               "episodes", "updates", "n_loc_support"], rows)
    grid = runs[0][2]
    write_csv(out / "n_loc.csv", ["k", "t"] + labels,
              ([int(grid["k"][i]), grid["t"][i]] + [traj["n_loc"][i] for _, _, traj in runs]
               for i in range(len(grid["k"]))))
    rl = [support[l] for l, (_, s, _) in zip(labels, runs) if s["method"] in RL_METHODS]
    oc = [support[l] for l, (_, s, _) in zip(labels, runs) if s["method"] in OCT_METHODS]
    report = {"model_hash": hashes[0], "runs": labels, "n_loc_support": support,
              "n_loc_threshold": threshold,
              "rl_support_at_least_oct": (min(rl) >= max(oc)) if rl and oc else None}
    write_json(out / "report.json", report)
    return report


def build_parser():
    parser = argparse.ArgumentParser(prog="backflow", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("gamma", "decay rate and negativity windows"),
                            ("baseline", "uncontrolled trajectory"),
                            ("oct", "Powell or L-BFGS-B pulse optimization"),
                            ("train", "PPO or SAC training"),
                            ("eval", "re-evaluate a trained checkpoint"),
                            ("report", "compare finished runs")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        if name == "eval":
            p.add_argument("run_dir", help="directory of a finished train run")
        if name == "report":
            p.add_argument("run_dirs", nargs="+", help="directories of finished runs")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            out = args.out or os.environ.get(OUTPUT_ENV_VAR) or os.path.join("runs", "report")
            report = cmd_report(out, args.run_dirs)
            print(json.dumps(report, sort_keys=True))
            return 0
        cfg = load_config(args.config, args.seed)
        if args.command == "eval" and args.config is None:
            cfg_path = Path(args.run_dir) / "config.json"
            if cfg_path.exists():
                with open(cfg_path) as fh:
                    cfg = {**cfg, **json.load(fh)}
                if args.seed is not None:
                    cfg["seed"] = args.seed
        if args.command == "eval" and not (args.out or os.environ.get(OUTPUT_ENV_VAR)):
            out = os.path.join(args.run_dir, "eval")
        else:
            out = resolve_output_dir(args, cfg)
        if args.command == "gamma":
            summary = cmd_gamma(cfg, out)
        elif args.command == "baseline":
            summary = cmd_baseline(cfg, out)
        elif args.command == "oct":
            summary = cmd_oct(cfg, out)
        elif args.command == "train":
            summary = cmd_train(cfg, out)
        else:
            summary = cmd_eval(cfg, out, args.run_dir)
        print(json.dumps({k: summary[k] for k in sorted(summary) if k != "files"}))
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DivergenceError, PositivityError, PoleError, FloatingPointError,
            ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
