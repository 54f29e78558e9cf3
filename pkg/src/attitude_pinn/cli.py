"""Command-line entry point: ``attitude-pinn <command> [options]``.

Commands read an optional YAML/JSON config of flat dotted keys (nested mappings
are flattened), then apply flag overrides. Every command writes its artifacts
and a ``manifest.json`` into the output directory. Exit codes: 0 success, 1
usage or configuration error, 2 runtime or numerical failure.
"""

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time

import numpy as np
import yaml

from . import __version__
from .dataset import (CampaignConfig, DatasetParseError, DatasetVersionError, DegenerateDatasetError,
                      atomic_write, build_split, load_dataset, run_campaign, save_dataset)
from .dynamics import ConfigurationError, FrictionConfig, IntegrationError
from .mlp import MlpConfig, ModelCorruptError, ModelVersionError, init_params, load_model, save_model
from .training import (LossConfig, RolloutConstructionError, TrainConfig, TrainingDivergedError,
                       build_rollouts, evaluate_rollouts, train)

log = logging.getLogger("attitude_pinn")

OUT_ENV = "ATTITUDE_PINN_OUT"
MANIFEST = "manifest.json"


class ConfigError(Exception):
    """Bad, unknown or missing configuration key (exit code 1)."""


class UsageFailure(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageFailure(message)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_REQUIRED = object()


def _dataclass_keys(prefix, cls, skip=()):
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip or f.name.startswith("_"):
            continue
        if f.default is not dataclasses.MISSING:
            out[f"{prefix}.{f.name}"] = f.default
        elif f.default_factory is not dataclasses.MISSING:
            out[f"{prefix}.{f.name}"] = f.default_factory()
    return out


def _noise_keys():
    keys = _dataclass_keys("noise", _noise_cls(), skip=("friction", "init_error_range"))
    keys["noise.friction"] = True
    keys["noise.init_error_min"] = float(np.pi / 8)
    keys["noise.init_error_max"] = float(np.pi / 2)
    keys.update(_dataclass_keys("friction", FrictionConfig))
    keys["hybrid.switch_threshold"] = 1.0
    keys["hybrid.hysteresis"] = 0.1
    keys["mpc.max_iter"] = 50
    return keys


def _noise_cls():
    from .eval.campaign import NoiseConfig
    return NoiseConfig


def schema(command):
    if command == "gen-data":
        keys = _dataclass_keys("campaign", CampaignConfig)
        keys["campaign.n_simulations"] = _REQUIRED
        keys["split.ratio"] = 0.67
        keys["split.seed"] = 0
        return keys
    if command == "train":
        keys = {"train.dataset": _REQUIRED, "train.mode": "ld", "train.dd_model": ""}
        keys.update(_dataclass_keys("model", MlpConfig))
        keys.update(_dataclass_keys("train", TrainConfig))
        keys.update(_dataclass_keys("loss", LossConfig, skip=("mode", "target_eps")))
        keys["loss.target_eps"] = 0.0
        keys["loss.eps_fraction"] = 0.5
        return keys
    if command == "eval-regressor":
        return {"eval.dataset": _REQUIRED, "eval.models": _REQUIRED, "eval.steps": 10,
                "eval.p": 1e-2}
    if command in ("simulate", "mc"):
        keys = {"mc.controller": _REQUIRED, "mc.model": "", "mc.write_traces": True}
        keys.update(_noise_keys())
        if command == "simulate":
            keys["noise.n_runs"] = 1
        return keys
    raise ConfigError(f"unknown command {command!r}")


def _flatten(tree, prefix=""):
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key, default, value):
    if default is _REQUIRED or value is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "false", "yes", "no", "1", "0"):
                return value.lower() in ("true", "yes", "1")
            raise ValueError
        if isinstance(default, int):
            if isinstance(value, float) and value.is_integer():
                value = int(value)
            if isinstance(value, bool) or not isinstance(value, (int, str)):
                raise ValueError
            return int(value)
        if isinstance(default, float):
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if isinstance(default, np.ndarray):
            arr = np.asarray(value, dtype=float)
            if arr.shape != default.shape:
                raise ValueError
            return arr
        if isinstance(default, str):
            if not isinstance(value, str):
                raise ValueError
            return value
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot use {value!r} "
                          f"(expected {type(default).__name__})") from None
    return value


def load_config(command, path=None, overrides=None):
    """Merge defaults, the config file and flag overrides; validate every key."""
    keys = schema(command)
    merged = dict(keys)
    if path:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML/JSON: {exc}") from None
        raw = raw or {}
        if not isinstance(raw, dict):
            raise ConfigError("config file must be a mapping of keys to values")
        for key, value in _flatten(raw).items():
            if key not in keys:
                raise ConfigError(f"unknown config key {key!r} for {command}")
            merged[key] = _coerce(key, keys[key], value)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = _coerce(key, keys[key], value)
    for key, value in merged.items():
        if value is _REQUIRED:
            raise ConfigError(f"missing required config key {key!r}")
    return merged


def section(cfg, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def _snapshot(cfg):
    def plain(v):
        if isinstance(v, np.ndarray):
            return [float(x) for x in v]
        if isinstance(v, (np.floating, np.integer)):
            return v.item()
        return v
    return {k: plain(v) for k, v in sorted(cfg.items())}


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_text(path, text):
    atomic_write(path, text.encode())


def append_manifest(out_dir, command, cfg, seeds, artifacts, started, argv):
    """Append one entry to the directory's manifest (the only non-deterministic file)."""
    path = os.path.join(out_dir, MANIFEST)
    entries = []
    if os.path.exists(path):
        try:
            with open(path) as fh:
                entries = json.load(fh).get("entries", [])
        except (OSError, ValueError):
            raise RuntimeFailure(f"existing manifest {path} is unreadable") from None
    entries.append({
        "command": command,
        "argv": list(argv),
        "toolkit_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "seeds": seeds,
        "config": _snapshot(cfg),
        "artifacts": {name: {"path": os.path.relpath(p, out_dir), "sha256": _sha256(p)}
                      for name, p in sorted(artifacts.items())},
        "wall_clock_s": time.time() - started,
        "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    })
    write_text(path, json.dumps({"entries": entries}, indent=2, sort_keys=True) + "\n")


def _out_dir(args, command):
    out = args.out or os.path.join(os.environ.get(OUT_ENV, "runs"), command)
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _campaign_config(cfg):
    c = section(cfg, "campaign")
    try:
        return CampaignConfig(**c)
    except (ConfigurationError, TypeError) as exc:
        raise ConfigError(f"campaign configuration: {exc}") from None


def cmd_gen_data(args, argv):
    started = time.time()
    over = {"campaign.n_simulations": args.runs}
    if args.seed is not None:
        over["campaign.rng_seed"] = args.seed
        over["split.seed"] = args.seed
    cfg = load_config("gen-data", args.config, over)
    camp = _campaign_config(cfg)
    out = _out_dir(args, "gen-data")
    samples = run_campaign(camp, jobs=args.jobs)
    try:
        split = build_split(samples, cfg["split.ratio"], cfg["split.seed"])
    except (ValueError, DegenerateDatasetError) as exc:
        raise RuntimeFailure(f"cannot build the split: {exc}") from None
    data_path = os.path.join(out, "dataset.txt")
    save_dataset(split, data_path)
    norm = split.normalization
    norm_path = os.path.join(out, "normalization.json")
    write_text(norm_path, json.dumps({k: [float(v) for v in getattr(norm, k)]
                                      for k in ("x_mean", "x_std", "y_mean", "y_std")},
                                     indent=2, sort_keys=True) + "\n")
    append_manifest(out, "gen-data", cfg, {"campaign": camp.rng_seed, "split": cfg["split.seed"]},
                    {"dataset": data_path, "normalization": norm_path}, started, argv)
    print(f"simulations\t{camp.total_simulations}")
    print(f"train_samples\t{len(split.train)}")
    print(f"val_samples\t{len(split.val)}")
    print(f"dataset\t{data_path}")
    return 0


def _load_split(path):
    try:
        return load_dataset(path)
    except OSError as exc:
        raise ConfigError(f"cannot read dataset {path}: {exc}") from None
    except (DatasetParseError, DatasetVersionError, DegenerateDatasetError) as exc:
        raise ConfigError(f"dataset {path}: {exc}") from None


def _load_model(path):
    try:
        return load_model(path)
    except OSError as exc:
        raise ConfigError(f"cannot read model {path}: {exc}") from None
    except ModelVersionError as exc:
        raise ConfigError(f"model {path}: {exc}") from None


def cmd_train(args, argv):
    started = time.time()
    over = {"train.dataset": args.dataset, "train.mode": args.mode, "train.seed": args.seed,
            "train.dd_model": args.dd_model}
    cfg = load_config("train", args.config, over)
    mode = cfg["train.mode"]
    if mode not in ("dd", "ld"):
        raise ConfigError(f"config key 'train.mode' must be 'dd' or 'ld', got {mode!r}")
    split = _load_split(cfg["train.dataset"])
    try:
        mcfg = MlpConfig(**section(cfg, "model"))
        tc = TrainConfig(**{k: v for k, v in section(cfg, "train").items()
                            if k not in ("dataset", "mode", "dd_model")})
        lc_kw = {k: v for k, v in section(cfg, "loss").items() if k not in ("eps_fraction",)}
        lc_kw["target_eps"] = lc_kw["target_eps"] or None
        lc = LossConfig(mode=mode, **lc_kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if mcfg.input_dim != split.train.features.shape[1]:
        raise ConfigError(f"model input_dim {mcfg.input_dim} does not match the dataset's "
                          f"{split.train.features.shape[1]} features")
    if mode == "ld" and lc.target_eps is None:
        if not cfg["train.dd_model"]:
            raise ConfigError("ld mode needs 'loss.target_eps' or a DD model (--dd-model) "
                              "to derive it from")
        dd = _load_model(cfg["train.dd_model"])
        val_b = build_rollouts(split.val, split.pool, dd.config.steps)
        _, dd_pi = evaluate_rollouts(dd, val_b, split.normalization.y_std, lc)
        lc.target_eps = cfg["loss.eps_fraction"] * dd_pi
    out = _out_dir(args, "train")
    model_path = os.path.join(out, "model.apinn")
    hist_path = os.path.join(out, "history.tsv")
    model = init_params(mcfg, tc.seed)
    rows = ["epoch\tl_dd\tl_pi\tbeta\tval_l_dd\tval_l_pi\tlr"]

    def record(r):
        rows.append("\t".join([str(r.epoch)] + [repr(float(v)) for v in
                                                (r.l_dd, r.l_pi, r.beta, r.val_l_dd, r.val_l_pi,
                                                 r.lr)]))
        write_text(hist_path, "\n".join(rows) + "\n")

    try:
        result = train(model, split, tc, lc, callback=record,
                       checkpoint=lambda m, e: save_model(m, model_path))
    except TrainingDivergedError as exc:
        raise RuntimeFailure(str(exc)) from None
    except RolloutConstructionError as exc:
        raise ConfigError(f"dataset cannot provide {mcfg.steps}-step rollouts: {exc}") from None
    save_model(result.model, model_path)
    best = result.history[result.best_epoch]
    cfg = dict(cfg, **{"loss.target_eps": float(lc.target_eps or 0.0)})
    append_manifest(out, "train", cfg, {"train": tc.seed}, {"model": model_path,
                                                             "history": hist_path},
                    started, argv)
    print(f"mode\t{mode}")
    print(f"best_epoch\t{result.best_epoch}")
    print(f"final\tL_DD={best.val_l_dd!r}\tL_PI={best.val_l_pi!r}\tbeta={best.beta!r}")
    if lc.target_eps is not None:
        print(f"target_eps\t{lc.target_eps!r}")
    print(f"model\t{model_path}")
    return 0


def _check_compatible(model, split, path):
    norm = split.normalization
    pairs = ((model.x_mean, norm.x_mean), (model.x_std, norm.x_std), (model.y_mean, norm.y_mean),
             (model.y_std, norm.y_std))
    for got, want in pairs:
        if got.shape != want.shape or not np.allclose(got, want, rtol=1e-9, atol=0.0):
            raise ConfigError(f"model {path} was normalized with different constants than the "
                              "dataset")


def cmd_eval_regressor(args, argv):
    from .eval.metrics import regressor_metrics, wdot_scale
    from .eval.stats import wilcoxon_signed_rank
    started = time.time()
    over = {"eval.dataset": args.dataset,
            "eval.models": ",".join(args.model) if args.model else None}
    cfg = load_config("eval-regressor", args.config, over)
    paths = [p for p in str(cfg["eval.models"]).split(",") if p]
    if not 1 <= len(paths) <= 2:
        raise ConfigError("eval-regressor takes one or two models")
    split = _load_split(cfg["eval.dataset"])
    models = [_load_model(p) for p in paths]
    for m, p in zip(models, paths):
        _check_compatible(m, split, p)
    steps = cfg["eval.steps"]
    batch = build_rollouts(split.val, split.pool, steps)
    sw = wdot_scale(batch)
    out = _out_dir(args, "eval-regressor")
    metrics = [regressor_metrics(m, batch, steps, p=cfg["eval.p"], sigma_wdot=sw) for m in models]
    lines = ["model\tmre_single_step\tphysics_error_single_step\tmre_self_loop\t"
             "physics_error_self_loop\tn_failed"]
    for p, m in zip(paths, metrics):
        d = m.as_dict()
        lines.append("\t".join([p] + [repr(d[k]) for k in (
            "mre_single_step", "physics_error_single_step", "mre_self_loop",
            "physics_error_self_loop")] + [str(d["n_failed"])]))
    if len(metrics) == 2:
        sims = sorted(metrics[0].per_trajectory_mre)
        for name, attr in (("mre_self_loop", "per_trajectory_mre"),
                           ("physics_error_self_loop", "per_trajectory_physics")):
            a = [getattr(metrics[0], attr)[s] for s in sims]
            b = [getattr(metrics[1], attr)[s] for s in sims]
            lines.append(f"# wilcoxon {name}\t{wilcoxon_signed_rank(a, b)!r}")
    report = "\n".join(lines) + "\n"
    report_path = os.path.join(out, "regressor_report.tsv")
    write_text(report_path, report)
    append_manifest(out, "eval-regressor", cfg, {}, {"report": report_path}, started, argv)
    sys.stdout.write(report)
    return 0


def _noise_config(cfg):
    from .eval.campaign import NoiseConfig
    n = section(cfg, "noise")
    friction = None
    if n.pop("friction"):
        try:
            friction = FrictionConfig(**section(cfg, "friction"))
        except ConfigurationError as exc:
            raise ConfigError(f"friction configuration: {exc}") from None
    rng = (n.pop("init_error_min"), n.pop("init_error_max"))
    try:
        return NoiseConfig(friction=friction, init_error_range=rng, **n)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"noise configuration: {exc}") from None


def _controller_spec(cfg):
    from .control import HybridConfig
    from .eval.campaign import CONTROLLERS, ControllerSpec
    kind = cfg["mc.controller"]
    if kind not in CONTROLLERS:
        raise ConfigError(f"unknown controller {kind!r}; valid controllers: {', '.join(CONTROLLERS)}")
    model = None
    if kind.startswith("mlp"):
        if not cfg["mc.model"]:
            raise ConfigError(f"controller {kind!r} needs --model")
        model = _load_model(cfg["mc.model"])
    try:
        hybrid = HybridConfig(cfg["hybrid.switch_threshold"], cfg["hybrid.hysteresis"])
    except ValueError as exc:
        raise ConfigError(f"hybrid configuration: {exc}") from None
    return ControllerSpec(kind, model, hybrid, cfg["mpc.max_iter"])


def _run_rows(results):
    rows = ["run\tinitial_error_deg\tsettling_time_s\tsteady_state_error_deg\trms_torque\t"
            "mode_switches\tfailed"]
    for r in results:
        rows.append("\t".join([str(r.run), repr(r.initial_error), repr(r.settling_time),
                               repr(r.steady_state_error), repr(r.rms_torque),
                               str(len(r.switches)), str(int(r.failed))]))
    return "\n".join(rows) + "\n"


def _switch_rows(results):
    rows = ["run\tt\tfrom\tto"]
    for r in results:
        for t, a, b in r.switches:
            rows.append(f"{r.run}\t{t!r}\t{a}\t{b}")
    return "\n".join(rows) + "\n"


def _campaign(args, argv, command):
    from .eval.campaign import run_mc_campaign, write_trace
    started = time.time()
    over = {"mc.controller": args.controller, "mc.model": args.model_single,
            "noise.n_runs": args.runs if command == "mc" else 1, "noise.seed": args.seed}
    cfg = load_config(command, args.config, over)
    spec = _controller_spec(cfg)
    noise = _noise_config(cfg)
    out = _out_dir(args, command)
    results, report = run_mc_campaign(spec, noise, jobs=args.jobs)
    artifacts = {}
    if cfg["mc.write_traces"]:
        trace_dir = os.path.join(out, "traces")
        os.makedirs(trace_dir, exist_ok=True)
        for r in results:
            p = os.path.join(trace_dir, f"run_{r.run:04d}.tsv")
            write_trace(p, r)
            artifacts[f"trace_{r.run:04d}"] = p
    for name, text in (("summary", report.table()), ("runs", _run_rows(results)),
                       ("switches", _switch_rows(results))):
        p = os.path.join(out, f"{name}.tsv")
        write_text(p, text)
        artifacts[name] = p
    append_manifest(out, command, cfg, {"noise": noise.seed}, artifacts, started, argv)
    sys.stdout.write(report.table())
    if all(r.failed for r in results):
        raise RuntimeFailure("every run failed")
    return 0


def cmd_simulate(args, argv):
    return _campaign(args, argv, "simulate")


def cmd_mc(args, argv):
    return _campaign(args, argv, "mc")


# ---------------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="attitude-pinn", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML/JSON file of dotted keys")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<command>)")
        sp.add_argument("--jobs", type=int, default=1)

    g = sub.add_parser("gen-data", help="run the excitation campaign and write the dataset")
    common(g)
    g.add_argument("--runs", type=int, help="number of nominal simulations")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a regressor (dd or ld)")
    common(t)
    t.add_argument("--dataset")
    t.add_argument("--mode", choices=("dd", "ld"))
    t.add_argument("--dd-model", help="DD model whose validation L_PI sets the LD target")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-regressor", help="regressor metrics for one or two models")
    common(e)
    e.add_argument("--dataset")
    e.add_argument("--model", action="append", help="model file (repeat for a paired test)")
    e.set_defaults(func=cmd_eval_regressor)

    for name, func, help_ in (("simulate", cmd_simulate, "one closed-loop maneuver"),
                              ("mc", cmd_mc, "Monte-Carlo closed-loop campaign")):
        s = sub.add_parser(name, help=help_)
        common(s)
        s.add_argument("--controller", help="mlp-ld | mlp-ld+linear | nonlinear | linear")
        s.add_argument("--model", dest="model_single")
        if name == "mc":
            s.add_argument("--runs", type=int)
        s.set_defaults(func=func)
    return p


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if getattr(args, "jobs", 1) < 1:
            raise UsageFailure("--jobs must be at least 1")
        return args.func(args, argv)
    except (UsageFailure, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeFailure, IntegrationError, ModelCorruptError, FloatingPointError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
