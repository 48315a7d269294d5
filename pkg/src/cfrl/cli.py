"""Command-line runner: ``cfrl gen-data|eval|search|verify --config FILE``.

Exit codes: 0 success, 2 configuration error, 3 runtime error,
4 verification failure.
"""

import argparse
import datetime
import json
import os
import sys

from . import __version__
from . import offpolicy as op
from . import search as srch
from .config import load_config
from .envs import gridpush as gp
from .envs.twodoor import follow_hint_policy, two_door
from .errors import CfrlError, ConfigError, InputError
from .policy import TabularPolicy
from .pomdp import parse_pomdp
from .textfmt import split_list
from .verify import run_suite

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_VERIFY = 0, 2, 3, 4


# --------------------------------------------------------------------------
# building objects from a config


def build_env(cfg):
    kind = cfg.get("env", "kind", "grid")
    if kind == "twodoor":
        return two_door(cfg.float("env", "alpha", 0.8))
    if kind == "file":
        with open(cfg.resolve(cfg.require("env", "pomdp")), encoding="utf-8") as fh:
            return parse_pomdp(fh.read())
    preset = gp.large_preset if cfg.get("env", "preset", "desk") == "large" else gp.desk_preset
    over = {}
    for key in ("width", "height", "n_boxes", "horizon", "window"):
        if cfg.get("env", key) is not None:
            over[key] = cfg.int("env", key)
    if cfg.get("env", "p_mask") is not None:
        over["p_mask"] = cfg.float("env", "p_mask")
    try:
        return gp.as_pomdp(preset(**over))
    except CfrlError as exc:
        raise ConfigError(str(exc), cfg.sections["env"].lineno) from None


def build_model(cfg, env):
    eps = cfg.float("model", "epsilon", 0.0)
    if not 0.0 <= eps <= 1.0:
        raise ConfigError("[model] epsilon must lie in [0, 1]", cfg.line("model", "epsilon"))
    if eps == 0.0:
        return env
    if not isinstance(env, gp.GridPomdp):
        raise ConfigError("[model] epsilon > 0 needs the grid environment", cfg.line("model", "epsilon"))
    return op.corrupt_prior(env, eps)


def default_policy(env):
    return TabularPolicy.uniform(env.default_featurizer(), env.n_actions, tuple(env.actions))


def build_policy(cfg, env, section, key, default="uniform"):
    name = cfg.get(section, key, default)
    line = cfg.line(section, key)
    if name == "uniform":
        return default_policy(env)
    if name == "follow_hint":
        if isinstance(env, gp.GridPomdp):
            raise ConfigError("follow_hint is defined for table POMDPs only", line)
        return follow_hint_policy(env)
    if name == "expert":
        if not isinstance(env, gp.GridPomdp):
            raise ConfigError("the dynamic-programming expert exists for the grid only", line)
        return gp.expert_policy(env)
    with open(cfg.resolve(name), encoding="utf-8") as fh:
        pol = TabularPolicy.loads(fh.read())
    if pol.n_actions != env.n_actions:
        raise ConfigError(f"policy {name!r} has {pol.n_actions} actions, environment has {env.n_actions}", line)
    return pol


# --------------------------------------------------------------------------
# commands


def _write(out, name, text, outputs):
    path = os.path.join(out, name)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    outputs.append(name)


def cmd_gen_data(cfg, seed, workers, out):
    env = build_env(cfg)
    n = cfg.int("data", "episodes", 100)
    if n < 0:
        raise ConfigError("[data] episodes must be non-negative", cfg.line("data", "episodes"))
    behavior = build_policy(cfg, env, "data", "behavior")
    buf = op.collect(env, behavior, n, seed, cfg.get("data", "behavior", "uniform"), workers)
    outputs = []
    _write(out, cfg.get("data", "buffer", "buffer.jsonl"), buf.dumps(), outputs)
    return outputs


def _load_buffer(cfg, env):
    buf = op.ReplayBuffer.load(cfg.resolve(cfg.require("eval", "buffer")))
    if buf.env_hash != op.env_hash(env):
        raise InputError("replay buffer was collected in a different environment")
    return buf


def cmd_eval(cfg, seed, workers, out):
    env = build_env(cfg)
    model = build_model(cfg, env)
    est = cfg.get("eval", "estimator", "cf")
    target = build_policy(cfg, env, "eval", "target")
    reports = []
    if est in ("is", "snis"):
        buf = _load_buffer(cfg, env)
        behavior = build_policy(cfg, env, "eval", "behavior") if cfg.get("eval", "behavior") else None
        mode = cfg.get("eval", "mode", "ordinary" if est == "is" else "self_normalized")
        reports.append(op.is_evaluate(buf, target, behavior, mode))
    elif est == "mb":
        reports.append(op.mb_evaluate(model, target, cfg.int("eval", "n_rollouts", 10000), seed, workers))
    else:
        buf = _load_buffer(cfg, env)
        n_cf = cfg.int("eval", "n_cf", 1)
        if est == "cf":
            t_list = [cfg.int("eval", "t", env.horizon)]
        else:
            t_list = cfg.int_list("eval", "t_list") or [0, env.horizon]
        for t in t_list:
            if not 0 <= t <= env.horizon:
                raise ConfigError(f"conditioning horizon {t} outside [0, {env.horizon}]",
                                  cfg.line("eval", "t_list" if est == "sweep" else "t"))
        reports.extend(r for _, r in op.sweep_conditioning(model, target, buf, t_list, seed, n_cf, workers))
    outputs = []
    _write(out, "eval.csv", op.reports_csv(reports), outputs)
    return outputs


def search_config(cfg, seed):
    d = srch.SearchConfig()
    kw = {}
    for key in ("iterations", "n_rollouts", "n_cf", "refresh_period", "n_eval", "chunk"):
        kw[key] = cfg.int("search", key, getattr(d, key))
    for key in ("eta", "kappa", "tau_c"):
        kw[key] = cfg.float("search", key, getattr(d, key))
    try:
        return srch.SearchConfig(seed=seed, **kw)
    except InputError as exc:
        raise ConfigError(str(exc), cfg.sections["search"].lineno) from None


def cmd_search(cfg, seed, workers, out):
    if "search" not in cfg.sections:
        raise ConfigError("missing section [search]")
    env = build_env(cfg)
    model = build_model(cfg, env)
    algo = cfg.get("search", "algo", "cfgps")
    scfg = search_config(cfg, seed)
    expert = None
    if cfg.get("search", "expert", "no") == "yes":
        if not isinstance(env, gp.GridPomdp):
            raise ConfigError("[search] expert = yes needs the grid environment", cfg.line("search", "expert"))
        expert = gp.expert_policy(env)
    start = None
    if cfg.get("search", "policy"):
        with open(cfg.resolve(cfg.get("search", "policy")), encoding="utf-8") as fh:
            start = TabularPolicy.loads(fh.read())
    res = srch.ALGORITHMS[algo](model, scfg, env, expert, workers=workers, policy=start)
    outputs = []
    _write(out, "metrics.csv", srch.metrics_csv(res.metrics), outputs)
    every = cfg.int("search", "checkpoint_every", 0)
    for k, pol in sorted(res.checkpoints.items()):
        if k == 0 or (every > 0 and k % every == 0):
            _write(out, os.path.join("policies", f"policy_{k:05d}.txt"), pol.dumps(), outputs)
    _write(out, "policy.txt", res.policy.dumps(), outputs)
    n_final = cfg.int("search", "n_final", 0)
    if n_final > 0:
        est, se = srch.evaluate_policy(env, res.policy, n_final, seed, workers)
        _write(out, "final.csv", f"algo,true_return,stderr,n\n{algo},{est!r},{se!r},{n_final}\n", outputs)
    return outputs


def cmd_verify(cfg, seed, workers, out):
    n_random = cfg.int("verify", "random_scms", 20)
    fixtures = [cfg.resolve(p) for p in split_list(cfg.get("verify", "fixtures"))]
    report = run_suite(seed, n_random, fixtures)
    outputs = []
    _write(out, "verify.txt", report.text(), outputs)
    sys.stdout.write(report.text())
    return outputs, report.ok


COMMANDS = {"gen-data": cmd_gen_data, "eval": cmd_eval, "search": cmd_search, "verify": cmd_verify}


# --------------------------------------------------------------------------
# manifest and entry point


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _write_manifest(out, manifest):
    path = os.path.join(out, f"manifest-{manifest['command']}.json")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def build_parser():
    p = argparse.ArgumentParser(prog="cfrl", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--out")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        seed = args.seed if args.seed is not None else cfg.int("run", "seed")
        if seed is None:
            raise ConfigError("a seed is required: set [run] seed or pass --seed")
        workers = args.workers if args.workers is not None else cfg.int("run", "workers", 1)
        if workers < 1:
            raise ConfigError("workers must be at least 1", cfg.line("run", "workers"))
        out = args.out or (cfg.resolve(cfg.get("run", "out")) if cfg.get("run", "out") else "cfrl-out")
    except ConfigError as exc:
        print(f"config error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    os.makedirs(out, exist_ok=True)
    manifest = {"command": args.command, "config": os.path.abspath(args.config),
                "config_hash": cfg.digest, "code_version": __version__, "seed": seed,
                "workers": workers, "started": _now(), "finished": None, "status": "running",
                "outputs": []}
    _write_manifest(out, manifest)
    code = EXIT_OK
    try:
        result = COMMANDS[args.command](cfg, seed, workers, out)
        if args.command == "verify":
            outputs, ok = result
            code = EXIT_OK if ok else EXIT_VERIFY
        else:
            outputs = result
        manifest["outputs"] = outputs
        manifest["status"] = "ok" if code == EXIT_OK else "verify_failed"
    except ConfigError as exc:
        print(f"config error: {args.config}: {exc}", file=sys.stderr)
        manifest["status"] = "config_error"
        code = EXIT_CONFIG
    except (CfrlError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        manifest["status"] = "error"
        code = EXIT_RUNTIME
    manifest["finished"] = _now()
    _write_manifest(out, manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
