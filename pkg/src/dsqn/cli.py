"""Command-line entry point: ``dsqn {train,eval,attack,case-study,grad-check}``.

stdout carries machine-readable results only (JSON or CSV); diagnostics go to
stderr, with verbosity taken from ``DSQN_LOG`` (error | info | debug).
Exit codes: 0 success, 1 a check failed, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

import numpy as np

log = logging.getLogger("dsqn")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("DSQN_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _out_path(out, name):
    os.makedirs(out, exist_ok=True)
    return os.path.join(out, name)


# --- train -----------------------------------------------------------------


def build_trainer(cfg, hooks=()):
    from .envs import make_env
    from .network import build_network
    from .qlearn import TargetPair, Trainer
    from .runtime.seeding import make_streams

    env = make_env(cfg.env, **cfg.env_kwargs)
    net = build_network(env.observation_shape, env.n_actions, cfg.arch, cfg.sim_steps, cfg.decoder,
                        cfg.neuron, rng=make_streams(cfg.seed)["init"], init_gain=cfg.init_gain)
    return Trainer(env, TargetPair(net), cfg.hp, cfg.seed, list(hooks))


def cmd_train(args):
    from .runtime import config as config_mod
    from .runtime.checkpoint import save_checkpoint
    from .runtime.metrics import MetricsSink

    if not args.config or not os.path.isfile(args.config):
        raise UsageError(f"config file not found: {args.config}")
    cfg = config_mod.load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    out = args.out or cfg.out_dir
    os.makedirs(out, exist_ok=True)
    with open(_out_path(out, "config.toml"), "w") as f:
        f.write(config_mod.serialize(cfg))
    with MetricsSink(out) as sink:
        tr = build_trainer(cfg, [sink])

        def periodic(t):
            if cfg.checkpoint_interval and t.step % cfg.checkpoint_interval == 0:
                save_checkpoint(_out_path(out, f"step_{t.step}.ckpt"), t.checkpoint_state())

        tr.run(callback=periodic)
        save_checkpoint(_out_path(out, "final.ckpt"), tr.checkpoint_state())
    print(json.dumps({"steps": tr.step, "episodes": tr.episode, "best_eval": tr.best_eval,
                      "metrics": sink.csv_path, "checkpoint": _out_path(out, "final.ckpt")}))
    return EXIT_OK


# --- eval / attack ---------------------------------------------------------


def _load_agent(path):
    from .qlearn import Trainer
    from .runtime.checkpoint import load_checkpoint

    return Trainer.from_checkpoint(load_checkpoint(path))


def cmd_eval(args):
    from .envs import evaluate

    tr = _load_agent(args.ckpt)
    res = evaluate(tr.nets.online, tr.eval_env, args.episodes, args.eval_epsilon, args.noop_max,
                   np.random.default_rng(args.seed))
    print(json.dumps({"mean": res.mean, "returns": res.returns}))
    return EXIT_OK


def cmd_attack(args):
    from .attack import AttackConfig, attacked_eval

    tr = _load_agent(args.ckpt)
    env = tr.eval_env
    env.rng = np.random.default_rng(args.seed)
    report = attacked_eval(tr.nets.online, env, args.episodes, AttackConfig(args.epsilon, args.max_iters),
                           np.random.default_rng(args.seed + 1), args.eval_epsilon, args.noop_max)
    text = report.to_json()
    if args.out:
        with open(_out_path(args.out, "attack_report.json"), "w") as f:
            f.write(text + "\n")
    print(text)
    return EXIT_OK


# --- case study ------------------------------------------------------------


def cmd_case_study(args):
    from .case_study import sweep

    if not args.i_min < args.i_max:
        raise UsageError("--i-min must be smaller than --i-max")
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    currents = np.linspace(args.i_min, args.i_max, args.steps)
    rows = sweep(currents, T=args.t, tau=args.tau, v_reset=args.v_reset, v_threshold=args.v_threshold)
    header = ("I", "last_mem", "max_mem", "mean_mem")
    if args.out:
        with open(_out_path(args.out, "case_study.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            w.writerows([[repr(float(v)) for v in r] for r in rows])
        print(json.dumps({"rows": len(rows), "csv": _out_path(args.out, "case_study.csv")}))
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(header)
        w.writerows([[repr(float(v)) for v in r] for r in rows])
    return EXIT_OK


# --- gradient check --------------------------------------------------------


def run_grad_check(trials, seed, surrogate_fn=None, h=1e-4):
    """Worst recursive-vs-tape and relaxed-FD errors over ``trials`` random micro-nets."""
    from .grad import backward_recursive, backward_tape, random_micro_net
    from .grad.fdcheck import central_differences, relative_errors
    from .network import forward

    rng = np.random.default_rng(seed)
    worst_tape = worst_fd = 0.0
    for _ in range(trials):
        case = random_micro_net(rng)
        _, trace = forward(case.net, case.obs)
        rec = backward_recursive(trace, case.net, case.seed, input_grad=True, surrogate_fn=surrogate_fn)
        tape = backward_tape(trace, case.net, case.seed)
        worst_tape = max(worst_tape, relative_errors(rec.grads + [rec.input_grad], tape.grads + [tape.input_grad], floor=1e-300))
        _, rtrace = forward(case.net, case.obs, relaxed=True)
        analytic = backward_recursive(rtrace, case.net, case.seed, surrogate_fn=surrogate_fn).grads
        numeric = central_differences(case.net, case.obs, case.seed, h)
        worst_fd = max(worst_fd, relative_errors(analytic, numeric))
    return worst_tape, worst_fd


def cmd_grad_check(args):
    if args.trials < 1:
        raise UsageError("--trials must be >= 1")
    surrogate_fn = None
    if args.corrupt_surrogate:
        # negative control: a wrong spike derivative must be caught
        surrogate_fn = lambda x: 2.0 / (1.0 + (np.pi * x) ** 2)  # noqa: E731
    worst_tape, worst_fd = run_grad_check(args.trials, args.seed, surrogate_fn)
    ok = worst_tape <= 1e-10 and worst_fd <= 1e-4
    print(json.dumps({"trials": args.trials, "max_rel_err_tape": worst_tape, "max_rel_err_fd": worst_fd, "pass": ok}))
    return EXIT_OK if ok else EXIT_CHECK


# --- parser ----------------------------------------------------------------


def make_parser():
    p = argparse.ArgumentParser(prog="dsqn", description="Deep spiking Q-network toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an agent from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    for name, fn, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                               ("attack", cmd_attack, "FGSM robustness evaluation of a checkpoint")):
        a = sub.add_parser(name, help=helptext)
        a.add_argument("--ckpt", required=True)
        a.add_argument("--episodes", type=int, default=100)
        a.add_argument("--eval-epsilon", type=float, default=0.05)
        a.add_argument("--noop-max", type=int, default=30)
        a.add_argument("--seed", type=int, default=0)
        a.set_defaults(func=fn)
        if name == "attack":
            a.add_argument("--epsilon", type=float, required=True)
            a.add_argument("--max-iters", type=int, default=50)
            a.add_argument("--out")

    c = sub.add_parser("case-study", help="sweep the one-LIF-one-LI network over input currents")
    c.add_argument("--t", type=int, default=8)
    c.add_argument("--tau", type=float, default=2.0)
    c.add_argument("--v-reset", type=float, default=0.0)
    c.add_argument("--v-threshold", type=float, default=1.0)
    c.add_argument("--i-min", type=float, default=0.0)
    c.add_argument("--i-max", type=float, default=3.0)
    c.add_argument("--steps", type=int, default=301, help="number of grid points, endpoints included")
    c.add_argument("--out")
    c.set_defaults(func=cmd_case_study)

    g = sub.add_parser("grad-check", help="cross-check the recursive gradients against the oracles")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--corrupt-surrogate", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    from .errors import CheckpointError, ConfigError, ContractViolation

    _setup_logging()
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        parser.print_usage(sys.stderr)
        print(f"dsqn: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ContractViolation, OSError) as e:
        print(f"dsqn: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
