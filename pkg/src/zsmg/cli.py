"""zsmg command line: gen, train, eval, bench."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .certified import BudgetExceeded, ReplayError
from .experiment import ConfigError, ExperimentConfig, evaluate_run, train
from .game import ContractViolation, builtin_game, generate_random_game, validate_game
from .learner import BASELINE, FULL, InvariantViolation
from .lp import LPError

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 2, 3, 4

_INT_KEYS = {"seed", "S", "A", "B", "H"}


class UsageError(Exception):
    pass


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def parse_kv(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"expected key=value, got {item!r}")
        try:
            out[key] = int(val) if key in _INT_KEYS else float(val)
        except ValueError as exc:
            raise UsageError(f"bad value for {key}: {val!r}") from exc
    return out


def cmd_gen(args) -> int:
    if args.builtin:
        game = builtin_game(args.builtin)
    else:
        p = parse_kv(args.random)
        missing = _INT_KEYS - set(p)
        if missing:
            raise UsageError(f"--random needs {sorted(missing)}")
        for key in ("S", "A", "B", "H"):
            if p[key] < 1:
                raise UsageError(f"{key} must be >= 1")
        game = generate_random_game(p["seed"], p["S"], p["A"], p["B"], p["H"], p.get("reward_density", 1.0))
    problems = validate_game(game)
    for v in problems:
        _say(f"violation: {v}")
    if problems:
        return EXIT_VALIDATION
    text = game.to_json()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    _say(f"game H={game.H} S={game.S} A={game.A} B={game.B} ok, hash {game.content_hash()[:12]}")
    return EXIT_OK


def _config_from_args(args) -> ExperimentConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.builtin:
        base["game"] = {"builtin": args.builtin}
    elif args.game:
        base["game"] = {"file": args.game}
    if "game" not in base:
        raise UsageError("train needs a game (--config, --game or --builtin)")
    for key in ("K", "stride", "algo"):
        val = getattr(args, key)
        if val is not None:
            base[key] = val
    if args.seeds is not None:
        base["seeds"] = args.seeds
    if args.eps is not None:
        base["eps_grid"] = args.eps
    if args.output_dir is not None:
        base["output_dir"] = args.output_dir
    if args.set:
        hp = dict(base.get("hyperparams") or {})
        for item in args.set:
            key, sep, val = item.partition("=")
            if not sep:
                raise UsageError(f"--set expects key=value, got {item!r}")
            hp[key] = json.loads(val) if val and val[0] in "0123456789-.tfn[{\"" else val
        base["hyperparams"] = hp
    return ExperimentConfig.from_dict(base)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    root = train(cfg, workers=args.workers)
    manifest = json.loads((root / "manifest.json").read_text())
    for run in manifest["runs"]:
        _say(f"seed {run['seed']}: gap_bound {run['gap_bound']:.4f} (N0={run['N0']}, iota={run['iota']:.3f})")
    print(json.dumps({"output_dir": str(root), "config_hash": manifest["config_hash"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    game = None
    if args.game:
        from .game import MarkovGame
        game = MarkovGame.load(args.game)
    report = evaluate_run(args.run_dir, game, mc_episodes=args.mc_episodes)
    _say(f"gap_bound {report['gap_bound']}  exploitability_upper max {report['exploitability_upper_max']:.4f} "
         f"min {report['exploitability_upper_min']:.4f}")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    from . import bench
    results = bench.run_suite(only=args.only, quick=args.quick)
    print(json.dumps([r.to_dict() for r in results], indent=2))
    return EXIT_OK if all(r.passed for r in results) else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="zsmg", description="Zero-sum Markov game learning harness")
    sub = ap.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="write a game JSON file")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--builtin", help="matching_pennies, matching_pennies_chain(H), ...")
    src.add_argument("--random", nargs="+", metavar="KEY=VAL", help="seed=7 S=3 A=2 B=2 H=3 [reward_density=1]")
    g.add_argument("-o", "--output")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train over seeds")
    t.add_argument("--config")
    t.add_argument("--game", help="game JSON file")
    t.add_argument("--builtin")
    t.add_argument("--K", type=int)
    t.add_argument("--seeds", type=int, nargs="+")
    t.add_argument("--eps", type=float, nargs="+")
    t.add_argument("--stride", type=int)
    t.add_argument("--algo", choices=[FULL, BASELINE])
    t.add_argument("--output-dir", "-o")
    t.add_argument("--set", action="append", metavar="HP=VAL", help="override a hyperparameter")
    t.add_argument("--workers", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a run directory")
    e.add_argument("run_dir")
    e.add_argument("--game", help="check the run against this game file")
    e.add_argument("--mc-episodes", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="run the acceptance suite")
    b.add_argument("--only", nargs="+")
    b.add_argument("--quick", action="store_true", help="fewer seeds, for smoke checks")
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        _say(f"usage error: {exc}")
        return EXIT_USAGE
    except (ConfigError, ContractViolation, ReplayError, json.JSONDecodeError, TypeError) as exc:
        _say(f"validation error: {exc}")
        return EXIT_VALIDATION
    except (FileNotFoundError, OSError) as exc:
        _say(f"error: {exc}")
        return EXIT_RUNTIME
    except (LPError, InvariantViolation, BudgetExceeded, RuntimeError) as exc:
        _say(f"runtime error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME

