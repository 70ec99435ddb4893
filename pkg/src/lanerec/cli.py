"""``lanerec`` command line: train, eval, compare, replay."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from lanerec import harness
from lanerec.config import ConfigError, load_config


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lanerec", description="Lane-change recommendation experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="override train and eval seeds")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--episodes", type=int, help="training or evaluation episode count")
        sp.add_argument("--theta", type=float, help="true adherence level")

    sp = sub.add_parser("train", help="train one agent")
    common(sp)
    sp.add_argument("--policy", choices=("regular", "adherence"), default="adherence")
    sp.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")

    sp = sub.add_parser("eval", help="evaluate one policy")
    common(sp)
    sp.add_argument("--policy", choices=harness.POLICIES, default="adherence")

    sp = sub.add_parser("compare", help="evaluate all three policies on paired seeds")
    common(sp)

    sp = sub.add_parser("replay", help="re-simulate an episode log and check it matches")
    sp.add_argument("log", help="episode .jsonl file")
    sp.add_argument("--config", help="YAML run configuration used to produce the log")
    return p


def apply_overrides(cfg, args):
    train, ev = cfg.train, cfg.eval
    if getattr(args, "seed", None) is not None:
        train = dataclasses.replace(train, seed=args.seed)
        ev = dataclasses.replace(ev, seed=args.seed)
    if getattr(args, "theta", None) is not None:
        train = dataclasses.replace(train, theta_true=args.theta)
        ev = dataclasses.replace(ev, theta_true=args.theta)
    if getattr(args, "episodes", None) is not None:
        if args.verb == "train":
            train = dataclasses.replace(train, episodes=args.episodes)
        else:
            ev = dataclasses.replace(ev, episodes=args.episodes)
    out = getattr(args, "out", None) or cfg.out_dir
    return dataclasses.replace(cfg, train=train, eval=ev, out_dir=out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_config(args.config), args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2

    try:
        if args.verb == "train":
            Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
            path = harness.run_train(cfg, args.policy, resume=args.resume)
            print(path)
        elif args.verb == "eval":
            row, _ = harness.run_eval(cfg, args.policy)
            print(harness.format_table([row]))
        elif args.verb == "compare":
            Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
            rows, summary, _ = harness.run_compare(cfg)
            print(harness.format_table(rows))
            print(json.dumps(summary, indent=2))
        elif args.verb == "replay":
            ok, step = harness.replay_log(cfg, args.log)
            if not ok:
                print(f"mismatch at step {step}")
                return 1
            print("replay matches")
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
