"""Command-line interface.

Verbs: gen (materialize episode files), train (base training plus optional
fine-tuning, with JSONL metrics log and checkpoints), eval (metric report
for a checkpoint), ablate (three-variant comparison on one fixed benchmark),
gradcheck (finite-difference audit of every primitive and the full loss).

Exit codes: 0 success, 1 usage/config error, 2 numeric failure,
3 I/O or corruption.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import RunConfig, load_run_config, run_config_to_dict
from .errors import ConfigError, CorruptionError, NumericError
from .episodes import read_episodes, write_episodes

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="fewdet", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run configuration file")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--out", help="override output directory")

    p_gen = sub.add_parser("gen", help="materialize a benchmark episode file")
    common(p_gen)
    p_gen.add_argument("--count", type=int, default=50)
    p_gen.add_argument("--split", choices=("train", "test"), default="train")
    p_gen.add_argument("--start-index", type=int, default=0)

    p_train = sub.add_parser("train", help="train a model, emit checkpoint + log")
    common(p_train)
    p_train.add_argument("--checkpoint", help="resume from this checkpoint")
    p_train.add_argument("--variant", default="+OBD+OOD",
                         choices=("baseline", "+OBD", "+OBD+OOD"))

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--episodes", help="episode file to evaluate on "
                        "(default: generated test episodes per config)")

    p_ablate = sub.add_parser("ablate", help="run the three-variant comparison")
    common(p_ablate)

    p_gc = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p_gc)
    p_gc.add_argument("--inject-fault", help=argparse.SUPPRESS)

    return parser


def _load_run(args) -> RunConfig:
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    return load_run_config(args.config, overrides)


def _out_dir(run: RunConfig) -> Path:
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen(args) -> int:
    run = _load_run(args)
    out = _out_dir(run)
    path = out / f"episodes_{args.split}.bin"
    manifest = write_episodes(run.benchmark, args.count, path,
                              split=args.split, start_index=args.start_index)
    with open(out / f"episodes_{args.split}.manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"wrote {args.count} episodes to {path}")
    print(f"manifest digest: {manifest['manifest_digest']}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .harness import (load_run_checkpoint, save_run_checkpoint, train_run)
    from .model import ablation_variant

    run = _load_run(args)
    out = _out_dir(run)
    state = opt = None
    start_step = 0
    if args.checkpoint:
        prev_run, prev = load_run_checkpoint(args.checkpoint)
        cfg, state, opt, start_step = prev.cfg, prev.state, prev.opt, prev.steps_done
        run = prev_run
    else:
        cfg = ablation_variant(run.resolved_model(), args.variant)

    log_path = out / "train_log.jsonl"
    with open(log_path, "a") as log_fh:
        result = train_run(run, cfg=cfg, state=state, opt=opt,
                           start_step=start_step, log_fh=log_fh)
    ckpt = out / "checkpoint.fdck"
    save_run_checkpoint(ckpt, run, result)
    last = result.history[-1] if result.history else {}
    print(f"trained to step {result.steps_done}; final loss "
          f"{last.get('total', float('nan')):.4f}")
    print(f"checkpoint: {ckpt}")
    print(f"metrics log: {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .harness import evaluate_model, load_run_checkpoint

    ckpt_run, result = load_run_checkpoint(args.checkpoint)
    run = ckpt_run if args.config is None else _load_run(args)
    if args.seed is not None:
        run = dataclasses.replace(run, seed=args.seed)
    if args.out is not None:
        run = dataclasses.replace(run, out_dir=args.out)
    out = _out_dir(run)

    episodes = None
    if args.episodes:
        _, episodes = read_episodes(args.episodes)
    report, diag = evaluate_model(result.state, result.cfg, run, episodes=episodes)
    report.extras.update({
        "score_threshold": 0.0,
        "bg_dominance_rate": diag.bg_dominance_rate,
        "mean_separation": diag.mean_separation,
    })
    report_path = out / "eval_report.json"
    report_path.write_text(report.to_json())
    print(report.table())
    print("confusion matrix (rows true, cols predicted, last is BG):")
    print(report.confusion)
    print(f"report: {report_path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .harness import ablation_summary, ablation_table, run_ablation

    run = _load_run(args)
    out = _out_dir(run)
    outcomes = run_ablation(run, log=print)
    table = ablation_table(outcomes)
    summary = ablation_summary(outcomes)
    summary["config"] = run_config_to_dict(run)
    (out / "ablation.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    print(table)
    print(f"summary: {out / 'ablation.json'}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck as gc

    if args.inject_fault:
        gc._INJECT_FAULT = args.inject_fault
    run = _load_run(args)
    results, ok = gc.run_gradcheck(seed=run.seed)
    failures = [r for r in results if not r.ok]
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.ok else "FAIL"
        print(f"{r.name:<{width}s}  max rel err {r.max_rel_error:.3e}  "
              f"(tol {r.tolerance:.0e})  {status}")
    if failures:
        print(f"gradient check FAILED for: {', '.join(r.name for r in failures)}",
              file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(results)} gradient checks passed")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {
            "gen": cmd_gen,
            "train": cmd_train,
            "eval": cmd_eval,
            "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck,
        }[args.command]
        return handler(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CorruptionError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
