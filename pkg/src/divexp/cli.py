"""Command line entry point.

    divexp run CONFIG
    divexp compare DIR STRATEGY_A STRATEGY_B
    divexp ablate CONFIG --k 0,2,4,10,20
    divexp oracle {cg,theorem1,theorem2,all}

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
failure, 3 failed oracle check. ``DIVEXP_OUTPUT_ROOT`` overrides the
configured output directory.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .experiments import ConfigError, ablate_k, compare_runs, parse_config, run_experiment
from .oracles import ORACLES

OK, INVALID, RUNTIME, CHECK_FAILED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(INVALID, f"{self.prog}: error: {message}\n")


def _k_list(text: str) -> list[int]:
    try:
        values = [int(x) for x in text.replace(" ", "").split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid k list {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty k list")
    return values


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="divexp", description="Diverse-exploration policy-gradient experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="train every seed of a configuration")
    p.add_argument("config", type=Path)

    p = sub.add_parser("compare", help="paired comparison of two strategies' runs")
    p.add_argument("directory", type=Path)
    p.add_argument("strategy_a")
    p.add_argument("strategy_b")
    p.add_argument("--json", action="store_true", help="print the summary as JSON")

    p = sub.add_parser("ablate", help="repeat a configuration over perturbation counts")
    p.add_argument("config", type=Path)
    p.add_argument("--k", type=_k_list, required=True, help="comma-separated perturbation counts")

    p = sub.add_parser("oracle", help="run a numerical oracle check")
    p.add_argument("name", choices=sorted(ORACLES) + ["all"])
    return parser


def _progress(seed, rec):
    logging.getLogger("divexp").info(
        "seed %d iteration %d: return %.3f main %.3f step KL %.4g", seed, rec.iteration, rec.avg_return,
        rec.main_return, rec.step_kl,
    )


def _summary_json(summary) -> str:
    return json.dumps({
        "strategy_a": summary.strategy_a,
        "strategy_b": summary.strategy_b,
        "iterations": summary.iterations,
        "mean_return_a": summary.returns_a.mean.tolist(),
        "mean_return_b": summary.returns_b.mean.tolist(),
        "tests": {t.metric: {"mean_difference": t.mean_difference, "t_p_value": t.t_p_value,
                             "sign_p_value": t.sign_p_value, "degenerate": t.degenerate}
                  for t in (summary.performance, summary.pairwise_kl, summary.cov_trace)},
    }, indent=2)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    progress = _progress if args.verbose else None
    try:
        if args.verb == "run":
            cfg = parse_config(args.config)
            manifest = run_experiment(cfg, progress=progress)
            print(f"wrote {len(manifest['files'])} metrics files to {cfg.directory / cfg['strategy']}")
            if manifest["errors"]:
                print(f"failed seeds: {', '.join(manifest['errors'])}", file=sys.stderr)
                return RUNTIME
        elif args.verb == "ablate":
            cfg = parse_config(args.config)
            manifests = ablate_k(cfg, args.k, progress=progress)
            print(f"wrote ablation over k={args.k} to {cfg.directory / ('ablate_' + cfg['strategy'])}")
            if any(m["errors"] for m in manifests.values()):
                return RUNTIME
        elif args.verb == "compare":
            summary = compare_runs(args.directory, args.strategy_a, args.strategy_b)
            print(_summary_json(summary) if args.json else summary.report())
        elif args.verb == "oracle":
            names = sorted(ORACLES) if args.name == "all" else [args.name]
            reports = [ORACLES[n]() for n in names]
            for r in reports:
                print(r.summary())
                for line in r.details:
                    print(f"  {line}")
            if not all(r.passed for r in reports):
                return CHECK_FAILED
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return INVALID
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return INVALID if args.verb == "compare" else RUNTIME
    except Exception as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return RUNTIME
    return OK


if __name__ == "__main__":
    sys.exit(main())
