"""``sedlab`` command line: synth, train, evaluate, ablate, report."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .data import ClassVocabulary, read_strong_annotations
from .harness import (
    cmd_ablate,
    cmd_evaluate,
    cmd_synth,
    cmd_train,
    collect_results,
    load_config,
    resolve_grid,
    results_markdown,
)
from .metrics import event_f1
from .train import TrainingDiverged

log = logging.getLogger("sedlab")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML file merged over the profile defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="PATH=VALUE",
                   help="override one config entry, e.g. train.teacher_snr_db=inf (repeatable)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=int, help="seed for data generation and training")
    p.add_argument("--profile", choices=("desk", "full"), default="desk")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sedlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a dataset (WAV + annotation tables + manifest)")
    _common(p)

    p = sub.add_parser("train", help="train a mean-teacher CRNN")
    _common(p)
    p.add_argument("--dataset", type=Path, help="dataset directory from `synth` (generated when omitted)")

    p = sub.add_parser("evaluate", help="score a checkpoint on a strongly labeled subset")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--subset", default="eval", choices=("eval", "xvalid", "synthetic_strong"))

    p = sub.add_parser("ablate", help="run an ablation grid (built-in table1..table6 or a YAML grid file)")
    _common(p)
    p.add_argument("grid")
    p.add_argument("--cells", type=int, nargs="*", help="run only these column indices")

    p = sub.add_parser("report", help="markdown table from run directories, or score a detection table")
    _common(p)
    p.add_argument("runs", nargs="*", type=Path, help="run directories holding metrics_<subset>.json")
    p.add_argument("--subset", default="eval")
    p.add_argument("--title", default="results")
    p.add_argument("--refs", type=Path, help="reference annotation table (scorer mode)")
    p.add_argument("--dets", type=Path, help="detection table (scorer mode)")
    p.add_argument("--classes", help="comma-separated class names (scorer mode; default class_0..)")
    return parser


def _score_tables(args, cfg) -> int:
    names = args.classes.split(",") if args.classes else list(cfg.vocabulary.names)
    vocab = ClassVocabulary(tuple(names))
    refs = read_strong_annotations(args.refs.read_text(), vocab)
    dets = read_strong_annotations(args.dets.read_text(), vocab)
    report = event_f1(refs, dets, cfg.collar)
    print("class\ttp\tfp\tfn\tf1")
    for c, s in report.per_class.items():
        print(f"{names[c]}\t{s.tp}\t{s.fp}\t{s.fn}\t{s.f1:.4f}")
    print(f"macro_f1\t\t\t\t{report.macro_f1:.4f}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.profile, args.config, args.overrides, args.seed, args.out)
    except (KeyError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    out = Path(cfg.out)
    if args.command == "synth":
        print(cmd_synth(cfg, out))
    elif args.command == "train":
        try:
            print(cmd_train(cfg, args.dataset, out))
        except TrainingDiverged as err:
            print(f"training diverged: {err}", file=sys.stderr)
            return 3
    elif args.command == "evaluate":
        report = cmd_evaluate(cfg, args.checkpoint, args.dataset, args.subset, out)
        print(report.to_csv(), end="")
    elif args.command == "ablate":
        try:
            grid = resolve_grid(args.grid)
        except KeyError as err:
            print(err, file=sys.stderr)
            return 2
        results = cmd_ablate(cfg, grid, out, args.cells)
        print((out / "results.md").read_text(), end="")
        return 0 if all(r.status == "ok" for r in results) else 1
    elif args.command == "report":
        if args.refs or args.dets:
            if not (args.refs and args.dets):
                print("scorer mode needs both --refs and --dets", file=sys.stderr)
                return 2
            return _score_tables(args, cfg)
        print(results_markdown(args.title, collect_results(args.runs, args.subset)), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
