"""Command-line interface.

Subcommands mirror the pipeline stages: ``parse`` mines templates,
``train`` produces a model file, ``detect`` streams a log through a
trained model and emits anomaly reports, ``eval`` runs the
chronological split protocol over a labeled dataset, ``synth``
generates a corpus from a manifest, and ``inspect`` summarizes a model
file.

Exit codes: 0 success (and, for ``detect``, a clean stream); 1 anomalies
were reported by ``detect``; 2 any error.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import modelstate, synth
from .errors import TpladError
from .evaluation import load_dataset, run_split_experiment
from .pipeline import (
    PipelineConfig,
    config_hash,
    detect_online,
    read_raw_lines,
    train_offline,
)


def _load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    return PipelineConfig.load(path)


def _echo(quiet: bool):
    def note(msg: str):
        if not quiet:
            print(msg, file=sys.stderr)
    return note


def cmd_parse(args) -> int:
    from .parser import DrainParser, parse_stream

    config = _load_config(args.config)
    raws = read_raw_lines(args.input)
    parser = DrainParser(
        sim_threshold=config.parser.sim_threshold,
        depth=config.parser.depth,
        max_children=config.parser.max_children,
    )
    records = parse_stream(parser, raws)
    if args.templates_out:
        parser.save(args.templates_out)
    if args.records_out:
        with open(args.records_out, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps({
                    "line_no": record.line_no,
                    "template_id": record.template_id,
                    "params": record.params,
                }, sort_keys=True) + "\n")
    summary = {}
    for tid in range(1, parser.max_template_id + 1):
        template = parser.get_template(tid)
        if template is not None:
            summary[tid] = template
    print(f"{len(raws)} lines -> {len(summary)} templates")
    for tid, template in sorted(summary.items()):
        print(f"  [{tid:>4}] x{template.support_count:<6} {template.render()}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config)
    raws = read_raw_lines(args.input)
    state, timings = train_offline(raws, config, progress=_echo(args.quiet))
    modelstate.save(state, args.out)
    print(json.dumps({
        "model": args.out,
        "config_hash": config_hash(config),
        **timings,
    }, sort_keys=True))
    return 0


def cmd_detect(args) -> int:
    state = modelstate.load(args.model)
    raws = read_raw_lines(args.input)
    reports, stats = detect_online(raws, state)
    lines = [json.dumps(r.to_json(), sort_keys=True) for r in reports]
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
    else:
        for line in lines:
            print(line)
    print(json.dumps({"reports": len(reports), **stats}, sort_keys=True),
          file=sys.stderr)
    return 1 if reports else 0


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    records = load_dataset(args.dataset, args.format, args.key_pattern)
    fractions = [float(f) for f in args.fractions.split(",") if f.strip()]
    rows = run_split_experiment(
        records, fractions, config,
        granularity=args.granularity,
        dataset=args.dataset,
        progress=_echo(args.quiet))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
    header = f"{'frac':>5} {'train':>7} {'test':>7} {'prec':>7} {'rec':>7} " \
             f"{'f1':>7} {'unmatched':>9}"
    print(header)
    for row in rows:
        print(f"{row['fraction']:>5} {row['train_lines']:>7} "
              f"{row['test_lines']:>7} {row['precision']:>7.4f} "
              f"{row['recall']:>7.4f} {row['f1']:>7.4f} "
              f"{row['unmatched_fraction']:>9.4f}")
    return 0


def cmd_synth(args) -> int:
    manifest = synth.load_manifest(args.manifest)
    result = synth.generate(manifest, seed=args.seed)
    result.write(args.out)
    print(json.dumps(result.stats, sort_keys=True))
    return 0


def cmd_inspect(args) -> int:
    state = modelstate.load(args.model)
    info = {
        "config_hash": state.config_hash,
        "templates": len(state.template_vectors),
        "embedding_words": len(state.provider.table),
        "embedding_dim": state.provider.dim,
        "param_layout_width": state.param_models.width,
        "sequence": {
            "window": state.seq_config.window,
            "hidden": state.seq_config.hidden,
            "classes": state.seq_config.classes,
            "candidates": state.seq_config.candidate_count,
        },
    }
    if args.json:
        print(json.dumps(info, indent=2, sort_keys=True))
        return 0
    print(f"model {args.model}")
    for key, value in info.items():
        print(f"  {key}: {value}")
    if args.templates:
        for tid in sorted(state.template_vectors):
            template = state.parser.get_template(tid)
            keys = state.param_models.key_positions.get(tid, [])
            print(f"  [{tid:>4}] keys={keys} {template.render()}")
    return 0


def build_arg_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="tplad",
        description="Template-and-parameter log anomaly detection.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="mine templates from a log file")
    p.add_argument("--input", required=True)
    p.add_argument("--config")
    p.add_argument("--templates-out")
    p.add_argument("--records-out")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("train", help="train a model over a log file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="detect anomalies in a log file")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--report", help="write reports to this JSONL file")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval", help="run the chronological split protocol")
    p.add_argument("--dataset", required=True)
    p.add_argument("--format", required=True,
                   choices=["line_labeled", "group_labeled", "synthetic"])
    p.add_argument("--fractions", default="0.6,0.5,0.4")
    p.add_argument("--granularity", default="line", choices=["line", "group"])
    p.add_argument("--key-pattern")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a corpus from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="summarize a model file")
    p.add_argument("--model", required=True)
    p.add_argument("--templates", action="store_true")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)

    return ap


def main(argv=None) -> int:
    ap = build_arg_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except TpladError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
