"""Command-line interface.

Eight verbs cover the workflow end to end::

    grolab ingest    --input ratings.dat --format delimited-ratings --out seqs.tsv
    grolab synth     --users 500 --items 200 --avg-len 20 --out seqs.tsv
    grolab train     --config configs/pinned_synth.cfg --out runs/demo
    grolab defend    --config ... --defense gro
    grolab attack    --config ... --defense none
    grolab evaluate  --config ... --defense reverse
    grolab run       --config ... [--defense none,gro]
    grolab sweep     --config ... --axis lambda --values 0.01,0.1,1.0

Each verb exits 0 on success; failures print ``[stage] message`` on
stderr and exit non-zero.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .evalmetrics import evaluate_model, report_to_json
from .harness import (ExperimentConfig, attack_arm, deploy_arm, load_config,
                      pretrain_target, prepare_split, run_defense_arm,
                      run_experiment, sweep)
from .recmodels import save_checkpoint
from .seqdata import (dataset_stats, load_interactions, save_tsv_sequences,
                      synth_generate)
from .shield import DefenseMode


def _stats_json(ds) -> str:
    stats = dataset_stats(ds)
    return json.dumps({"num_users": stats.num_users,
                       "num_items": stats.num_items,
                       "avg_length": stats.avg_length,
                       "density": stats.density}, indent=2)


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    if getattr(args, "defense", None):
        cfg = replace(cfg, defenses=tuple(args.defense.split(",")))
    return cfg


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _single_defense(args) -> str:
    tags = args.defense.split(",")
    if len(tags) != 1:
        raise ValueError("this verb takes exactly one --defense tag")
    return tags[0]


def cmd_ingest(args) -> int:
    ds = load_interactions(args.input, args.format,
                           min_seq_len=args.min_seq_len,
                           min_item_count=args.min_item_count, sep=args.sep)
    save_tsv_sequences(ds, args.out)
    print(_stats_json(ds))
    return 0


def cmd_synth(args) -> int:
    ds = synth_generate(args.users, args.items, args.avg_len,
                        args.markov_order, seed=args.seed or 0)
    save_tsv_sequences(ds, args.out)
    print(_stats_json(ds))
    return 0


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(cfg)
    _, split = prepare_split(cfg)
    model = pretrain_target(cfg, split)
    save_checkpoint(model, out / "target_pretrained.ckpt")
    report = evaluate_model(model, split, DefenseMode("none"), cfg.eval_ks,
                            label="none", on_validation=True)
    print(report_to_json(report))
    return 0


def cmd_defend(args) -> int:
    cfg = _resolve_config(args)
    defense = _single_defense(args)
    out = _out_dir(cfg)
    _, split = prepare_split(cfg)
    target = pretrain_target(cfg, split)
    _, shield_mode, artifacts = deploy_arm(cfg, split, target, defense, out)
    print(json.dumps({"defense": defense, "shield": shield_mode.tag,
                      "artifacts": artifacts}, indent=2))
    return 0


def cmd_attack(args) -> int:
    cfg = _resolve_config(args)
    defense = _single_defense(args)
    out = _out_dir(cfg)
    _, split = prepare_split(cfg)
    target = pretrain_target(cfg, split)
    deployed, shield_mode, artifacts = deploy_arm(cfg, split, target,
                                                  defense, out)
    _, log, attack_artifacts = attack_arm(cfg, deployed, shield_mode,
                                          defense, out)
    print(json.dumps({"defense": defense, "queries": len(log),
                      "artifacts": artifacts + attack_artifacts}, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    defense = _single_defense(args)
    out = _out_dir(cfg)
    _, split = prepare_split(cfg)
    target = pretrain_target(cfg, split)
    target_report, surrogate_report, _ = run_defense_arm(cfg, split, target,
                                                         defense, out)
    print(report_to_json(target_report))
    print(report_to_json(surrogate_report))
    return 0


def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    artifacts = run_experiment(cfg)
    print(str(artifacts.out_dir / "summary.csv"))
    failed = artifacts.failed_stages
    for stage in failed:
        print(f"[{stage['stage']}] {stage['error']}", file=sys.stderr)
    return 1 if failed else 0


def cmd_sweep(args) -> int:
    cfg = _resolve_config(args)
    if args.axis == "lambda":
        values = [float(v) for v in args.values.split(",") if v.strip()]
    else:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    results = sweep(cfg, args.axis, values)
    print(str(Path(cfg.out_dir) / "sweep.csv"))
    status = 0
    for value, outcome in results:
        if isinstance(outcome, Exception):
            print(f"[sweep:{args.axis}={value}] {outcome}", file=sys.stderr)
            status = 1
        elif outcome.failed_stages:
            for stage in outcome.failed_stages:
                print(f"[sweep:{args.axis}={value}:{stage['stage']}] "
                      f"{stage['error']}", file=sys.stderr)
            status = 1
    return status


def _add_config_flags(sub, defense_default: str | None = None) -> None:
    sub.add_argument("--config", required=True,
                     help="experiment config file (key = value lines)")
    sub.add_argument("--seed", type=int, default=None,
                     help="override run.seed")
    sub.add_argument("--out", default=None, help="override run.out")
    if defense_default is not None:
        sub.add_argument("--defense", default=defense_default,
                         help="defense arm tag(s), comma-separated")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="grolab",
        description="Train, defend, attack, and evaluate sequential "
                    "recommenders under ranking-extraction attacks.")
    commands = parser.add_subparsers(dest="command", required=True)

    ingest = commands.add_parser("ingest", help="convert a raw interaction "
                                 "file into the tsv-sequences format")
    ingest.add_argument("--input", required=True)
    ingest.add_argument("--format", default="delimited-ratings",
                        choices=("delimited-ratings", "tsv-sequences"))
    ingest.add_argument("--out", required=True)
    ingest.add_argument("--min-seq-len", type=int, default=3)
    ingest.add_argument("--min-item-count", type=int, default=5)
    ingest.add_argument("--sep", default="::")
    ingest.set_defaults(func=cmd_ingest)

    synth = commands.add_parser("synth", help="generate a synthetic corpus")
    synth.add_argument("--users", type=int, required=True)
    synth.add_argument("--items", type=int, required=True)
    synth.add_argument("--avg-len", type=int, required=True)
    synth.add_argument("--markov-order", type=int, default=1)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=cmd_synth)

    train = commands.add_parser("train", help="pretrain the target model")
    _add_config_flags(train)
    train.set_defaults(func=cmd_train)

    defend = commands.add_parser("defend", help="produce one deployed "
                                 "defense arm from the pretrained target")
    _add_config_flags(defend, defense_default="gro")
    defend.set_defaults(func=cmd_defend)

    attack = commands.add_parser("attack", help="query one deployed arm "
                                 "and distill a surrogate")
    _add_config_flags(attack, defense_default="none")
    attack.set_defaults(func=cmd_attack)

    evaluate = commands.add_parser("evaluate", help="evaluate one arm's "
                                   "deployed target and its surrogate")
    _add_config_flags(evaluate, defense_default="none")
    evaluate.set_defaults(func=cmd_evaluate)

    run = commands.add_parser("run", help="full experiment over all "
                              "configured defense arms")
    _add_config_flags(run, defense_default="")
    run.set_defaults(func=cmd_run)

    swp = commands.add_parser("sweep", help="repeat the experiment along "
                              "one axis")
    _add_config_flags(swp, defense_default="")
    swp.add_argument("--axis", required=True, choices=("lambda", "n_queries"))
    swp.add_argument("--values", required=True,
                     help="comma-separated axis values")
    swp.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(f"[{args.command}] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
