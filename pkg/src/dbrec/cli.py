"""Command-line pipeline: prepare -> pretrain -> train -> eval -> export, plus ablate.

Each command validates its prerequisites, writes its artifacts under the
configured output directory, and drops the fully resolved configuration
beside them. All randomness flows from the single configured seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import reports
from .config import RunConfig, resolve_config, write_config_echo
from .data import InteractionDataset, count_raw, load_raw, prepare as prepare_dataset, to_implicit
from .errors import ConfigError, DBRecError
from .evaluation import evaluate, export_embeddings
from .model import DBRec, VARIANTS
from .training import (
    carry_pretrained,
    init_groups_from_embeddings,
    load_checkpoint,
    model_from_checkpoint,
    pretrain,
    save_checkpoint,
    train,
)

DATASET_FILE = "dataset.json"
PRETRAIN_FILE = "pretrain.ckpt"


def _dataset_path(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir) / DATASET_FILE


def _pretrain_path(cfg: RunConfig) -> Path:
    return Path(cfg.out_dir) / PRETRAIN_FILE


def _variant_dir(cfg: RunConfig, variant: str | None = None) -> Path:
    return Path(cfg.out_dir) / (variant or cfg.variant)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing prerequisite {path}; produce it with `dbrec {producer}`")
    return path


def _load_dataset(cfg: RunConfig) -> InteractionDataset:
    return InteractionDataset.load(_require(_dataset_path(cfg), "prepare"))


def cmd_prepare(cfg: RunConfig) -> None:
    if not cfg.data_path:
        raise ConfigError("prepare: set data_path (config key or --data)")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = load_raw(cfg.data_path, cfg.data_format)
    users, items, count = count_raw(records)
    print(f"raw: {users} users, {items} items, {count} records")
    positives = to_implicit(records, cfg.data_format)
    print(f"implicit: {len(positives)} positive pairs")
    dataset = prepare_dataset(
        cfg.data_path,
        cfg.data_format,
        ratios=cfg.ratios(),
        seed=cfg.seed,
        min_items_per_user=cfg.min_items_per_user,
        min_users_per_item=cfg.min_users_per_item,
        filter_fixpoint=cfg.filter_fixpoint,
    )
    dataset.save(_dataset_path(cfg))
    counts = dataset.counts()
    print(
        f"prepared: {dataset.num_users} users, {dataset.num_items} items, "
        f"train/valid/test = {counts['train']}/{counts['valid']}/{counts['test']}"
    )
    write_config_echo(cfg, out / "prepare.resolved.cfg")
    print(f"wrote {_dataset_path(cfg)}")


def cmd_pretrain(cfg: RunConfig) -> None:
    dataset = _load_dataset(cfg)
    tcfg = cfg.train_config()
    result = pretrain(dataset, tcfg)
    out = Path(cfg.out_dir)
    save_checkpoint(
        _pretrain_path(cfg),
        result.params,
        variant="dbrec-o",
        epoch=tcfg.pretrain_epochs,
        meta={"phase": "pretrain"},
    )
    reports.write_training_log(out / "pretrain_log.csv", result.log)
    if result.log:
        reports.render_training_curves(out / "pretrain_loss.png", result.log)
    write_config_echo(cfg, out / "pretrain.resolved.cfg")
    last = result.log[-1].cf if result.log else float("nan")
    print(f"pretrained {tcfg.pretrain_epochs} epochs; final interaction loss {last:.4f}")
    print(f"wrote {_pretrain_path(cfg)}")


def _initial_params(cfg: RunConfig, dataset: InteractionDataset):
    from .model import ModelParams

    tcfg = cfg.train_config()
    if cfg.use_pretrain:
        ckpt = load_checkpoint(_require(_pretrain_path(cfg), "pretrain"))
        params = carry_pretrained(model_from_checkpoint(ckpt), tcfg)
        init_groups_from_embeddings(params, tcfg)
        return params
    return ModelParams(dataset.num_users, dataset.num_items, tcfg.hp)


def cmd_train(cfg: RunConfig, resume: bool = False) -> None:
    dataset = _load_dataset(cfg)
    tcfg = cfg.train_config()
    vdir = _variant_dir(cfg)
    vdir.mkdir(parents=True, exist_ok=True)

    start_epoch = 0
    best_hr10 = None
    best_epoch = None
    evals_since_improve = 0
    if resume:
        ckpt = load_checkpoint(_require(vdir / "last.ckpt", "train"))
        if ckpt.variant != cfg.variant:
            raise ConfigError(
                f"checkpoint variant '{ckpt.variant}' does not match configured '{cfg.variant}'"
            )
        params = model_from_checkpoint(ckpt)
        start_epoch = ckpt.epoch
        best_hr10 = ckpt.meta.get("best_hr10")
        best_epoch = ckpt.meta.get("best_epoch")
        evals_since_improve = ckpt.meta.get("evals_since_improve", 0)
    else:
        params = _initial_params(cfg, dataset)

    result = train(
        dataset,
        tcfg,
        params,
        variant=cfg.variant,
        start_epoch=start_epoch,
        checkpoint_dir=vdir,
        best_hr10=best_hr10,
        best_epoch=best_epoch,
        evals_since_improve=evals_since_improve,
        eval_split="valid",
    )
    if not (vdir / "best.ckpt").exists():
        # no validation pass ran; the final state is the best available
        save_checkpoint(vdir / "best.ckpt", result.params, variant=cfg.variant,
                        epoch=tcfg.epochs, meta={"best_hr10": None, "best_epoch": None,
                                                 "evals_since_improve": 0})
    reports.write_training_log(vdir / "train_log.csv", result.log)
    if result.log:
        reports.render_training_curves(vdir / "train_loss.png", result.log)
    write_config_echo(cfg, vdir / "train.resolved.cfg")
    note = f"best val HR@10 {result.best_hr10:.5f} at epoch {result.best_epoch}" \
        if result.best_hr10 is not None else "no validation passes"
    stopped = " (early stop)" if result.stopped_early else ""
    print(f"trained variant {cfg.variant}: {len(result.log)} epochs{stopped}; {note}")
    print(f"wrote {vdir / 'best.ckpt'}")


def _model_for_eval(cfg: RunConfig, variant: str | None = None) -> DBRec:
    vdir = _variant_dir(cfg, variant)
    ckpt = load_checkpoint(_require(vdir / "best.ckpt", "train"))
    params = model_from_checkpoint(ckpt)
    return DBRec(params, VARIANTS[ckpt.variant])


def cmd_eval(cfg: RunConfig) -> None:
    dataset = _load_dataset(cfg)
    model = _model_for_eval(cfg)
    report = evaluate(
        model,
        dataset,
        cfg.eval_split,
        seed=cfg.seed,
        count=cfg.eval_negatives,
        max_pairs=cfg.eval_max_pairs,
        label=cfg.variant,
    )
    vdir = _variant_dir(cfg)
    stem = f"metrics_{cfg.eval_split}"
    reports.write_metrics_csv(vdir / f"{stem}.csv", [report])
    reports.write_metrics_table(vdir / f"{stem}.txt", [report])
    reports.render_metric_curves(vdir / f"{stem}.png", [report])
    write_config_echo(cfg, vdir / "eval.resolved.cfg")
    print(reports.format_metrics_table([report]), end="")
    print(f"wrote {vdir / (stem + '.csv')}")


def cmd_export(cfg: RunConfig) -> None:
    model = _model_for_eval(cfg)
    vdir = _variant_dir(cfg)
    rows = export_embeddings(model, vdir / "embeddings.csv")
    reports.render_embedding_map(vdir / "embedding_map.png", model, seed=cfg.seed)
    write_config_echo(cfg, vdir / "export.resolved.cfg")
    print(f"exported {rows} embedding rows to {vdir / 'embeddings.csv'}")


def cmd_ablate(cfg: RunConfig) -> None:
    dataset = _load_dataset(cfg)
    collected = []
    for variant in ("dbrec-o", "dbrec-i", "dbrec-u", "dbrec"):
        vcfg = dataclasses.replace(cfg, variant=variant)
        cmd_train(vcfg)
        model = _model_for_eval(vcfg)
        report = evaluate(
            model,
            dataset,
            cfg.eval_split,
            seed=cfg.seed,
            count=cfg.eval_negatives,
            max_pairs=cfg.eval_max_pairs,
            label=variant,
        )
        collected.append(report)
    out = Path(cfg.out_dir)
    reports.write_metrics_csv(out / "ablation.csv", collected)
    reports.write_metrics_table(out / "ablation.txt", collected)
    reports.render_ablation_bars(out / "ablation.png", collected)
    write_config_echo(cfg, out / "ablate.resolved.cfg")
    print(reports.format_metrics_table(collected), end="")
    print(f"wrote {out / 'ablation.csv'}")


COMMANDS = {
    "prepare": cmd_prepare,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "export": cmd_export,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dbrec",
        description="Dual-bridging recommender: prepare, pretrain, train, evaluate, export.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} step")
        p.add_argument("--config", "-c", help="flat key=value config file")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--variant", choices=sorted(VARIANTS), help="model variant")
        p.add_argument("--data", help="raw input file (prepare)")
        p.add_argument("--format", choices=("movielens", "amazon", "gowalla"),
                       help="raw input format (prepare)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config key")
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue from <out>/<variant>/last.ckpt")
    return parser


def _overrides_from_args(args: argparse.Namespace) -> dict[str, str]:
    overrides: dict[str, str] = {}
    for entry in args.set:
        if "=" not in entry:
            raise ConfigError(f"--set expects KEY=VALUE, got {entry!r}")
        key, value = entry.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.variant is not None:
        overrides["variant"] = args.variant
    if args.data is not None:
        overrides["data_path"] = args.data
    if args.format is not None:
        overrides["data_format"] = args.format
    if args.out is not None:
        overrides["out_dir"] = args.out
    return overrides


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.config, overrides=_overrides_from_args(args))
        cfg.validate()
        if args.command == "train":
            cmd_train(cfg, resume=args.resume)
        else:
            COMMANDS[args.command](cfg)
    except DBRecError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
