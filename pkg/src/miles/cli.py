"""Command-line entrypoint: generate, pretrain, finetune, eval, ablate, gradcheck.

Exit codes: 0 success, 1 usage or configuration problem, 2 data or state
problem, 3 numeric failure.  Log verbosity comes from MILES_LOG_LEVEL
(error, info, or debug).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from . import evaluation, gradcheck, reports, trainer
from .config import RunConfig, apply_overrides, load_config, to_dict
from .errors import (
    ConfigError,
    DataError,
    MilesError,
    NumericError,
    StateError,
    UsageError,
)

log = logging.getLogger(__name__)

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class _Parser(argparse.ArgumentParser):
    """argparse that reports bad usage through the package's exit-code scheme."""

    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None,
                        help="JSON config file; defaults apply when omitted")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="PATH=VALUE",
                        help="dot-path config override, e.g. train.tau=0.1")
    common.add_argument("--seed", type=int, default=None,
                        help="override both data and training seeds")

    parser = _Parser(prog="miles", description=__doc__.split("\n", 1)[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common],
                       help="write a synthetic moving-shape corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing non-empty directory")

    p = sub.add_parser("pretrain", parents=[common],
                       help="run the two-stage contrastive + masked-regression curriculum")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", action="store_true",
                   help="continue from the newest epoch checkpoint in --out")
    p.add_argument("--dry-run", action="store_true",
                   help="validate config, build the model, run one step, write nothing")
    p.add_argument("--no-mvm", action="store_true",
                   help="contrastive-only baseline (no masked-feature regression)")

    p = sub.add_parser("finetune", parents=[common],
                       help="continue training from a checkpoint at the full frame count")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--no-mvm", action="store_true")

    p = sub.add_parser("eval", parents=[common],
                       help="retrieval and zero-shot reports for a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", default=None, help="corpus split (default from config)")
    p.add_argument("--mode", choices=("retrieval", "zeroshot", "all"), default="all")

    p = sub.add_parser("ablate", parents=[common],
                       help="train and score a variant grid along one axis")
    p.add_argument("--axis", required=True, choices=evaluation.ABLATION_AXES)
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", default="0,1,2",
                   help="comma-separated training seeds, one run per seed")
    p.add_argument("--split", default="val", help="held-out split to score")

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference check of every primitive and the full model")
    p.add_argument("--seeds", type=int, default=20,
                   help="random restarts per primitive case")
    p.add_argument("--skip-composite", action="store_true",
                   help="check primitives only")

    return parser


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.overrides:
        cfg = apply_overrides(cfg, args.overrides)
    if args.seed is not None:
        cfg.data.seed = args.seed
        cfg.train.seed = args.seed
    cfg.validate()
    return cfg


def _configure_logging() -> None:
    raw = os.environ.get("MILES_LOG_LEVEL", "info").lower()
    if raw not in _LOG_LEVELS:
        raise ConfigError(
            f"MILES_LOG_LEVEL must be one of {sorted(_LOG_LEVELS)}, got '{raw}'"
        )
    logging.basicConfig(level=_LOG_LEVELS[raw],
                        format="%(levelname)s %(name)s: %(message)s")


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    cfg = _load_run_config(args)
    out: Path = args.out
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"{out} exists and is not empty; pass --force to overwrite")
    datamod.generate_corpus(cfg.data, out)
    print(f"corpus written to {out}")
    print(f"  classes: {cfg.data.classes}")
    print(f"  clips: train={cfg.data.size} val={cfg.data.val_size} test={cfg.data.test_size}")
    print(f"  frames per clip: {cfg.data.frames}, resolution: {cfg.data.resolution}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _load_run_config(args)
    if args.no_mvm:
        cfg.train.recon_target = "none"
    corpus = datamod.load_split(args.corpus, "train")
    if args.dry_run:
        state = trainer.init_train_state(cfg)
        token_ids = trainer._tokenize_all(corpus, cfg.encoder)
        batch = np.arange(min(cfg.train.stages[0].batch_size, len(corpus)))
        record = trainer.train_step(state, corpus, token_ids, batch, cfg)
        print(f"dry run ok: l_total={record['l_total']:.4f} over {len(batch)} clips")
        return 0
    state = None
    if args.resume:
        ckpts = sorted(args.out.glob("epoch_*.ckpt"))
        if not ckpts:
            raise StateError(f"--resume given but no epoch checkpoints in {args.out}")
        state, cfg = trainer.load_state(ckpts[-1])
        print(f"resuming from {ckpts[-1]}")
    state = trainer.run_curriculum(cfg, corpus, args.out, state=state)
    fig = reports.write_loss_curves(args.out, args.out / "train_log.jsonl")
    last = state.loss_history[-1]
    print(f"pretraining done: {state.global_step} steps, "
          f"final l_total={last['l_total']:.4f}")
    print(f"checkpoint: {args.out / 'final.ckpt'}")
    print(f"loss curves: {fig}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _load_run_config(args)
    corpus = datamod.load_split(args.corpus, "train")
    state = trainer.finetune(cfg, args.checkpoint, corpus, args.out,
                             use_mvm=not args.no_mvm)
    fig = reports.write_loss_curves(args.out, args.out / "train_log.jsonl")
    last = state.loss_history[-1]
    print(f"finetuning done: {state.global_step} steps, "
          f"final l_total={last['l_total']:.4f}")
    print(f"checkpoint: {args.out / 'final.ckpt'}")
    print(f"loss curves: {fig}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    if args.config is not None:
        _, _, enc_meta = trainer.load_encoder_arrays(args.checkpoint)
        if enc_meta != to_dict(cfg.encoder):
            raise StateError(
                "checkpoint encoder geometry disagrees with --config; "
                "drop --config to use the checkpoint's own settings"
            )
    split = args.split or cfg.eval.split
    result = evaluation.evaluate_checkpoint(
        args.checkpoint, args.corpus, split=split,
        batch_size=cfg.eval.batch_size,
        concat_captions=cfg.eval.concat_captions,
    )
    if args.mode == "retrieval":
        result.pop("zeroshot", None)
    elif args.mode == "zeroshot":
        result = {k: result[k] for k in ("split", "n_queries", "zeroshot") if k in result}
        if "zeroshot" not in result:
            raise DataError("corpus metadata lacks class captions; cannot run zeroshot")
        paths = reports.write_zeroshot_report(args.out, result)
        z = result["zeroshot"]
        print(f"zero-shot accuracy: {z['accuracy']:.2f}% "
              f"({z['n_classes']} classes, chance {z['chance']:.2f}%)")
        print(f"reports: {', '.join(str(p) for p in paths)}")
        return 0
    paths = reports.write_retrieval_report(args.out, result)
    print((args.out / "eval.txt").read_text(), end="")
    print(f"reports: {', '.join(str(p) for p in paths)}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    except ValueError as exc:
        raise UsageError(f"--seeds must be comma-separated integers: {exc}") from exc
    if not seeds:
        raise UsageError("--seeds must name at least one seed")
    table = evaluation.ablation_run(cfg, args.axis, seeds, args.corpus,
                                    args.out / "runs", split=args.split)
    paths = reports.write_ablation_table(args.out, table)
    failed = [c for c in table.cells if not c.ok]
    print((args.out / f"ablation_{table.axis}.txt").read_text(), end="")
    print(f"cells: {len(table.cells) - len(failed)}/{len(table.cells)} ok, "
          f"masks validated: {table.stats['masks_validated']}")
    print(f"reports: {', '.join(str(p) for p in paths)}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_primitive_suite(seeds=args.seeds)
    if not args.skip_composite:
        results.append(gradcheck.run_encoder_composite())
    width = max(len(r.name) for r in results)
    for r in results:
        status = "pass" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  max_rel_err={r.max_rel_err:10.3e}  "
              f"tol={r.tol:.0e}  {status}")
    bad = [r for r in results if not r.passed]
    print(f"{len(results) - len(bad)}/{len(results)} gradient checks passed")
    if bad:
        raise NumericError(f"{len(bad)} gradient checks failed")
    return 0


_COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    try:
        _configure_logging()
        parser = _build_parser()
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (DataError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except MilesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
