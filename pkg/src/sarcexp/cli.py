"""Command-line entry point: ``sarcexp <subcommand> ...``.

Exit status is 0 on success, 1 for invalid input (bad flags, config, data,
ratings or checkpoints) and 2 for any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import torch

from .analysis import RatingSet, human_eval_summary, pos_overlap_table
from .backends import HashedImageFeatures, PosTagger, SynonymLexicon
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, parse_assignment, resolve_config
from .data import decode
from .ingestion import Dataset, DatasetError, compute_stats, load_dataset, save_dataset, split_dataset, validate_exclusions
from .metrics import evaluate_corpus
from .model import Featurizer, generate
from .reports import dumps_json, emit_report, format_table
from .training import finetune, model_from_checkpoint, pretrain

log = logging.getLogger("sarcexp")

EXIT_OK, EXIT_INVALID, EXIT_FAILURE = 0, 1, 2


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared helpers


def _run_config(args) -> RunConfig:
    overrides = dict(parse_assignment(s) for s in args.set or ())
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "data", None) is not None:
        overrides["data.path"] = str(args.data)
    if getattr(args, "resplit", False):
        overrides["data.resplit"] = True
    return resolve_config(args.config, overrides=overrides)


def _dataset(cfg: RunConfig) -> Dataset:
    path = cfg.data["path"]
    if not path:
        raise UsageError("no dataset given: pass --data or set data.path")
    ds = load_dataset(path)
    return split_dataset(ds, cfg.data["split_ratios"], seed=cfg.seed, resplit=cfg.data["resplit"])


def _write_text(path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def _read_generations(path) -> dict[str, str]:
    gens: dict[str, str] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid, text = str(rec["id"]), rec["generation"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: expected {{\"id\", \"generation\"}}: {exc}") from exc
            if not isinstance(text, str):
                raise DatasetError(f"{path}:{lineno}: generation must be a string")
            if sid in gens:
                raise DatasetError(f"{path}:{lineno}: duplicate id {sid!r}")
            gens[sid] = text
    if not gens:
        raise DatasetError(f"{path}: no generations")
    return gens


def _aligned(gens_path, data_path):
    """Samples that have a generation, in id order, with the generations aligned."""
    gens = _read_generations(gens_path)
    by_id = load_dataset(data_path).by_id()
    unknown = sorted(set(gens) - set(by_id))
    if unknown:
        raise DatasetError(f"generations for ids not in {data_path}: {unknown[:5]}")
    samples = [by_id[i] for i in sorted(gens)]
    missing = [s.id for s in samples if not s.explanation]
    if missing:
        raise DatasetError(f"no reference explanation for {missing[:5]}")
    return samples, [gens[s.id] for s in samples]


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    cfg = _run_config(args)
    ds = _dataset(cfg)
    stats = compute_stats(ds)
    emit_report(stats, args.stats_out)
    if args.table_out:
        emit_report(stats, args.table_out, fmt="table")
    if args.split_out:
        save_dataset(ds, args.split_out)
    flagged = validate_exclusions(ds)
    if args.exclusions_out:
        _write_text(args.exclusions_out, dumps_json(flagged))
    for rule, ids in flagged.items():
        if ids:
            log.warning("%d sample(s) violate exclusion rule %s", len(ids), rule)
    sys.stdout.write(format_table(stats))
    return EXIT_OK


def _train_phase(args, phase: str) -> int:
    cfg = _run_config(args)
    ds = _dataset(cfg)
    samples = [s for s in ds if s.split in ("train", "val")]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out)
    init = load_checkpoint(args.init) if getattr(args, "init", None) else None
    resume = load_checkpoint(args.resume) if args.resume else None
    last_path = out / "last.ckpt"

    def save_last(trainer):
        save_checkpoint(trainer.checkpoint(best=False), last_path)

    extractor = HashedImageFeatures(cfg.model_kwargs()["n_regions"], cfg.model_kwargs()["image_dim"], cfg.data["strict_images"])
    run = pretrain if phase == "pretrain" else finetune
    best = run(
        samples,
        cfg.train_config(phase),
        model_kwargs=cfg.model_kwargs(),
        init=init,
        resume=resume,
        extractor=extractor,
        min_freq=cfg.data["min_freq"],
        on_epoch_end=save_last,
    )
    save_checkpoint(best, out / "model.ckpt")
    _write_text(out / "vocab.txt", "\n".join(best.vocab_tokens) + "\n")
    _write_text(out / "history.json", json.dumps(best.config.get("history", []), sort_keys=True, indent=2) + "\n")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    return _train_phase(args, "pretrain")


def cmd_train(args) -> int:
    return _train_phase(args, "finetune")


def cmd_generate(args) -> int:
    cfg = _run_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    model, vocab = model_from_checkpoint(ckpt)
    ds = _dataset(cfg)
    samples = list(ds) if args.split == "all" else ds.split(args.split)
    if not samples:
        raise DatasetError(f"split {args.split!r} is empty")
    mc = model.cfg
    extractor = HashedImageFeatures(mc.n_regions, mc.image_dim, cfg.data["strict_images"])
    feat = Featurizer(vocab, mc.max_token_length, extractor, mc.n_regions, mc.image_dim)
    gen_cfg = cfg.generation_config()
    lines = []
    batch_size = max(1, cfg.values["train"]["batch_size"])
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            ids = generate(model, model.encode(feat(chunk)), gen_cfg)
            lines += [json.dumps({"id": s.id, "generation": decode(x, vocab)}, sort_keys=True) for s, x in zip(chunk, ids)]
    _write_text(args.out, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    samples, gens = _aligned(args.gens, args.data)
    report = evaluate_corpus(gens, samples)
    emit_report(report, args.report)
    if args.table:
        emit_report(report, args.table, fmt="table")
    return EXIT_OK


def cmd_analyze_pos(args) -> int:
    samples, gens = _aligned(args.gens, args.data)
    tagger = PosTagger.from_file(args.pos_lexicon) if args.pos_lexicon else None
    syns = SynonymLexicon.from_file(args.synonyms) if args.synonyms else None
    slices = {
        "overall": range(len(samples)),
        "non_ocr": [i for i, s in enumerate(samples) if not s.is_ocr_sample],
        "ocr": [i for i, s in enumerate(samples) if s.is_ocr_sample],
    }
    table = pos_overlap_table(gens, [s.explanation for s in samples], slices, tagger, syns)
    emit_report(table, args.out)
    if args.table:
        emit_report(table, args.table, fmt="table")
    return EXIT_OK


def cmd_rater_agreement(args) -> int:
    summary = human_eval_summary(RatingSet.from_jsonl(args.ratings))
    emit_report(summary, args.out)
    if args.table:
        emit_report(summary, args.table, fmt="table")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _config_flags(p: argparse.ArgumentParser, data_required: bool = False) -> None:
    p.add_argument("--config", type=Path, help="TOML config file")
    p.add_argument("--seed", type=int, help="seed for splitting, initialisation and shuffling")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.epochs=3")
    p.add_argument("--data", type=Path, required=data_required, help="dataset JSONL (overrides data.path)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sarcexp", description="Multimodal sarcasm explanation pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="validate a dataset, assign splits and report statistics")
    _config_flags(p)
    p.add_argument("--stats-out", type=Path, required=True, help="statistics JSON")
    p.add_argument("--table-out", type=Path, help="statistics as a fixed-width table")
    p.add_argument("--split-out", type=Path, help="write the dataset with split tags as JSONL")
    p.add_argument("--exclusions-out", type=Path, help="JSON of sample ids flagged by each exclusion rule")
    p.add_argument("--resplit", action="store_true", help="reassign splits even where the data already has them")
    p.set_defaults(func=cmd_ingest)

    for name, func, text in (
        ("pretrain", cmd_pretrain, "train the encoder as a sarcastic/non-sarcastic classifier"),
        ("train", cmd_train, "fine-tune the explanation generator"),
    ):
        p = sub.add_parser(name, help=text)
        _config_flags(p)
        p.add_argument("--out-dir", type=Path, required=True, help="run directory for checkpoints and config.json")
        p.add_argument("--resume", type=Path, help="continue from a last.ckpt of the same phase")
        p.add_argument("--resplit", action="store_true", help=argparse.SUPPRESS)
        if name == "train":
            p.add_argument("--init", type=Path, help="initialise from a pretraining checkpoint")
        p.set_defaults(func=func)

    p = sub.add_parser("generate", help="write explanations for one split as JSONL")
    _config_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    p.add_argument("--out", type=Path, required=True, help='output JSONL of {"id", "generation"}')
    p.add_argument("--resplit", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generations against reference explanations")
    p.add_argument("--gens", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--report", type=Path, required=True, help="metric report JSON")
    p.add_argument("--table", type=Path, help="metric table (scores x100)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze-pos", help="part-of-speech overlap between generations and references")
    p.add_argument("--gens", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--table", type=Path)
    p.add_argument("--pos-lexicon", type=Path, help="word<TAB>TAG file replacing the bundled lexicon")
    p.add_argument("--synonyms", type=Path, help="TAG<TAB>word<TAB>word... file replacing the bundled synonyms")
    p.set_defaults(func=cmd_analyze_pos)

    p = sub.add_parser("rater-agreement", help="aggregate human ratings and Fleiss' kappa")
    p.add_argument("--ratings", type=Path, required=True, help="JSONL of {sample_id, rater_id, adequacy, fluency}")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--table", type=Path)
    p.set_defaults(func=cmd_rater_agreement)
    return parser


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_INVALID
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, IsADirectoryError) as exc:
        # covers dataset, config, checkpoint, rating and training validation errors
        print(f"sarcexp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"sarcexp {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


def main(argv: Optional[Sequence[str]] = None) -> None:
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
