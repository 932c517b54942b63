"""Loading, validation, splitting and summary statistics for MORE-format JSONL files."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import Sample, tokenize

SCHEMA_VERSION = 1
SPLIT_ORDER = ("train", "val", "test")
DEFAULT_SPLIT_SEED = 13

_REQUIRED = ("id", "caption")
_KNOWN_FIELDS = {
    "id", "image", "image_features", "caption", "explanation", "ocr_text",
    "split", "is_ocr_sample", "label",
}
_LABELS = {"sarcastic": 1, "non-sarcastic": 0, "non_sarcastic": 0, 1: 1, 0: 0, True: 1, False: 0}


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset files."""


@dataclass(frozen=True)
class Dataset:
    samples: tuple[Sample, ...]
    source: Optional[str] = None
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        seen = set()
        for s in self.samples:
            if s.id in seen:
                raise DatasetError(f"duplicate sample id {s.id!r}")
            seen.add(s.id)

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def split(self, name: str) -> list[Sample]:
        return [s for s in self.samples if s.split == name]

    def by_id(self) -> dict[str, Sample]:
        return {s.id: s for s in self.samples}


def parse_record(record: dict, where: str = "") -> Sample:
    """Turn one decoded JSONL object into a validated :class:`Sample`."""
    if not isinstance(record, dict):
        raise DatasetError(f"{where}expected a JSON object")
    for key in _REQUIRED:
        if key not in record or record[key] is None:
            raise DatasetError(f"{where}missing required field {key!r}")
    unknown = set(record) - _KNOWN_FIELDS
    if unknown:
        raise DatasetError(f"{where}unknown field(s) {sorted(unknown)}")
    label = record.get("label")
    if label is not None:
        if label not in _LABELS:
            raise DatasetError(f"{where}invalid label {label!r}")
        label = _LABELS[label]
    feats = record.get("image_features")
    try:
        return Sample(
            id=str(record["id"]),
            caption=record["caption"],
            explanation=record.get("explanation") or "",
            image=record.get("image"),
            image_features=None if feats is None else np.asarray(feats, dtype=np.float64),
            ocr_text=record.get("ocr_text"),
            is_ocr_sample=record.get("is_ocr_sample"),
            split=record.get("split") or "unassigned",
            label=label,
        )
    except (ValueError, TypeError) as exc:
        raise DatasetError(f"{where}{exc}") from exc


def load_dataset(path) -> Dataset:
    path = Path(path)
    samples = []
    seen: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}: "
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}malformed JSON ({exc.msg})") from exc
            sample = parse_record(record, where)
            if sample.id in seen:
                raise DatasetError(f"{where}duplicate id {sample.id!r} (first seen on line {seen[sample.id]})")
            seen[sample.id] = lineno
            samples.append(sample)
    return Dataset(tuple(samples), source=str(path))


def sample_to_record(s: Sample) -> dict:
    return {
        "id": s.id,
        "image": s.image,
        "image_features": None if s.image_features is None else s.image_features.tolist(),
        "caption": s.caption,
        "explanation": s.explanation,
        "ocr_text": s.ocr_text,
        "split": None if s.split == "unassigned" else s.split,
        **({"label": s.label} if s.label is not None else {}),
    }


def save_dataset(ds: Dataset, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in ds.samples:
            fh.write(json.dumps(sample_to_record(s), sort_keys=True) + "\n")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(
    ds: Dataset,
    ratios: Sequence[float] = (0.85, 0.05, 0.10),
    seed: int = DEFAULT_SPLIT_SEED,
    resplit: bool = False,
) -> Dataset:
    """Assign train/val/test tags by a seeded shuffle.

    Samples that already carry a split keep it unless ``resplit`` is set; only
    the unassigned ones are distributed. Val and test receive
    ``round(ratio * n)`` samples each and the remainder goes to train.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DatasetError(f"split ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError(f"split ratios must sum to 1, got {sum(ratios)}")
    pending = [i for i, s in enumerate(ds.samples) if resplit or s.split == "unassigned"]
    if not pending:
        return ds
    n = len(pending)
    if n < 3:
        raise DatasetError(f"cannot populate three splits from {n} sample(s)")
    n_val = _round_half_up(ratios[1] * n)
    n_test = _round_half_up(ratios[2] * n)
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise DatasetError(f"ratios {tuple(ratios)} leave an empty split for n={n}")
    order = np.random.default_rng(seed).permutation(n)
    tags = ["train"] * n_train + ["val"] * n_val + ["test"] * n_test
    samples = list(ds.samples)
    for pos, tag in zip(order, tags):
        idx = pending[pos]
        samples[idx] = samples[idx].with_split(tag)
    return Dataset(tuple(samples), source=ds.source, schema_version=ds.schema_version)


@dataclass
class SplitStats:
    count: int = 0
    ocr_count: int = 0
    non_ocr_count: int = 0
    avg_caption_length: float = 0.0
    caption_vocab_size: int = 0
    avg_explanation_length: float = 0.0
    explanation_vocab_size: int = 0


@dataclass
class StatsTable:
    rows: dict[str, SplitStats] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {name: vars(row).copy() for name, row in self.rows.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "StatsTable":
        return cls({name: SplitStats(**row) for name, row in d.items()})


def _summarize(samples: Sequence[Sample]) -> SplitStats:
    if not samples:
        return SplitStats()
    cap_types, exp_types = set(), set()
    cap_len = exp_len = 0
    for s in samples:
        cap, exp = tokenize(s.caption), tokenize(s.explanation)
        cap_len += len(cap)
        exp_len += len(exp)
        cap_types.update(cap)
        exp_types.update(exp)
    n = len(samples)
    n_ocr = sum(1 for s in samples if s.is_ocr_sample)
    return SplitStats(
        count=n,
        ocr_count=n_ocr,
        non_ocr_count=n - n_ocr,
        avg_caption_length=cap_len / n,
        caption_vocab_size=len(cap_types),
        avg_explanation_length=exp_len / n,
        explanation_vocab_size=len(exp_types),
    )


def compute_stats(ds: Dataset) -> StatsTable:
    """Per-split and total counts, mean token lengths and type counts (specials excluded)."""
    rows = {name: _summarize(ds.split(name)) for name in SPLIT_ORDER}
    unassigned = ds.split("unassigned")
    if unassigned:
        rows["unassigned"] = _summarize(unassigned)
    rows["total"] = _summarize(list(ds.samples))
    return StatsTable(rows)


def format_stats_table(stats: StatsTable) -> str:
    header = f"{'Split':<10} {'# Posts':>8} {'Cap. len':>9} {'Cap. |V|':>9} {'Exp. len':>9} {'Exp. |V|':>9}"
    lines = [header, "-" * len(header)]
    for name, row in stats.rows.items():
        lines.append(
            f"{name.capitalize():<10} {row.count:>8d} {row.avg_caption_length:>9.2f} "
            f"{row.caption_vocab_size:>9d} {row.avg_explanation_length:>9.2f} "
            f"{row.explanation_vocab_size:>9d}"
        )
    return "\n".join(lines) + "\n"


_EXPLICIT_MARKER = re.compile(r"#\s*sarcas(?:m|tic)\b", re.IGNORECASE)


def validate_exclusions(ds: Dataset) -> dict[str, list[str]]:
    """Flag (never drop) samples that break the curation exclusion rules.

    ``explicit_marker``: caption carries #sarcasm / #sarcastic.
    ``empty_caption``: caption has no tokens once tokenized.
    """
    report: dict[str, list[str]] = {"explicit_marker": [], "empty_caption": []}
    for s in ds.samples:
        if _EXPLICIT_MARKER.search(s.caption):
            report["explicit_marker"].append(s.id)
        if not tokenize(s.caption):
            report["empty_caption"].append(s.id)
    return report
