"""POS-overlap comparison of generated vs reference explanations, and
aggregation of human adequacy/fluency ratings (scores, majority votes,
Fleiss' kappa)."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .backends import PosTagger, default_synonyms, default_tagger

POS_TABLE_TAGS = ("NOUN", "VERB", "ADJ", "ADV")
POS_FIELDS = ("ref_count", "gen_count", "difference", "overlap", "overlap_syn", "count_gap")

ADEQUACY_CATEGORIES = ("justify", "weakly_justify", "sri", "nri")
ADEQUACY_SCALE = {"justify": 1.0, "weakly_justify": 0.66, "sri": 0.33, "nri": 0.0}


# ---------------------------------------------------------------------------
# POS overlap


def _multiset_overlap(gen: list[str], ref: list[str]) -> int:
    g, r = Counter(gen), Counter(ref)
    return sum(min(c, r[w]) for w, c in g.items())


def synonym_overlap(gen: list[str], ref: list[str], tag: str, synonyms: Callable[[str, str], frozenset]) -> int:
    """Exact multiset overlap, then unmatched generated words (left to right)
    each take one remaining reference word that is a synonym."""
    remaining = Counter(ref)
    unmatched = []
    matched = 0
    for w in gen:
        if remaining[w] > 0:
            remaining[w] -= 1
            matched += 1
        else:
            unmatched.append(w)
    # each leftover generated word takes the first free synonym in reference order
    for w in unmatched:
        syns = synonyms(w, tag)
        for cand in ref:
            if remaining[cand] > 0 and cand in syns:
                remaining[cand] -= 1
                matched += 1
                break
    return matched


def pos_counts(gen: str, ref: str, tagger: PosTagger, synonyms) -> dict[str, dict[str, float]]:
    """Per-tag counts for one (generated, reference) pair."""
    g_tags, r_tags = tagger(gen), tagger(ref)
    out = {}
    for tag in POS_TABLE_TAGS:
        G = [w for w, t in g_tags if t == tag]
        R = [w for w, t in r_tags if t == tag]
        overlap = _multiset_overlap(G, R)
        out[tag] = {
            "ref_count": len(R),
            "gen_count": len(G),
            "difference": len(G) + len(R) - 2 * overlap,
            "overlap": overlap,
            "overlap_syn": synonym_overlap(G, R, tag, synonyms),
            "count_gap": abs(len(R) - len(G)),
        }
    return out


@dataclass
class PosTable:
    """``cells[slice][tag][field]`` holds corpus averages; ``counts[slice]`` the sample count."""

    cells: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"cells": self.cells, "counts": self.counts, "notes": self.notes}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PosTable":
        return cls(d["cells"], d["counts"], list(d.get("notes", [])))


DIFFERENCE_NOTE = (
    "difference = mean size of the symmetric multiset difference |G\\R| + |R\\G| per tag; "
    "count_gap = mean |ref_count - gen_count|"
)


def pos_overlap_table(
    gens: Sequence[str],
    refs: Sequence[str],
    slices: Optional[Mapping[str, Sequence[int]]] = None,
    tagger: Optional[PosTagger] = None,
    synonyms=None,
) -> PosTable:
    """Average per-tag counts over each slice.

    ``slices`` maps a slice name to indices into ``gens``/``refs``; by default
    one ``overall`` slice covers everything.
    """
    if len(gens) != len(refs):
        raise ValueError(f"{len(gens)} generations vs {len(refs)} references")
    tagger = tagger or default_tagger()
    synonyms = synonyms or default_synonyms()
    per_sample = [pos_counts(g, r, tagger, synonyms) for g, r in zip(gens, refs)]
    slices = slices if slices is not None else {"overall": range(len(gens))}
    table = PosTable(notes=[DIFFERENCE_NOTE])
    for name, idx in slices.items():
        idx = list(idx)
        if not idx:
            table.notes.append(f"slice '{name}' is empty and was omitted")
            continue
        table.counts[name] = len(idx)
        table.cells[name] = {
            tag: {f: float(np.mean([per_sample[i][tag][f] for i in idx])) for f in POS_FIELDS}
            for tag in POS_TABLE_TAGS
        }
    return table


# ---------------------------------------------------------------------------
# human evaluation


@dataclass(frozen=True)
class Rating:
    sample_id: str
    rater_id: str
    adequacy: str
    fluency: float


class RatingError(ValueError):
    pass


class RatingSet:
    """Ratings keyed by (sample, rater); each pair at most once."""

    def __init__(self, ratings: Sequence[Rating] = ()):
        self._by_key: dict[tuple[str, str], Rating] = {}
        for r in ratings:
            self.add(r)

    def add(self, r: Rating) -> None:
        if r.adequacy not in ADEQUACY_SCALE:
            raise RatingError(f"unknown adequacy category {r.adequacy!r}")
        if not 0.0 <= r.fluency <= 1.0:
            raise RatingError(f"fluency {r.fluency} outside [0, 1]")
        key = (r.sample_id, r.rater_id)
        if key in self._by_key:
            raise RatingError(f"duplicate rating for sample {r.sample_id!r} by rater {r.rater_id!r}")
        self._by_key[key] = r

    def __len__(self):
        return len(self._by_key)

    def __iter__(self):
        return iter(self._by_key[k] for k in sorted(self._by_key))

    def by_sample(self) -> dict[str, list[Rating]]:
        out: dict[str, list[Rating]] = {}
        for r in self:
            out.setdefault(r.sample_id, []).append(r)
        return out

    @classmethod
    def from_jsonl(cls, path) -> "RatingSet":
        rs = cls()
        with Path(path).open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    rs.add(Rating(str(d["sample_id"]), str(d["rater_id"]), d["adequacy"], float(d["fluency"])))
                except (KeyError, TypeError, ValueError) as exc:
                    raise RatingError(f"{path}:{lineno}: {exc}") from exc
        return rs


def adequacy_score(rs: RatingSet) -> float:
    """Mean mapped adequacy over all (sample, rater) pairs."""
    if not len(rs):
        raise RatingError("no ratings")
    return float(np.mean([ADEQUACY_SCALE[r.adequacy] for r in rs]))


def fluency_score(rs: RatingSet) -> float:
    if not len(rs):
        raise RatingError("no ratings")
    return float(np.mean([r.fluency for r in rs]))


def majority_category(votes: Sequence[str]) -> str:
    """Most frequent category; ties go to the lowest-adequacy category."""
    counts = Counter(votes)
    top = max(counts.values())
    tied = [c for c in ADEQUACY_CATEGORIES if counts[c] == top]
    return min(tied, key=lambda c: ADEQUACY_SCALE[c])


def majority_votes(rs: RatingSet) -> dict[str, str]:
    return {sid: majority_category([r.adequacy for r in rows]) for sid, rows in rs.by_sample().items()}


def adequacy_distribution(rs: RatingSet) -> dict[str, float]:
    """Percentage of samples whose majority-vote category is each category."""
    votes = majority_votes(rs)
    if not votes:
        raise RatingError("no ratings")
    counts = Counter(votes.values())
    return {c: 100.0 * counts[c] / len(votes) for c in ADEQUACY_CATEGORIES}


def majority_adequacy_score(rs: RatingSet) -> float:
    """Alternative aggregate: mean mapped value of the per-sample majority category."""
    votes = majority_votes(rs)
    if not votes:
        raise RatingError("no ratings")
    return float(np.mean([ADEQUACY_SCALE[c] for c in votes.values()]))


def fleiss_kappa_counts(counts) -> float:
    """Fleiss' kappa from an items x categories matrix of rating counts.

    Every row must sum to the same number of raters n >= 2.
    """
    m = np.asarray(counts, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] == 0:
        raise RatingError("need a non-empty items x categories count matrix")
    n_per_item = m.sum(axis=1)
    n = n_per_item[0]
    if not np.all(n_per_item == n):
        raise RatingError("every item must be rated by the same number of raters")
    if n < 2:
        raise RatingError("Fleiss' kappa needs at least two raters per item")
    p_i = ((m**2).sum(axis=1) - n) / (n * (n - 1))
    p_bar = p_i.mean()
    p_j = m.sum(axis=0) / m.sum()
    p_e = float((p_j**2).sum())
    if np.isclose(p_e, 1.0, rtol=0, atol=1e-15):
        raise RatingError("kappa is undefined: every rating falls in a single category")
    return float((p_bar - p_e) / (1 - p_e))


def fluency_bins(fluency: float, n_bins: int) -> int:
    return min(int(fluency * n_bins), n_bins - 1)


def fleiss_kappa(rs: RatingSet, axis: str = "adequacy", n_fluency_bins: int = 5) -> float:
    """Agreement over adequacy categories, or over fluency discretized into equal-width bins."""
    rows = []
    for sid, ratings in sorted(rs.by_sample().items()):
        if axis == "adequacy":
            c = Counter(r.adequacy for r in ratings)
            rows.append([c[k] for k in ADEQUACY_CATEGORIES])
        elif axis == "fluency":
            c = Counter(fluency_bins(r.fluency, n_fluency_bins) for r in ratings)
            rows.append([c[k] for k in range(n_fluency_bins)])
        else:
            raise ValueError(f"unknown rating axis {axis!r}")
    return fleiss_kappa_counts(rows)


_KAPPA_BANDS = ((0.0, "poor"), (0.20, "slight"), (0.40, "fair"), (0.60, "moderate"), (0.80, "substantial"), (1.0, "almost perfect"))


def kappa_band(kappa: float) -> str:
    """Landis-Koch label for a kappa value (judged at two decimals)."""
    kappa = round(kappa, 2)
    if kappa < 0:
        return "poor"
    for upper, label in _KAPPA_BANDS[1:]:
        if kappa <= upper:
            return label
    return "almost perfect"


def human_eval_summary(rs: RatingSet) -> dict:
    """Everything the human-evaluation tables report, in one dict."""
    out = {
        "n_ratings": len(rs),
        "n_samples": len(rs.by_sample()),
        "adequacy": adequacy_score(rs),
        "adequacy_majority": majority_adequacy_score(rs),
        "fluency": fluency_score(rs),
        "distribution": adequacy_distribution(rs),
    }
    for axis in ("adequacy", "fluency"):
        try:
            k = fleiss_kappa(rs, axis)
            out[f"kappa_{axis}"] = k
            out[f"kappa_{axis}_band"] = kappa_band(k)
        except RatingError as exc:
            out[f"kappa_{axis}"] = None
            out[f"kappa_{axis}_error"] = str(exc)
    return out
