"""Generation metrics: corpus BLEU, ROUGE-N/L, METEOR, greedy token-embedding
matching and sentence-embedding cosine, sliced by OCR / non-OCR samples.

All scores live in [0, 1]; tables multiply by 100.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, fields
from functools import lru_cache
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .backends import HashedTokenVectors, sentence_embedding
from .data import Sample, tokenize

BLEU_EPS = 1e-9
SLICES = ("overall", "ocr", "non_ocr")


def _toks(x) -> list[str]:
    return tokenize(x) if isinstance(x, str) else list(x)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU


def bleu(candidates: Sequence, references: Sequence, max_n: int = 4) -> tuple[float, ...]:
    """Corpus BLEU-1..max_n with clipped counts and a single brevity penalty.

    An order with no matched n-grams gets precision ``BLEU_EPS`` before the
    geometric mean, except when neither side has any n-gram of that order
    (all sentences too short), which counts as a vacuous full match.
    """
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("BLEU of an empty corpus is undefined")
    num = [0] * max_n
    den = [0] * max_n
    ref_total = [0] * max_n
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c, r = _toks(cand), _toks(ref)
        c_len += len(c)
        r_len += len(r)
        for n in range(1, max_n + 1):
            cg, rg = _ngrams(c, n), _ngrams(r, n)
            num[n - 1] += sum(min(cnt, rg[g]) for g, cnt in cg.items())
            den[n - 1] += max(len(c) - n + 1, 0)
            ref_total[n - 1] += max(len(r) - n + 1, 0)
    if c_len == 0:
        return tuple(0.0 for _ in range(max_n))
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    logs = []
    for i in range(max_n):
        if num[i] > 0:
            logs.append(math.log(num[i] / den[i]))
        elif den[i] == 0 and ref_total[i] == 0:
            logs.append(0.0)
        else:
            logs.append(math.log(BLEU_EPS))
    return tuple(bp * math.exp(sum(logs[:k]) / k) for k in range(1, max_n + 1))


# ---------------------------------------------------------------------------
# ROUGE


def _prf(overlap: float, n_cand: int, n_ref: int) -> tuple[float, float, float]:
    p = overlap / n_cand if n_cand else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def rouge_n(cand, ref, n: int) -> tuple[float, float, float]:
    c, r = _ngrams(_toks(cand), n), _ngrams(_toks(ref), n)
    overlap = sum(min(cnt, r[g]) for g, cnt in c.items())
    return _prf(overlap, sum(c.values()), sum(r.values()))


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(cand, ref) -> tuple[float, float, float]:
    c, r = _toks(cand), _toks(ref)
    return _prf(lcs_length(c, r), len(c), len(r))


# ---------------------------------------------------------------------------
# METEOR


def meteor_alignment(cand: Sequence[str], ref: Sequence[str]) -> tuple[int, int]:
    """Exact unigram alignment with the most matches, then the fewest chunks.

    Returns ``(matches, chunks)``. Solved exactly by memoized search over
    which reference occurrence each candidate token takes; chunks equal
    matches minus the number of adjacent candidate pairs mapped to adjacent
    reference positions.
    """
    cand, ref = tuple(cand), tuple(ref)
    cc, rc = Counter(cand), Counter(ref)
    matches = sum(min(cc[w], rc[w]) for w in cc)
    if matches == 0:
        return 0, 0
    positions = {w: [j for j, t in enumerate(ref) if t == w] for w in cc}
    skip_budget = {w: cc[w] - min(cc[w], rc[w]) for w in cc}
    seen_before = []
    tally: Counter = Counter()
    for w in cand:
        seen_before.append(tally[w])
        tally[w] += 1

    @lru_cache(maxsize=None)
    def best(i: int, prev: int, used: int) -> int:
        if i == len(cand):
            return 0
        w = cand[i]
        matched_w = sum(1 for j in positions[w] if used >> j & 1)
        result = -1
        if seen_before[i] - matched_w < skip_budget[w]:
            result = best(i + 1, -1, used)
        for j in positions[w]:
            if not used >> j & 1:
                gain = 1 if prev >= 0 and j == prev + 1 else 0
                result = max(result, gain + best(i + 1, j, used | (1 << j)))
        return result

    adjacent = best(0, -1, 0)
    best.cache_clear()
    return matches, matches - adjacent


def meteor(cand, ref, synonyms: Optional[Callable[[str], set]] = None) -> float:
    """METEOR with F_mean = 10PR / (R + 9P) and penalty 0.5 * (chunks / matches) ** 3.

    With ``synonyms`` (word -> set of words), a candidate token absent from the
    reference is rewritten to the first reference token among its synonyms
    before exact alignment.
    """
    c, r = _toks(cand), _toks(ref)
    if synonyms is not None:
        ref_set = set(r)
        rewritten = []
        for t in c:
            if t not in ref_set:
                alt = next((x for x in r if x in synonyms(t)), None)
                t = alt if alt is not None else t
            rewritten.append(t)
        c = rewritten
    m, chunks = meteor_alignment(c, r)
    if m == 0:
        return 0.0
    p, rec = m / len(c), m / len(r)
    f_mean = 10 * p * rec / (rec + 9 * p)
    penalty = 0.5 * (chunks / m) ** 3
    return f_mean * (1 - penalty)


# ---------------------------------------------------------------------------
# embedding-based scores

_TOKEN_VECTORS = HashedTokenVectors()


def _unit_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return np.divide(m, norms, out=np.zeros_like(m), where=norms > 0)


def embedding_pair_score(c_vecs: np.ndarray, r_vecs: np.ndarray) -> tuple[float, float, float]:
    """Greedy max-cosine matching between two token-vector matrices (no idf).

    P and R are clipped below at 0 so the score stays in [0, 1].
    """
    sim = _unit_rows(c_vecs) @ _unit_rows(r_vecs).T
    p = max(float(sim.max(axis=1).mean()), 0.0)
    r = max(float(sim.max(axis=0).mean()), 0.0)
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return min(p, 1.0), min(r, 1.0), min(f, 1.0)


def embedding_score(cands, refs, token_embedder=None, return_skipped: bool = False):
    """Corpus mean of per-sample greedy token-embedding P/R/F1.

    ``token_embedder(tokens) -> (len(tokens), d) array``; defaults to hashed
    token vectors. Pairs with an empty side are skipped.
    """
    if len(cands) != len(refs):
        raise ValueError(f"{len(cands)} candidates vs {len(refs)} references")
    embed = token_embedder or _TOKEN_VECTORS
    scores, skipped = [], 0
    for cand, ref in zip(cands, refs):
        c, r = _toks(cand), _toks(ref)
        if not c or not r:
            skipped += 1
            continue
        scores.append(embedding_pair_score(np.asarray(embed(c)), np.asarray(embed(r))))
    mean = tuple(float(np.mean([s[k] for s in scores])) if scores else 0.0 for k in range(3))
    return (mean, skipped) if return_skipped else mean


def sentence_similarity(cands, refs, embed=None, return_skipped: bool = False):
    """Mean cosine between sentence embeddings; zero-vector pairs are excluded and counted."""
    if len(cands) != len(refs):
        raise ValueError(f"{len(cands)} candidates vs {len(refs)} references")
    embed = embed or sentence_embedding
    sims, skipped = [], 0
    for cand, ref in zip(cands, refs):
        a, b = np.asarray(embed(cand), dtype=float), np.asarray(embed(ref), dtype=float)
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            skipped += 1
            continue
        sims.append(min(max(float(a @ b / (na * nb)), 0.0), 1.0))
    mean = float(np.mean(sims)) if sims else 0.0
    return (mean, skipped) if return_skipped else mean


# ---------------------------------------------------------------------------
# corpus report


@dataclass
class SliceScores:
    count: int
    B1: float
    B2: float
    B3: float
    B4: float
    R1: float
    R2: float
    RL: float
    METEOR: float
    emb_P: float
    emb_R: float
    emb_F1: float
    sent_cosine: float
    emb_skipped: int = 0
    sent_skipped: int = 0

    @classmethod
    def score_names(cls) -> list[str]:
        return [f.name for f in fields(cls) if f.type in ("float", float)]


@dataclass
class MetricReport:
    slices: dict[str, SliceScores] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"slices": {k: vars(v).copy() for k, v in self.slices.items()}, "notes": list(self.notes)}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricReport":
        return cls({k: SliceScores(**v) for k, v in d["slices"].items()}, list(d.get("notes", [])))


def score_corpus(cands: Sequence[str], refs: Sequence[str], token_embedder=None, sentence_embed=None) -> SliceScores:
    b = bleu(cands, refs)
    r1 = float(np.mean([rouge_n(c, r, 1)[2] for c, r in zip(cands, refs)]))
    r2 = float(np.mean([rouge_n(c, r, 2)[2] for c, r in zip(cands, refs)]))
    rl = float(np.mean([rouge_l(c, r)[2] for c, r in zip(cands, refs)]))
    met = float(np.mean([meteor(c, r) for c, r in zip(cands, refs)]))
    (ep, er, ef), emb_skipped = embedding_score(cands, refs, token_embedder, return_skipped=True)
    sc, sent_skipped = sentence_similarity(cands, refs, sentence_embed, return_skipped=True)
    return SliceScores(len(cands), *b, r1, r2, rl, met, ep, er, ef, sc, emb_skipped, sent_skipped)


def evaluate_corpus(generations, samples: Sequence[Sample], token_embedder=None, sentence_embed=None) -> MetricReport:
    """Score generations against sample explanations overall and per OCR slice.

    ``generations`` is either a mapping ``id -> text`` or a list aligned with
    ``samples``. Samples are processed in id order so the report does not
    depend on input order.
    """
    if isinstance(generations, Mapping):
        missing = [s.id for s in samples if s.id not in generations]
        if missing:
            raise ValueError(f"no generation for sample(s) {missing[:5]}")
        gens = dict(generations)
    else:
        if len(generations) != len(samples):
            raise ValueError(f"{len(generations)} generations for {len(samples)} samples")
        gens = {s.id: g for s, g in zip(samples, generations)}
    ordered = sorted(samples, key=lambda s: s.id)
    groups = {
        "overall": ordered,
        "ocr": [s for s in ordered if s.is_ocr_sample],
        "non_ocr": [s for s in ordered if not s.is_ocr_sample],
    }
    report = MetricReport()
    for name in SLICES:
        group = groups[name]
        if not group:
            report.notes.append(f"slice '{name}' is empty and was omitted")
            continue
        report.slices[name] = score_corpus(
            [gens[s.id] for s in group], [s.explanation for s in group], token_embedder, sentence_embed
        )
    return report
