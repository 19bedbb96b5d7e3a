"""Corpus-level BLEU-1..4, ROUGE-L, and CIDEr-D over tokenized report pairs.

Conventions pinned here: BLEU aggregates clipped counts over the corpus
(no smoothing, closest-reference brevity penalty with ties going to the
shorter reference); ROUGE-L is the mean over pairs of the best-reference
LCS F-score with beta = 1.2; CIDEr-D uses sigma = 6, counts clipped to the
reference, and the x10 scaling.  Corpus reductions use exact summation so
every metric is invariant under reordering of the pair list.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

from .errors import DataError
from .runtime import parallel_map
from .text import tokenize

CIDER_SIGMA = 6.0
ROUGE_BETA = 1.2


@dataclass(frozen=True)
class EvalPair:
    """One candidate report with its (nonempty) reference list."""

    candidate: tuple
    references: tuple

    def __post_init__(self):
        object.__setattr__(self, "candidate", tuple(self.candidate))
        object.__setattr__(self, "references", tuple(tuple(r) for r in self.references))
        if not self.references:
            raise DataError("an evaluation pair needs at least one reference")
        for report in (self.candidate, *self.references):
            if any(not tok for tok in report):
                raise DataError("tokenized reports must not contain empty tokens")


def ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------


def bleu(pairs, max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..max_n. Any zero n-gram precision zeroes BLEU-k for k >= n."""
    if not 1 <= max_n <= 4:
        raise DataError(f"max_n must be in 1..4, got {max_n}")
    numer = [0] * max_n
    denom = [0] * max_n
    cand_total = 0
    ref_total = 0
    for pair in pairs:
        cand = pair.candidate
        cand_total += len(cand)
        # closest reference length; ties resolved toward the shorter one
        ref_total += min(
            (abs(len(r) - len(cand)), len(r)) for r in pair.references
        )[1]
        for n in range(1, max_n + 1):
            counts = ngram_counts(cand, n)
            if not counts:
                continue
            max_ref = Counter()
            for ref in pair.references:
                for gram, c in ngram_counts(ref, n).items():
                    if c > max_ref[gram]:
                        max_ref[gram] = c
            numer[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            denom[n - 1] += sum(counts.values())

    if cand_total == 0:
        return [0.0] * max_n
    bp = min(1.0, math.exp(1.0 - ref_total / cand_total))
    precisions = [
        (numer[i] / denom[i]) if denom[i] else 0.0 for i in range(max_n)
    ]
    scores = []
    for k in range(1, max_n + 1):
        if any(p == 0.0 for p in precisions[:k]):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in precisions[:k]) / k))
    return scores


# ---------------------------------------------------------------------------
# ROUGE-L
# ---------------------------------------------------------------------------


def lcs_length(a, b) -> int:
    """Longest common subsequence length, O(|a|*|b|) dynamic program."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def _rouge_l_pair(pair: EvalPair) -> float:
    best = 0.0
    cand = pair.candidate
    for ref in pair.references:
        if not cand or not ref:
            continue
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        prec = lcs / len(cand)
        rec = lcs / len(ref)
        score = ((1.0 + ROUGE_BETA**2) * rec * prec) / (rec + ROUGE_BETA**2 * prec)
        best = max(best, score)
    return best


def rouge_l(pairs) -> float:
    """Mean over pairs of the max-over-references LCS F-score."""
    pairs = list(pairs)
    if not pairs:
        return 0.0
    return math.fsum(parallel_map(_rouge_l_pair, pairs)) / len(pairs)


# ---------------------------------------------------------------------------
# CIDEr-D
# ---------------------------------------------------------------------------


def _document_frequency(pairs, max_n: int) -> Counter:
    df = Counter()
    for pair in pairs:
        seen = set()
        for ref in pair.references:
            for n in range(1, max_n + 1):
                seen.update(ngram_counts(ref, n))
        df.update(seen)
    return df


def _tfidf(tokens, n: int, df: Counter, log_corpus: float) -> tuple[dict, float]:
    # n-grams unseen in every reference get zero weight (df = 0 would
    # otherwise need a clamp whose idf grows with corpus size, breaking
    # invariance of the mean under corpus duplication)
    vec = {}
    norm_sq = 0.0
    for gram, tf in ngram_counts(tokens, n).items():
        count = df[gram]
        w = tf * (log_corpus - math.log(count)) if count else 0.0
        vec[gram] = w
        norm_sq += w * w
    return vec, norm_sq


def _cider_pair(pair: EvalPair, df: Counter, log_corpus: float, max_n: int) -> float:
    per_n = []
    for n in range(1, max_n + 1):
        cand_vec, cand_norm_sq = _tfidf(pair.candidate, n, df, log_corpus)
        total = 0.0
        for ref in pair.references:
            ref_vec, ref_norm_sq = _tfidf(ref, n, df, log_corpus)
            if cand_norm_sq == 0.0 or ref_norm_sq == 0.0:
                continue
            num = math.fsum(
                min(w, ref_vec[g]) * ref_vec[g]
                for g, w in cand_vec.items()
                if g in ref_vec
            )
            sim = num / math.sqrt(cand_norm_sq * ref_norm_sq)
            delta = len(pair.candidate) - len(ref)
            total += sim * math.exp(-(delta * delta) / (2.0 * CIDER_SIGMA**2))
        per_n.append(10.0 * total / len(pair.references))
    return math.fsum(per_n) / max_n


def cider_d(pairs, max_n: int = 4) -> float:
    """Corpus CIDEr-D: mean over pairs of the n-averaged penalized TF-IDF cosine.

    Document frequencies come from the evaluation set's own references; on
    a single-pair corpus every IDF weight degenerates to zero and the score
    is 0 by convention.
    """
    pairs = list(pairs)
    if not pairs:
        return 0.0
    df = _document_frequency(pairs, max_n)
    log_corpus = math.log(len(pairs))
    scores = parallel_map(lambda p: _cider_pair(p, df, log_corpus, max_n), pairs)
    return math.fsum(scores) / len(pairs)


# ---------------------------------------------------------------------------
# aggregate scoring + the JSONL pair format
# ---------------------------------------------------------------------------


def score_pairs(pairs) -> dict:
    """All NLG metrics for a pair list, keyed for the report tables."""
    pairs = list(pairs)
    b = bleu(pairs, 4)
    return {
        "bleu_1": b[0],
        "bleu_2": b[1],
        "bleu_3": b[2],
        "bleu_4": b[3],
        "rouge_l": rouge_l(pairs),
        "cider": cider_d(pairs),
    }


def read_eval_pairs_jsonl(path: str) -> tuple[list[str], list[EvalPair]]:
    """Read {id, candidate, references} JSON lines into tokenized pairs."""
    ids: list[str] = []
    pairs: list[EvalPair] = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open evaluation file {path}: {exc}") from exc
    with fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            try:
                ids.append(str(obj["id"]))
                refs = obj["references"]
                if not isinstance(refs, list) or not refs:
                    raise DataError(
                        f"{path}:{line_no}: 'references' must be a nonempty list"
                    )
                pairs.append(
                    EvalPair(
                        candidate=tokenize(obj["candidate"]),
                        references=[tokenize(r) for r in refs],
                    )
                )
            except KeyError as exc:
                raise DataError(f"{path}:{line_no}: missing field {exc}") from exc
    return ids, pairs
