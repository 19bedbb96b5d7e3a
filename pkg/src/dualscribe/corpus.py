"""Corpus handling: vocabulary, JSONL ingestion, and synthetic generation.

The synthetic generator closes the loop with the clinical rule set: every
report sentence is built from rule phrases plus cue templates, so each
entry's ground-truth label vector is known by construction, and images get
condition-specific bright shapes so the captioner has signal to learn.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .features import SyntheticImage
from .labeler import CONDITIONS, Condition, Label, RuleSet, default_rules
from .text import tokenize

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3
_RESERVED = (PAD, BOS, EOS, UNK)


@dataclass
class Vocabulary:
    """Token <-> id bijection with fixed reserved ids 0..3."""

    token_to_id: dict
    id_to_token: list
    min_freq: int

    @classmethod
    def build(cls, reports, min_freq: int = 3) -> "Vocabulary":
        """Count tokens over report strings; keep those seen >= min_freq times."""
        counts = Counter()
        for report in reports:
            counts.update(tokenize(report))
        kept = sorted(tok for tok, c in counts.items() if c >= min_freq)
        id_to_token = list(_RESERVED) + kept
        token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
        return cls(token_to_id=token_to_id, id_to_token=id_to_token, min_freq=min_freq)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens) -> list[int]:
        return [self.token_to_id.get(tok, UNK_ID) for tok in tokens]

    def decode(self, ids) -> list[str]:
        """Ids back to tokens, dropping pad/bos/eos; unk renders literally."""
        out = []
        for i in ids:
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            if not 0 <= i < len(self.id_to_token):
                raise DataError(f"token id {i} outside vocabulary of size {len(self)}")
            out.append(self.id_to_token[i])
        return out

    def to_dict(self) -> dict:
        return {"id_to_token": self.id_to_token, "min_freq": self.min_freq}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        id_to_token = list(d["id_to_token"])
        if id_to_token[:4] != list(_RESERVED):
            raise DataError("vocabulary is missing the reserved pad/bos/eos/unk ids")
        return cls(
            token_to_id={tok: i for i, tok in enumerate(id_to_token)},
            id_to_token=id_to_token,
            min_freq=int(d["min_freq"]),
        )


@dataclass
class CorpusEntry:
    """One image/report pair; image is inline pixels or a feature-file key."""

    entry_id: str
    report: str
    image: SyntheticImage | str
    truth_labels: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.report:
            raise DataError(f"entry {self.entry_id!r} has an empty report")


def write_corpus_jsonl(path: str, entries) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            if isinstance(e.image, SyntheticImage):
                image_doc = {"pixels": e.image.pixels[:, :, 0].tolist()}
            else:
                image_doc = {"feature_key": e.image}
            fh.write(
                json.dumps({"id": e.entry_id, "report": e.report, "image": image_doc})
                + "\n"
            )


def read_corpus_jsonl(path: str) -> list[CorpusEntry]:
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open corpus {path}: {exc}") from exc
    entries: list[CorpusEntry] = []
    seen: set[str] = set()
    with fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                entry_id = str(obj["id"])
                report = obj["report"]
                image_doc = obj["image"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{line_no}: malformed corpus line: {exc}") from exc
            if entry_id in seen:
                raise DataError(f"{path}:{line_no}: duplicate entry id {entry_id!r}")
            seen.add(entry_id)
            if "pixels" in image_doc:
                image = SyntheticImage(np.asarray(image_doc["pixels"], dtype=np.float64))
            elif "feature_key" in image_doc:
                image = str(image_doc["feature_key"])
            else:
                raise DataError(
                    f"{path}:{line_no}: image needs 'pixels' or 'feature_key'"
                )
            entries.append(CorpusEntry(entry_id=entry_id, report=report, image=image))
    return entries


def split_corpus(entries, seed: int, train_fraction: float = 0.9):
    """Deterministic, reordering-stable split keyed by a hash of (seed, id)."""
    if not 0.0 < train_fraction < 1.0:
        raise DataError(f"train_fraction must be in (0, 1), got {train_fraction}")
    train, test = [], []
    for e in entries:
        digest = hashlib.sha256(f"{seed}:{e.entry_id}".encode("utf-8")).digest()
        u = int.from_bytes(digest[:8], "big") / 2**64
        (train if u < train_fraction else test).append(e)
    return train, test


# ---------------------------------------------------------------------------
# synthetic generation
# ---------------------------------------------------------------------------

# Sentence templates.  Every template places >= 4 filler tokens (plus the
# preceding period mid-report) between sentence start and the phrase, so a
# cue from an earlier sentence can never fall inside the 5-token window,
# and each cue lies fully inside it.
_POSITIVE_TEMPLATES = (
    "there is evidence of {p} .",
    "findings are consistent with {p} .",
    "the study again demonstrates {p} .",
)
_NEGATIVE_TEMPLATES = (
    "there is no evidence of {p} .",
    "the study is negative for {p} .",
    "the current exam is without {p} .",
)
_UNCERTAIN_TEMPLATES = (
    "there may be evidence of {p} .",
    "we cannot exclude the presence of {p} .",
    "the appearance is possibly related {p} .",
)
_NEUTRAL_SENTENCE = "stable appearance of the chest ."

_STATUS_TEMPLATES = {
    Label.POSITIVE: _POSITIVE_TEMPLATES,
    Label.NEGATIVE: _NEGATIVE_TEMPLATES,
    Label.UNCERTAIN: _UNCERTAIN_TEMPLATES,
}

_MAX_MENTIONS_PER_ENTRY = 6


def mention_rates(n_conditions: int = 14, base_rate: float = 0.55, skew: float = 0.75):
    """Geometric frequency profile: rate_i = base_rate * skew**i."""
    return [base_rate * skew**i for i in range(n_conditions)]


def _render_shape(img: np.ndarray, cond_index: int, intensity: float) -> None:
    """Stamp the condition's signature shape into the image, in place."""
    s = img.shape[0]
    row = (cond_index * 7 + 3) % max(1, s - 8)
    col = (cond_index * 11 + 5) % max(1, s - 8)
    kind = cond_index % 3
    if kind == 0:  # gaussian blob
        yy, xx = np.mgrid[0:s, 0:s]
        img += intensity * np.exp(-(((yy - row - 4) ** 2 + (xx - col - 4) ** 2) / 8.0))
    elif kind == 1:  # horizontal bar
        img[row : row + 2, col : col + 8] += intensity
    else:  # vertical bar
        img[row : row + 8, col : col + 2] += intensity


def synthesize_corpus(
    n: int,
    seed: int,
    rules: RuleSet | None = None,
    image_size: int = 32,
    base_rate: float = 0.55,
    skew: float = 0.75,
    status_probs: tuple = (0.6, 0.25, 0.15),
) -> list[CorpusEntry]:
    """Generate n image/report pairs with construction-known labels.

    Per-condition mention counts are fixed to round(n * rate) and assigned
    to entries by seeded draws, so frequencies match the configured profile
    to within rounding.  Reports use only rule phrases and safe cue
    templates; entry.truth_labels records the intended label vector.
    """
    if n < 1:
        raise DataError(f"corpus size must be >= 1, got {n}")
    rules = rules or default_rules()
    rng = np.random.default_rng(seed)
    rates = mention_rates(len(CONDITIONS), base_rate, skew)

    mentions: list[dict] = [dict() for _ in range(n)]
    for ci, cond in enumerate(CONDITIONS):
        want = int(round(n * rates[ci]))
        room = [i for i in range(n) if len(mentions[i]) < _MAX_MENTIONS_PER_ENTRY]
        count = min(want, len(room))
        chosen = rng.choice(len(room), size=count, replace=False) if count else []
        for pos in chosen:
            entry_idx = room[int(pos)]
            if cond is Condition.NO_FINDING:
                status = Label.POSITIVE
            else:
                status = (Label.POSITIVE, Label.NEGATIVE, Label.UNCERTAIN)[
                    int(rng.choice(3, p=status_probs))
                ]
            mentions[entry_idx][cond] = status

    entries: list[CorpusEntry] = []
    width = len(str(n - 1))
    for i in range(n):
        sentences = []
        labels = {cond: Label.BLANK for cond in CONDITIONS}
        for cond in CONDITIONS:
            status = mentions[i].get(cond)
            if status is None:
                continue
            labels[cond] = status
            phrases = rules.rules[cond].phrases
            phrase = " ".join(phrases[int(rng.integers(len(phrases)))])
            templates = _STATUS_TEMPLATES[status]
            template = templates[int(rng.integers(len(templates)))]
            sentences.append(template.format(p=phrase))
        if not sentences:
            sentences.append(_NEUTRAL_SENTENCE)

        img = rng.uniform(0.0, 0.08, size=(image_size, image_size))
        for ci, cond in enumerate(CONDITIONS):
            status = mentions[i].get(cond)
            if status is Label.POSITIVE:
                _render_shape(img, ci, 0.85)
            elif status is Label.UNCERTAIN:
                _render_shape(img, ci, 0.4)
        np.clip(img, 0.0, 1.0, out=img)

        entries.append(
            CorpusEntry(
                entry_id=f"synth-{i:0{width}d}",
                report=" ".join(sentences),
                image=SyntheticImage(img[:, :, None]),
                truth_labels=labels,
            )
        )
    return entries
