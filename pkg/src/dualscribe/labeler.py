"""Rule-based condition labeling and the clinical F1 arithmetic.

Each of the 14 radiographic conditions gets one of four labels from a
report: a phrase match with no cue nearby is Positive, a negation cue in
the preceding token window makes it Negative, an uncertainty cue makes it
Uncertain, and no mention at all leaves it Blank.  Scoring treats only
Positive as a positive prediction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from importlib import resources

from .errors import DataError
from .runtime import parallel_map
from .text import tokenize


class Condition(Enum):
    NO_FINDING = "No Finding"
    ENLARGED_CARDIOMEDIASTINUM = "Enlarged Cardiomediastinum"
    CARDIOMEGALY = "Cardiomegaly"
    LUNG_LESION = "Lung Lesion"
    LUNG_OPACITY = "Lung Opacity"
    EDEMA = "Edema"
    CONSOLIDATION = "Consolidation"
    PNEUMONIA = "Pneumonia"
    ATELECTASIS = "Atelectasis"
    PNEUMOTHORAX = "Pneumothorax"
    PLEURAL_EFFUSION = "Pleural Effusion"
    PLEURAL_OTHER = "Pleural Other"
    FRACTURE = "Fracture"
    SUPPORT_DEVICES = "Support Devices"


CONDITIONS: tuple[Condition, ...] = tuple(Condition)
assert len(CONDITIONS) == 14


class Label(Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"
    UNCERTAIN = "Uncertain"
    BLANK = "Blank"


# A LabelVector is a total mapping Condition -> Label.
LabelVector = dict


@dataclass(frozen=True)
class ConditionRule:
    phrases: tuple[tuple[str, ...], ...]
    negation: tuple[tuple[str, ...], ...]
    uncertain: tuple[tuple[str, ...], ...]


@dataclass(frozen=True)
class RuleSet:
    rules: dict
    window: int

    @classmethod
    def from_dict(cls, doc: dict) -> "RuleSet":
        window = doc.get("window")
        if not isinstance(window, int) or window < 1:
            raise DataError("rule file needs an integer 'window' >= 1")
        rules = {}
        for cond in CONDITIONS:
            entry = doc.get(cond.value)
            if entry is None:
                raise DataError(f"rule file missing condition {cond.value!r}")
            phrases = tuple(tuple(tokenize(p)) for p in entry["phrases"])
            if not phrases or any(not p for p in phrases):
                raise DataError(f"condition {cond.value!r} needs nonempty phrases")
            rules[cond] = ConditionRule(
                phrases=phrases,
                negation=tuple(tuple(tokenize(c)) for c in entry.get("negation", [])),
                uncertain=tuple(tuple(tokenize(c)) for c in entry.get("uncertain", [])),
            )
        return cls(rules=rules, window=window)

    @classmethod
    def from_file(cls, path: str) -> "RuleSet":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot open rule file {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"rule file {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)


def default_rules() -> RuleSet:
    """The rule set shipped with the package."""
    doc = json.loads(
        resources.files("dualscribe.data").joinpath("chexpert_rules.json").read_text()
    )
    return RuleSet.from_dict(doc)


def _contains_seq(window: list, needle: tuple) -> bool:
    n = len(needle)
    return any(tuple(window[i : i + n]) == needle for i in range(len(window) - n + 1))


def _mention_label(tokens: list, start: int, rule: ConditionRule, window: int) -> Label:
    """Label one phrase occurrence from the cues in its preceding window.

    Negation takes precedence over uncertainty when both cues appear.
    """
    preceding = tokens[max(0, start - window) : start]
    if any(_contains_seq(preceding, cue) for cue in rule.negation):
        return Label.NEGATIVE
    if any(_contains_seq(preceding, cue) for cue in rule.uncertain):
        return Label.UNCERTAIN
    return Label.POSITIVE


_DOMINANCE = (Label.POSITIVE, Label.UNCERTAIN, Label.NEGATIVE)


def _phrase_spans(tokens: list, rule: ConditionRule) -> list:
    """Occurrence spans for a condition, longest match winning.

    A span strictly contained in a longer span of the same condition is
    dropped, so an alias like "pneumothorax" inside "apical pneumothorax"
    does not spawn a second mention with a shifted cue window.
    """
    spans = set()
    for phrase in rule.phrases:
        n = len(phrase)
        for start in range(len(tokens) - n + 1):
            if tuple(tokens[start : start + n]) == phrase:
                spans.add((start, start + n))
    return [
        (s, e)
        for s, e in sorted(spans)
        if not any(
            (s2 <= s and e <= e2 and (e2 - s2) > (e - s)) for s2, e2 in spans
        )
    ]


def label_report(text: str, rules: RuleSet | None = None) -> LabelVector:
    """Assign one of the four labels to every condition for one report."""
    rules = rules or default_rules()
    tokens = tokenize(text)
    out: LabelVector = {}
    for cond in CONDITIONS:
        rule = rules.rules[cond]
        mention_labels = {
            _mention_label(tokens, start, rule, rules.window)
            for start, _ in _phrase_spans(tokens, rule)
        }
        if not mention_labels:
            out[cond] = Label.BLANK
        else:
            out[cond] = next(l for l in _DOMINANCE if l in mention_labels)
    return out


def label_reports(texts, rules: RuleSet | None = None) -> list:
    rules = rules or default_rules()
    return parallel_map(lambda t: label_report(t, rules), texts)


def confusion_counts(pred, truth, condition: Condition) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) for one condition, Positive-vs-rest.

    Only the Positive label counts as a positive prediction; Negative,
    Uncertain, and Blank are all treated as not-positive.
    """
    if len(pred) != len(truth):
        raise DataError(f"label list lengths differ: {len(pred)} vs {len(truth)}")
    tp = fp = fn = tn = 0
    for p, t in zip(pred, truth):
        pp = p[condition] == Label.POSITIVE
        tt = t[condition] == Label.POSITIVE
        if pp and tt:
            tp += 1
        elif pp:
            fp += 1
        elif tt:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def f1(tp: int, fp: int, fn: int) -> float:
    """F1 = TP / (TP + (FP + FN)/2); zero when there is no support."""
    if min(tp, fp, fn) < 0:
        raise DataError(f"negative confusion counts: {(tp, fp, fn)}")
    denom = tp + 0.5 * (fp + fn)
    if denom == 0:
        return 0.0
    return tp / denom


@dataclass
class ClinicalReport:
    """Micro-averaged overall F1 plus the per-condition breakdown."""

    overall_f1: float
    overall_support: bool
    per_condition_f1: dict
    support: dict
    frequencies: dict
    counts: dict
    n_reports: int
    averaging: str = "micro"

    def to_json_dict(self) -> dict:
        return {
            "overall_f1": self.overall_f1,
            "overall_support": self.overall_support,
            "averaging": self.averaging,
            "n_reports": self.n_reports,
            "per_condition": {
                cond.value: {
                    "f1": self.per_condition_f1[cond],
                    "support": self.support[cond],
                    "frequency": self.frequencies[cond],
                    "tp": self.counts[cond][0],
                    "fp": self.counts[cond][1],
                    "fn": self.counts[cond][2],
                    "tn": self.counts[cond][3],
                }
                for cond in CONDITIONS
            },
        }


def chexbert_f1_report(pred_texts, truth_texts, rules: RuleSet | None = None) -> ClinicalReport:
    """Label both report lists with the same rules and score them.

    Overall F1 pools TP/FP/FN across all 14 conditions (micro average);
    per-condition F1 and Positive frequency come from the same counts.
    """
    if len(pred_texts) != len(truth_texts):
        raise DataError(
            f"report list lengths differ: {len(pred_texts)} vs {len(truth_texts)}"
        )
    rules = rules or default_rules()
    pred = label_reports(pred_texts, rules)
    truth = label_reports(truth_texts, rules)
    return score_label_vectors(pred, truth)


def score_label_vectors(pred, truth) -> ClinicalReport:
    """Clinical F1 report from already-computed label vectors."""
    if len(pred) != len(truth):
        raise DataError(f"label list lengths differ: {len(pred)} vs {len(truth)}")
    n = len(truth)
    counts = {}
    per_f1 = {}
    support = {}
    freq = {}
    pooled_tp = pooled_fp = pooled_fn = 0
    for cond in CONDITIONS:
        tp, fp, fn, tn = confusion_counts(pred, truth, cond)
        counts[cond] = (tp, fp, fn, tn)
        per_f1[cond] = f1(tp, fp, fn)
        support[cond] = (tp + fp + fn) > 0
        freq[cond] = (tp + fn) / n if n else 0.0
        pooled_tp += tp
        pooled_fp += fp
        pooled_fn += fn
    return ClinicalReport(
        overall_f1=f1(pooled_tp, pooled_fp, pooled_fn),
        overall_support=(pooled_tp + pooled_fp + pooled_fn) > 0,
        per_condition_f1=per_f1,
        support=support,
        frequencies=freq,
        counts=counts,
        n_reports=n,
    )
