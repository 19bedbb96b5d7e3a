"""Three-variant ablation runner and its report tables.

``run_experiment`` trains one backbone variant on the train split, decodes
the test split, and scores NLG metrics plus the clinical F1 breakdown.
``compare`` does that for all three variants on the same split and lays
the results out as one summary table (variant x metric) and one
per-condition table (condition x variant, with truth frequencies).
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import Vocabulary, split_corpus
from .errors import DataError
from .features import BackboneSpec
from .labeler import (
    CONDITIONS,
    ClinicalReport,
    RuleSet,
    chexbert_f1_report,
    default_rules,
)
from .metrics import EvalPair, score_pairs
from .model import ModelConfig
from .pipeline import DOUBLE_FEATURE, VARIANTS, CaptionPipeline
from .text import detokenize, tokenize
from .training import DecodeConfig, TrainConfig, generate, train

BANNER = (
    "synthetic corpus: scores are not comparable to results on real "
    "radiology report datasets"
)
SCALE_NOTE = "scores on the [0,1] scale (CIDEr-D on [0,10]); multiply by 100 for percent-style tables"

# Desk-scale defaults; ModelConfig/TrainConfig keep the full-scale defaults,
# experiments override them to stay within single-core minutes.
DESK_MODEL = dict(
    d_model=64, memory_slots=8, n_enc_layers=2, n_dec_layers=2, n_heads=4,
    ffn_dim=128, max_len=96, dropout_rate=0.1,
)
DESK_TRAIN = dict(batch_size=12, epochs=20, lr=1e-3)
DESK_GRID = dict(grid_h=4, grid_w=4, general_channels=16, domain_channels=16)


@dataclass
class ExperimentSpec:
    """Everything one training-plus-evaluation run needs."""

    variant: str
    model: ModelConfig
    train: TrainConfig
    decode: DecodeConfig
    general_backbone: BackboneSpec | None
    domain_backbone: BackboneSpec | None
    seed: int = 0
    min_freq: int = 3
    train_fraction: float = 0.9

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise DataError(f"unknown variant {self.variant!r}")


def desk_spec(
    variant: str,
    vocab_size: int | None = None,
    seed: int = 0,
    overrides: dict | None = None,
) -> ExperimentSpec:
    """Build a desk-scale spec; ``overrides`` follows the flat config keys."""
    o = dict(overrides or {})
    model_kwargs = dict(DESK_MODEL)
    for key in list(model_kwargs):
        if key in o:
            model_kwargs[key] = o.pop(key)
    train_kwargs = dict(DESK_TRAIN)
    for key in ("batch_size", "epochs", "lr", "beta1", "beta2", "eps", "grad_clip_norm"):
        if key in o:
            train_kwargs[key] = o.pop(key)
    grid = dict(DESK_GRID)
    for key in list(grid):
        if key in o:
            grid[key] = o.pop(key)
    decode_kwargs = dict(strategy="greedy", beam_width=1, max_len=model_kwargs["max_len"])
    for src, dst in (("strategy", "strategy"), ("beam_width", "beam_width"),
                     ("decode_max_len", "max_len")):
        if src in o:
            decode_kwargs[dst] = o.pop(src)
    backbone_seed = o.pop("backbone_seed", 0)
    general_features = o.pop("general_features", None)
    domain_features = o.pop("domain_features", None)
    min_freq = o.pop("min_freq", 3)
    train_fraction = o.pop("train_fraction", 0.9)
    if o:
        raise DataError(f"unknown experiment config keys: {sorted(o)}")

    general = BackboneSpec(
        kind="precomputed" if general_features else "stub_general",
        grid_h=grid["grid_h"], grid_w=grid["grid_w"],
        out_channels=grid["general_channels"], seed=backbone_seed,
        path=general_features,
    )
    domain = BackboneSpec(
        kind="precomputed" if domain_features else "stub_domain",
        grid_h=grid["grid_h"], grid_w=grid["grid_w"],
        out_channels=grid["domain_channels"], seed=backbone_seed,
        path=domain_features,
    )
    model = ModelConfig(vocab_size=vocab_size or 4, **model_kwargs)
    return ExperimentSpec(
        variant=variant,
        model=model,
        train=TrainConfig(seed=seed, **train_kwargs),
        decode=DecodeConfig(**decode_kwargs),
        general_backbone=general,
        domain_backbone=domain,
        seed=seed,
        min_freq=min_freq,
        train_fraction=train_fraction,
    )


@dataclass
class MetricReport:
    """One summary-table row plus the per-condition breakdown."""

    variant: str
    nlg: dict
    clinical: ClinicalReport
    metadata: dict

    def summary_row(self) -> dict:
        return {
            "model": self.variant,
            **{k: self.nlg[k] for k in ("bleu_1", "bleu_2", "bleu_3", "bleu_4",
                                        "rouge_l", "cider")},
            "chexbert_f1": self.clinical.overall_f1,
        }


def run_experiment(
    spec: ExperimentSpec,
    corpus,
    rules: RuleSet | None = None,
    presplit=None,
) -> MetricReport:
    """Train the spec's variant and score the held-out split."""
    corpus = list(corpus)
    if not corpus:
        raise DataError("experiment needs a nonempty corpus")
    rules = rules or default_rules()
    if presplit is None:
        train_entries, test_entries = split_corpus(corpus, spec.seed, spec.train_fraction)
    else:
        train_entries, test_entries = presplit
    if not train_entries or not test_entries:
        raise DataError(
            f"split produced empty side: train={len(train_entries)}, "
            f"test={len(test_entries)}"
        )

    vocab = Vocabulary.build((e.report for e in train_entries), spec.min_freq)
    model_cfg = replace(spec.model, vocab_size=len(vocab))
    pipeline = CaptionPipeline(
        spec.variant,
        model_cfg,
        spec.general_backbone,
        spec.domain_backbone,
        vocab,
        init_rng=np.random.default_rng(spec.seed),
    )
    history = train(pipeline, train_entries, spec.train)

    candidates = []
    pairs = []
    for entry in test_entries:
        trace = pipeline.encode_image(entry.image)
        ids = generate(trace, model_cfg, pipeline.params, spec.decode)
        text = detokenize(vocab.decode(ids))
        candidates.append(text)
        pairs.append(EvalPair(candidate=tokenize(text), references=[tokenize(entry.report)]))

    nlg = score_pairs(pairs)
    clinical = chexbert_f1_report(candidates, [e.report for e in test_entries], rules)
    metadata = {
        "banner": BANNER,
        "scale_note": SCALE_NOTE,
        "variant": spec.variant,
        "encoder_input_path": "fuse_dual" if spec.variant == DOUBLE_FEATURE else "single_path",
        "seed": spec.seed,
        "corpus_size": len(corpus),
        "train_size": len(train_entries),
        "test_size": len(test_entries),
        "scored_reports": len(candidates),
        "final_train_loss": history[-1].loss,
        "f1_averaging": "micro",
    }
    return MetricReport(spec.variant, nlg, clinical, metadata)


@dataclass
class ComparisonResult:
    summary_rows: list
    condition_rows: list
    metadata: dict
    reports: dict = field(repr=False, default_factory=dict)


def compare(
    corpus,
    seed: int = 0,
    overrides: dict | None = None,
    rules: RuleSet | None = None,
) -> ComparisonResult:
    """Run all three variants on one shared split and collect both tables."""
    corpus = list(corpus)
    rules = rules or default_rules()
    reports = {}
    base = desk_spec(VARIANTS[0], seed=seed, overrides=overrides)
    presplit = split_corpus(corpus, seed, base.train_fraction)
    for variant in VARIANTS:
        spec = desk_spec(variant, seed=seed, overrides=overrides)
        reports[variant] = run_experiment(spec, corpus, rules, presplit=presplit)

    summary_rows = [reports[v].summary_row() for v in VARIANTS]
    frequencies = reports[VARIANTS[0]].clinical.frequencies
    condition_rows = []
    for cond in CONDITIONS:
        row = {"condition": cond.value, "frequency": frequencies[cond]}
        for variant in VARIANTS:
            row[variant] = reports[variant].clinical.per_condition_f1[cond]
        condition_rows.append(row)
    metadata = {
        "banner": BANNER,
        "scale_note": SCALE_NOTE,
        "seed": seed,
        "corpus_size": len(corpus),
        "train_size": reports[VARIANTS[0]].metadata["train_size"],
        "test_size": reports[VARIANTS[0]].metadata["test_size"],
        "f1_averaging": "micro",
        "variants": list(VARIANTS),
    }
    return ComparisonResult(summary_rows, condition_rows, metadata, reports)


def _write_csv(path: str, fieldnames, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow(
                [repr(v) if isinstance(v, float) else v for v in (row[k] for k in fieldnames)]
            )


def write_comparison(outdir: str, result: ComparisonResult) -> dict:
    """Write both tables as JSON and CSV; returns the file map."""
    os.makedirs(outdir, exist_ok=True)
    paths = {
        "summary_json": os.path.join(outdir, "summary_metrics.json"),
        "summary_csv": os.path.join(outdir, "summary_metrics.csv"),
        "conditions_json": os.path.join(outdir, "condition_f1.json"),
        "conditions_csv": os.path.join(outdir, "condition_f1.csv"),
    }
    with open(paths["summary_json"], "w", encoding="utf-8") as fh:
        json.dump(
            {"metadata": result.metadata, "rows": result.summary_rows},
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    _write_csv(
        paths["summary_csv"],
        ["model", "bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "cider", "chexbert_f1"],
        result.summary_rows,
    )
    with open(paths["conditions_json"], "w", encoding="utf-8") as fh:
        json.dump(
            {"metadata": result.metadata, "rows": result.condition_rows},
            fh, indent=2, sort_keys=True,
        )
        fh.write("\n")
    _write_csv(
        paths["conditions_csv"],
        ["condition", "frequency", *VARIANTS],
        result.condition_rows,
    )
    return paths
