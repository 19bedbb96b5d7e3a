"""Command-line surface: synth / train / generate / evaluate / label / compare.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation.  Every failure writes one machine-readable line to stderr with
an ``error[kind]:`` prefix before exiting.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from .corpus import (
    Vocabulary,
    read_corpus_jsonl,
    synthesize_corpus,
    write_corpus_jsonl,
)
from .errors import DataError, DualscribeError, InvariantError
from .experiment import compare, desk_spec, write_comparison
from .labeler import RuleSet, chexbert_f1_report, default_rules, label_report
from .metrics import EvalPair, read_eval_pairs_jsonl, score_pairs
from .pipeline import CaptionPipeline, VARIANTS
from .text import detokenize, tokenize
from .training import DecodeConfig, generate, train, write_loss_csv


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, message: str, code: int) -> int:
    print(f"error[{kind}]: {message}", file=sys.stderr)
    return code


def _load_toml(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise DataError(f"cannot open config file {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise DataError(f"config file {path} is not valid TOML: {exc}") from exc


_OVERRIDE_KEYS = (
    "d_model", "memory_slots", "n_enc_layers", "n_dec_layers", "n_heads",
    "ffn_dim", "max_len", "dropout_rate", "batch_size", "epochs", "lr",
    "grad_clip_norm", "strategy", "beam_width", "decode_max_len",
    "grid_h", "grid_w", "general_channels", "domain_channels",
    "backbone_seed", "general_features", "domain_features", "min_freq",
    "train_fraction",
)


def _collect_overrides(args) -> dict:
    overrides = _load_toml(getattr(args, "config", None))
    overrides.pop("variant", None)
    overrides.pop("seed", None)
    for key in _OVERRIDE_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    return overrides


def _add_override_flags(parser) -> None:
    g = parser.add_argument_group("model/training overrides (beat config-file values)")
    g.add_argument("--config", help="TOML key-value experiment config")
    for key in ("d_model", "memory_slots", "n_enc_layers", "n_dec_layers", "n_heads",
                "ffn_dim", "max_len", "batch_size", "epochs", "beam_width",
                "decode_max_len", "grid_h", "grid_w", "general_channels",
                "domain_channels", "backbone_seed", "min_freq"):
        g.add_argument(f"--{key.replace('_', '-')}", dest=key, type=int)
    for key in ("dropout_rate", "lr", "grad_clip_norm", "train_fraction"):
        g.add_argument(f"--{key.replace('_', '-')}", dest=key, type=float)
    g.add_argument("--strategy", choices=("greedy", "beam"))
    g.add_argument("--general-features", dest="general_features",
                   help="precomputed feature file for the general backbone")
    g.add_argument("--domain-features", dest="domain_features",
                   help="precomputed feature file for the domain backbone")


def _rules_from(args) -> RuleSet:
    return RuleSet.from_file(args.rules) if args.rules else default_rules()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    entries = synthesize_corpus(
        n=args.n,
        seed=args.seed,
        rules=_rules_from(args),
        image_size=args.image_size,
        base_rate=args.base_rate,
        skew=args.skew,
    )
    write_corpus_jsonl(args.out, entries)
    print(f"wrote {len(entries)} entries to {args.out}")
    return 0


def _cmd_train(args) -> int:
    corpus = read_corpus_jsonl(args.corpus)
    if not corpus:
        raise DataError(f"corpus {args.corpus} is empty")
    overrides = _collect_overrides(args)
    spec = desk_spec(args.variant, seed=args.seed, overrides=overrides)
    vocab = Vocabulary.build((e.report for e in corpus), spec.min_freq)
    model_cfg = replace(spec.model, vocab_size=len(vocab))
    pipeline = CaptionPipeline(
        args.variant, model_cfg, spec.general_backbone, spec.domain_backbone,
        vocab, init_rng=np.random.default_rng(args.seed),
    )
    history = train(pipeline, corpus, spec.train)
    pipeline.save(args.out)
    if args.loss_csv:
        write_loss_csv(args.loss_csv, history)
    print(
        f"trained {args.variant} for {len(history)} steps; "
        f"final loss {history[-1].loss:.4f}; checkpoint at {args.out}"
    )
    return 0


def _cmd_generate(args) -> int:
    pipeline = CaptionPipeline.load(args.checkpoint)
    corpus = read_corpus_jsonl(args.corpus)
    decode_cfg = DecodeConfig(
        strategy=args.strategy or "greedy",
        beam_width=args.beam_width or 1,
        max_len=args.decode_max_len or pipeline.config.max_len,
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        for entry in corpus:
            trace = pipeline.encode_image(entry.image)
            ids = generate(trace, pipeline.config, pipeline.params, decode_cfg)
            text = detokenize(pipeline.vocab.decode(ids))
            fh.write(json.dumps({"id": entry.entry_id, "candidate": text}) + "\n")
    print(f"wrote {len(corpus)} candidate reports to {args.out}")
    return 0


def _read_jsonl(path: str) -> list[dict]:
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    rows = []
    with fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
    return rows


def _text_field(row: dict, path: str) -> str:
    for key in ("report", "candidate", "text"):
        if key in row:
            return row[key]
    raise DataError(f"{path}: row {row.get('id')!r} has no report/candidate/text field")


def _gather_pairs(args) -> tuple[list[str], list[EvalPair], list[str], list[str]]:
    """Returns (ids, tokenized pairs, candidate texts, reference texts)."""
    if args.pairs:
        ids, pairs = read_eval_pairs_jsonl(args.pairs)
        cands = [detokenize(list(p.candidate)) for p in pairs]
        refs = [detokenize(list(p.references[0])) for p in pairs]
        return ids, pairs, cands, refs
    cand_rows = _read_jsonl(args.candidates)
    ref_rows = _read_jsonl(args.references)
    ref_by_id: dict[str, list[str]] = {}
    for row in ref_rows:
        rid = str(row.get("id"))
        if "references" in row:
            ref_by_id[rid] = [str(r) for r in row["references"]]
        else:
            ref_by_id[rid] = [_text_field(row, args.references)]
    ids, pairs, cands, refs = [], [], [], []
    for row in cand_rows:
        rid = str(row.get("id"))
        if rid not in ref_by_id:
            raise DataError(f"candidate id {rid!r} has no reference in {args.references}")
        cand = _text_field(row, args.candidates)
        ids.append(rid)
        cands.append(cand)
        refs.append(ref_by_id[rid][0])
        pairs.append(
            EvalPair(candidate=tokenize(cand),
                     references=[tokenize(r) for r in ref_by_id[rid]])
        )
    if not pairs:
        raise DataError(f"no candidate/reference pairs found in {args.candidates}")
    return ids, pairs, cands, refs


def _cmd_evaluate(args) -> int:
    _, pairs, cands, refs = _gather_pairs(args)
    result = {"nlg": score_pairs(pairs), "n_pairs": len(pairs)}
    if not args.skip_clinical:
        clinical = chexbert_f1_report(cands, refs, _rules_from(args))
        result["clinical"] = clinical.to_json_dict()
    payload = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload + "\n")
    print(payload)
    return 0


def _cmd_label(args) -> int:
    rules = _rules_from(args)
    rows = _read_jsonl(args.input)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in rows:
            labels = label_report(_text_field(row, args.input), rules)
            fh.write(
                json.dumps(
                    {
                        "id": row.get("id"),
                        "labels": {c.value: l.value for c, l in labels.items()},
                    }
                )
                + "\n"
            )
    print(f"labeled {len(rows)} reports into {args.out}")
    return 0


def _cmd_compare(args) -> int:
    corpus = read_corpus_jsonl(args.corpus)
    overrides = _collect_overrides(args)
    result = compare(corpus, seed=args.seed, overrides=overrides, rules=_rules_from(args))
    paths = write_comparison(args.out_dir, result)
    for row in result.summary_rows:
        print(
            f"{row['model']:>16}  BLEU-1 {row['bleu_1']:.4f}  BLEU-4 {row['bleu_4']:.4f}  "
            f"ROUGE-L {row['rouge_l']:.4f}  CIDEr {row['cider']:.4f}  "
            f"F1 {row['chexbert_f1']:.4f}"
        )
    print(f"tables written under {args.out_dir}")
    print(f"note: {result.metadata['banner']}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="dualscribe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus JSONL")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", dest="image_size", type=int, default=32)
    p.add_argument("--base-rate", dest="base_rate", type=float, default=0.55)
    p.add_argument("--skew", type=float, default=0.75)
    p.add_argument("--rules", help="alternate rule-set JSON")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train one variant on a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", dest="loss_csv")
    p.add_argument("--variant", choices=VARIANTS, default="double_feature")
    p.add_argument("--seed", type=int, default=0)
    _add_override_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="decode reports for a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=("greedy", "beam"))
    p.add_argument("--beam-width", dest="beam_width", type=int)
    p.add_argument("--decode-max-len", dest="decode_max_len", type=int)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("evaluate", help="score candidates against references")
    p.add_argument("--pairs", help="JSONL of {id, candidate, references}")
    p.add_argument("--candidates", help="JSONL of {id, candidate}")
    p.add_argument("--references", help="JSONL of {id, report} or {id, references}")
    p.add_argument("--out", help="write the metric JSON here as well")
    p.add_argument("--rules")
    p.add_argument("--skip-clinical", action="store_true")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("label", help="run the clinical labeler over reports")
    p.add_argument("--input", required=True, help="JSONL of {id, report}")
    p.add_argument("--out", required=True)
    p.add_argument("--rules")
    p.set_defaults(func=_cmd_label)

    p = sub.add_parser("compare", help="run all three variants and emit tables")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rules")
    _add_override_flags(p)
    p.set_defaults(func=_cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "evaluate":
            if bool(args.pairs) == bool(args.candidates or args.references):
                raise UsageError(
                    "evaluate needs either --pairs or both --candidates/--references"
                )
            if not args.pairs and not (args.candidates and args.references):
                raise UsageError("evaluate needs both --candidates and --references")
        return args.func(args)
    except UsageError as exc:
        return _fail("usage", str(exc), 1)
    except DataError as exc:
        return _fail("data", str(exc), 2)
    except InvariantError as exc:
        return _fail("internal", str(exc), 3)
    except DualscribeError as exc:
        return _fail("internal", str(exc), 3)


if __name__ == "__main__":
    sys.exit(main())
