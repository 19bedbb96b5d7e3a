"""dualscribe: a desk-scale dual-backbone meshed-memory report captioner.

Subpackages by responsibility:

- ``autodiff``   -- float64 tensors with tape-based reverse-mode gradients
- ``features``   -- stub/precomputed backbones and the region embedder
- ``model``      -- memory-augmented encoder, meshed decoder, checkpoints
- ``training``   -- Adam, the training loop, greedy/beam decoding
- ``metrics``    -- corpus BLEU-1..4, ROUGE-L, CIDEr-D
- ``labeler``    -- rule-based condition labeling and clinical F1
- ``corpus``     -- tokenizer/vocabulary, JSONL corpora, synthetic data
- ``experiment`` -- the three-variant comparison harness
- ``cli``        -- the ``dualscribe`` command
"""

from .autodiff import Tape, Tensor, backward, checked_mode, no_grad
from .corpus import CorpusEntry, Vocabulary, read_corpus_jsonl, synthesize_corpus
from .errors import DataError, DualscribeError, InvariantError, ShapeError
from .features import BackboneSpec, FeatureGrid, RegionEmbedder, SyntheticImage
from .labeler import Condition, Label, RuleSet, chexbert_f1_report, f1, label_report
from .metrics import EvalPair, bleu, cider_d, rouge_l, score_pairs
from .model import ModelConfig
from .pipeline import CaptionPipeline
from .training import DecodeConfig, TrainConfig, generate, train

__version__ = "0.1.0"

__all__ = [
    "BackboneSpec",
    "CaptionPipeline",
    "Condition",
    "CorpusEntry",
    "DataError",
    "DecodeConfig",
    "DualscribeError",
    "EvalPair",
    "FeatureGrid",
    "InvariantError",
    "Label",
    "ModelConfig",
    "RegionEmbedder",
    "RuleSet",
    "ShapeError",
    "SyntheticImage",
    "Tape",
    "Tensor",
    "TrainConfig",
    "Vocabulary",
    "backward",
    "bleu",
    "checked_mode",
    "chexbert_f1_report",
    "cider_d",
    "f1",
    "generate",
    "label_report",
    "no_grad",
    "read_corpus_jsonl",
    "rouge_l",
    "score_pairs",
    "synthesize_corpus",
    "train",
]
