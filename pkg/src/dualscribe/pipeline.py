"""End-to-end captioner: frozen backbones -> region embedder -> transformer.

A pipeline owns everything needed to map one image to report logits: the
backbone specs for its variant, the learned region embedder, the
transformer parameters, and the vocabulary.  Backbones are frozen; all
other parameters train jointly.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import features
from .autodiff import Tensor
from .corpus import BOS_ID, EOS_ID, CorpusEntry, Vocabulary
from .errors import DataError
from .features import BackboneSpec, RegionEmbedder, make_backbone
from .model import (
    ModelConfig,
    TransformerParams,
    apply_state,
    decode_forward,
    encode,
    init_transformer_params,
    load_checkpoint,
    save_checkpoint,
)
from .text import tokenize

GENERAL_ONLY = "general_only"
DOMAIN_ONLY = "domain_only"
DOUBLE_FEATURE = "double_feature"
VARIANTS = (GENERAL_ONLY, DOMAIN_ONLY, DOUBLE_FEATURE)


def _aligned_grid(specs) -> tuple[int, int]:
    return min(s.grid_h for s in specs), min(s.grid_w for s in specs)


class CaptionPipeline:
    """One trainable image-to-report model for a given backbone variant."""

    def __init__(
        self,
        variant: str,
        model_cfg: ModelConfig,
        general_spec: BackboneSpec | None,
        domain_spec: BackboneSpec | None,
        vocab: Vocabulary,
        init_rng: np.random.Generator | None = None,
    ):
        if variant not in VARIANTS:
            raise DataError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if variant in (GENERAL_ONLY, DOUBLE_FEATURE) and general_spec is None:
            raise DataError(f"variant {variant!r} needs a general backbone spec")
        if variant in (DOMAIN_ONLY, DOUBLE_FEATURE) and domain_spec is None:
            raise DataError(f"variant {variant!r} needs a domain backbone spec")
        if len(vocab) != model_cfg.vocab_size:
            raise DataError(
                f"vocab size {len(vocab)} does not match config {model_cfg.vocab_size}"
            )
        self.variant = variant
        self.config = model_cfg
        self.vocab = vocab
        self.general_spec = general_spec
        self.domain_spec = domain_spec
        self._general = make_backbone(general_spec) if general_spec else None
        self._domain = make_backbone(domain_spec) if domain_spec else None

        if variant == DOUBLE_FEATURE:
            grid_h, grid_w = _aligned_grid((general_spec, domain_spec))
            in_channels = general_spec.out_channels + domain_spec.out_channels
        elif variant == GENERAL_ONLY:
            grid_h, grid_w = general_spec.grid_h, general_spec.grid_w
            in_channels = general_spec.out_channels
        else:
            grid_h, grid_w = domain_spec.grid_h, domain_spec.grid_w
            in_channels = domain_spec.out_channels
        if grid_h * grid_w > model_cfg.max_len:
            raise DataError(
                f"region count {grid_h * grid_w} exceeds model max_len {model_cfg.max_len}"
            )
        self.embedder = RegionEmbedder(
            grid_h=grid_h, grid_w=grid_w, in_channels=in_channels,
            d_model=model_cfg.d_model,
        )
        rng = init_rng if init_rng is not None else np.random.default_rng(0)
        self.embedder.init_params(rng)
        self.params: TransformerParams = init_transformer_params(model_cfg, rng)

    # -- parameters ---------------------------------------------------------

    def named_parameters(self) -> dict:
        out = dict(self.embedder.named_parameters("embedder"))
        out.update(self.params.named_parameters("model"))
        return out

    def zero_grads(self) -> None:
        for tensor in self.named_parameters().values():
            tensor.zero_grad()

    # -- forward ------------------------------------------------------------

    def region_sequence(self, image) -> Tensor:
        """Embed one image (or feature key) into the encoder input sequence."""
        if self.variant == DOUBLE_FEATURE:
            return features.fuse_dual(
                self._general(image), self._domain(image), self.embedder
            )
        backbone = self._general if self.variant == GENERAL_ONLY else self._domain
        return features.single_path(backbone(image), self.embedder)

    def encode_image(self, image, dropout_rng=None) -> list:
        return encode(self.region_sequence(image), self.config, self.params, dropout_rng)

    def _report_ids(self, report: str) -> list[int]:
        ids = [BOS_ID, *self.vocab.encode(tokenize(report)), EOS_ID]
        if len(ids) - 1 > self.config.max_len:
            raise DataError(
                f"report of {len(ids) - 2} tokens exceeds model max_len "
                f"{self.config.max_len}"
            )
        return ids

    def sample_loss(self, entry: CorpusEntry, dropout_rng=None) -> Tensor:
        """Teacher-forced mean NLL for one corpus entry."""
        trace = self.encode_image(entry.image, dropout_rng)
        ids = self._report_ids(entry.report)
        inputs = np.asarray([ids[:-1]])
        targets = np.asarray([ids[1:]])
        logits = decode_forward(inputs, trace, self.config, self.params, dropout_rng)
        return ad.nll_loss(logits, targets)

    # -- persistence --------------------------------------------------------

    def save(self, path: str) -> None:
        extras = {
            "variant": self.variant,
            "vocab": self.vocab.to_dict(),
            "general_spec": _spec_doc(self.general_spec),
            "domain_spec": _spec_doc(self.domain_spec),
        }
        save_checkpoint(path, self.config, self.named_parameters(), extras)

    @classmethod
    def load(cls, path: str) -> "CaptionPipeline":
        cfg, state, extras = load_checkpoint(path)
        try:
            variant = extras["variant"]
            vocab = Vocabulary.from_dict(extras["vocab"])
            general_spec = _spec_from_doc(extras["general_spec"])
            domain_spec = _spec_from_doc(extras["domain_spec"])
        except KeyError as exc:
            raise DataError(f"checkpoint {path} lacks pipeline metadata: {exc}") from exc
        pipeline = cls(variant, cfg, general_spec, domain_spec, vocab)
        apply_state(pipeline.named_parameters(), state)
        return pipeline


def _spec_doc(spec: BackboneSpec | None):
    if spec is None:
        return None
    return {
        "kind": spec.kind, "grid_h": spec.grid_h, "grid_w": spec.grid_w,
        "out_channels": spec.out_channels, "seed": spec.seed, "path": spec.path,
    }


def _spec_from_doc(doc) -> BackboneSpec | None:
    if doc is None:
        return None
    return BackboneSpec(
        kind=doc["kind"], grid_h=doc["grid_h"], grid_w=doc["grid_w"],
        out_channels=doc["out_channels"], seed=doc.get("seed", 0),
        path=doc.get("path"),
    )
