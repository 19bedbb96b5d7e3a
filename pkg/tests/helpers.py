"""Shared test utilities: finite differences and tiny reference models."""

import numpy as np

from dualscribe import autodiff as ad
from dualscribe.autodiff import Tape, Tensor
from dualscribe.corpus import CorpusEntry, Vocabulary
from dualscribe.features import BackboneSpec, SyntheticImage
from dualscribe.model import ModelConfig
from dualscribe.pipeline import CaptionPipeline

FD_EPS = 1e-4
FD_RTOL = 1e-3

TOY_REPORTS = [
    "lungs clear",
    "no edema",
    "edema stable",
    "no effusion",
    "effusion stable",
    "lungs stable",
    "heart stable",
    "no heart",
]


def toy_corpus() -> list:
    """Eight distinct image/report pairs over a 7-word alphabet (vocab 11)."""
    entries = []
    for i, report in enumerate(TOY_REPORTS):
        img = np.full((16, 16), 0.05)
        row, col = (i // 4) * 8, (i % 4) * 4
        img[row : row + 4, col : col + 4] = 0.95
        entries.append(
            CorpusEntry(f"toy-{i}", report, SyntheticImage(img[:, :, None]))
        )
    return entries


def tiny_pipeline(
    corpus,
    variant: str = "double_feature",
    seed: int = 0,
    memory_slots: int = 3,
    dropout_rate: float = 0.0,
    max_len: int = 16,
) -> CaptionPipeline:
    """Tiny-config pipeline (d_model 16, 2+2 layers, 2 heads) over a corpus."""
    vocab = Vocabulary.build((e.report for e in corpus), min_freq=1)
    cfg = ModelConfig(
        vocab_size=len(vocab), d_model=16, memory_slots=memory_slots,
        n_enc_layers=2, n_dec_layers=2, n_heads=2, ffn_dim=16,
        max_len=max_len, dropout_rate=dropout_rate,
    )
    general = BackboneSpec(kind="stub_general", grid_h=2, grid_w=2, out_channels=4, seed=1)
    domain = BackboneSpec(kind="stub_domain", grid_h=2, grid_w=2, out_channels=4, seed=2)
    return CaptionPipeline(
        variant, cfg, general, domain, vocab,
        init_rng=np.random.default_rng(seed),
    )


def finite_difference_grad(loss_fn, tensor: Tensor, eps: float = FD_EPS) -> np.ndarray:
    """Central differences of a scalar-valued loss w.r.t. one tensor."""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss_fn()
        flat[i] = orig - eps
        lo = loss_fn()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a-b| / max(|a|, |b|, floor)."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def check_grads_against_fd(build_loss, params, rtol: float = FD_RTOL) -> dict:
    """Backward grads vs central differences for every named parameter.

    ``build_loss`` is a zero-argument callable running a full forward pass
    and returning the scalar loss Tensor; it must be a pure function of the
    parameter data.
    """
    for p in params.values():
        p.zero_grad()
    with Tape():
        loss = build_loss()
        ad.backward(loss)

    def loss_value() -> float:
        with ad.no_grad():
            return build_loss().item()

    errors = {}
    for name, p in params.items():
        assert p.grad is not None, f"parameter {name} received no gradient"
        fd = finite_difference_grad(loss_value, p)
        errors[name] = relative_error(p.grad, fd)
        assert errors[name] <= rtol, (
            f"gradient mismatch for {name}: rel err {errors[name]:.3e} > {rtol}"
        )
    return errors
