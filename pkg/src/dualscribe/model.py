"""Memory-augmented encoder and meshed decoder.

Encoder self-attention extends its keys/values with learned, input-independent
memory rows.  The decoder cross-attends to every encoder layer's output and
combines the per-layer results through elementwise sigmoid gates, scaled by
1/sqrt(n_enc_layers).  Forward passes build on the autodiff ops, so one
backward call differentiates the whole stack.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, ShapeError

# Additive mask value: large enough that exp() underflows to exactly 0.0
# after max-subtraction, yet finite so checked mode stays usable.
MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 512
    memory_slots: int = 40
    n_enc_layers: int = 3
    n_dec_layers: int = 3
    n_heads: int = 8
    ffn_dim: int = 2048
    max_len: int = 64
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.vocab_size < 4:
            raise DataError("vocab_size must be >= 4 (pad/bos/eos/unk)")
        if self.d_model % self.n_heads:
            raise DataError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.memory_slots < 0:
            raise DataError("memory_slots must be >= 0")
        if min(self.n_enc_layers, self.n_dec_layers, self.ffn_dim, self.max_len) < 1:
            raise DataError("layer counts, ffn_dim, and max_len must be >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


@dataclass
class LayerNormParams:
    gain: Tensor
    bias: Tensor

    def named(self, prefix):
        yield f"{prefix}.gain", self.gain
        yield f"{prefix}.bias", self.bias


@dataclass
class AttentionParams:
    w_q: Tensor
    b_q: Tensor
    w_k: Tensor
    b_k: Tensor
    w_v: Tensor
    b_v: Tensor
    w_o: Tensor
    b_o: Tensor
    memory_k: Tensor | None = None
    memory_v: Tensor | None = None

    def named(self, prefix):
        for n in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v", "w_o", "b_o"):
            yield f"{prefix}.{n}", getattr(self, n)
        if self.memory_k is not None:
            yield f"{prefix}.memory_k", self.memory_k
            yield f"{prefix}.memory_v", self.memory_v


@dataclass
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def named(self, prefix):
        for n in ("w1", "b1", "w2", "b2"):
            yield f"{prefix}.{n}", getattr(self, n)


@dataclass
class GateParams:
    w: Tensor  # [2*d_model, d_model]
    b: Tensor  # [d_model]

    def named(self, prefix):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


@dataclass
class EncoderLayerParams:
    attn: AttentionParams
    ln1: LayerNormParams
    ln2: LayerNormParams
    ffn: FeedForwardParams

    def named(self, prefix):
        yield from self.attn.named(f"{prefix}.attn")
        yield from self.ln1.named(f"{prefix}.ln1")
        yield from self.ln2.named(f"{prefix}.ln2")
        yield from self.ffn.named(f"{prefix}.ffn")


@dataclass
class DecoderLayerParams:
    self_attn: AttentionParams
    cross_attn: AttentionParams
    gates: list  # one GateParams per encoder layer
    ln1: LayerNormParams
    ln2: LayerNormParams
    ln3: LayerNormParams
    ffn: FeedForwardParams

    def named(self, prefix):
        yield from self.self_attn.named(f"{prefix}.self_attn")
        yield from self.cross_attn.named(f"{prefix}.cross_attn")
        for i, gate in enumerate(self.gates):
            yield from gate.named(f"{prefix}.gate{i}")
        yield from self.ln1.named(f"{prefix}.ln1")
        yield from self.ln2.named(f"{prefix}.ln2")
        yield from self.ln3.named(f"{prefix}.ln3")
        yield from self.ffn.named(f"{prefix}.ffn")


@dataclass
class TransformerParams:
    token_embedding: Tensor
    enc_layers: list
    dec_layers: list
    final_ln: LayerNormParams
    out_w: Tensor
    out_b: Tensor

    def named_parameters(self, prefix: str = "model"):
        yield f"{prefix}.token_embedding", self.token_embedding
        for i, layer in enumerate(self.enc_layers):
            yield from layer.named(f"{prefix}.enc{i}")
        for i, layer in enumerate(self.dec_layers):
            yield from layer.named(f"{prefix}.dec{i}")
        yield from self.final_ln.named(f"{prefix}.final_ln")
        yield f"{prefix}.out_w", self.out_w
        yield f"{prefix}.out_b", self.out_b


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


def _xavier(rng, fan_in, fan_out) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return _param(rng.uniform(-limit, limit, size=(fan_in, fan_out)))


def _zeros(n) -> Tensor:
    return _param(np.zeros(n))


def _layer_norm_params(d) -> LayerNormParams:
    return LayerNormParams(gain=_param(np.ones(d)), bias=_zeros(d))


def _attention_params(rng, d, memory_slots=0, d_model_std=None) -> AttentionParams:
    p = AttentionParams(
        w_q=_xavier(rng, d, d), b_q=_zeros(d),
        w_k=_xavier(rng, d, d), b_k=_zeros(d),
        w_v=_xavier(rng, d, d), b_v=_zeros(d),
        w_o=_xavier(rng, d, d), b_o=_zeros(d),
    )
    if memory_slots > 0:
        std = 1.0 / math.sqrt(d)
        p.memory_k = _param(rng.normal(0.0, std, size=(memory_slots, d)))
        p.memory_v = _param(rng.normal(0.0, std, size=(memory_slots, d)))
    return p


def _ffn_params(rng, d, ffn_dim) -> FeedForwardParams:
    return FeedForwardParams(
        w1=_xavier(rng, d, ffn_dim), b1=_zeros(ffn_dim),
        w2=_xavier(rng, ffn_dim, d), b2=_zeros(d),
    )


def init_transformer_params(cfg: ModelConfig, rng: np.random.Generator) -> TransformerParams:
    d = cfg.d_model
    enc_layers = [
        EncoderLayerParams(
            attn=_attention_params(rng, d, cfg.memory_slots),
            ln1=_layer_norm_params(d),
            ln2=_layer_norm_params(d),
            ffn=_ffn_params(rng, d, cfg.ffn_dim),
        )
        for _ in range(cfg.n_enc_layers)
    ]
    dec_layers = [
        DecoderLayerParams(
            self_attn=_attention_params(rng, d),
            cross_attn=_attention_params(rng, d),
            gates=[
                GateParams(w=_xavier(rng, 2 * d, d), b=_zeros(d))
                for _ in range(cfg.n_enc_layers)
            ],
            ln1=_layer_norm_params(d),
            ln2=_layer_norm_params(d),
            ln3=_layer_norm_params(d),
            ffn=_ffn_params(rng, d, cfg.ffn_dim),
        )
        for _ in range(cfg.n_dec_layers)
    ]
    return TransformerParams(
        token_embedding=_xavier(rng, cfg.vocab_size, d),
        enc_layers=enc_layers,
        dec_layers=dec_layers,
        final_ln=_layer_norm_params(d),
        # Zero-initialized head: logits start exactly uniform, so the first
        # training loss sits at ln(vocab_size) and early steps stay stable.
        out_w=_param(np.zeros((d, cfg.vocab_size))),
        out_b=_zeros(cfg.vocab_size),
    )


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[..., T, d] -> [..., h, T, d/h]"""
    *lead, t, d = x.shape
    x = ad.reshape(x, (*lead, t, n_heads, d // n_heads))
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    return ad.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    """[..., h, T, d/h] -> [..., T, d]"""
    axes = list(range(x.ndim))
    axes[-3], axes[-2] = axes[-2], axes[-3]
    x = ad.transpose(x, axes)
    *lead, t, h, dh = x.shape
    return ad.reshape(x, (*lead, t, h * dh))


def attention(
    q_src: Tensor,
    kv_src: Tensor,
    p: AttentionParams,
    n_heads: int,
    mask: np.ndarray | None = None,
    want_weights: bool = False,
):
    """Multi-head scaled dot-product attention.

    When ``p`` carries memory rows, they extend the keys/values along the
    slot axis before the head split, so each head attends over its share of
    the memory.  ``mask`` is an additive [Tq, Tk] array broadcast across
    heads.  Returns the output, plus the attention weights as a plain array
    if requested.
    """
    q = ad.linear(q_src, p.w_q, p.b_q)
    k = ad.linear(kv_src, p.w_k, p.b_k)
    v = ad.linear(kv_src, p.w_v, p.b_v)
    if p.memory_k is not None and p.memory_k.shape[0] > 0:
        if k.ndim != 2:
            raise ShapeError("memory rows require an unbatched [n, d] input")
        k = ad.concat([k, p.memory_k], axis=0)
        v = ad.concat([v, p.memory_v], axis=0)

    qh = _split_heads(q, n_heads)
    kh = _split_heads(k, n_heads)
    vh = _split_heads(v, n_heads)

    kt_axes = list(range(kh.ndim))
    kt_axes[-2], kt_axes[-1] = kt_axes[-1], kt_axes[-2]
    scores = ad.scale(ad.matmul(qh, ad.transpose(kh, kt_axes)),
                      1.0 / math.sqrt(q.shape[-1] // n_heads))
    if mask is not None:
        scores = ad.add(scores, Tensor(np.broadcast_to(mask, scores.shape)))
    weights = ad.softmax(scores, axis=-1)
    out = _merge_heads(ad.matmul(weights, vh))
    out = ad.linear(out, p.w_o, p.b_o)
    if want_weights:
        return out, weights.data.copy()
    return out


def memory_self_attention(
    x: Tensor, p: AttentionParams, n_heads: int, want_weights: bool = False
):
    """Self-attention over ``x`` with keys/values extended by memory rows.

    Bare sublayer: the encoder block wraps it in pre-norm and residual.
    With zero memory rows this is standard multi-head self-attention.
    """
    return attention(x, x, p, n_heads, want_weights=want_weights)


def feed_forward(x: Tensor, p: FeedForwardParams) -> Tensor:
    return ad.linear(ad.gelu(ad.linear(x, p.w1, p.b1)), p.w2, p.b2)


def causal_mask(t: int) -> np.ndarray:
    """Additive [t, t] mask blocking attention to positions after the query."""
    return np.where(np.triu(np.ones((t, t), dtype=bool), k=1), MASK_VALUE, 0.0)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


def encode(
    regions: Tensor,
    cfg: ModelConfig,
    params: TransformerParams,
    dropout_rng: np.random.Generator | None = None,
) -> list:
    """Run the encoder stack, returning every layer's output (the trace)."""
    if regions.ndim != 2 or regions.shape[1] != cfg.d_model:
        raise ShapeError(f"regions must be [n, {cfg.d_model}], got {regions.shape}")
    if regions.shape[0] > cfg.max_len:
        raise ShapeError(
            f"region sequence length {regions.shape[0]} exceeds max_len {cfg.max_len}"
        )
    x = regions
    trace = []
    for layer in params.enc_layers:
        attended = memory_self_attention(
            ad.layer_norm(x, layer.ln1.gain, layer.ln1.bias), layer.attn, cfg.n_heads
        )
        x = ad.add(x, ad.dropout(attended, cfg.dropout_rate, dropout_rng))
        ff = feed_forward(ad.layer_norm(x, layer.ln2.gain, layer.ln2.bias), layer.ffn)
        x = ad.add(x, ad.dropout(ff, cfg.dropout_rate, dropout_rng))
        trace.append(x)
    return trace


# ---------------------------------------------------------------------------
# meshed decoder
# ---------------------------------------------------------------------------


def meshed_cross_attention(
    y: Tensor,
    trace: list,
    layer: DecoderLayerParams,
    n_heads: int,
    want_gates: bool = False,
):
    """Gated sum of cross-attentions to every encoder layer.

    For each encoder layer i: C_i = Attn(y, trace[i]) with the decoder
    layer's shared cross-attention projections, gated elementwise by
    sigmoid([y || C_i] W_i + b_i); the gated terms are summed and scaled
    by 1/sqrt(len(trace)).
    """
    if not trace:
        raise ShapeError("meshed cross-attention needs a nonempty encoder trace")
    if len(trace) != len(layer.gates):
        raise ShapeError(
            f"trace length {len(trace)} does not match gate count {len(layer.gates)}"
        )
    total = None
    gate_values = []
    for level, gate in zip(trace, layer.gates):
        c = attention(y, level, layer.cross_attn, n_heads)
        alpha = ad.sigmoid(ad.linear(ad.concat([y, c], axis=-1), gate.w, gate.b))
        gated = ad.mul(alpha, c)
        total = gated if total is None else ad.add(total, gated)
        if want_gates:
            gate_values.append(alpha.data.copy())
    out = ad.scale(total, 1.0 / math.sqrt(len(trace)))
    if want_gates:
        return out, gate_values
    return out


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    """Fixed sin/cos position table [max_len, d_model]."""
    pos = np.arange(max_len)[:, None].astype(np.float64)
    idx = np.arange(d_model)[None, :]
    angles = pos / np.power(10000.0, (2.0 * (idx // 2)) / d_model)
    table = np.where(idx % 2 == 0, np.sin(angles), np.cos(angles))
    return table


def decode_forward(
    tokens: np.ndarray,
    trace: list,
    cfg: ModelConfig,
    params: TransformerParams,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Teacher-forced decoder pass: [B, T] token ids -> [B, T, V] logits.

    Causal self-attention guarantees position t sees only tokens < t.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"tokens must be [B, T], got shape {tokens.shape}")
    b, t = tokens.shape
    if t > cfg.max_len:
        raise ShapeError(f"sequence length {t} exceeds max_len {cfg.max_len}")

    emb = ad.embedding_lookup(params.token_embedding, tokens)
    pe = sinusoidal_positions(cfg.max_len, cfg.d_model)[:t]
    y = ad.add(emb, Tensor(np.broadcast_to(pe, (b, t, cfg.d_model))))
    y = ad.dropout(y, cfg.dropout_rate, dropout_rng)
    mask = causal_mask(t)

    for layer in params.dec_layers:
        normed = ad.layer_norm(y, layer.ln1.gain, layer.ln1.bias)
        attended = attention(normed, normed, layer.self_attn, cfg.n_heads, mask=mask)
        y = ad.add(y, ad.dropout(attended, cfg.dropout_rate, dropout_rng))
        crossed = meshed_cross_attention(
            ad.layer_norm(y, layer.ln2.gain, layer.ln2.bias),
            trace,
            layer,
            cfg.n_heads,
        )
        y = ad.add(y, ad.dropout(crossed, cfg.dropout_rate, dropout_rng))
        ff = feed_forward(ad.layer_norm(y, layer.ln3.gain, layer.ln3.bias), layer.ffn)
        y = ad.add(y, ad.dropout(ff, cfg.dropout_rate, dropout_rng))

    y = ad.layer_norm(y, params.final_ln.gain, params.final_ln.bias)
    return ad.linear(y, params.out_w, params.out_b)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"M2CK"
_CKPT_VERSION = 1


def save_checkpoint(
    path: str,
    cfg: ModelConfig,
    named_params,
    extras: dict | None = None,
) -> None:
    """Write config plus named float64 parameter blobs.

    ``named_params`` is a dict or iterable of (name, Tensor).  ``extras``
    rides along inside the config document (pipeline metadata, vocab, ...).
    """
    items = list(named_params.items() if isinstance(named_params, dict) else named_params)
    doc = {"config": cfg.to_dict(), "extras": extras or {}}
    payload = json.dumps(doc, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", _CKPT_VERSION))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<I", len(items)))
        for name, tensor in items:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_checkpoint(path: str):
    """Read a checkpoint: (ModelConfig, {name: array}, extras dict)."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise DataError(f"cannot open checkpoint {path}: {exc}") from exc
    with fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise DataError(f"{path} is not a model checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        (doc_len,) = struct.unpack("<I", fh.read(4))
        doc = json.loads(fh.read(doc_len).decode("utf-8"))
        cfg = ModelConfig.from_dict(doc["config"])
        (count,) = struct.unpack("<I", fh.read(4))
        state: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n_values = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n_values)
            if len(raw) != 8 * n_values:
                raise DataError(f"{path}: truncated blob for parameter {name!r}")
            state[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    return cfg, state, doc.get("extras", {})


def apply_state(named_params, state: dict) -> None:
    """Load arrays into live parameters; any name/shape mismatch is fatal."""
    items = list(named_params.items() if isinstance(named_params, dict) else named_params)
    expected = {name for name, _ in items}
    stored = set(state)
    if expected != stored:
        missing = sorted(expected - stored)
        surplus = sorted(stored - expected)
        raise DataError(
            f"checkpoint parameter names do not match model: "
            f"missing={missing[:5]} unexpected={surplus[:5]}"
        )
    for name, tensor in items:
        arr = state[name]
        if arr.shape != tensor.data.shape:
            raise DataError(
                f"checkpoint shape {arr.shape} for {name!r} does not match "
                f"model shape {tensor.data.shape}"
            )
        tensor.data = np.ascontiguousarray(arr, dtype=np.float64)
        tensor.grad = None
