"""Post-LN transformer encoder classifier with LoRA adapters on attention.

Parameters live in plain numpy arrays keyed by dotted names; a forward pass
wraps them in :class:`~fedpft.tensor.Tensor` leaves so callers decide which
ones receive gradients.

FFN layout: ``w1`` is ``[d_model, d_ff]`` and ``w2`` is ``[d_ff, d_model]``,
so neuron ``k`` owns column ``k`` of ``w1``, entry ``k`` of ``b1`` and row
``k`` of ``w2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROJECTIONS = ("q", "k", "v", "o")
LORA_ALPHA_PER_RANK = 2.0  # alpha = 2r  ->  scaling = alpha / r = 2


class ContractError(ValueError):
    """A documented precondition of an operation was violated."""


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    num_heads: int = 2
    d_model: int = 32
    d_ff: int = 128
    vocab_size: int = 64
    max_seq_len: int = 16
    num_classes: int = 4

    def __post_init__(self):
        if self.num_layers < 0:
            raise ContractError("num_layers must be >= 0")
        if self.num_heads < 1 or self.d_model % self.num_heads:
            raise ContractError(f"d_model={self.d_model} must be a multiple of num_heads={self.num_heads}")
        if self.d_ff < 1:
            raise ContractError("d_ff must be >= 1")
        for name in ("vocab_size", "max_seq_len", "num_classes"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be >= 1")

    @property
    def d_k(self) -> int:
        return self.d_model // self.num_heads


# Reference BERT-base / RoBERTa-base / ViT-base shape.
REFERENCE_CONFIG = ModelConfig(
    num_layers=12, num_heads=12, d_model=768, d_ff=3072, vocab_size=30522, max_seq_len=512, num_classes=2
)


def layer_key(i: int, name: str) -> str:
    return f"layers.{i}.{name}"


@dataclass
class TransformerModel:
    """Embedding + ``num_layers`` transformer layers + linear classification head.

    ``source_layers[i]`` is the index of the full-model layer this layer was
    derived from (identity for the full model and for FFN-compressed
    sub-models, a subset for the layer-drop baseline). Adapters are keyed by
    source layer, which is how sub-model updates are routed back.
    """

    config: ModelConfig
    params: dict[str, np.ndarray]
    source_layers: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.source_layers:
            self.source_layers = tuple(range(self.config.num_layers))
        if len(self.source_layers) != self.config.num_layers:
            raise ContractError(
                f"source_layers has {len(self.source_layers)} entries for {self.config.num_layers} layers"
            )

    @property
    def num_layers(self) -> int:
        return self.config.num_layers

    def layer_d_ff(self, i: int) -> int:
        return self.params[layer_key(i, "ffn.b1")].shape[0]

    def copy(self) -> "TransformerModel":
        return TransformerModel(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            self.source_layers,
        )

    def ffn_names(self, i: int) -> tuple[str, str, str]:
        return layer_key(i, "ffn.w1"), layer_key(i, "ffn.b1"), layer_key(i, "ffn.w2")


def init_model(config: ModelConfig, rng: np.random.Generator) -> TransformerModel:
    d, dff = config.d_model, config.d_ff
    p: dict[str, np.ndarray] = {}

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(np.float32)

    p["embed.tokens"] = normal((config.vocab_size, d), 1.0)
    p["embed.positions"] = normal((config.max_seq_len, d), 1.0)
    for i in range(config.num_layers):
        for proj in PROJECTIONS:
            p[layer_key(i, f"attn.{proj}.weight")] = normal((d, d), 1.0 / math.sqrt(d))
            p[layer_key(i, f"attn.{proj}.bias")] = np.zeros(d, np.float32)
        p[layer_key(i, "ln1.gain")] = np.ones(d, np.float32)
        p[layer_key(i, "ln1.bias")] = np.zeros(d, np.float32)
        p[layer_key(i, "ffn.w1")] = normal((d, dff), 1.0 / math.sqrt(d))
        p[layer_key(i, "ffn.b1")] = np.zeros(dff, np.float32)
        p[layer_key(i, "ffn.w2")] = normal((dff, d), 1.0 / math.sqrt(dff))
        p[layer_key(i, "ffn.b2")] = np.zeros(d, np.float32)
        p[layer_key(i, "ln2.gain")] = np.ones(d, np.float32)
        p[layer_key(i, "ln2.bias")] = np.zeros(d, np.float32)
    p["head.weight"] = normal((d, config.num_classes), 1.0 / math.sqrt(d))
    p["head.bias"] = np.zeros(config.num_classes, np.float32)
    return TransformerModel(config, p)


# ---------------------------------------------------------------------------
# LoRA


@dataclass
class LoraAdapters:
    """Low-rank deltas ``scaling * A @ B`` on the q/k/v/o attention projections.

    ``tensors`` holds ``layers.{i}.{proj}.A`` (``[d_model, r]``) and
    ``layers.{i}.{proj}.B`` (``[r, d_model]``) for each adapted source layer.
    """

    rank: int
    tensors: dict[str, np.ndarray]

    @property
    def scaling(self) -> float:
        return LORA_ALPHA_PER_RANK if self.rank > 0 else 0.0

    @property
    def layers(self) -> tuple[int, ...]:
        return tuple(sorted({int(k.split(".")[1]) for k in self.tensors}))

    def pair(self, layer: int, proj: str) -> tuple[np.ndarray, np.ndarray] | None:
        a = self.tensors.get(f"layers.{layer}.{proj}.A")
        if a is None:
            return None
        return a, self.tensors[f"layers.{layer}.{proj}.B"]

    def copy(self) -> "LoraAdapters":
        return LoraAdapters(self.rank, {k: v.copy() for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in sorted(self.tensors)]).astype(np.float64)


def init_lora(
    config: ModelConfig, rank: int, rng: np.random.Generator, layers: Iterable[int] | None = None
) -> LoraAdapters:
    """A ~ N(0, 1/d_model), B = 0, so the initial delta is exactly zero."""
    layers = range(config.num_layers) if layers is None else layers
    d = config.d_model
    tensors = {}
    for i in layers:
        for proj in PROJECTIONS:
            tensors[f"layers.{i}.{proj}.A"] = (rng.standard_normal((d, rank)) / math.sqrt(d)).astype(np.float32)
            tensors[f"layers.{i}.{proj}.B"] = np.zeros((rank, d), np.float32)
    return LoraAdapters(rank, tensors)


# ---------------------------------------------------------------------------
# forward


def as_tensors(arrays: Mapping[str, np.ndarray], trainable: Iterable[str] = ()) -> dict[str, Tensor]:
    trainable = set(trainable)
    return {k: Tensor(v, requires_grad=k in trainable) for k, v in arrays.items()}


def _check_tokens(model: TransformerModel, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ContractError(f"tokens must be [batch, seq], got shape {tokens.shape}")
    if tokens.shape[1] > model.config.max_seq_len:
        raise ContractError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {model.config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= model.config.vocab_size):
        raise IndexError(f"token id out of vocabulary [0, {model.config.vocab_size})")
    return tokens


def _run(
    model: TransformerModel,
    tokens: np.ndarray,
    adapters: LoraAdapters | None,
    params: Mapping[str, Tensor] | None,
    lora: Mapping[str, Tensor] | None,
    capture: frozenset[str] = frozenset(),
) -> tuple[Tensor, dict[str, list[Tensor]]]:
    tokens = _check_tokens(model, tokens)
    cfg = model.config
    P = params if params is not None else as_tensors(model.params)
    if adapters is not None and adapters.rank > 0 and lora is None:
        lora = as_tensors(adapters.tensors)
    scaling = adapters.scaling if adapters is not None else 0.0
    B, S = tokens.shape
    h, dk = cfg.num_heads, cfg.d_k
    captured: dict[str, list[Tensor]] = {name: [] for name in capture}

    pos = T.getitem(P["embed.positions"], slice(0, S))
    x = T.add_bias(T.embedding(P["embed.tokens"], tokens), pos)

    def project(x: Tensor, i: int, src: int, proj: str) -> Tensor:
        out = T.add_bias(x @ P[layer_key(i, f"attn.{proj}.weight")], P[layer_key(i, f"attn.{proj}.bias")])
        if lora is not None and scaling and f"layers.{src}.{proj}.A" in lora:
            delta = (x @ lora[f"layers.{src}.{proj}.A"]) @ lora[f"layers.{src}.{proj}.B"]
            out = out + T.scale(delta, scaling)
        return out

    def heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (B, S, h, dk)), (0, 2, 1, 3))

    for i in range(cfg.num_layers):
        src = model.source_layers[i]
        q, k, v = (heads(project(x, i, src, p)) for p in "qkv")
        scores = T.scale(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dk))
        attn = T.softmax_rows(scores)
        if "attention" in captured:
            captured["attention"].append(attn)
        ctx = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (B, S, cfg.d_model))
        x = T.layer_norm(x + project(ctx, i, src, "o"), P[layer_key(i, "ln1.gain")], P[layer_key(i, "ln1.bias")])
        hidden = T.gelu(T.add_bias(x @ P[layer_key(i, "ffn.w1")], P[layer_key(i, "ffn.b1")]))
        if "ffn_hidden" in captured:
            captured["ffn_hidden"].append(hidden)
        ffn = T.add_bias(hidden @ P[layer_key(i, "ffn.w2")], P[layer_key(i, "ffn.b2")])
        x = T.layer_norm(x + ffn, P[layer_key(i, "ln2.gain")], P[layer_key(i, "ln2.bias")])
        if "layers" in captured:
            captured["layers"].append(x)

    cls = T.getitem(x, (slice(None), 0, slice(None)))
    logits = T.add_bias(cls @ P["head.weight"], P["head.bias"])
    return logits, captured


def forward(
    model: TransformerModel,
    tokens: np.ndarray,
    adapters: LoraAdapters | None = None,
    *,
    params: Mapping[str, Tensor] | None = None,
    lora: Mapping[str, Tensor] | None = None,
) -> Tensor:
    """Class logits ``[batch, num_classes]``.

    ``params`` / ``lora`` let a caller supply its own leaf tensors (e.g. with
    ``requires_grad``) instead of constants built from the stored arrays.
    """
    return _run(model, tokens, adapters, params, lora)[0]


def forward_with_layer_outputs(
    model: TransformerModel,
    tokens: np.ndarray,
    adapters: LoraAdapters | None = None,
    *,
    params: Mapping[str, Tensor] | None = None,
    lora: Mapping[str, Tensor] | None = None,
) -> tuple[Tensor, list[Tensor]]:
    logits, captured = _run(model, tokens, adapters, params, lora, frozenset({"layers"}))
    return logits, captured["layers"]


def ffn_hidden_activations(
    model: TransformerModel, tokens: np.ndarray, adapters: LoraAdapters | None = None
) -> list[np.ndarray]:
    """Post-GELU FFN activations per layer, each ``[batch, seq, d_ff_i]``."""
    _, captured = _run(model, tokens, adapters, None, None, frozenset({"ffn_hidden"}))
    return [t.data for t in captured["ffn_hidden"]]


def attention_weights(
    model: TransformerModel, tokens: np.ndarray, adapters: LoraAdapters | None = None
) -> list[np.ndarray]:
    _, captured = _run(model, tokens, adapters, None, None, frozenset({"attention"}))
    return [t.data for t in captured["attention"]]


def predict(model: TransformerModel, tokens: np.ndarray, adapters=None, batch_size: int = 256) -> np.ndarray:
    tokens = np.asarray(tokens)
    out = [forward(model, tokens[s : s + batch_size], adapters).data.argmax(axis=1) for s in range(0, len(tokens), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, np.int64)


def accuracy(model: TransformerModel, tokens: np.ndarray, labels: np.ndarray, adapters=None) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return float("nan")
    return float((predict(model, tokens, adapters) == labels).mean())


# ---------------------------------------------------------------------------
# merging and counting


def merge_lora(model: TransformerModel, adapters: LoraAdapters) -> TransformerModel:
    """Fold ``scaling * A @ B`` into each adapted projection weight.

    Not idempotent: merging the same adapters twice applies the delta twice.
    """
    merged = model.copy()
    if adapters.rank == 0:
        return merged
    for i, src in enumerate(model.source_layers):
        for proj in PROJECTIONS:
            pair = adapters.pair(src, proj)
            if pair is None:
                continue
            a, b = pair
            name = layer_key(i, f"attn.{proj}.weight")
            w = merged.params[name]
            if a.shape[0] != w.shape[0] or b.shape[1] != w.shape[1] or a.shape[1] != b.shape[0]:
                raise ContractError(f"adapter {src}.{proj} shapes {a.shape}/{b.shape} do not fit {name} {w.shape}")
            delta = adapters.scaling * (a.astype(np.float64) @ b.astype(np.float64))
            merged.params[name] = (w.astype(np.float64) + delta).astype(w.dtype)
    return merged


def count_parameters(model_or_config, layer_d_ff: Iterable[int] | None = None) -> dict[str, int]:
    """Exact parameter counts.

    ``transformer_params`` covers MHA, FFN and LayerNorm of all layers (with
    biases); ``transformer_params_no_bias`` drops projection/FFN biases but
    keeps LayerNorm affine parameters.
    """
    if isinstance(model_or_config, TransformerModel):
        cfg = model_or_config.config
        dffs = [model_or_config.layer_d_ff(i) for i in range(cfg.num_layers)]
    else:
        cfg = model_or_config
        dffs = list(layer_d_ff) if layer_d_ff is not None else [cfg.d_ff] * cfg.num_layers
    if len(dffs) != cfg.num_layers:
        raise ContractError("layer_d_ff length must equal num_layers")
    d = cfg.d_model
    mha_w, mha_b = 4 * d * d, 4 * d
    ln = 2 * 2 * d
    ffn_w = sum(2 * d * f for f in dffs)
    ffn_b = sum(f + d for f in dffs)
    L = cfg.num_layers
    return {
        "transformer_params": L * (mha_w + mha_b + ln) + ffn_w + ffn_b,
        "transformer_params_no_bias": L * (mha_w + ln) + ffn_w,
        "mha_params": L * (mha_w + mha_b),
        "ffn_params": ffn_w + ffn_b,
        "embedding_params": (cfg.vocab_size + cfg.max_seq_len) * d,
        "head_params": d * cfg.num_classes + cfg.num_classes,
    }
