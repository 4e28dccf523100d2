"""Proxy sub-model construction, plug-in synchronisation and cost accounting.

The sub-model keeps every layer of the full model but only the most salient
FFN neurons of each layer; a neuron's saliency is the L2 norm of all its
connecting weights (its ``w1`` column and ``w2`` row together).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
from scipy.special import erf

from .transformer import (
    PROJECTIONS,
    ContractError,
    LoraAdapters,
    ModelConfig,
    TransformerModel,
    layer_key,
)

THETA1, THETA2 = "theta1", "theta2"


@dataclass(frozen=True)
class CompressionSpec:
    ratio: float = 0.75
    layers: tuple[int, ...] | None = None  # None = every layer

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ContractError(f"compression ratio must lie in [0, 1), got {self.ratio}")

    def kept(self, d_ff: int) -> int:
        return d_ff - math.floor(self.ratio * d_ff)

    def applies_to(self, layer: int) -> bool:
        return self.layers is None or layer in self.layers


@dataclass
class SaliencyReport:
    scores: list[np.ndarray]
    kept: list[np.ndarray]

    def to_json(self) -> str:
        return json.dumps(
            {
                "layers": [
                    {"layer": i, "scores": s.astype(float).tolist(), "kept": k.astype(int).tolist()}
                    for i, (s, k) in enumerate(zip(self.scores, self.kept))
                ]
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SaliencyReport":
        doc = json.loads(text)["layers"]
        return cls([np.asarray(d["scores"]) for d in doc], [np.asarray(d["kept"], np.int64) for d in doc])


@dataclass
class PartitionTheta:
    """Label of every full-model parameter: retained (theta1) or compressed (theta2)."""

    labels: dict[str, str]

    @property
    def theta1(self) -> list[str]:
        return sorted(k for k, v in self.labels.items() if v == THETA1)

    @property
    def theta2(self) -> list[str]:
        return sorted(k for k, v in self.labels.items() if v == THETA2)


def partition_theta(model: TransformerModel, spec: CompressionSpec | None = None) -> PartitionTheta:
    compressed = set()
    for i in range(model.num_layers):
        if spec is None or spec.applies_to(i):
            compressed.update(model.ffn_names(i))
    return PartitionTheta({k: THETA2 if k in compressed else THETA1 for k in model.params})


def neuron_saliency(w1: np.ndarray, w2: np.ndarray) -> np.ndarray:
    """``sqrt(sum_j u_kj^2 + w_kj^2)`` for every neuron ``k``."""
    w1 = np.asarray(w1, np.float64)
    w2 = np.asarray(w2, np.float64)
    if w1.shape[1] != w2.shape[0]:
        raise ContractError(f"w1 {w1.shape} and w2 {w2.shape} disagree on d_ff")
    return np.sqrt((w1 * w1).sum(axis=0) + (w2 * w2).sum(axis=1))


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores, ties to the lower index, sorted ascending."""
    order = np.lexsort((np.arange(len(scores)), -np.asarray(scores)))
    return np.sort(order[:k])


def compress_model(
    fm: TransformerModel, spec: CompressionSpec
) -> tuple[TransformerModel, SaliencyReport, PartitionTheta]:
    """Slice the low-saliency neurons out of each selected FFN.

    Every other tensor is copied verbatim, so the sub-model shares the full
    model's theta1 values exactly.
    """
    if spec.layers is not None and any(not 0 <= i < fm.num_layers for i in spec.layers):
        raise ContractError(f"compression layers {spec.layers} outside [0, {fm.num_layers})")
    sub = fm.copy()
    scores, kept_sets = [], []
    for i in range(fm.num_layers):
        w1n, b1n, w2n = fm.ffn_names(i)
        w1, b1, w2 = fm.params[w1n], fm.params[b1n], fm.params[w2n]
        s = neuron_saliency(w1, w2)
        d_ff = len(b1)
        k = spec.kept(d_ff) if spec.applies_to(i) else d_ff
        if k < 1:
            raise ContractError(f"ratio {spec.ratio} leaves no neurons in layer {i}")
        kept = top_k_indices(s, k)
        scores.append(s)
        kept_sets.append(kept)
        sub.params[w1n] = np.ascontiguousarray(w1[:, kept])
        sub.params[b1n] = b1[kept].copy()
        sub.params[w2n] = np.ascontiguousarray(w2[kept, :])
    return sub, SaliencyReport(scores, kept_sets), partition_theta(fm, spec)


def ffn_output(x: np.ndarray, w1, b1, w2, b2) -> np.ndarray:
    pre = x @ w1 + b1
    return (0.5 * pre * (1.0 + erf(pre / math.sqrt(2.0)))) @ w2 + b2


def prune_zero_output_neuron_check(w1, b1, w2, b2, x: np.ndarray, k: int, atol: float = 1e-6) -> bool:
    """True iff dropping neuron ``k`` leaves the FFN output unchanged on ``x``."""
    x = np.asarray(x, np.float64)
    full = ffn_output(x, w1, b1, w2, b2)
    keep = np.delete(np.arange(len(b1)), k)
    reduced = ffn_output(x, w1[:, keep], b1[keep], w2[keep, :], b2)
    return bool(np.max(np.abs(full - reduced)) <= atol)


def plug_in_sync(
    fm: TransformerModel,
    subfm_trained: TransformerModel,
    adapters: LoraAdapters | None,
    partition: PartitionTheta,
) -> TransformerModel:
    """Apply the sub-model's theta1 updates (merged LoRA deltas) to the full model.

    Theta2 tensors are returned as the very same arrays, so they are bitwise
    untouched. Adapters are keyed by full-model layer index.
    """
    if set(partition.labels) != set(fm.params):
        raise ContractError("partition does not cover exactly the full model's parameters")
    for name in partition.theta2:
        if not name.startswith("layers.") or ".ffn." not in name:
            raise ContractError(f"theta2 tensor {name} is not an FFN tensor")
    for i, src in enumerate(subfm_trained.source_layers):
        if not 0 <= src < fm.num_layers:
            raise ContractError(f"sub-model layer {i} maps to missing full layer {src}")
    out = TransformerModel(fm.config, dict(fm.params), fm.source_layers)
    if adapters is None or adapters.rank == 0:
        return out
    for src in adapters.layers:
        if not 0 <= src < fm.num_layers:
            raise ContractError(f"adapter layer {src} outside full model")
        for proj in PROJECTIONS:
            pair = adapters.pair(src, proj)
            if pair is None:
                continue
            name = layer_key(src, f"attn.{proj}.weight")
            if partition.labels[name] != THETA1:
                raise ContractError(f"{name} must be theta1 to receive adapter updates")
            a, b = pair
            w = fm.params[name]
            if a.shape != (w.shape[0], adapters.rank) or b.shape != (adapters.rank, w.shape[1]):
                raise ContractError(f"adapter {src}.{proj} does not fit {name}")
            delta = adapters.scaling * (a.astype(np.float64) @ b.astype(np.float64))
            out.params[name] = (w.astype(np.float64) + delta).astype(w.dtype)
    return out


def layer_drop_indices(num_layers: int, n_bottom: int, n_top: int, n_emulator: int) -> list[int]:
    middle = list(range(n_bottom, num_layers - n_top))
    m, e = len(middle), n_emulator
    if min(n_bottom, n_top, n_emulator) < 0 or n_bottom + n_top + n_emulator > num_layers:
        raise ContractError(f"invalid layer split {n_bottom}+{n_emulator}+{n_top} for {num_layers} layers")
    if e > m:
        raise ContractError("emulator cannot have more layers than the middle block")
    if e == 0:
        picks = []
    elif e == 1:
        picks = [0]
    else:
        # round half down, exactly: 8 middle layers -> 3 gives offsets 0, 3, 7
        picks = [math.ceil(Fraction(j * (m - 1), e - 1) - Fraction(1, 2)) for j in range(e)]
    return list(range(n_bottom)) + [middle[j] for j in picks] + list(range(num_layers - n_top, num_layers))


def layer_drop_compress(fm: TransformerModel, n_bottom: int, n_top: int, n_emulator: int) -> TransformerModel:
    """Offsite-tuning style baseline: keep bottom/top layers, subsample the middle."""
    keep = layer_drop_indices(fm.num_layers, n_bottom, n_top, n_emulator)
    params = {k: v.copy() for k, v in fm.params.items() if not k.startswith("layers.")}
    for new, old in enumerate(keep):
        prefix = f"layers.{old}."
        for k, v in fm.params.items():
            if k.startswith(prefix):
                params[f"layers.{new}.{k[len(prefix):]}"] = v.copy()
    cfg = ModelConfig(**{**asdict(fm.config), "num_layers": len(keep)})
    return TransformerModel(cfg, params, tuple(fm.source_layers[i] for i in keep))


# ---------------------------------------------------------------------------
# cost analysis


@dataclass
class CostReport:
    symbols: dict
    compute: dict = field(default_factory=dict)
    communication: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def cost_report(
    config: ModelConfig,
    spec: CompressionSpec,
    *,
    lora_rank: int = 8,
    align_interval: int = 10,
    neuron_proportion: float = 0.5,
    c_f: int = 1,
    c_b: int = 2,
) -> CostReport:
    """Evaluate the per-client compute and per-round communication complexity terms.

    ``layer_matmul_ratio`` is the sub/full ratio of per-layer matmul cost
    ``(4 d^2 + 2 d d_ff') / (4 d^2 + 2 d d_ff)``; it is 1/2 when
    ``d_ff = 4 d`` and ``d_ff' = d``.
    """
    V, S, L, d, dff = config.vocab_size, config.max_seq_len, config.num_layers, config.d_model, config.d_ff
    layers = range(L) if spec.layers is None else spec.layers
    n_comp = len(set(layers))
    dff_sub = spec.kept(dff)
    r, t, q = lora_rank, align_interval, neuron_proportion
    if t < 1:
        raise ContractError("align_interval must be >= 1")

    def layer_cost(f: int) -> int:
        # MHA projections + attention scores + FFN + add&norm
        return 4 * S * d * d + S * S * d + 2 * S * d * f + S * d

    embed = d * (V + S)
    full_layer = layer_cost(dff)
    sub_layer = layer_cost(dff_sub)
    full_total = embed + (c_f + c_b) * L * full_layer
    sub_total = embed + (c_f + c_b) * ((L - n_comp) * full_layer + n_comp * sub_layer)
    ratio = Fraction(4 * d * d + 2 * d * dff_sub, 4 * d * d + 2 * d * dff)

    full_space = embed + L * (4 * d * d + 2 * d * dff) + 2 * L * d
    sub_space = embed + (L - n_comp) * (4 * d * d + 2 * d * dff) + n_comp * (4 * d * d + 2 * d * dff_sub) + 2 * L * d
    lora_comm = 8 * L * r * d
    align_comm = (2.0 / t) * q * L * d * dff_sub

    return CostReport(
        symbols={"V": V, "S": S, "L": L, "d_model": d, "d_ff": dff, "d_ff_sub": dff_sub, "c_f": c_f, "c_b": c_b,
                 "r": r, "t": t, "q": q, "compressed_layers": n_comp},
        compute={
            "embedding": embed,
            "full_layer": full_layer,
            "sub_layer": sub_layer,
            "full_total": full_total,
            "sub_total": sub_total,
            "total_ratio": sub_total / full_total,
            "layer_matmul_ratio": float(ratio),
            "layer_matmul_ratio_exact": f"{ratio.numerator}/{ratio.denominator}",
            "ffn_ratio": dff_sub / dff,
        },
        communication={
            "full_model": full_space,
            "sub_model": sub_space,
            "peft_lora": lora_comm,
            "peft_alignment": align_comm,
            "peft_total": lora_comm + align_comm,
        },
        params={"full_ffn_per_layer": 2 * d * dff, "sub_ffn_per_layer": 2 * d * dff_sub, "mha_per_layer": 4 * d * d},
    )

