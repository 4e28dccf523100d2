"""Aligning a sub-model to its full model by distillation.

Two flavours share one loss (layer outputs + FFN weight-product regulariser):

* before federation, every FFN parameter of the sub-model is trained;
* during federation, only neurons picked by their APoZ (average percentage of
  zero activations) on client data move; the rest stay bitwise fixed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .optim import sgd_step
from .transformer import ContractError, LoraAdapters, TransformerModel, as_tensors, ffn_hidden_activations, forward_with_layer_outputs


@dataclass(frozen=True)
class DistillConfig:
    mu: float = 0.1
    epochs: int = 10
    lr: float = 0.005
    batch_size: int = 32
    align_steps: int = 10
    zero_threshold: float = 1e-3

    def __post_init__(self):
        if self.mu < 0:
            raise ContractError("mu must be >= 0")
        if self.epochs < 0 or self.align_steps < 0:
            raise ContractError("epochs and align_steps must be >= 0")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


def _ffn_param_names(model: TransformerModel) -> list[str]:
    return [n for i in range(model.num_layers) for n in model.ffn_names(i)]


def layer_kd_loss(
    fm: TransformerModel,
    subfm: TransformerModel,
    tokens: np.ndarray,
    mu: float,
    *,
    adapters: LoraAdapters | None = None,
    sub_params: dict[str, T.Tensor] | None = None,
    teacher_outputs: list[np.ndarray] | None = None,
) -> T.Tensor:
    """Mean over layers and samples of ``||O - O'||^2`` plus ``mu * ||W1 W2 - W1' W2'||^2``.

    The full model is a frozen teacher; gradients reach only ``sub_params``.
    ``adapters`` (if given) run on the student and are expected to be merged
    into the teacher already.
    """
    if fm.num_layers != subfm.num_layers:
        raise ContractError(f"layer count mismatch: {fm.num_layers} vs {subfm.num_layers}")
    if fm.num_layers == 0:
        return T.Tensor(0.0)
    tokens = np.atleast_2d(tokens)
    M = tokens.shape[0]
    if teacher_outputs is None:
        _, outs = forward_with_layer_outputs(fm, tokens)
        teacher_outputs = [o.data for o in outs]
    P = sub_params if sub_params is not None else as_tensors(subfm.params)
    _, student = forward_with_layer_outputs(subfm, tokens, adapters, params=P)
    total = None
    for i in range(fm.num_layers):
        term = T.sum_squares(student[i] - T.Tensor(teacher_outputs[i]))
        if mu:
            w1n, _, w2n = subfm.ffn_names(i)
            # same arithmetic as the student side, so identical weights give exactly zero
            target = T.matmul(T.Tensor(fm.params[w1n]), T.Tensor(fm.params[w2n]))
            gap = target - P[w1n] @ P[w2n]
            term = term + T.scale(T.sum_squares(gap), mu)
        total = term if total is None else total + term
    return T.scale(total, 1.0 / (fm.num_layers * M))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s : s + batch_size]


def _descend(
    teacher: TransformerModel,
    student: TransformerModel,
    corpus: np.ndarray,
    cfg: DistillConfig,
    steps: int | None,
    rng: np.random.Generator,
    adapters: LoraAdapters | None = None,
    masks: dict[str, np.ndarray] | None = None,
) -> list[float]:
    names = _ffn_param_names(student)
    history: list[float] = []

    def batch_stream():
        while True:
            yield from _batches(len(corpus), cfg.batch_size, rng)

    if steps is None:
        per_epoch = -(-len(corpus) // cfg.batch_size)
        steps = cfg.epochs * per_epoch
    stream = batch_stream()
    for _ in range(steps):
        idx = next(stream)
        P = as_tensors(student.params, names)
        loss = layer_kd_loss(teacher, student, corpus[idx], cfg.mu, adapters=adapters, sub_params=P)
        T.backward(loss)
        history.append(loss.item())
        sgd_step(student.params, {n: P[n].grad for n in names}, cfg.lr, masks)
    return history


def pre_fl_distill(
    fm: TransformerModel, subfm: TransformerModel, corpus: np.ndarray, cfg: DistillConfig, seed: int = 0
) -> tuple[TransformerModel, list[float]]:
    """Layer-level alignment of all sub-model FFN parameters; returns (aligned copy, loss history)."""
    corpus = np.asarray(corpus)
    if len(corpus) == 0:
        raise ContractError("distillation corpus is empty")
    student = subfm.copy()
    if cfg.epochs == 0:
        return student, []
    history = _descend(fm, student, corpus, cfg, None, np.random.default_rng(seed))
    return student, history


# ---------------------------------------------------------------------------
# APoZ


@dataclass
class ApozReport:
    values: list[np.ndarray]  # per layer, per neuron, in [0, 1]
    positions: int  # number of (sample, token) positions measured
    client_id: int | None = None

    def to_json(self) -> str:
        return json.dumps(
            {"client_id": self.client_id, "positions": self.positions, "layers": [v.astype(float).tolist() for v in self.values]}
        )

    @classmethod
    def from_json(cls, text: str) -> "ApozReport":
        doc = json.loads(text)
        return cls([np.asarray(v, np.float64) for v in doc["layers"]], int(doc["positions"]), doc["client_id"])


def apoz(activations: list[np.ndarray], zero_threshold: float = 1e-3) -> ApozReport:
    """Fraction of (sample, token) positions where each neuron's activation is <= threshold."""
    values, positions = [], 0
    for act in activations:
        act = np.asarray(act)
        flat = act.reshape(-1, act.shape[-1])
        positions = flat.shape[0]
        values.append((flat <= zero_threshold).mean(axis=0) if positions else np.zeros(act.shape[-1]))
    return ApozReport(values, positions)


def client_apoz(subfm: TransformerModel, tokens: np.ndarray, adapters=None, zero_threshold: float = 1e-3, batch_size: int = 256) -> ApozReport:
    tokens = np.asarray(tokens)
    counts = None
    for s in range(0, len(tokens), batch_size):
        acts = ffn_hidden_activations(subfm, tokens[s : s + batch_size], adapters)
        batch = [(a.reshape(-1, a.shape[-1]) <= zero_threshold).sum(axis=0) for a in acts]
        counts = batch if counts is None else [c + b for c, b in zip(counts, batch)]
    positions = tokens.shape[0] * tokens.shape[1]
    return ApozReport([c / positions for c in counts], positions)


def aggregate_apoz(reports: list[tuple[ApozReport, int]]) -> ApozReport:
    """Weighted mean of client reports; weights are the supplied position counts."""
    if not reports:
        raise ContractError("no APoZ reports to aggregate")
    total = sum(n for _, n in reports)
    if total <= 0:
        raise ContractError("APoZ reports carry no positions")
    shapes = [tuple(v.shape for v in r.values) for r, _ in reports]
    if len(set(shapes)) != 1:
        raise ContractError("APoZ reports disagree on layer shapes")
    values = [
        sum(r.values[i].astype(np.float64) * (n / total) for r, n in reports) for i in range(len(reports[0][0].values))
    ]
    return ApozReport([np.clip(v, 0.0, 1.0) for v in values], total)


@dataclass
class NeuronMask:
    layers: list[np.ndarray]  # boolean per neuron
    proportion: float

    def selected(self, layer: int) -> np.ndarray:
        return np.flatnonzero(self.layers[layer])


def select_update_neurons(report: ApozReport, p: float) -> NeuronMask:
    """Per layer, the ``round(p * d_ff')`` neurons with the highest APoZ (ties to lower index)."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"p must lie in [0, 1], got {p}")
    masks = []
    for v in report.values:
        k = int(round(p * len(v)))
        order = np.lexsort((np.arange(len(v)), -v))
        m = np.zeros(len(v), bool)
        m[order[:k]] = True
        masks.append(m)
    return NeuronMask(masks, p)


def _param_masks(subfm: TransformerModel, mask: NeuronMask) -> dict[str, np.ndarray]:
    if len(mask.layers) != subfm.num_layers:
        raise ContractError(f"mask has {len(mask.layers)} layers, sub-model {subfm.num_layers}")
    out = {}
    for i in range(subfm.num_layers):
        m = mask.layers[i]
        if len(m) != subfm.layer_d_ff(i):
            raise ContractError(f"mask layer {i} has {len(m)} neurons, sub-model {subfm.layer_d_ff(i)}")
        w1n, b1n, w2n = subfm.ffn_names(i)
        f = m.astype(subfm.params[b1n].dtype)
        out[w1n] = np.broadcast_to(f[None, :], subfm.params[w1n].shape)
        out[b1n] = f
        out[w2n] = np.broadcast_to(f[:, None], subfm.params[w2n].shape)
    return out


def in_fl_align(
    fm_current: TransformerModel,
    subfm: TransformerModel,
    mask: NeuronMask,
    corpus: np.ndarray,
    cfg: DistillConfig,
    *,
    adapters: LoraAdapters | None = None,
    seed: int = 0,
) -> tuple[TransformerModel, list[float]]:
    """Neuron-level alignment: ``cfg.align_steps`` masked descent steps on the layer loss.

    ``fm_current`` is the teacher with the latest adapters already merged;
    ``adapters`` are applied on the student side.
    """
    masks = _param_masks(subfm, mask)
    student = subfm.copy()
    if cfg.align_steps == 0 or not any(m.any() for m in mask.layers):
        return student, []
    history = _descend(fm_current, student, np.asarray(corpus), cfg, cfg.align_steps, np.random.default_rng(seed), adapters, masks)
    return student, history
