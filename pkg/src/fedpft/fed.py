"""Federated fine-tuning of a proxy sub-model with periodic re-alignment.

One round: sample clients, each trains the global LoRA adapters on its own
data against the (frozen) sub-model, the server averages the adapters by
dataset size and, on alignment rounds, plugs them into the full model and
re-distills the APoZ-selected sub-model neurons against it.

Every random draw is derived from ``(seed, round, client)`` so a run does not
depend on how clients are scheduled across threads.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .checkpoint import adapter_message, parse_adapter_message
from .data import SyntheticDataset
from .distill import DistillConfig, aggregate_apoz, client_apoz, in_fl_align, pre_fl_distill, select_update_neurons
from .optim import AdamW
from .subfm import PartitionTheta, layer_drop_compress, plug_in_sync
from .transformer import ContractError, LoraAdapters, TransformerModel, accuracy, as_tensors, forward, init_lora

log = logging.getLogger(__name__)

MODES = ("FedPFT", "FedPFT_N", "FedPFT_B", "FedPFT_D", "LayerDrop", "FullModel")
PRE_FL_MODES = ("FedPFT", "FedPFT_B")
IN_FL_MODES = ("FedPFT", "FedPFT_D")

METRICS_COLUMNS = (
    "round",
    "mode",
    "lr",
    "mean_local_loss",
    "eval_acc",
    "delta_norm_sq",
    "grad_norm_sq",
    "cond11_main",
    "cond11_appendix",
    "aligned_flag",
)


@dataclass(frozen=True)
class FederationConfig:
    num_clients: int = 20
    rounds: int = 60
    clients_per_round: int = 5
    dirichlet_alpha: float = 1.0
    align_interval: int = 10
    neuron_proportion: float = 0.5
    local_epochs: int = 1
    base_lr: float = 3e-3
    batch_size: int = 16
    lora_rank: int = 4
    weight_decay: float = 0.01
    mode: str = "FedPFT"
    workers: int = 1
    seed: int = 0
    drop_bottom: int = 1
    drop_top: int = 1
    drop_emulator: int = 1

    def __post_init__(self):
        if self.num_clients < 1:
            raise ContractError("num_clients must be >= 1")
        if not 1 <= self.clients_per_round <= self.num_clients:
            raise ContractError("clients_per_round must lie in [1, num_clients]")
        if self.align_interval < 1:
            raise ContractError("align_interval must be >= 1")
        if not 0.0 <= self.neuron_proportion <= 1.0:
            raise ContractError("neuron_proportion must lie in [0, 1]")
        if self.dirichlet_alpha <= 0:
            raise ContractError("dirichlet_alpha must be > 0")
        if self.rounds < 0 or self.local_epochs < 0 or self.lora_rank < 0:
            raise ContractError("rounds, local_epochs and lora_rank must be >= 0")
        if self.batch_size < 1 or self.workers < 1:
            raise ContractError("batch_size and workers must be >= 1")
        if min(self.drop_bottom, self.drop_top, self.drop_emulator) < 0:
            raise ContractError("layer-drop sizes must be >= 0")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass
class ClientPartition:
    indices: list[np.ndarray]
    label_histograms: list[np.ndarray]

    @property
    def sizes(self) -> list[int]:
        return [len(ix) for ix in self.indices]


@dataclass
class RoundRecord:
    round: int
    mode: str
    lr: float
    sampled: list[int]
    local_losses: list[float]
    eval_acc: float
    delta_norm_sq: float
    grad_norm_sq: float
    grad_sub_norm_sq: float
    cond11_main: bool
    cond11_appendix: bool
    aligned: bool

    @property
    def mean_local_loss(self) -> float:
        return float(np.mean(self.local_losses)) if self.local_losses else float("nan")

    def csv_row(self) -> list[str]:
        def g(x: float) -> str:
            return f"{x:.9g}"

        return [
            str(self.round),
            self.mode,
            g(self.lr),
            g(self.mean_local_loss),
            g(self.eval_acc),
            g(self.delta_norm_sq),
            g(self.grad_norm_sq),
            str(int(self.cond11_main)),
            str(int(self.cond11_appendix)),
            str(int(self.aligned)),
        ]


# ---------------------------------------------------------------------------
# partitioning and scheduling


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    raw = weights * total
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    if short > 0:
        order = np.lexsort((np.arange(len(raw)), -(raw - counts)))
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(labels: Sequence[int], num_clients: int, alpha: float, seed: int) -> ClientPartition:
    """Label-skewed split: per class, client shares ~ Dir(alpha)."""
    labels = np.asarray(labels, dtype=np.int64)
    if num_clients < 1 or alpha <= 0:
        raise ContractError("need num_clients >= 1 and alpha > 0")
    if len(labels) < num_clients:
        raise ContractError(f"{len(labels)} samples cannot fill {num_clients} clients")
    rng = np.random.default_rng(seed)
    classes = np.unique(labels)
    buckets: list[list[int]] = [[] for _ in range(num_clients)]
    for c in classes:
        members = np.flatnonzero(labels == c)
        members = members[rng.permutation(len(members))]
        share = rng.dirichlet(np.full(num_clients, alpha))
        counts = _largest_remainder(len(members), share)
        start = 0
        for k, n in enumerate(counts):
            buckets[k].extend(members[start : start + n].tolist())
            start += n
    for k in range(num_clients):
        if not buckets[k]:
            donor = max(range(num_clients), key=lambda j: (len(buckets[j]), -j))
            buckets[k].append(buckets[donor].pop())
    indices = [np.sort(np.asarray(b, dtype=np.int64)) for b in buckets]
    n_classes = int(labels.max()) + 1 if len(labels) else 0
    hist = [np.bincount(labels[ix], minlength=n_classes) for ix in indices]
    return ClientPartition(indices, hist)


def client_rng(seed: int, round_index: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, round_index, client_id])


def sample_clients(round_index: int, cfg: FederationConfig, seed: int | None = None) -> list[int]:
    seed = cfg.seed if seed is None else seed
    if cfg.clients_per_round == cfg.num_clients:
        return list(range(cfg.num_clients))
    rng = np.random.default_rng([seed, round_index, 2**31 - 1])
    return sorted(int(c) for c in rng.choice(cfg.num_clients, size=cfg.clients_per_round, replace=False))


def lr_schedule(round_index: int, cfg: FederationConfig) -> float:
    return cfg.base_lr * (1.0 - round_index / cfg.rounds)


# ---------------------------------------------------------------------------
# client and server steps


def local_finetune(
    subfm: TransformerModel,
    adapters: LoraAdapters,
    tokens: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    *,
    batch_size: int = 16,
    weight_decay: float = 0.01,
    rng: np.random.Generator | None = None,
) -> tuple[LoraAdapters, list[float]]:
    """AdamW on the adapter tensors only; the sub-model body stays frozen."""
    if len(labels) == 0:
        raise ContractError("client has no data")
    rng = rng if rng is not None else np.random.default_rng(0)
    local = adapters.copy()
    if adapters.rank == 0:
        return local, []
    opt = AdamW(local.tensors, lr=lr, weight_decay=weight_decay)
    body = as_tensors(subfm.params)
    losses: list[float] = []
    for _ in range(epochs):
        order = rng.permutation(len(labels))
        for s in range(0, len(order), batch_size):
            idx = order[s : s + batch_size]
            lora = as_tensors(local.tensors, local.tensors.keys())
            loss = T.cross_entropy(forward(subfm, tokens[idx], local, params=body, lora=lora), labels[idx])
            T.backward(loss)
            losses.append(loss.item())
            opt.step({k: lora[k].grad for k in lora})
    return local, losses


def fedavg_aggregate(updates: Sequence[tuple[LoraAdapters, int]]) -> LoraAdapters:
    """Dataset-size weighted mean of adapter tensors."""
    if not updates:
        raise ContractError("nothing to aggregate")
    total = sum(n for _, n in updates)
    if total <= 0:
        raise ContractError("aggregate weight is zero")
    keys = sorted(updates[0][0].tensors)
    for ad, _ in updates:
        if sorted(ad.tensors) != keys or any(ad.tensors[k].shape != updates[0][0].tensors[k].shape for k in keys):
            raise ContractError("adapter shapes disagree")
    # canonical order makes the float sum independent of input order
    ordered = sorted(updates, key=lambda u: (u[1], b"".join(u[0].tensors[k].tobytes() for k in keys)))
    out = {}
    for k in keys:
        acc = np.zeros(ordered[0][0].tensors[k].shape, np.float64)
        for ad, n in ordered:
            acc += ad.tensors[k].astype(np.float64) * (n / total)
        out[k] = acc.astype(np.float32)
    return LoraAdapters(updates[0][0].rank, out)


def adapter_gradient(model: TransformerModel, adapters: LoraAdapters, tokens, labels) -> np.ndarray:
    lora = as_tensors(adapters.tensors, adapters.tensors.keys())
    loss = T.cross_entropy(forward(model, tokens, adapters, lora=lora), labels)
    T.backward(loss)
    return np.concatenate([lora[k].grad.ravel() for k in sorted(lora)]).astype(np.float64)


@dataclass
class ProbeResult:
    delta_norm_sq: float
    grad_norm_sq: float
    grad_sub_norm_sq: float
    cond11_main: bool
    cond11_appendix: bool
    delta: np.ndarray = field(repr=False)


def gap_conditions(delta: np.ndarray, grad_full: np.ndarray) -> tuple[bool, bool]:
    """``(||d||^2 < ||g||^2 / 2, ||d||^2 < ||g + d||^2 / 2)`` for gap ``d`` and full-model gradient ``g``."""
    d2 = float(delta @ delta)
    gp = grad_full + delta
    return d2 < 0.5 * float(grad_full @ grad_full), d2 < 0.5 * float(gp @ gp)


def theorem1_probe(fm: TransformerModel, subfm: TransformerModel, adapters: LoraAdapters, tokens, labels) -> ProbeResult:
    """Gradient gap on the shared adapter parameters between sub-model and full model."""
    if adapters.rank == 0:
        return ProbeResult(0.0, 0.0, 0.0, False, False, np.zeros(0))
    g_full = adapter_gradient(fm, adapters, tokens, labels)
    g_sub = adapter_gradient(subfm, adapters, tokens, labels)
    delta = g_sub - g_full
    main, appendix = gap_conditions(delta, g_full)
    return ProbeResult(float(delta @ delta), float(g_full @ g_full), float(g_sub @ g_sub), main, appendix, delta)


@dataclass
class GapTracker:
    """Keeps per-round gaps and iterates for the running inner-product condition."""

    deltas: list[np.ndarray] = field(default_factory=list)
    iterates: list[np.ndarray] = field(default_factory=list)

    def add(self, delta: np.ndarray, x: np.ndarray) -> None:
        self.deltas.append(delta)
        self.iterates.append(x)

    def inner_product_sum(self, x_star: np.ndarray) -> float:
        return float(sum(d @ (x - x_star) for d, x in zip(self.deltas, self.iterates)))

    def gap_sum(self) -> float:
        return float(sum(d @ d for d in self.deltas))


# ---------------------------------------------------------------------------
# round loop


@dataclass
class FederatedData:
    train: SyntheticDataset
    partition: ClientPartition
    test: SyntheticDataset
    distill_corpus: np.ndarray
    probe: SyntheticDataset


@dataclass
class FederationResult:
    fm: TransformerModel
    subfm: TransformerModel
    adapters: LoraAdapters
    records: list[RoundRecord]
    subfm_initial: TransformerModel
    eq12_inner_sum: float = 0.0
    eq12_gap_sum: float = 0.0


def initial_subfm(
    mode: str,
    fm: TransformerModel,
    subfm: TransformerModel,
    corpus: np.ndarray,
    dcfg: DistillConfig,
    seed: int,
    cfg_drop: tuple[int, int, int] = (1, 1, 1),
) -> TransformerModel:
    """The sub-model clients receive at round 0 (pre-federation alignment where the mode asks for it)."""
    if mode == "FullModel":
        return fm.copy()
    if mode == "LayerDrop":
        return layer_drop_compress(fm, cfg_drop[0], cfg_drop[1], cfg_drop[2])
    if mode in PRE_FL_MODES:
        return pre_fl_distill(fm, subfm, corpus, dcfg, seed=seed)[0]
    return subfm.copy()


def run_federation(
    fm: TransformerModel,
    subfm: TransformerModel,
    data: FederatedData,
    cfg: FederationConfig,
    dcfg: DistillConfig,
    partition: PartitionTheta,
    *,
    aligned_subfm: TransformerModel | None = None,
) -> FederationResult:
    """Full federated pipeline for ``cfg.mode``.

    ``subfm`` is the raw FFN-compressed model (ignored by the LayerDrop and
    FullModel modes, which derive their own); pass ``aligned_subfm`` to reuse
    an already pre-aligned copy.
    """
    if aligned_subfm is not None and cfg.mode in PRE_FL_MODES:
        sub = aligned_subfm.copy()
    else:
        sub = initial_subfm(
            cfg.mode, fm, subfm, data.distill_corpus, dcfg, cfg.seed, (cfg.drop_bottom, cfg.drop_top, cfg.drop_emulator)
        )
    start = sub.copy()
    if len(data.partition.indices) != cfg.num_clients:
        raise ContractError("partition size does not match num_clients")
    L = fm.num_layers
    if cfg.mode == "LayerDrop":
        adapter_layers = list(range(cfg.drop_bottom)) + list(range(L - cfg.drop_top, L))
    else:
        adapter_layers = list(range(L))
    adapters = init_lora(fm.config, cfg.lora_rank, np.random.default_rng([cfg.seed, 7]), adapter_layers)
    records: list[RoundRecord] = []
    tracker = GapTracker()
    train = data.train

    def client_job(round_index: int, cid: int, snapshot: TransformerModel, global_ad: LoraAdapters, lr: float):
        ix = data.partition.indices[cid]
        updated, losses = local_finetune(
            snapshot,
            global_ad,
            train.tokens[ix],
            train.labels[ix],
            cfg.local_epochs,
            lr,
            batch_size=cfg.batch_size,
            weight_decay=cfg.weight_decay,
            rng=client_rng(cfg.seed, round_index, cid),
        )
        return adapter_message(updated, cid, len(ix), round_index), losses

    pool = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for r in range(cfg.rounds):
            lr = lr_schedule(r, cfg)
            sampled = sample_clients(r, cfg)
            if pool is None:
                results = [client_job(r, c, sub, adapters, lr) for c in sampled]
            else:
                results = list(pool.map(lambda c: client_job(r, c, sub, adapters, lr), sampled))
            updates, local_losses = [], []
            for message, losses in results:
                ad, _, n = parse_adapter_message(message)
                updates.append((ad, n))
                local_losses.append(float(np.mean(losses)) if losses else float("nan"))
            adapters = fedavg_aggregate(updates)

            aligned = False
            if cfg.mode in IN_FL_MODES and (r + 1) % cfg.align_interval == 0:
                fm_current = plug_in_sync(fm, sub, adapters, partition)
                reports = []
                for c in sampled:
                    ix = data.partition.indices[c]
                    rep = client_apoz(sub, train.tokens[ix], adapters, dcfg.zero_threshold)
                    reports.append((rep, rep.positions))
                mask = select_update_neurons(aggregate_apoz(reports), cfg.neuron_proportion)
                sub, _ = in_fl_align(fm_current, sub, mask, data.distill_corpus, dcfg, adapters=adapters, seed=cfg.seed * 1000 + r)
                aligned = True

            probe = theorem1_probe(fm, sub, adapters, data.probe.tokens, data.probe.labels)
            tracker.add(probe.delta, adapters.flat())
            fm_now = plug_in_sync(fm, sub, adapters, partition)
            acc = accuracy(fm_now, data.test.tokens, data.test.labels)
            records.append(
                RoundRecord(
                    r, cfg.mode, lr, sampled, local_losses, acc,
                    probe.delta_norm_sq, probe.grad_norm_sq, probe.grad_sub_norm_sq,
                    probe.cond11_main, probe.cond11_appendix, aligned,
                )
            )
            log.debug("round %d mode %s acc %.3f delta %.3g", r, cfg.mode, acc, probe.delta_norm_sq)
    finally:
        if pool is not None:
            pool.shutdown()

    fm_final = plug_in_sync(fm, sub, adapters, partition)
    x_star = adapters.flat()
    return FederationResult(
        fm_final, sub, adapters, records, start,
        eq12_inner_sum=tracker.inner_product_sum(x_star) if records else 0.0,
        eq12_gap_sum=tracker.gap_sum(),
    )

