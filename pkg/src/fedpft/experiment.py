"""End-to-end runs: full-model pretraining, data, compression, federation, metrics files."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .checkpoint import atomic_write
from .config import ExperimentConfig, derive_seed
from .data import generate_synthetic
from .fed import (
    METRICS_COLUMNS,
    PRE_FL_MODES,
    FederatedData,
    FederationResult,
    RoundRecord,
    dirichlet_partition,
    run_federation,
)
from .distill import pre_fl_distill
from .optim import AdamW
from .subfm import PartitionTheta, SaliencyReport, compress_model
from .transformer import TransformerModel, as_tensors, forward, init_model

log = logging.getLogger(__name__)


def pretrain_fm(cfg: ExperimentConfig) -> TransformerModel:
    """Train the full model on the source rule; it plays the role of a pretrained checkpoint."""
    pc = cfg.pretrain
    rng = np.random.default_rng(derive_seed(cfg.seed, "fm-init"))
    model = init_model(cfg.model, rng)
    source = generate_synthetic(replace(cfg.dataset, n=pc.source_size, rule=pc.source_rule, noise_rate=0.0), derive_seed(cfg.seed, "source"))
    opt = AdamW(model.params, lr=pc.lr, weight_decay=0.01)
    for _ in range(pc.steps):
        idx = rng.integers(0, len(source), pc.batch_size)
        P = as_tensors(model.params, model.params.keys())
        loss = T.cross_entropy(forward(model, source.tokens[idx], params=P), source.labels[idx])
        T.backward(loss)
        opt.step({k: P[k].grad for k in P})
    return model


def distill_corpus(cfg: ExperimentConfig) -> np.ndarray:
    """Unlabeled sequences from the source rule: a different generator than the client task."""
    spec = replace(cfg.dataset, n=cfg.distill_corpus_size, rule=cfg.pretrain.source_rule, noise_rate=0.0)
    return generate_synthetic(spec, derive_seed(cfg.seed, "distill-corpus")).tokens


def build_data(cfg: ExperimentConfig) -> FederatedData:
    spec = cfg.dataset
    train = generate_synthetic(spec, derive_seed(cfg.seed, "train"))
    test = generate_synthetic(replace(spec, n=cfg.test_size, noise_rate=0.0), derive_seed(cfg.seed, "test"))
    probe = generate_synthetic(replace(spec, n=cfg.probe_size, noise_rate=0.0), derive_seed(cfg.seed, "probe"))
    corpus = distill_corpus(cfg)
    partition = dirichlet_partition(
        train.labels, cfg.federation.num_clients, cfg.federation.dirichlet_alpha, derive_seed(cfg.seed, "partition")
    )
    return FederatedData(train, partition, test, corpus, probe)


@dataclass
class Prepared:
    fm: TransformerModel
    subfm: TransformerModel
    saliency: SaliencyReport
    partition: PartitionTheta
    data: FederatedData
    aligned: TransformerModel | None = None

    def pre_aligned(self, cfg: ExperimentConfig) -> TransformerModel:
        if self.aligned is None:
            self.aligned = pre_fl_distill(self.fm, self.subfm, self.data.distill_corpus, cfg.distill, seed=cfg.seed)[0]
        return self.aligned


def prepare(cfg: ExperimentConfig, fm: TransformerModel | None = None) -> Prepared:
    fm = pretrain_fm(cfg) if fm is None else fm
    sub, report, partition = compress_model(fm, cfg.compression)
    return Prepared(fm, sub, report, partition, build_data(cfg))


def run_mode(cfg: ExperimentConfig, prepared: Prepared | None = None, mode: str | None = None) -> FederationResult:
    """Run one federation; a shared ``prepared`` lets several modes reuse the same full model and data."""
    if mode is not None:
        cfg = cfg.with_federation(mode=mode)
    prepared = prepared if prepared is not None else prepare(cfg)
    aligned = prepared.pre_aligned(cfg) if cfg.federation.mode in PRE_FL_MODES else None
    return run_federation(
        prepared.fm, prepared.subfm, prepared.data, cfg.federation, cfg.distill, prepared.partition, aligned_subfm=aligned
    )


# ---------------------------------------------------------------------------
# metrics


def metrics_csv(records: Iterable[RoundRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_COLUMNS)
    for rec in records:
        writer.writerow(rec.csv_row())
    return buf.getvalue()


def write_metrics(records: Iterable[RoundRecord], path: str | Path) -> Path:
    path = Path(path)
    atomic_write(path, metrics_csv(records))
    return path


def emit_plot_data(records: list[RoundRecord], out: str | Path) -> list[Path]:
    """One CSV per mode (``series_<mode>.csv``) with the fixed metrics columns.

    With no records a single header-only ``series.csv`` is written.
    """
    out = Path(out)
    if not records:
        return [write_metrics([], out / "series.csv")]
    modes = sorted({r.mode for r in records})
    return [write_metrics([r for r in records if r.mode == m], out / f"series_{m}.csv") for m in modes]


def seed_average(series: list[list[float]]) -> np.ndarray:
    return np.mean(np.asarray(series, dtype=np.float64), axis=0)
