import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpft.checkpoint import adapter_message, parse_adapter_message
from fedpft.data import DatasetSpec, generate_synthetic
from fedpft.distill import DistillConfig
from fedpft.fed import (
    METRICS_COLUMNS,
    FederatedData,
    FederationConfig,
    RoundRecord,
    client_rng,
    dirichlet_partition,
    fedavg_aggregate,
    gap_conditions,
    local_finetune,
    lr_schedule,
    run_federation,
    sample_clients,
    theorem1_probe,
)
from fedpft.subfm import CompressionSpec, compress_model
from fedpft.transformer import ContractError, LoraAdapters, ModelConfig, init_lora, init_model


def tv_distance(part, labels, num_classes):
    glob = np.bincount(labels, minlength=num_classes) / len(labels)
    return np.mean([0.5 * np.abs(h / h.sum() - glob).sum() for h in part.label_histograms])


def test_partition_single_client():
    labels = np.array([0, 1, 1, 0, 1])
    part = dirichlet_partition(labels, 1, 1.0, seed=0)
    assert sorted(part.indices[0].tolist()) == list(range(5))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 12), st.floats(0.05, 50.0), st.integers(0, 10_000), st.integers(2, 4))
def test_partition_is_a_partition(n_clients, alpha, seed, classes):
    labels = np.random.default_rng(seed).integers(0, classes, 60)
    part = dirichlet_partition(labels, n_clients, alpha, seed)
    flat = np.concatenate(part.indices)
    assert sorted(flat.tolist()) == list(range(60))
    assert all(len(ix) > 0 for ix in part.indices)
    for ix, hist in zip(part.indices, part.label_histograms):
        np.testing.assert_array_equal(np.bincount(labels[ix], minlength=classes)[: len(hist)], hist[:classes])
    again = dirichlet_partition(labels, n_clients, alpha, seed)
    assert all(np.array_equal(a, b) for a, b in zip(part.indices, again.indices))


def test_partition_concentration_limits():
    labels = np.repeat([0, 1], 500)
    part = dirichlet_partition(labels, 4, 10_000.0, seed=3)
    for h in part.label_histograms:
        assert abs(h[0] / h.sum() - 0.5) <= 0.05
    skewed = np.mean([tv_distance(dirichlet_partition(np.repeat([0, 1], 100), 10, 0.1, s), np.repeat([0, 1], 100), 2) for s in range(30)])
    mild = np.mean([tv_distance(dirichlet_partition(np.repeat([0, 1], 100), 10, 10.0, s), np.repeat([0, 1], 100), 2) for s in range(30)])
    assert skewed > mild


def test_partition_too_small():
    with pytest.raises(ContractError):
        dirichlet_partition(np.array([0, 1]), 3, 1.0, 0)


def test_sample_clients():
    cfg = FederationConfig(num_clients=20, clients_per_round=5, seed=4)
    assert sample_clients(3, cfg) == sample_clients(3, cfg)
    assert sample_clients(0, FederationConfig(num_clients=6, clients_per_round=6)) == list(range(6))
    counts = np.zeros(20)
    for r in range(1000):
        s = sample_clients(r, cfg)
        assert len(set(s)) == 5 and s == sorted(s)
        counts[s] += 1
    assert np.all(np.abs(counts - 250) <= 50)


def test_lr_schedule():
    cfg = FederationConfig(rounds=60, base_lr=0.01)
    assert lr_schedule(0, cfg) == 0.01
    assert lr_schedule(30, cfg) == pytest.approx(0.005)
    assert lr_schedule(59, cfg) == pytest.approx(0.01 / 60)


def test_client_rng_is_schedule_independent():
    a = client_rng(1, 2, 3).random(4)
    client_rng(1, 2, 4).random(10)
    np.testing.assert_array_equal(a, client_rng(1, 2, 3).random(4))
    assert not np.array_equal(a, client_rng(1, 3, 2).random(4))


def ad_from(values):
    return LoraAdapters(1, {"layers.0.q.A": np.array(values, np.float32).reshape(-1, 1), "layers.0.q.B": np.ones((1, 1), np.float32)})


def test_fedavg_examples():
    single = ad_from([1.0, 2.0])
    np.testing.assert_array_equal(fedavg_aggregate([(single, 7)]).tensors["layers.0.q.A"], single.tensors["layers.0.q.A"])
    out = fedavg_aggregate([(ad_from([1, 3]), 5), (ad_from([3, 5]), 5)])
    np.testing.assert_array_equal(out.tensors["layers.0.q.A"].ravel(), [2, 4])
    a, b = np.array([0.5, -1.0]), np.array([2.0, 4.0])
    out = fedavg_aggregate([(ad_from(a), 1), (ad_from(b), 3)])
    np.testing.assert_allclose(out.tensors["layers.0.q.A"].ravel(), (a + 3 * b) / 4, rtol=1e-7)
    with pytest.raises(ContractError):
        fedavg_aggregate([(single, 0)])


@settings(max_examples=30)
@given(st.permutations(range(4)), st.integers(0, 1000))
def test_fedavg_is_order_independent(perm, seed):
    rng = np.random.default_rng(seed)
    updates = [(ad_from(rng.standard_normal(3)), int(rng.integers(1, 9))) for _ in range(4)]
    base = fedavg_aggregate(updates).tensors["layers.0.q.A"]
    np.testing.assert_array_equal(fedavg_aggregate([updates[i] for i in perm]).tensors["layers.0.q.A"], base)


TINY = ModelConfig(num_layers=2, num_heads=2, d_model=8, d_ff=32, vocab_size=16, max_seq_len=6, num_classes=2)


@pytest.fixture(scope="module")
def setting():
    fm = init_model(TINY, np.random.default_rng(0))
    spec = DatasetSpec(n=120, seq_len=6, vocab_size=16, num_classes=2, rule="shifted", max_markers=2)
    train = generate_synthetic(spec, 1)
    test = generate_synthetic(spec, 2)
    corpus = generate_synthetic(spec, 3).tokens[:32]
    return fm, train, test, corpus


def test_local_finetune_edge_cases(setting):
    fm, train, _, _ = setting
    ad = init_lora(TINY, 2, np.random.default_rng(0))
    kw = dict(batch_size=8, rng=np.random.default_rng(0))
    for epochs, lr in ((1, 0.0), (0, 0.1)):
        out, _ = local_finetune(fm, ad, train.tokens[:16], train.labels[:16], epochs, lr, **kw)
        for k in ad.tensors:
            np.testing.assert_array_equal(out.tensors[k], ad.tensors[k])
    with pytest.raises(ContractError):
        local_finetune(fm, ad, train.tokens[:0], train.labels[:0], 1, 0.1)


def test_local_finetune_reduces_loss_on_separable_toy():
    cfg = ModelConfig(num_layers=1, num_heads=1, d_model=8, d_ff=16, vocab_size=4, max_seq_len=3, num_classes=2)
    for seed in range(3):
        model = init_model(cfg, np.random.default_rng(seed))
        tokens = np.array([[0, 1, 1], [0, 2, 2]] * 8)
        labels = np.array([0, 1] * 8)
        ad = init_lora(cfg, 2, np.random.default_rng(seed))
        _, losses = local_finetune(model, ad, tokens, labels, 20, 0.01, batch_size=16, rng=np.random.default_rng(seed))
        assert losses[-1] < losses[0]


def test_local_finetune_leaves_body_untouched(setting):
    fm, train, _, _ = setting
    before = {k: v.copy() for k, v in fm.params.items()}
    local_finetune(fm, init_lora(TINY, 2, np.random.default_rng(0)), train.tokens[:16], train.labels[:16], 1, 0.01, rng=np.random.default_rng(1))
    for k in before:
        np.testing.assert_array_equal(fm.params[k], before[k])


def test_adapter_wire_format_round_trip():
    ad = init_lora(TINY, 3, np.random.default_rng(5))
    ad.tensors["layers.1.v.B"][:] = 0.25
    back, cid, n = parse_adapter_message(adapter_message(ad, 7, 42, 3))
    assert (cid, n, back.rank) == (7, 42, 3)
    for k in ad.tensors:
        np.testing.assert_array_equal(back.tensors[k], ad.tensors[k])


def test_probe_identical_models(setting):
    fm, train, _, _ = setting
    same = compress_model(fm, CompressionSpec(ratio=0.0))[0]
    ad = init_lora(TINY, 2, np.random.default_rng(0))
    ad.tensors["layers.0.q.B"][:] = 0.1
    probe = theorem1_probe(fm, same, ad, train.tokens[:8], train.labels[:8])
    assert probe.delta_norm_sq == 0.0
    assert probe.cond11_main and probe.cond11_appendix


def test_gap_condition_examples():
    g = np.array([2.0, 0.0])
    delta = np.array([0.1, 0.0])
    main, appendix = gap_conditions(delta, g)
    assert main and appendix  # 0.01 < 2
    assert gap_conditions(np.array([2.0, 0.0]), g)[0] is False


@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0, 1, exclude_max=True))
def test_main_gap_condition_monotone_under_shrinking(d, g, c):
    d, g = np.array(d), np.array(g)
    if gap_conditions(d, g)[0]:
        assert gap_conditions(c * d, g)[0]


def make_data(setting, n_clients, alpha=1.0):
    fm, train, test, corpus = setting
    part = dirichlet_partition(train.labels, n_clients, alpha, 0)
    return FederatedData(train, part, test, corpus, generate_synthetic(train.spec, 9).subset(np.arange(8)))


def test_zero_rounds(setting):
    fm = setting[0]
    sub, _, part = compress_model(fm, CompressionSpec(ratio=0.5))
    cfg = FederationConfig(num_clients=4, clients_per_round=2, rounds=0, mode="FedPFT_N")
    res = run_federation(fm, sub, make_data(setting, 4), cfg, DistillConfig(), part)
    assert res.records == []
    for k in fm.params:
        np.testing.assert_array_equal(res.fm.params[k], fm.params[k])
        np.testing.assert_array_equal(res.subfm.params[k], sub.params[k])


def test_stage_gating(setting):
    fm = setting[0]
    sub, _, part = compress_model(fm, CompressionSpec(ratio=0.5))
    dcfg = DistillConfig(epochs=1, batch_size=16, align_steps=2)
    data = make_data(setting, 4)
    base = dict(num_clients=4, clients_per_round=2, rounds=2, align_interval=1, batch_size=16)
    runs = {m: run_federation(fm, sub, data, FederationConfig(mode=m, **base), dcfg, part) for m in ("FedPFT", "FedPFT_N", "FedPFT_B", "FedPFT_D")}
    w1 = "layers.0.ffn.w1"
    np.testing.assert_array_equal(runs["FedPFT_N"].subfm_initial.params[w1], sub.params[w1])
    np.testing.assert_array_equal(runs["FedPFT_D"].subfm_initial.params[w1], sub.params[w1])
    assert not np.array_equal(runs["FedPFT"].subfm_initial.params[w1], sub.params[w1])
    np.testing.assert_array_equal(runs["FedPFT"].subfm_initial.params[w1], runs["FedPFT_B"].subfm_initial.params[w1])
    # body frozen without in-FL alignment
    np.testing.assert_array_equal(runs["FedPFT_N"].subfm.params[w1], sub.params[w1])
    np.testing.assert_array_equal(runs["FedPFT_B"].subfm.params[w1], runs["FedPFT_B"].subfm_initial.params[w1])
    assert all(r.aligned for r in runs["FedPFT"].records)
    assert not any(r.aligned for r in runs["FedPFT_B"].records)
    # the final full model differs from the base only in attention weights
    for k, v in runs["FedPFT"].fm.params.items():
        if ".attn." not in k or not k.endswith("weight"):
            np.testing.assert_array_equal(v, fm.params[k])


def test_layer_drop_and_full_model_modes(setting):
    fm = setting[0]
    sub, _, part = compress_model(fm, CompressionSpec(ratio=0.5))
    data = make_data(setting, 4)
    cfg = FederationConfig(num_clients=4, clients_per_round=2, rounds=1, mode="LayerDrop", drop_bottom=1, drop_top=1, drop_emulator=0, batch_size=16)
    res = run_federation(fm, sub, data, cfg, DistillConfig(), part)
    assert res.subfm.num_layers == 2 and res.adapters.layers == (0, 1)
    full = run_federation(fm, sub, data, FederationConfig(**{**cfg.__dict__, "mode": "FullModel"}), DistillConfig(), part)
    assert full.records[0].delta_norm_sq == 0.0


def test_thread_count_does_not_change_records(setting):
    fm = setting[0]
    sub, _, part = compress_model(fm, CompressionSpec(ratio=0.5))
    data = make_data(setting, 6)
    base = dict(num_clients=6, clients_per_round=3, rounds=3, align_interval=2, batch_size=16, mode="FedPFT_D")
    one = run_federation(fm, sub, data, FederationConfig(workers=1, **base), DistillConfig(align_steps=2), part)
    four = run_federation(fm, sub, data, FederationConfig(workers=4, **base), DistillConfig(align_steps=2), part)
    assert [r.csv_row() for r in one.records] == [r.csv_row() for r in four.records]
    for k in one.adapters.tensors:
        np.testing.assert_array_equal(one.adapters.tensors[k], four.adapters.tensors[k])


def test_record_csv_row_schema():
    rec = RoundRecord(0, "FedPFT", 0.1, [0], [1.0, 2.0], 0.5, 0.25, 1.0, 1.1, True, False, True)
    row = rec.csv_row()
    assert len(row) == len(METRICS_COLUMNS) == 10
    assert row == ["0", "FedPFT", "0.1", "1.5", "0.5", "0.25", "1", "1", "0", "1"]


def test_federation_config_validation():
    with pytest.raises(ContractError):
        FederationConfig(num_clients=3, clients_per_round=4)
    with pytest.raises(ContractError):
        FederationConfig(align_interval=0)
    with pytest.raises(ContractError):
        FederationConfig(mode="FedXYZ")
