import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedpft import tensor as T
from fedpft.distill import (
    ApozReport,
    DistillConfig,
    NeuronMask,
    aggregate_apoz,
    apoz,
    client_apoz,
    in_fl_align,
    layer_kd_loss,
    pre_fl_distill,
    select_update_neurons,
)
from fedpft.subfm import CompressionSpec, compress_model
from fedpft.transformer import ContractError, ModelConfig, as_tensors, forward_with_layer_outputs, init_model
from oracles import TINY, brute_apoz, brute_top_k, gelu_ref, layer_norm_ref


@pytest.fixture
def fm():
    return init_model(TINY, np.random.default_rng(0))


@pytest.fixture
def corpus():
    return np.random.default_rng(1).integers(0, TINY.vocab_size, (64, TINY.max_seq_len))


def test_identity_compression_has_zero_loss(fm, corpus):
    same = compress_model(fm, CompressionSpec(ratio=0.0))[0]
    assert layer_kd_loss(fm, same, corpus[:8], mu=0.5).item() == 0.0


def test_mu_zero_is_pure_output_mse(fm, corpus):
    sub = compress_model(fm, CompressionSpec(ratio=0.5))[0]
    batch = corpus[:6]
    _, t_out = forward_with_layer_outputs(fm, batch)
    _, s_out = forward_with_layer_outputs(sub, batch)
    expected = sum(float(((a.data.astype(np.float64) - b.data) ** 2).sum()) for a, b in zip(t_out, s_out)) / (TINY.num_layers * 6)
    assert layer_kd_loss(fm, sub, batch, mu=0.0).item() == pytest.approx(expected, rel=1e-5)


def test_hand_computed_single_layer_loss():
    cfg = ModelConfig(num_layers=1, num_heads=1, d_model=2, d_ff=2, vocab_size=2, max_seq_len=1, num_classes=2)
    teacher = init_model(cfg, np.random.default_rng(0))
    teacher.params["embed.tokens"][:] = [[1.0, -1.0], [0.5, 2.0]]
    teacher.params["embed.positions"][:] = [[0.0, 0.0]]
    teacher.params["layers.0.ffn.w1"][:] = [[1.0, 2.0], [0.0, 1.0]]
    teacher.params["layers.0.ffn.w2"][:] = [[1.0, 0.0], [1.0, 1.0]]
    student = teacher.copy()
    student.params["layers.0.ffn.w1"][:] = [[0.5, 0.0], [1.0, 1.0]]
    student.params["layers.0.ffn.w2"][:] = [[2.0, 0.0], [0.0, -1.0]]
    mu = 0.3

    def layer_out(p):
        p = {k: v.astype(np.float64) for k, v in p.items()}
        x = p["embed.tokens"][1]
        v = x @ p["layers.0.attn.v.weight"]
        h = layer_norm_ref(x + v @ p["layers.0.attn.o.weight"], 1.0, 0.0)
        f = gelu_ref(h @ p["layers.0.ffn.w1"]) @ p["layers.0.ffn.w2"]
        return layer_norm_ref(h + f, 1.0, 0.0), p["layers.0.ffn.w1"] @ p["layers.0.ffn.w2"]

    o_t, prod_t = layer_out(teacher.params)
    o_s, prod_s = layer_out(student.params)
    expected = ((o_t - o_s) ** 2).sum() + mu * ((prod_t - prod_s) ** 2).sum()
    assert layer_kd_loss(teacher, student, np.array([[1]]), mu).item() == pytest.approx(expected, rel=1e-5)


def test_kd_loss_gradient_finite_difference(fm, corpus):
    sub = compress_model(fm, CompressionSpec(ratio=0.5))[0]
    batch = corpus[:3]
    with T.precision("f64-verify"):
        teacher = fm.copy()
        student = sub.copy()
        student.params = {k: v.astype(np.float64) for k, v in student.params.items()}
        names = [n for i in range(TINY.num_layers) for n in student.ffn_names(i)]
        P = as_tensors(student.params, names)
        T.backward(layer_kd_loss(teacher, student, batch, 0.2, sub_params=P))
        rng = np.random.default_rng(3)
        h = 1e-6
        for _ in range(5):
            name = names[rng.integers(len(names))]
            idx = tuple(int(rng.integers(s)) for s in student.params[name].shape)
            vals = []
            for sign in (1, -1):
                q = dict(student.params)
                q[name] = q[name].copy()
                q[name][idx] += sign * h
                vals.append(layer_kd_loss(teacher, student, batch, 0.2, sub_params=as_tensors(q)).item())
            numeric = (vals[0] - vals[1]) / (2 * h)
            assert abs(P[name].grad[idx] - numeric) <= 1e-4 * max(1.0, abs(numeric))


def test_teacher_gets_no_gradient(fm, corpus):
    sub = compress_model(fm, CompressionSpec(ratio=0.5))[0]
    before = {k: v.copy() for k, v in fm.params.items()}
    pre_fl_distill(fm, sub, corpus, DistillConfig(epochs=1, lr=0.01))
    for k in before:
        np.testing.assert_array_equal(fm.params[k], before[k])


def test_layer_count_mismatch(fm, corpus):
    other = init_model(ModelConfig(num_layers=1, num_heads=2, d_model=8, d_ff=16, vocab_size=12, max_seq_len=6, num_classes=3), np.random.default_rng(0))
    with pytest.raises(ContractError):
        layer_kd_loss(fm, other, corpus[:2], 0.1)


def test_pre_fl_distill_zero_epochs_and_fixed_point(fm, corpus):
    sub = compress_model(fm, CompressionSpec(ratio=0.5))[0]
    out, hist = pre_fl_distill(fm, sub, corpus, DistillConfig(epochs=0))
    assert hist == []
    for k in sub.params:
        np.testing.assert_array_equal(out.params[k], sub.params[k])
    same = compress_model(fm, CompressionSpec(ratio=0.0))[0]
    out, hist = pre_fl_distill(fm, same, corpus[:32], DistillConfig(epochs=1, batch_size=16))
    assert hist == [0.0, 0.0]
    for k in same.params:
        np.testing.assert_array_equal(out.params[k], same.params[k])


def test_pre_fl_distill_reduces_loss():
    for seed in range(3):
        fm = init_model(TINY, np.random.default_rng(seed))
        corpus = np.random.default_rng(seed + 10).integers(0, TINY.vocab_size, (16, TINY.max_seq_len))
        sub = compress_model(fm, CompressionSpec(ratio=0.5))[0]
        cfg = DistillConfig(epochs=50, lr=0.01, batch_size=16)
        out, hist = pre_fl_distill(fm, sub, corpus, cfg, seed=seed)
        assert len(hist) == 50
        assert np.mean(hist[-10:]) <= hist[0]
        # only FFN tensors move
        for k in sub.params:
            if ".ffn.w1" in k or ".ffn.b1" in k or ".ffn.w2" in k:
                continue
            np.testing.assert_array_equal(out.params[k], sub.params[k])


def test_apoz_examples():
    assert apoz([np.zeros((2, 3, 4))]).values[0].tolist() == [1.0] * 4
    assert apoz([np.ones((2, 3, 4))]).values[0].tolist() == [0.0] * 4
    act = np.array([0.0, 0.5, 0.0, 2.0]).reshape(2, 2, 1)
    rep = apoz([act], 1e-3)
    assert rep.values[0][0] == 0.5 and rep.positions == 4


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_apoz_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    act = np.maximum(rng.standard_normal((3, 4, 5)), 0) * rng.integers(0, 2, (3, 4, 5))
    np.testing.assert_array_equal(apoz([act], 1e-3).values[0], brute_apoz(act, 1e-3))


def test_client_apoz_batches_agree(fm, corpus):
    from fedpft.transformer import ffn_hidden_activations

    whole = apoz(ffn_hidden_activations(fm, corpus))
    batched = client_apoz(fm, corpus, batch_size=7)
    for a, b in zip(whole.values, batched.values):
        np.testing.assert_allclose(a, b, atol=1e-12)
    assert batched.positions == corpus.size


def test_aggregate_apoz_examples():
    one = ApozReport([np.array([0.3, 0.7])], 5)
    np.testing.assert_array_equal(aggregate_apoz([(one, 5)]).values[0], [0.3, 0.7])
    a, b = ApozReport([np.array([0.2])], 4), ApozReport([np.array([0.6])], 4)
    assert aggregate_apoz([(a, 4), (b, 4)]).values[0][0] == pytest.approx(0.4)
    a, b = ApozReport([np.array([0.0])], 1), ApozReport([np.array([0.8])], 3)
    assert aggregate_apoz([(a, 1), (b, 3)]).values[0][0] == pytest.approx(0.6)
    with pytest.raises(ContractError):
        aggregate_apoz([])


def test_apoz_report_json_round_trip():
    rep = ApozReport([np.array([0.25, 1.0]), np.array([0.0])], 12, client_id=3)
    back = ApozReport.from_json(rep.to_json())
    assert back.client_id == 3 and back.positions == 12
    for x, y in zip(rep.values, back.values):
        np.testing.assert_array_equal(x, y)


def test_select_update_neurons_examples():
    rep = ApozReport([np.array([0.9, 0.1, 0.8, 0.2])], 10)
    assert list(select_update_neurons(rep, 0.5).selected(0)) == [0, 2]
    assert select_update_neurons(rep, 1.0).layers[0].all()
    assert not select_update_neurons(rep, 0.0).layers[0].any()


@settings(max_examples=40)
@given(st.lists(st.integers(0, 4), min_size=1, max_size=10), st.floats(0, 1))
def test_select_update_neurons_matches_brute_force(values, p):
    v = np.array(values) / 4.0
    mask = select_update_neurons(ApozReport([v], 1), p)
    assert list(mask.selected(0)) == brute_top_k(v, int(round(p * len(v))))


def test_in_fl_align_masking():
    cfg = ModelConfig(num_layers=1, num_heads=1, d_model=4, d_ff=8, vocab_size=6, max_seq_len=3, num_classes=2)
    fm = init_model(cfg, np.random.default_rng(0))
    sub = compress_model(fm, CompressionSpec(ratio=0.75))[0]  # 2 neurons
    corpus = np.random.default_rng(1).integers(0, 6, (8, 3))
    dcfg = DistillConfig(align_steps=1, lr=0.1, batch_size=8)
    mask = NeuronMask([np.array([True, False])], 0.5)
    out, hist = in_fl_align(fm, sub, mask, corpus, dcfg)
    assert len(hist) == 1
    w1, b1, w2 = sub.ffn_names(0)
    np.testing.assert_array_equal(out.params[w1][:, 1], sub.params[w1][:, 1])
    np.testing.assert_array_equal(out.params[b1][1], sub.params[b1][1])
    np.testing.assert_array_equal(out.params[w2][1], sub.params[w2][1])
    assert not np.array_equal(out.params[w1][:, 0], sub.params[w1][:, 0])
    assert not np.array_equal(out.params[w2][0], sub.params[w2][0])

    empty, _ = in_fl_align(fm, sub, NeuronMask([np.zeros(2, bool)], 0.0), corpus, dcfg)
    full_zero, _ = in_fl_align(fm, sub, NeuronMask([np.ones(2, bool)], 1.0), corpus, DistillConfig(align_steps=0))
    for k in sub.params:
        np.testing.assert_array_equal(empty.params[k], sub.params[k])
        np.testing.assert_array_equal(full_zero.params[k], sub.params[k])
    with pytest.raises(ContractError):
        in_fl_align(fm, sub, NeuronMask([np.ones(3, bool)], 1.0), corpus, dcfg)


def test_distill_config_validation():
    with pytest.raises(ContractError):
        DistillConfig(mu=-1)
    with pytest.raises(ContractError):
        DistillConfig(batch_size=0)
