import numpy as np
import pytest

from dmbnmt import tensor as T
from dmbnmt.gating import DMB, MOE
from dmbnmt.layers import (PLAIN, BranchedParams, FfnLayer, MhaLayer, Routing, fold, folded_only,
                           ffn_forward, mha_forward)


def ffn(variant, n=4, k=2, seed=0, d=6, d_f=10, shared_private=True):
    return FfnLayer(variant, d, d_f, n_branches=n, k=k, rng=np.random.default_rng(seed),
                    shared_private=shared_private)


def randomize(layer, rng, shared=True):
    for name, t in layer.named_parameters().items():
        if name.startswith("params.shared") and not shared:
            continue
        t.data[...] = rng.standard_normal(t.shape) * 0.5


def test_single_branch_dmb_equals_plain(rng):
    plain = ffn(PLAIN, seed=3)
    dmb = ffn(DMB, n=1, seed=3)
    for name, t in plain.params.named_parameters().items():
        dmb.params.named_parameters()[name].data[...] = t.data
    x = T.tensor(rng.standard_normal((5, 6)))
    y_plain, rec_plain = ffn_forward(plain, x)
    y_dmb, rec = ffn_forward(dmb, x)
    assert rec_plain == []
    assert len(rec) == 1 and (rec[0].selection == 0).all()
    assert np.array_equal(y_plain.data, y_dmb.data)


def test_zero_shared_means_selected_private_branch(rng):
    layer = ffn(DMB, n=3, seed=1)
    x = T.tensor(rng.standard_normal((7, 6)))
    y, rec = ffn_forward(layer, x)
    sel = rec[0].selection
    for row in range(7):
        p = layer.params.private[sel[row]]
        h = np.maximum(x.data[row] @ p["w1"].data + p["b1"].data, 0)
        np.testing.assert_allclose(y.data[row], h @ p["w2"].data + p["b2"].data, rtol=1e-5, atol=1e-6)


def test_moe_identical_experts_with_full_k_equals_plain(rng):
    plain = ffn(PLAIN, seed=2)
    moe = ffn(MOE, n=3, k=3, seed=2)
    for p in moe.params.private:
        for name, t in plain.params.named_parameters().items():
            p[name].data[...] = t.data
    x = T.tensor(rng.standard_normal((4, 6)))
    np.testing.assert_allclose(ffn_forward(moe, x)[0].data, ffn_forward(plain, x)[0].data,
                               rtol=1e-5, atol=1e-6)


def test_moe_permutation_equivariance(rng):
    layer = ffn(MOE, n=3, k=2, seed=4)
    randomize(layer, rng)
    x = T.tensor(rng.standard_normal((5, 6)))
    y = ffn_forward(layer, x)[0].data
    perm = [2, 0, 1]
    layer.params.private = [layer.params.private[i] for i in perm]
    layer.gate.w.data[...] = layer.gate.w.data[:, perm]
    layer.gate.b.data[...] = layer.gate.b.data[perm]
    np.testing.assert_allclose(ffn_forward(layer, x)[0].data, y, rtol=1e-5, atol=1e-6)


def test_routing_partitions_positions(rng):
    layer = ffn(DMB, n=4, seed=5)
    randomize(layer, rng)
    x = T.tensor(rng.standard_normal((30, 6)))
    out = layer.gate(x)
    counts = Routing.from_gate(out, 4).branch_counts(4)
    assert counts.sum() == 30
    np.testing.assert_array_equal(counts, np.bincount(out.selection, minlength=4))


def test_dmb_cost_is_independent_of_selection(rng):
    layer = ffn(DMB, n=4, seed=6)
    x = T.tensor(rng.standard_normal((12, 6)))
    totals = set()
    for bias in ([9, 0, 0, 0], [0, 0, 0, 9], [0, 0, 0, 0]):
        layer.gate.b.data[...] = bias
        with T.count_mult_adds() as c:
            ffn_forward(layer, x)
        totals.add(c.total)
    assert len(totals) == 1


# ---------------------------------------------------------------- shared-private


def test_fold_with_zero_shared_is_bitwise_private(rng):
    p = BranchedParams.create({"w": (3, 4), "b": (4,)}, 3, rng)
    f = fold(p)
    for i in range(3):
        for n in ("w", "b"):
            assert np.array_equal(f.folded[i][n].data, p.private[i][n].data)


def test_fold_with_zero_private_is_shared(rng):
    p = BranchedParams.create({"w": (3, 4)}, 3, rng)
    p.shared["w"].data[...] = rng.standard_normal((3, 4))
    for s in p.private:
        s["w"].data[...] = 0
    f = fold(p)
    for i in range(3):
        assert np.array_equal(f.folded[i]["w"].data, p.shared["w"].data)


@pytest.mark.parametrize("variant_layer", ["ffn", "mha"])
def test_fold_forward_is_bit_exact(rng, variant_layer):
    if variant_layer == "ffn":
        layer = ffn(DMB, n=3, seed=7)
    else:
        layer = MhaLayer(DMB, 8, 2, n_branches=3, rng=np.random.default_rng(7))
    randomize(layer, rng)
    d = 6 if variant_layer == "ffn" else 8
    x = T.tensor(rng.standard_normal((9, d)))

    def run():
        return (ffn_forward(layer, x) if variant_layer == "ffn" else mha_forward(layer, x, x, x))[0].data

    before = run()
    layer.fold()
    assert layer.params.shared is None and layer.params.private is None
    assert np.array_equal(run(), before)


def test_single_position_gradient_routing(rng):
    layer = ffn(DMB, n=4, seed=8)
    randomize(layer, rng)
    layer.gate.b.data[...] = [0, 0, 50, 0]
    x = T.tensor(rng.standard_normal((1, 6)))
    y, rec = ffn_forward(layer, x, training=True)
    assert rec[0].selection.tolist() == [2]
    T.backward(T.sum(T.mul(y, y)))
    for name in layer.shapes:
        shared = layer.params.shared[name].grad
        assert np.array_equal(layer.params.private[2][name].grad, shared)
        for i in (0, 1, 3):
            g = layer.params.private[i][name].grad
            assert g is None or not g.any()


def test_shared_gradient_is_sum_of_private_gradients(rng):
    layer = ffn(DMB, n=4, seed=9)
    randomize(layer, rng)
    x = T.tensor(rng.standard_normal((40, 6)))
    y, rec = ffn_forward(layer, x, training=True)
    assert len(set(rec[0].selection.tolist())) > 1
    T.backward(T.sum(T.mul(y, y)))
    for name in layer.shapes:
        total = sum(p[name].grad for p in layer.params.private if p[name].grad is not None)
        np.testing.assert_allclose(layer.params.shared[name].grad, total, rtol=1e-5, atol=1e-6)


def test_shared_and_private_finite_differences():
    rng = np.random.default_rng(10)
    with T.precision(np.float64):
        layer = ffn(DMB, n=2, seed=10)
        randomize(layer, rng)
        x = T.tensor(rng.standard_normal((6, 6)))
        assert len(set(layer.gate(x).selection.tolist())) == 2

        def f():
            y, _ = ffn_forward(layer, x, training=True)
            return T.sum(T.mul(y, y))

        targets = [layer.params.shared["w1"], layer.params.private[0]["w2"],
                   layer.params.private[1]["b1"]]
        for t in targets:
            rep = T.grad_check(f, t, h=1e-6, tol=1e-3)
            assert rep.passed, rep.max_rel_error


def test_dmb_main_loss_gives_gate_no_gradient(rng):
    layer = ffn(DMB, n=3, seed=11)
    randomize(layer, rng)
    y, _ = ffn_forward(layer, T.tensor(rng.standard_normal((8, 6))), training=True)
    T.backward(T.sum(y))
    assert layer.gate.w.grad is None or not layer.gate.w.grad.any()


def test_moe_main_loss_gives_gate_gradient(rng):
    layer = ffn(MOE, n=3, k=2, seed=12)
    randomize(layer, rng)
    y, _ = ffn_forward(layer, T.tensor(rng.standard_normal((8, 6))), training=True)
    T.backward(T.sum(T.mul(y, y)))
    assert np.abs(layer.gate.w.grad).sum() > 0


def test_folded_only_storage_is_n_sets(rng):
    p = BranchedParams.create({"w": (3, 4), "b": (4,)}, 4, rng)
    assert len(p.named_parameters()) == 2 * 5
    assert len(folded_only(p).named_parameters()) == 2 * 4


# ---------------------------------------------------------------- attention


def test_single_position_identity_attention():
    layer = MhaLayer(PLAIN, 4, 1, rng=np.random.default_rng(0))
    p = layer.params.private[0]
    for c in "qkvo":
        p[f"w{c}"].data[...] = np.eye(4)
        p[f"b{c}"].data[...] = 0
    v = T.tensor([[1.0, -2.0, 3.0, 0.5]])
    y, _ = mha_forward(layer, v, v, v)
    np.testing.assert_allclose(y.data, v.data, rtol=1e-6)


def test_self_attention_routes_qkv_together(rng):
    layer = MhaLayer(DMB, 8, 2, n_branches=4, rng=np.random.default_rng(1))
    x = T.tensor(rng.standard_normal((5, 8)))
    _, rec = mha_forward(layer, x, x, x)
    assert [r.role for r in rec] == ["in", "out"]


def test_cross_attention_routes_memory_once(rng):
    layer = MhaLayer(DMB, 8, 2, n_branches=4, rng=np.random.default_rng(1))
    q = T.tensor(rng.standard_normal((3, 8)))
    mem = T.tensor(rng.standard_normal((5, 8)))
    _, rec = mha_forward(layer, q, mem, mem)
    assert [r.role for r in rec] == ["in", "kv", "out"]
    assert rec[1].selection.shape == (5,)


@pytest.mark.parametrize("variant", [PLAIN, DMB, MOE])
def test_causal_mask_blocks_future(rng, variant):
    layer = MhaLayer(variant, 8, 2, n_branches=3, rng=np.random.default_rng(2), causal=True)
    randomize(layer, rng)
    x = rng.standard_normal((6, 8))
    y1, _ = mha_forward(layer, T.tensor(x), T.tensor(x), T.tensor(x))
    x2 = x.copy()
    x2[4:] += rng.standard_normal((2, 8))
    t2 = T.tensor(x2)
    y2, _ = mha_forward(layer, t2, t2, t2)
    np.testing.assert_allclose(y1.data[:4], y2.data[:4], rtol=1e-6, atol=1e-6)
    assert not np.allclose(y1.data[4:], y2.data[4:])


def test_heads_must_divide_d():
    with pytest.raises(ValueError):
        MhaLayer(PLAIN, 6, 4)
