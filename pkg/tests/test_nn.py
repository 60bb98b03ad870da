import math

import numpy as np
import pytest

from trafficnas.nn import (
    AdamState,
    BatchNorm,
    Dropout,
    EarlyStopping,
    EmptySplit,
    Network,
    ReduceLROnPlateau,
    ShapeMismatch,
    StaleCache,
    TrainConfig,
    adam_step,
    load_model,
    loss_softmax_xent,
    multi_start_train,
    predict_from_logits,
    save_model,
    train,
)
from trafficnas.cost import estimate_cost
from trafficnas.space import Block, Genome, Head, SpaceBounds, random_genome
from trafficnas.synthetic import motif_dataset

L = 24


def _loss(net, x, y, seed):
    logits, cache = net.forward(x, "train", np.random.default_rng(seed))
    return loss_softmax_xent(logits, y)[0], logits, cache


def _grad_rel_err(genome, seed, input_len=L, n=5, eps=1e-6):
    rng = np.random.default_rng(seed)
    net = Network(genome, seed=seed, dtype=np.float64, input_len=input_len)
    # perturb BN affine params so their gradients are exercised away from the init point
    for p in net.trainable():
        p += rng.normal(0, 0.1, p.shape)
    x = rng.normal(size=(n, input_len))
    y = rng.integers(0, genome.head.num_classes, n)
    _, logits, cache = _loss(net, x, y, 99)
    _, dlogits = loss_softmax_xent(logits, y)
    grads = net.backward(cache, dlogits)
    analytic, numeric = [], []
    for p, g in zip(net.trainable(), grads):
        num = np.zeros_like(p)
        flat, nflat = p.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = _loss(net, x, y, 99)[0]
            flat[i] = old - eps
            down = _loss(net, x, y, 99)[0]
            flat[i] = old
            nflat[i] = (up - down) / (2 * eps)
        analytic.append(g.ravel())
        numeric.append(nflat)
    # one vector for all arrays: a conv bias ahead of batchnorm has an exactly zero gradient
    a, b = np.concatenate(analytic), np.concatenate(numeric)
    return np.linalg.norm(a - b) / (np.linalg.norm(a) + np.linalg.norm(b))


GRAD_CASES = [
    Genome((Block(3, 3),), Head("global_avg", 0, 3)),
    Genome((Block(3, 5, 2, "valid"),), Head("flatten", 0, 3)),
    Genome((Block(2, 3, 1, "same", "max", 2),), Head("flatten", 0, 3)),
    Genome((Block(2, 3, 1, "same", "avg", 3),), Head("global_avg", 4, 3)),
    Genome((Block(2, 3, 2, "same", "max", 3),), Head("flatten", 5, 2)),
    Genome((Block(3, 3, 1, "same", "none", 0, 0.25),), Head("global_avg", 0, 3)),
    Genome((Block(2, 3), Block(3, 3, 2)), Head("global_avg", 0, 3)),
    Genome((Block(2, 5, 1, "valid", "max", 2), Block(2, 3)), Head("flatten", 0, 4)),
    Genome((Block(4, 7, 1, "same"),), Head("global_avg", 3, 2)),
    Genome((Block(2, 3, 2, "valid", "avg", 2), Block(2, 3, 1, "same", "none", 0, 0.5)), Head("flatten", 3, 3)),
]


@pytest.mark.parametrize("case", range(len(GRAD_CASES)))
def test_gradients_match_finite_differences(case):
    assert _grad_rel_err(GRAD_CASES[case], case) < 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_random_genome_gradients(seed):
    bounds = SpaceBounds(filters_choices=(2, 3), kernel_choices=(3, 5), max_blocks=2,
                         dense_units_choices=(0, 4), head_pool_choices=("flatten", "global_avg"),
                         num_classes=3, input_len=L)
    g = random_genome(bounds, np.random.default_rng(seed))
    assert _grad_rel_err(g, 100 + seed) < 1e-4


def test_uniform_logits_loss():
    loss, _ = loss_softmax_xent(np.zeros((4, 11)), [0, 3, 5, 10])
    assert abs(loss - math.log(11)) < 1e-12


def test_loss_gradient_finite_difference():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(3, 5))
    y = np.array([0, 4, 2])
    _, g = loss_softmax_xent(z, y)
    num = np.zeros_like(z)
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += 1e-6
        zm[idx] -= 1e-6
        num[idx] = (loss_softmax_xent(zp, y)[0] - loss_softmax_xent(zm, y)[0]) / 2e-6
    assert np.max(np.abs(num - g)) < 1e-6


def _scalar_forward(net, x):
    """Loop-by-loop reference forward pass in inference mode."""
    g = net.genome
    arrays = net.arrays()
    k = 0
    a = [[float(v)] for v in x]  # a[position][channel]
    for b in g.blocks:
        W, bias, gamma, beta, mean, var = arrays[k:k + 6]
        k += 6
        length = len(a)
        if b.padding == "valid":
            l_out = (length - b.kernel) // b.stride + 1
            left = 0
        else:
            l_out = -(-length // b.stride)
            left = max((l_out - 1) * b.stride + b.kernel - length, 0) // 2
        out = []
        for t in range(l_out):
            row = []
            for f in range(b.filters):
                s = bias[f]
                for j in range(b.kernel):
                    pos = t * b.stride + j - left
                    if 0 <= pos < length:
                        for c in range(len(a[0])):
                            s += a[pos][c] * W[j, c, f]
                s = (s - mean[f]) / math.sqrt(var[f] + 1e-5) * gamma[f] + beta[f]
                row.append(max(s, 0.0))
            out.append(row)
        a = out
        if b.pool != "none":
            pooled = []
            for t in range(len(a) // b.pool_size):
                win = a[t * b.pool_size:(t + 1) * b.pool_size]
                op = max if b.pool == "max" else (lambda vals: sum(vals) / len(vals))
                pooled.append([op([w[c] for w in win]) for c in range(len(a[0]))])
            a = pooled
    if g.head.pooling == "global_avg":
        feat = [sum(r[c] for r in a) / len(a) for c in range(len(a[0]))]
    else:
        feat = [v for r in a for v in r]
    dense = [(arrays[k], arrays[k + 1], True)] if g.head.dense_units else []
    dense.append((arrays[-2], arrays[-1], False))
    for W, bias, relu in dense:
        feat = [sum(feat[i] * W[i, o] for i in range(len(feat))) + bias[o] for o in range(W.shape[1])]
        if relu:
            feat = [max(v, 0.0) for v in feat]
    return feat


@pytest.mark.parametrize("case", range(len(GRAD_CASES)))
def test_forward_matches_scalar_reference(case):
    g = GRAD_CASES[case]
    rng = np.random.default_rng(case)
    net = Network(g, seed=case, dtype=np.float64, input_len=L)
    for a in net.arrays():
        a[...] = rng.normal(0, 0.5, a.shape)
    for layer in net.layers:
        if isinstance(layer, BatchNorm):
            layer.var[...] = rng.uniform(0.5, 2.0, layer.var.shape)
    x = rng.normal(size=L)
    got = net.forward(x[None], "infer")[0][0]
    assert np.max(np.abs(got - np.array(_scalar_forward(net, x)))) < 1e-10


def test_zero_weights_give_bias_logits():
    g = Genome((Block(2, 3),), Head("global_avg", 0, 3))
    net = Network(g, dtype=np.float64, input_len=L)
    for a in net.arrays():
        a[...] = 0
    net.arrays()[-1][...] = [1.0, -2.0, 0.5]
    logits = net.forward(np.ones((2, L)), "infer")[0]
    assert np.allclose(logits, [[1.0, -2.0, 0.5]] * 2)


def test_identity_conv_passes_input():
    g = Genome((Block(1, 3),), Head("flatten", 0, 2))
    net = Network(g, dtype=np.float64, input_len=L)
    conv = net.layers[0]
    conv.W[...] = 0
    conv.W[1, 0, 0] = 1.0
    x = np.abs(np.random.default_rng(0).normal(size=(1, L))) + 0.1
    y, _ = conv.forward(x[:, :, None], False, None)
    assert np.allclose(y[0, :, 0], x[0])


def test_adam_first_step():
    w = [np.array([1.0, -2.0])]
    g = [np.array([0.5, -3.0])]
    st = AdamState.zeros_like(w)
    adam_step(w, g, st, lr=0.01)
    # bias-corrected first step moves each weight by lr * sign(grad)
    assert np.allclose(w[0], [0.99, -1.99], atol=1e-7)
    assert st.t == 1


def test_stale_cache_rejected():
    g = Genome((Block(2, 3),), Head("global_avg", 0, 3))
    net = Network(g, dtype=np.float64, input_len=L)
    x = np.zeros((2, L))
    _, old = net.forward(x, "train")
    _, new = net.forward(x, "train")
    d = np.zeros((2, 3))
    with pytest.raises(StaleCache):
        net.backward(old, d)
    _, inf = net.forward(x, "infer")
    with pytest.raises(StaleCache):
        net.backward(inf, d)
    assert len(net.backward(new, d)) == len(net.trainable())


def test_batchnorm_running_stats_converge():
    bn = BatchNorm(2, np.float64)
    rng = np.random.default_rng(0)
    for _ in range(200):
        x = rng.normal([3.0, -1.0], [2.0, 0.5], size=(64, 10, 2))
        bn.forward(x, True, None)
    assert np.allclose(bn.mean, [3.0, -1.0], atol=0.1)
    assert np.allclose(bn.var, [4.0, 0.25], rtol=0.1)


def test_dropout_expectation():
    d = Dropout(0.25)
    rng = np.random.default_rng(0)
    x = np.ones((100_000, 1, 1))
    y, _ = d.forward(x, True, rng)
    assert abs(y.mean() - 1.0) < 0.01
    assert set(np.unique(y)) <= {0.0, 1 / 0.75}
    assert d.forward(x, False, rng)[0] is x


def test_max_activation_matches_cost_model():
    rng = np.random.default_rng(5)
    bounds = SpaceBounds()
    for _ in range(20):
        g = random_genome(bounds, rng)
        net = Network(g)
        _, cache = net.forward(np.zeros((1, 784)), "infer")
        assert cache.max_activation == estimate_cost(g).max_tensor


def test_inference_is_pure():
    g = Genome((Block(4, 3, 1, "same", "max", 2, 0.5),), Head("global_avg", 8, 3))
    net = Network(g, input_len=L)
    before = net.get_weights()
    x = np.random.default_rng(0).normal(size=(4, L))
    a = net.logits(x)
    b = net.logits(x)
    assert np.array_equal(a, b)
    assert all(np.array_equal(p, q) for p, q in zip(before, net.get_weights()))


def test_bad_input_shape():
    net = Network(Genome((Block(2, 3),), Head("global_avg", 0, 3)), input_len=L)
    with pytest.raises(ShapeMismatch):
        net.forward(np.zeros((2, L + 1)))


def test_plateau_reduces_after_patience():
    p = ReduceLROnPlateau(1e-3, factor=0.1, patience=2, min_lr=1e-5)
    lrs = [p.step(v) for v in [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]]
    assert lrs == pytest.approx([1e-3, 1e-3, 1e-4, 1e-4, 1e-5, 1e-5, 1e-5])


def test_early_stop_counts_non_improving_epochs():
    es = EarlyStopping(patience=3)
    stopped_at = None
    for epoch in range(1, 20):
        es.step(1.0)
        if es.should_stop:
            stopped_at = epoch
            break
    assert stopped_at == 4


def test_early_stop_min_delta():
    es = EarlyStopping(patience=2, min_delta=0.1)
    assert es.step(1.0)
    assert not es.step(0.95)
    assert es.step(0.85)


def test_constant_loss_training_stops_early():
    g = Genome((Block(2, 3),), Head("global_avg", 0, 2))
    net = Network(g, input_len=L)
    x = np.zeros((8, L))
    y = np.array([0, 1] * 4)
    cfg = TrainConfig(max_epochs=50, lr0=0.0 + 1e-12, early_stop_patience=3, multi_start=1)
    out = train(net, (x, y), (x, y), cfg)
    assert out.epochs_run == 4


def test_empty_split():
    net = Network(Genome((Block(2, 3),), Head("global_avg", 0, 2)), input_len=L)
    with pytest.raises(EmptySplit):
        train(net, (np.zeros((0, L)), []), (np.zeros((1, L)), [0]), TrainConfig())


def test_overfits_small_batch():
    ds = motif_dataset(16, 4, motif_len=6, seed=3, length=64)
    x, y = ds.scaled(), ds.labels
    g = Genome((Block(16, 7, 1, "same", "max", 2), Block(16, 5)), Head("global_avg", 0, 4))
    net = Network(g, seed=0, input_len=64)
    cfg = TrainConfig(max_epochs=150, lr0=1e-2, batch_size=16, early_stop_patience=150,
                      plateau_patience=150, multi_start=1)
    out = train(net, (x, y), (x, y), cfg)
    assert net.evaluate(x, y)[1] == 1.0
    assert out.best_val_accuracy == 1.0


def test_multi_start_keeps_best_and_restores_weights():
    ds = motif_dataset(10, 2, motif_len=4, seed=1, length=32)
    x, y = ds.scaled(), ds.labels
    g = Genome((Block(4, 3),), Head("global_avg", 0, 2))
    cfg = TrainConfig(max_epochs=5, lr0=1e-2, batch_size=8, multi_start=3)
    net, out = multi_start_train(g, ((x, y), (x, y)), cfg, seed=10, input_len=32)
    singles = []
    for i in range(3):
        n = Network(g, seed=10 + i, input_len=32)
        singles.append(train(n, (x, y), (x, y), cfg, seed=10 + i))
    best = min(range(3), key=lambda i: (-singles[i].best_val_accuracy, singles[i].best_val_loss, i))
    assert out.seed == 10 + best
    assert out.best_val_loss == singles[best].best_val_loss
    assert net.evaluate(x, y)[0] == pytest.approx(out.best_val_loss, rel=1e-5)


def test_predict_ties_to_lowest_index():
    assert list(predict_from_logits([[1, 3, 3], [2, 2, 2], [0, -1, 5]])) == [1, 0, 2]


def test_model_round_trip(tmp_path):
    g = Genome((Block(4, 5, 2, "valid", "avg", 2, 0.1),), Head("flatten", 8, 5))
    net = Network(g, seed=3, input_len=784)
    for layer in net.layers:
        if isinstance(layer, BatchNorm):
            layer.mean += 0.3
    save_model(tmp_path / "m.bin", net)
    back = load_model(tmp_path / "m.bin")
    assert back.genome == g
    x = np.random.default_rng(0).random((3, 784))
    assert np.array_equal(back.logits(x), net.logits(x))
