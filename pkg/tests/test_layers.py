import numpy as np
import pytest

from bistream import tensor as T
from bistream.layers import (Adam, Conv2d, Linear, LstmCell, accumulate_gradients,
                             softmax_cross_entropy, xavier_uniform)
from bistream.tensor import ContractError, Tensor, backward, grad_check


def naive_conv2d(x, w, b, stride, padding):
    """Direct six-nested-loop cross-correlation oracle."""
    bsz, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (wd + 2 * padding - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((bsz, cout, oh, ow), dtype=x.dtype)
    for n in range(bsz):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for ki in range(k):
                            for kj in range(k):
                                acc += x.dtype.type(
                                    xp[n, c, i * stride + ki, j * stride + kj] * w[o, c, ki, kj])
                    out[n, o, i, j] = acc + b[o]
    return out


def test_conv_identity_kernel():
    x = Tensor(np.random.default_rng(0).random((1, 1, 5, 5)))
    w = Tensor(np.ones((1, 1, 1, 1)))
    b = Tensor(np.zeros(1))
    out = T.conv2d(x, w, b)
    assert np.allclose(out.data, x.data)


def test_conv_matches_naive_loop_exactly():
    rng = np.random.default_rng(1)
    with T.use_dtype(np.float64):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        for stride, pad in [(1, 0), (1, 1), (2, 1)]:
            ours = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad).data
            oracle = naive_conv2d(x, w, b, stride, pad)
            assert np.allclose(ours, oracle, atol=1e-12), (stride, pad)


def test_conv_gradients_match_finite_differences():
    rng = np.random.default_rng(2)
    with T.use_dtype(np.float64):
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        layer = Conv2d(2, 3, kernel=3, stride=1, padding=1, rng=rng)
        mix = rng.normal(size=(2, 3, 4, 4))

        def loss_from(which):
            def f(_):
                return T.reduce_sum(layer(x) * mix)
            return f

        for p in [layer.weight, layer.bias, x]:
            report = grad_check(loss_from(p), p, tol=1e-4)
            assert report.passed, (p.name, report.max_rel_err)


def test_conv_shape_mismatch_message():
    layer = Conv2d(3, 4)
    with pytest.raises(ContractError, match="mismatch"):
        layer(Tensor(np.zeros((1, 2, 5, 5))))


def test_lstm_all_zero_weights_and_state():
    cell = LstmCell(3, 4)
    for p in cell.params().values():
        p.data = np.zeros_like(p.data)
    h, c = cell.initial_state()
    h2, c2 = cell.step(Tensor(np.ones(3)), h, c)
    assert np.allclose(h2.data, 0.0)
    assert np.allclose(c2.data, 0.0)


def test_lstm_zero_weights_nonzero_cell():
    cell = LstmCell(3, 4)
    for p in cell.params().values():
        p.data = np.zeros_like(p.data)
    c0 = np.array([0.5, -1.0, 2.0, 0.0], dtype=np.float32)
    h2, c2 = cell.step(Tensor(np.zeros(3)), Tensor(np.zeros(4)), Tensor(c0))
    assert np.allclose(c2.data, 0.5 * c0, atol=1e-6)
    assert np.allclose(h2.data, 0.5 * np.tanh(0.5 * c0), atol=1e-6)


def test_lstm_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    with T.use_dtype(np.float64):
        cell = LstmCell(3, 4, rng=rng)
        x = Tensor(rng.normal(size=3))
        h0 = Tensor(rng.normal(size=4))
        c0 = Tensor(rng.normal(size=4))
        mix = rng.normal(size=4)

        def f(_):
            h1, c1 = cell.step(x, h0, c0)
            h2, c2 = cell.step(x, h1, c1)
            return T.reduce_sum(h2 * mix) + T.reduce_sum(c2)

        for name, p in cell.params().items():
            report = grad_check(f, p, tol=1e-4)
            assert report.passed, (name, report.max_rel_err)


def test_lstm_forget_bias_initialized_to_one():
    cell = LstmCell(2, 5)
    assert np.allclose(cell.bias.data[5:10], 1.0)
    assert np.allclose(cell.bias.data[:5], 0.0)


def test_cross_entropy_perfect_prediction():
    logits = Tensor(np.array([30.0, 0.0, 0.0]))
    assert softmax_cross_entropy(logits, 0).item() < 1e-8


def test_cross_entropy_uniform_logits():
    loss = softmax_cross_entropy(Tensor(np.zeros(6)), 3)
    assert abs(loss.item() - np.log(6.0)) < 1e-6


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    rng = np.random.default_rng(4)
    with T.use_dtype(np.float64):
        logits = rng.normal(size=5)
        x = Tensor(logits, requires_grad=True)
        backward(softmax_cross_entropy(x, 2))
        p = np.exp(logits - logits.max())
        p /= p.sum()
        p[2] -= 1.0
        assert np.allclose(x.grad, p, atol=1e-12)
        report = grad_check(lambda t: softmax_cross_entropy(t, 2),
                            Tensor(logits, requires_grad=True), tol=1e-6)
        assert report.passed


def test_cross_entropy_label_out_of_range():
    with pytest.raises(ContractError):
        softmax_cross_entropy(Tensor(np.zeros(4)), 4)


def test_softmax_is_a_simplex_point():
    rng = np.random.default_rng(5)
    for _ in range(20):
        p = T.softmax(Tensor(rng.normal(scale=5.0, size=8))).data
        assert (p >= 0).all()
        assert abs(p.sum() - 1.0) < 1e-6


def test_adam_zero_gradient_leaves_parameter():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = Adam({"p": p})
    p.grad = np.zeros(2)
    opt.step()
    assert np.allclose(p.data, [1.0, 2.0])


def test_adam_first_step_cancels_bias_correction():
    p = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    opt = Adam({"p": p}, lr=1e-3)
    p.grad = np.array([1.0])
    opt.step()
    assert abs(p.data[0] + 1e-3 / (1 + 1e-8)) < 1e-12


def test_adam_default_hyperparameters():
    opt = Adam({})
    assert (opt.lr, opt.beta1, opt.beta2, opt.eps) == (1e-3, 0.9, 0.999, 1e-8)


def test_adam_rejects_nonfinite_gradient():
    p = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam({"theta": p})
    p.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="theta"):
        opt.step()


def _linreg_setup(seed=6):
    rng = np.random.default_rng(seed)
    w = Tensor(np.zeros(3), requires_grad=True, dtype=np.float64)
    xs = [rng.normal(size=3) for _ in range(4)]
    ys = [float(x @ np.array([1.0, -2.0, 0.5])) for x in xs]

    def loss_fn(sample):
        x, y = sample
        pred = T.reduce_sum(w * x)
        return (pred - y) * (pred - y)

    return w, list(zip(xs, ys)), loss_fn


def test_accumulation_of_one_equals_per_sample_steps():
    w1, samples, loss1 = _linreg_setup()
    opt1 = Adam({"w": w1})
    accumulate_gradients(samples, loss1, opt1, accumulation_size=1)

    w2, samples2, loss2 = _linreg_setup()
    opt2 = Adam({"w": w2})
    for s in samples2:
        opt2.zero_grad()
        T.backward(loss2(s))
        opt2.step()
    assert np.allclose(w1.data, w2.data, atol=1e-12)


def test_accumulation_of_identical_pair_equals_single_sample_step():
    w1, samples, loss1 = _linreg_setup()
    s = samples[0]
    opt1 = Adam({"w": w1})
    accumulate_gradients([s, s], loss1, opt1, accumulation_size=2)

    w2, _, loss2 = _linreg_setup()
    opt2 = Adam({"w": w2})
    accumulate_gradients([s], loss2, opt2, accumulation_size=1)
    assert np.allclose(w1.data, w2.data, atol=1e-12)


def test_accumulation_remainder_triggers_final_step():
    # 5 samples at accumulation 2 -> 3 steps (2 + 2 + remainder 1)
    w, samples, loss_fn = _linreg_setup()
    opt = Adam({"w": w})
    accumulate_gradients(samples + samples[:1], loss_fn, opt, accumulation_size=2)
    assert opt.t == 3


def test_accumulation_empty_batch_warns():
    w, _, loss_fn = _linreg_setup()
    opt = Adam({"w": w})
    with pytest.warns(UserWarning):
        out = accumulate_gradients([], loss_fn, opt)
    assert out == [] and opt.t == 0


def test_xavier_bounds():
    rng = np.random.default_rng(7)
    vals = xavier_uniform((1000,), 10, 30, rng)
    bound = np.sqrt(6.0 / 40.0)
    assert np.abs(vals).max() <= bound
    assert np.abs(vals).max() > 0.8 * bound


def test_training_loss_mostly_monotone_over_50_steps():
    # 8-sample toy classification set, lr 1e-3; allow <= 5 one-step increases
    rng = np.random.default_rng(8)
    xs = rng.normal(size=(8, 4))
    labels = (xs[:, 0] + xs[:, 1] > 0).astype(int)
    lin1 = Linear(4, 8, rng=rng)
    lin2 = Linear(8, 2, rng=rng)
    params = {**lin1.params("l1."), **lin2.params("l2.")}
    opt = Adam(params, lr=1e-3)

    def epoch_loss():
        total = 0.0
        opt.zero_grad()
        for x, y in zip(xs, labels):
            loss = softmax_cross_entropy(lin2(T.tanh(lin1(Tensor(x)))), int(y))
            total += loss.item()
            T.backward(loss)
        for p in params.values():
            p.grad /= len(xs)
        opt.step()
        return total / len(xs)

    losses = [epoch_loss() for _ in range(50)]
    violations = sum(1 for a, b in zip(losses, losses[1:]) if b > a + 1e-9)
    assert violations <= 5, f"{violations} increases in 50 steps"
