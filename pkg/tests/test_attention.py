import numpy as np
import pytest

from bistream import tensor as T
from bistream.attention import (NonLocalBlock, TemporalAttention, attention_heatmap,
                                gamma_schedule, write_pgm)
from bistream.tensor import ContractError, Tensor, grad_check


def make_block(channels, rng, gamma=0.5):
    """Non-local block with a randomized (non-zero) w_z for oracle tests."""
    block = NonLocalBlock(channels, rng=rng)
    block.w_z.data = rng.normal(scale=0.5, size=block.w_z.shape).astype(block.w_z.dtype)
    block.gamma = gamma
    return block


def nonlocal_oracle(x, theta, phi, g, w_z, gamma):
    """Literal double loop over all space-time positions."""
    t, c, h, w = x.shape
    flat = x.transpose(0, 2, 3, 1).reshape(-1, c)
    n = flat.shape[0]
    y = np.zeros((n, theta.shape[1]))
    for i in range(n):
        scores = np.array([flat[i] @ theta @ (phi.T @ flat[j]) for j in range(n)])
        weights = np.exp(scores - scores.max())
        weights /= weights.sum()
        for j in range(n):
            y[i] += weights[j] * (flat[j] @ g)
    z = y @ w_z
    return x + gamma * z.reshape(t, h, w, c).transpose(0, 3, 1, 2)


def test_gamma_zero_is_bitwise_identity():
    rng = np.random.default_rng(0)
    block = make_block(4, rng, gamma=0.0)
    for _ in range(100):
        x = Tensor(rng.normal(size=(2, 4, 3, 3)).astype(np.float32))
        out = block(x)
        assert out.data is x.data or np.array_equal(out.data, x.data)


def test_single_position_degenerate_case():
    rng = np.random.default_rng(1)
    with T.use_dtype(np.float64):
        block = make_block(4, rng, gamma=0.7)
        x = rng.normal(size=(1, 4, 1, 1))
        out = block(Tensor(x))
        vec = x.reshape(4)
        expected = vec + 0.7 * ((vec @ block.g.data) @ block.w_z.data)
        assert np.allclose(out.data.reshape(4), expected, atol=1e-12)


def test_matches_literal_double_loop_oracle():
    rng = np.random.default_rng(2)
    with T.use_dtype(np.float64):
        block = make_block(2, rng, gamma=0.9)
        x = rng.normal(size=(2, 2, 2, 2))
        ours = block(Tensor(x)).data
        oracle = nonlocal_oracle(x, block.theta.data, block.phi.data,
                                 block.g.data, block.w_z.data, 0.9)
    assert np.abs(ours - oracle).max() < 1e-10


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(12, 6)).astype(np.float32)
    attn = T.softmax(T.matmul(Tensor(x), T.transpose(Tensor(x))), axis=1).data
    assert np.allclose(attn.sum(axis=1), 1.0, atol=1e-6)


def test_position_equivariance_under_permutation():
    # permuting the T*H*W positions of the input permutes the output the
    # same way (the non-local sum has no positional encoding)
    rng = np.random.default_rng(4)
    with T.use_dtype(np.float64):
        block = make_block(4, rng, gamma=0.8)
        t, c, h, w = 2, 4, 2, 3
        x = rng.normal(size=(t, c, h, w))
        n = t * h * w
        perm = rng.permutation(n)

        flat = x.transpose(0, 2, 3, 1).reshape(n, c)
        xp = flat[perm].reshape(t, h, w, c).transpose(0, 3, 1, 2)

        out = block(Tensor(x)).data.transpose(0, 2, 3, 1).reshape(n, c)
        out_p = block(Tensor(xp)).data.transpose(0, 2, 3, 1).reshape(n, c)
    assert np.allclose(out[perm], out_p, atol=1e-12)


def test_nonlocal_rejects_odd_channels():
    with pytest.raises(ContractError):
        NonLocalBlock(5)


def test_nonlocal_full_gradient_check():
    rng = np.random.default_rng(5)
    with T.use_dtype(np.float64):
        block = make_block(4, rng, gamma=0.6)
        x = Tensor(rng.normal(size=(2, 4, 3, 3)), requires_grad=True)
        mix = rng.normal(size=(2, 4, 3, 3))

        def f(_):
            return T.reduce_sum(block(x) * mix)

        for p in [block.theta, block.phi, block.g, block.w_z, x]:
            report = grad_check(f, p, tol=1e-4)
            assert report.passed, (p.name, report.max_rel_err)


def test_temporal_attention_single_frame_passthrough():
    rng = np.random.default_rng(6)
    att = TemporalAttention(5, rng=rng)
    h = Tensor(rng.normal(size=5).astype(np.float32))
    out = att([h])
    assert np.allclose(out.data, h.data, atol=1e-7)


def test_temporal_attention_identical_states():
    rng = np.random.default_rng(7)
    att = TemporalAttention(4, rng=rng)
    h = rng.normal(size=4).astype(np.float32)
    out = att([Tensor(h)] * 5)
    assert np.allclose(out.data, h, atol=1e-6)


def test_temporal_attention_matches_manual_computation():
    rng = np.random.default_rng(8)
    with T.use_dtype(np.float64):
        att = TemporalAttention(3, rng=rng)
        states = rng.normal(size=(3, 3))
        out = att([Tensor(s) for s in states]).data
        scores = states @ att.weight.data
        w = np.exp(scores - scores.max())
        w /= w.sum()
        assert np.allclose(out, w @ states, atol=1e-12)


def test_temporal_attention_output_in_convex_hull():
    rng = np.random.default_rng(9)
    att = TemporalAttention(6, rng=rng)
    for _ in range(10):
        states = rng.normal(size=(4, 6)).astype(np.float32)
        out = att([Tensor(s) for s in states]).data
        assert (out >= states.min(axis=0) - 1e-6).all()
        assert (out <= states.max(axis=0) + 1e-6).all()


def test_temporal_attention_weights_are_probabilities():
    rng = np.random.default_rng(10)
    att = TemporalAttention(4, rng=rng)
    weights = att.frame_weights([Tensor(rng.normal(size=4).astype(np.float32)) for _ in range(7)])
    assert (weights >= 0).all()
    assert abs(weights.sum() - 1.0) < 1e-6


def test_temporal_attention_rejects_empty_sequence():
    att = TemporalAttention(4)
    with pytest.raises(ContractError):
        att([])


def test_temporal_attention_gradients():
    rng = np.random.default_rng(11)
    with T.use_dtype(np.float64):
        att = TemporalAttention(4, rng=rng)
        states = [Tensor(rng.normal(size=4)) for _ in range(3)]
        mix = rng.normal(size=4)

        def f(_):
            return T.reduce_sum(att(states) * mix)

        report = grad_check(f, att.weight, tol=1e-4)
        assert report.passed, report.max_rel_err


def test_gamma_schedule_values():
    assert gamma_schedule(-1, 10) == 0.0
    assert abs(gamma_schedule(0, 10) - 0.1) < 1e-12
    assert gamma_schedule(9, 10) == 1.0
    assert gamma_schedule(99, 10) == 1.0
    assert gamma_schedule(0, 1) == 1.0
    mids = [gamma_schedule(e, 8) for e in range(8)]
    assert all(b >= a for a, b in zip(mids, mids[1:]))


def test_heatmap_single_channel():
    v = np.array([[0.0, -2.0], [1.0, 4.0]])
    hm = attention_heatmap(v[None])
    expected = np.abs(v)
    expected = (expected - expected.min()) / (expected.max() - expected.min())
    assert np.allclose(hm, expected)


def test_heatmap_opposite_channels():
    rng = np.random.default_rng(12)
    v = rng.normal(size=(5, 5))
    hm = attention_heatmap(np.stack([v, -v]))
    expected = 2 * np.abs(v)
    expected = (expected - expected.min()) / (expected.max() - expected.min())
    assert np.allclose(hm, expected)


def test_heatmap_matches_channel_loop_oracle():
    rng = np.random.default_rng(13)
    feats = rng.normal(size=(4, 5, 5))
    acc = np.zeros((5, 5))
    for m in range(4):
        acc += np.abs(feats[m])
    expected = (acc - acc.min()) / (acc.max() - acc.min())
    assert np.allclose(attention_heatmap(feats), expected, atol=1e-12)


def test_heatmap_all_zero_guard():
    assert np.array_equal(attention_heatmap(np.zeros((3, 4, 4))), np.zeros((4, 4)))


def test_pgm_export(tmp_path):
    hm = np.linspace(0, 1, 12).reshape(3, 4)
    path = tmp_path / "map.pgm"
    write_pgm(path, hm)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n4 3\n255\n")
    pixels = np.frombuffer(raw[len(b"P5\n4 3\n255\n"):], dtype=np.uint8)
    assert pixels[0] == 0 and pixels[-1] == 255 and len(pixels) == 12
