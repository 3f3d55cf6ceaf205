"""Tensor ops, the backward tape, Adam, parameter files and the rng."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pmdm_pet import tensorcore as tc
from pmdm_pet.tensorcore import Adam, ParamStore, Rng, load_arrays, save_arrays
from pmdm_pet.tensorcore.gradcheck import directional_error


def naive_conv2d(x, w, b, stride, padding):
    """Six nested loops, straight from the definition of cross-correlation."""
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + wd] = x
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for i in range(n):
        for o in range(k):
            for y in range(ho):
                for z in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for dy in range(kh):
                            for dz in range(kw):
                                acc += xp[i, ci, y * stride + dy, z * stride + dz] * w[o, ci, dy, dz]
                    out[i, o, y, z] = acc
    return out


class TestConv2d:
    def test_ones_center_is_nine(self):
        out = tc.conv2d(tc.tensor(np.ones((1, 1, 3, 3))), tc.tensor(np.ones((1, 1, 3, 3))), None, 1, 1)
        assert out.data[0, 0, 1, 1] == 9.0

    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((2, 3, 6, 5)).astype(np.float32)
        w = np.zeros((3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        np.testing.assert_array_equal(tc.conv2d(tc.tensor(x), tc.tensor(w), None, 1, 1).data, x)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 8, 8))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        with tc.default_dtype(np.float64):
            got = tc.conv2d(tc.tensor(x), tc.tensor(w), tc.tensor(b), 1, 1).data
        ref = naive_conv2d(x, w, b, 1, 1)
        assert np.abs(got - ref).max() / np.abs(ref).max() < 1e-6

    def test_hundred_random_cases(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n, c, k = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
            ks = int(rng.choice([1, 3, 5]))
            h, w = rng.integers(ks, 9, size=2)
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, ks // 2 + 1))
            x = rng.standard_normal((n, c, h, w))
            wt = rng.standard_normal((k, c, ks, ks))
            b = rng.standard_normal(k)
            with tc.default_dtype(np.float64):
                got = tc.conv2d(tc.tensor(x), tc.tensor(wt), tc.tensor(b), stride, pad).data
            ref = naive_conv2d(x, wt, b, stride, pad)
            assert got.shape == ref.shape
            np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-9)

    def test_output_size(self):
        out = tc.conv2d(tc.tensor(np.zeros((1, 2, 9, 7))), tc.tensor(np.zeros((3, 2, 3, 3))), None, 2, 1)
        assert out.shape == (1, 3, 5, 4)

    def test_rejects_even_kernel_and_channel_mismatch(self):
        with pytest.raises(ValueError):
            tc.conv2d(tc.tensor(np.zeros((1, 1, 4, 4))), tc.tensor(np.zeros((1, 1, 2, 2))))
        with pytest.raises(ValueError):
            tc.conv2d(tc.tensor(np.zeros((1, 2, 4, 4))), tc.tensor(np.zeros((1, 3, 3, 3))))

    def test_non_finite_output_raises(self):
        x = np.ones((1, 1, 3, 3), dtype=np.float32)
        x[0, 0, 1, 1] = np.inf
        with pytest.raises(tc.NonFiniteError):
            tc.conv2d(tc.tensor(x), tc.tensor(np.ones((1, 1, 3, 3))), None, 1, 1)


class TestUpsample:
    def test_replication(self):
        out = tc.nearest_upsample2x(tc.tensor(np.array([[[[1, 2], [3, 4]]]], dtype=np.float32))).data[0, 0]
        np.testing.assert_array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_constant(self):
        out = tc.nearest_upsample2x(tc.tensor(np.full((1, 2, 3, 3), 2.5))).data
        assert (out == 2.5).all() and out.shape == (1, 2, 6, 6)

    def test_index_oracle(self):
        x = np.random.default_rng(3).standard_normal((1, 1, 4, 4)).astype(np.float32)
        out = tc.nearest_upsample2x(tc.tensor(x)).data[0, 0]
        for i in range(8):
            for j in range(8):
                assert out[i, j] == x[0, 0, i // 2, j // 2]


class TestBatchNorm:
    def test_standardized_input_passes_through(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((4, 3, 5, 5))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        out = tc.batch_norm2d(tc.tensor(x), tc.tensor(np.ones(3)), tc.tensor(np.zeros(3)), tc.RunningStats(3), True)
        np.testing.assert_allclose(out.data, x, rtol=1e-5, atol=1e-6)

    def test_zero_gamma_gives_beta(self):
        x = np.random.default_rng(5).standard_normal((2, 3, 4, 4))
        beta = np.array([0.5, -1.0, 2.0])
        out = tc.batch_norm2d(tc.tensor(x), tc.tensor(np.zeros(3)), tc.tensor(beta), tc.RunningStats(3), True)
        np.testing.assert_allclose(out.data, np.broadcast_to(beta.reshape(1, 3, 1, 1), x.shape), atol=1e-7)

    def test_train_mode_statistics(self):
        x = np.random.default_rng(6).normal(3.0, 2.0, (4, 2, 6, 6))
        out = tc.batch_norm2d(tc.tensor(x), tc.tensor(np.ones(2)), tc.tensor(np.zeros(2)), tc.RunningStats(2), True)
        np.testing.assert_allclose(out.data.mean(axis=(0, 2, 3)), 0.0, atol=1e-5)
        np.testing.assert_allclose(out.data.var(axis=(0, 2, 3)), 1.0, atol=1e-3)

    def test_running_stats_and_eval_mode(self):
        rs = tc.RunningStats(1, momentum=0.5)
        x = np.full((1, 1, 2, 2), 4.0)
        x[0, 0, 0, 0] = 0.0
        tc.batch_norm2d(tc.tensor(x), tc.tensor(np.ones(1)), tc.tensor(np.zeros(1)), rs, True)
        assert rs.mean[0] == pytest.approx(1.5)
        assert rs.var[0] == pytest.approx(0.5 + 0.5 * 4.0)
        out = tc.batch_norm2d(tc.tensor(x), tc.tensor(np.ones(1)), tc.tensor(np.zeros(1)), rs, False)
        np.testing.assert_allclose(out.data, (x - 1.5) / np.sqrt(2.5 + 1e-5), rtol=1e-5)

    def test_single_value_per_channel_rejected_in_training(self):
        with pytest.raises(ValueError):
            tc.batch_norm2d(tc.tensor(np.ones((1, 1, 1, 1))), tc.tensor(np.ones(1)), tc.tensor(np.zeros(1)), None, True)


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(tc.relu(tc.tensor(np.array([-1.0, 2.0]))).data, [0.0, 2.0])

    def test_leaky_relu(self):
        np.testing.assert_allclose(tc.leaky_relu(tc.tensor(np.array([-1.0, 2.0])), 0.1).data, [-0.1, 2.0])

    def test_silu(self):
        x = np.linspace(-4, 4, 9)
        np.testing.assert_allclose(tc.silu(tc.tensor(x)).data, x / (1 + np.exp(-x)), rtol=1e-6, atol=1e-7)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
    def test_mse_of_self_is_zero(self, values):
        x = np.array(values, dtype=np.float32)
        assert tc.mse(tc.tensor(x), x).item() == 0.0

    def test_mse_mean_reduction(self):
        assert tc.mse(tc.tensor(np.zeros(2)), np.ones(2)).item() == 1.0

    def test_linear(self):
        x = np.array([[1.0, 2.0]])
        w = np.array([[1.0, 0.0], [1.0, 1.0], [0.0, -1.0]])
        out = tc.linear(tc.tensor(x), tc.tensor(w), tc.tensor(np.array([0.0, 1.0, 0.0]))).data
        np.testing.assert_allclose(out, [[1.0, 4.0, -2.0]])

    def test_concat_channels(self):
        a, b = np.zeros((2, 1, 3, 3)), np.ones((2, 2, 3, 3))
        out = tc.concat_channels([tc.tensor(a), tc.tensor(b)])
        assert out.shape == (2, 3, 3, 3) and out.data[:, 1:].min() == 1.0

    def test_group_norm_statistics(self):
        x = np.random.default_rng(7).normal(2.0, 3.0, (2, 4, 5, 5))
        out = tc.group_norm(tc.tensor(x), 2, tc.tensor(np.ones(4)), tc.tensor(np.zeros(4))).data
        g = out.reshape(2, 2, -1)
        np.testing.assert_allclose(g.mean(axis=2), 0.0, atol=1e-5)
        np.testing.assert_allclose(g.var(axis=2), 1.0, atol=1e-3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            tc.linear(tc.tensor(np.zeros((1, 3))), tc.tensor(np.zeros((2, 2))))
        with pytest.raises(ValueError):
            tc.add(tc.tensor(np.zeros(3)), tc.tensor(np.zeros(4)))


class TestBackward:
    def test_mean_square(self):
        x = tc.tensor(np.array([1.0, 2.0]), requires_grad=True)
        (x * x).mean().backward()
        np.testing.assert_allclose(x.grad, [1.0, 2.0])

    def test_accumulates(self):
        x = tc.tensor(np.array([1.0, -3.0]), requires_grad=True)
        tc.mse(x, np.zeros(2)).backward()
        first = x.grad.copy()
        tc.mse(x, np.zeros(2)).backward()
        np.testing.assert_array_equal(x.grad, 2 * first)

    def test_diamond_graph_counts_each_edge_once(self):
        x = tc.tensor(np.array([3.0]), requires_grad=True)
        s = x * x  # shared subexpression
        out = (s + s * 2.0).sum()  # d/dx 3x^2 = 6x
        out.backward()
        np.testing.assert_allclose(x.grad, [18.0])

    def test_non_scalar_rejected(self):
        x = tc.tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_disconnected_leaf_gets_no_gradient(self):
        x = tc.tensor(np.ones(2), requires_grad=True)
        y = tc.tensor(np.ones(2), requires_grad=True)
        (x * x).sum().backward()
        assert y.grad is None or not y.grad.any()

    def test_no_grad_records_nothing(self):
        x = tc.tensor(np.ones(2), requires_grad=True)
        with tc.no_grad():
            out = x * 3.0
        assert not out.requires_grad

    def test_conv_mse_matches_finite_differences(self):
        rng = np.random.default_rng(8)
        x = tc.tensor(rng.standard_normal((2, 3, 6, 6)))
        w = tc.tensor(rng.standard_normal((4, 3, 3, 3)))
        y = rng.standard_normal((2, 4, 6, 6))
        for _ in range(5):
            assert directional_error(lambda: tc.mse(tc.conv2d(x, w, None, 1, 1), y), [w], rng) < 1e-3

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_random_graphs_match_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = tc.tensor(rng.standard_normal((2, 2, 4, 4)))
        w = tc.tensor(rng.standard_normal((3, 2, 3, 3)) * 0.5)
        g = tc.tensor(rng.standard_normal(3) + 1.5)
        b = tc.tensor(rng.standard_normal(3))
        y = rng.standard_normal((2, 3, 8, 8))

        def loss():
            h = tc.group_norm(tc.conv2d(x, w, None, 1, 1), 3, g, b)
            return tc.mse(tc.nearest_upsample2x(tc.silu(h)), y)

        assert directional_error(loss, [x, w, g, b], rng) < 1e-3

    def test_kink_replay_requires_same_graph(self):
        x = tc.tensor(np.array([-1.0, 1.0]))
        with tc.record_kinks() as masks:
            tc.relu(x)
        with pytest.raises(RuntimeError), tc.replay_kinks(masks):
            tc.relu(x)
            tc.relu(x)


class TestAdam:
    def test_constant_gradient_steady_state_step_is_lr(self):
        ps = ParamStore()
        p = ps.add("w", np.zeros(3))
        opt = Adam(ps, lr=1e-2)
        g = np.array([0.5, -2.0, 1e-3], dtype=np.float32)
        prev = p.data.copy()
        for _ in range(200):
            p.grad = g.copy()
            opt.step()
            step = p.data - prev
            prev = p.data.copy()
        np.testing.assert_allclose(step, -1e-2 * np.sign(g), rtol=1e-3)

    def test_zero_gradient_no_decay_is_a_no_op(self):
        ps = ParamStore()
        p = ps.add("w", np.arange(4.0))
        opt = Adam(ps, lr=1e-1)
        for _ in range(5):
            p.grad = np.zeros(4, dtype=np.float32)
            opt.step()
        np.testing.assert_array_equal(p.data, np.arange(4.0))

    def test_weight_decay_enters_the_gradient(self):
        ps = ParamStore()
        p = ps.add("w", np.array([2.0]))
        opt = Adam(ps, lr=1e-3, weight_decay=1e-5)
        p.grad = np.zeros(1, dtype=np.float32)
        opt.step()
        assert p.data[0] < 2.0

    def test_default_hyperparameters(self):
        opt = Adam(ParamStore())
        assert (opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay) == (1e-4, 0.9, 0.999, 1e-8, 0.0)

    def test_state_round_trip_continues_identically(self, tmp_path):
        def run(restore_at=None):
            ps = ParamStore()
            p = ps.add("w", np.ones(5))
            opt = Adam(ps, lr=1e-2)
            rng = Rng(0)
            for i in range(6):
                if i == restore_at:
                    save_arrays(tmp_path / "s.pmdm", {**ps.state_arrays(), **opt.state_arrays()})
                    arrays = load_arrays(tmp_path / "s.pmdm")
                    ps = ParamStore()
                    p = ps.add("w", np.zeros(5))
                    ps.load_state_arrays(arrays)
                    opt = Adam(ps, lr=1e-2)
                    opt.load_state_arrays(arrays)
                p.grad = rng.normal(5)
                opt.step()
            return p.data

        np.testing.assert_array_equal(run(), run(restore_at=3))


class TestParamFile:
    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(9)
        arrays = {"a": rng.standard_normal((2, 3)).astype(np.float32), "b.c": np.arange(4, dtype=np.float32)}
        save_arrays(tmp_path / "w.pmdm", arrays)
        back = load_arrays(tmp_path / "w.pmdm")
        assert list(back) == ["a", "b.c"]
        for k in arrays:
            assert back[k].tobytes() == arrays[k].tobytes()

    def test_header_layout(self, tmp_path):
        save_arrays(tmp_path / "w.pmdm", {"x": np.array([1.0], dtype=np.float32)})
        raw = (tmp_path / "w.pmdm").read_bytes()
        assert raw[:4] == b"PMDM"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:12], "little") == 1
        assert raw[-4:] == np.float32(1.0).tobytes()

    def test_corrupt_file_rejected(self, tmp_path):
        path = tmp_path / "w.pmdm"
        save_arrays(path, {"x": np.ones(3, dtype=np.float32)})
        path.write_bytes(path.read_bytes() + b"\0")
        with pytest.raises(ValueError):
            load_arrays(path)
        path.write_bytes(b"NOPE" + bytes(8))
        with pytest.raises(ValueError):
            load_arrays(path)


class TestRng:
    def test_same_seed_same_stream(self):
        np.testing.assert_array_equal(Rng(5).normal(10), Rng(5).normal(10))

    def test_substreams_are_independent_of_draw_order(self):
        a = Rng(5)
        a.normal(100)
        np.testing.assert_array_equal(a.spawn("noise").normal(4), Rng(5).spawn("noise").normal(4))

    def test_named_substreams_differ(self):
        r = Rng(5)
        assert not np.array_equal(r.spawn("a").normal(4), r.spawn("b").normal(4))

    def test_state_round_trip(self):
        r = Rng(1)
        r.normal(3)
        state = r.get_state()
        x = r.normal(3)
        r.set_state(state)
        np.testing.assert_array_equal(r.normal(3), x)
