import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from krigeplan.acceptance import gradient_check_errors, tiny_net
from krigeplan.nn import (DESK_CHANNELS, PAPER_CHANNELS, Adam, CheckpointError, QNetSpec, QNetwork, leaky_relu,
                          load_checkpoint, maxpool2, maxpool2_backward, save_checkpoint)


def lrelu(v, a=0.01):
    return v if v >= 0 else a * v


def naive_forward(params, spec, grid, tn):
    """One sample, explicit loops everywhere."""
    x = [[[float(grid[c][i][j]) for j in range(spec.size)] for i in range(spec.size)] for c in range(3)]
    for layer in range(len(spec.channels)):
        w, b = params[f"conv{layer}.w"], params[f"conv{layer}.b"]
        cin, n = len(x), len(x[0])
        conv = []
        for o in range(w.shape[0]):
            plane = []
            for i in range(n):
                row = []
                for j in range(n):
                    acc = b[o]
                    for c in range(cin):
                        for di in range(3):
                            for dj in range(3):
                                ii, jj = i + di - 1, j + dj - 1
                                if 0 <= ii < n and 0 <= jj < n:
                                    acc += w[o, c, di, dj] * x[c][ii][jj]
                    row.append(lrelu(acc))
                plane.append(row)
            conv.append(plane)
        x = [[[max(p[2 * i][2 * j], p[2 * i][2 * j + 1], p[2 * i + 1][2 * j], p[2 * i + 1][2 * j + 1])
               for j in range(n // 2)] for i in range(n // 2)] for p in conv]
    flat = [x[c][i][j] for c in range(len(x)) for i in range(len(x[0])) for j in range(len(x[0]))]
    emb = [lrelu(tn * params["scalar.w"][0, k] + params["scalar.b"][k]) for k in range(spec.scalar_width)]
    v = flat + emb
    hid = [lrelu(params["hidden.b"][m] + sum(v[i] * params["hidden.w"][i, m] for i in range(len(v))))
           for m in range(spec.hidden)]
    return [params["out.b"][a] + sum(hid[m] * params["out.w"][m, a] for m in range(spec.hidden))
            for a in range(spec.n_actions)]


class TestLeakyRelu:
    def test_values(self):
        assert leaky_relu(5.0) == 5.0
        assert leaky_relu(-1.0) == pytest.approx(-0.01)
        assert leaky_relu(0.0) == 0.0
        assert leaky_relu(-2.0, alpha=0.2) == pytest.approx(-0.4)


class TestArchitecture:
    def test_paper_flatten_1024(self):
        spec = QNetSpec(size=32, channels=PAPER_CHANNELS)
        assert spec.flatten_len == 1024
        assert spec.layer_shapes()["hidden.w"] == (1032, 1024)

    def test_desk_flatten(self):
        spec = QNetSpec(size=16, channels=DESK_CHANNELS)
        assert spec.flatten_len == DESK_CHANNELS[-1]

    @pytest.mark.parametrize("size", [8, 24, 33])
    def test_bad_size(self, size):
        with pytest.raises(ValueError):
            QNetSpec(size=size)

    def test_wrong_input_shape(self):
        net = QNetwork(QNetSpec(size=16, channels=(2, 2, 2, 2), hidden=4))
        with pytest.raises(ValueError):
            net.forward(np.zeros((1, 3, 32, 32)), [0.5])

    def test_param_shape_mismatch(self):
        spec = QNetSpec(size=16, channels=(2, 2, 2, 2), hidden=4)
        params = QNetwork(spec).params
        params["out.w"] = np.zeros((3, 3))
        with pytest.raises(ValueError):
            QNetwork(spec, params)


class TestForward:
    def test_matches_naive_loops(self):
        net, grids, tn, _ = tiny_net(3)
        q = net.forward(grids, tn)
        for n in range(len(grids)):
            ref = naive_forward(net.params, net.spec, grids[n], tn[n])
            assert np.max(np.abs(q[n] - np.array(ref))) < 1e-12

    def test_zero_input_zero_bias(self):
        spec = QNetSpec(size=16, n_actions=3, channels=(4, 4, 4, 4), hidden=8)
        q = QNetwork(spec, seed=1).forward(np.zeros((2, 3, 16, 16)), [0.0, 0.0])
        assert np.all(q == 0.0)

    def test_pure(self):
        net, grids, tn, _ = tiny_net(0)
        before = {k: v.copy() for k, v in net.params.items()}
        g0 = grids.copy()
        net.forward(grids, tn)
        net.forward(grids, tn, cache=True)
        assert all(np.array_equal(before[k], net.params[k]) for k in before)
        assert np.array_equal(g0, grids)

    def test_single_sample_3d_input(self):
        net, grids, tn, _ = tiny_net(0)
        assert net.forward(grids[0], tn[:1]).shape == (1, 3)

    def test_seeded_init(self):
        spec = QNetSpec(size=16, channels=(2, 2, 2, 2), hidden=4)
        a, b = QNetwork(spec, seed=5), QNetwork(spec, seed=5)
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


class TestBackward:
    def test_gradient_check(self):
        errs = gradient_check_errors(seed=0)
        assert max(errs.values()) < 1e-4, errs

    def test_zero_upstream(self):
        net, grids, tn, _ = tiny_net(1)
        _, cache = net.forward(grids, tn, cache=True)
        g = net.backward(cache, np.zeros((2, 3)))
        assert set(g) == set(net.params)
        assert all(np.all(v == 0) and v.shape == net.params[k].shape for k, v in g.items())

    def test_dense_closed_form(self):
        # with every conv weight and bias zero the conv branch outputs zeros, so
        # Q = w2 * lrelu(w1 * lrelu(ws * tn + bs) + b1) + b2 in the 1x1 case
        spec = QNetSpec(size=16, n_actions=1, channels=(1, 1, 1, 1), scalar_width=1, hidden=1)
        net = QNetwork(spec, seed=0)
        for k in net.params:
            net.params[k][...] = 0.0
        ws, bs, w1, b1, w2, b2 = 0.7, -0.2, 1.3, 0.05, -0.9, 0.4
        net.params["scalar.w"][0, 0], net.params["scalar.b"][0] = ws, bs
        net.params["hidden.w"][1, 0], net.params["hidden.b"][0] = w1, b1
        net.params["out.w"][0, 0], net.params["out.b"][0] = w2, b2
        tn = 0.6
        s = ws * tn + bs
        h = w1 * s + b1
        q, cache = net.forward(np.zeros((1, 3, 16, 16)), [tn], cache=True)
        assert q[0, 0] == pytest.approx(w2 * h + b2, abs=1e-15)
        g = net.backward(cache, np.ones((1, 1)))
        assert g["out.w"][0, 0] == pytest.approx(h)
        assert g["out.b"][0] == pytest.approx(1.0)
        assert g["hidden.w"][1, 0] == pytest.approx(w2 * s)
        assert g["hidden.b"][0] == pytest.approx(w2)
        assert g["scalar.w"][0, 0] == pytest.approx(w2 * w1 * tn)
        assert g["scalar.b"][0] == pytest.approx(w2 * w1)

    def test_maxpool_ties_route_to_first(self):
        x = np.ones((1, 1, 2, 2))
        out, arg = maxpool2(x)
        dx = maxpool2_backward(np.array([[[[3.0]]]]), arg, x.shape)
        assert out[0, 0, 0, 0] == 1.0
        assert dx[0, 0].tolist() == [[3.0, 0.0], [0.0, 0.0]]


class TestAdam:
    def test_zero_gradient_unchanged(self):
        p = {"w": np.array([1.5, -2.0])}
        Adam(lr=0.1).step(p, {"w": np.zeros(2)})
        assert p["w"].tolist() == [1.5, -2.0]

    def test_first_step(self):
        p = {"w": np.array([0.0])}
        Adam(lr=0.1).step(p, {"w": np.array([1.0])})
        assert p["w"][0] == pytest.approx(-0.1, rel=1e-6)

    def test_non_finite_skipped(self):
        opt = Adam(lr=0.1)
        p = {"w": np.array([1.0])}
        opt.step(p, {"w": np.array([np.nan])})
        assert p["w"][0] == 1.0 and opt.skipped == 1 and opt.t == 0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            Adam().step({"w": np.zeros(2)}, {"w": np.zeros(3)})

    @settings(max_examples=20, deadline=None)
    @given(st.floats(-5, 5).filter(lambda v: abs(v) > 0.5), st.floats(0.5, 4))
    def test_quadratic_descends(self, x0, curv):
        # Adam moves about lr per step, so 40 steps at lr 0.01 stay short of the minimum
        p = {"w": np.array([x0])}
        opt = Adam(lr=0.01)
        losses = []
        for _ in range(40):
            losses.append(0.5 * curv * p["w"][0] ** 2)
            opt.step(p, {"w": curv * p["w"]})
        tail = losses[3:]
        assert all(b < a for a, b in zip(tail, tail[1:]))

    def test_quadratic_converges(self):
        p = {"w": np.array([2.0])}
        opt = Adam(lr=0.05)
        for _ in range(2000):
            opt.step(p, {"w": 3.0 * p["w"]})
        assert abs(p["w"][0]) < 1e-3


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net, grids, tn, _ = tiny_net(2)
        path = save_checkpoint(tmp_path / "n.npz", net, {"note": "x"})
        back, meta = load_checkpoint(path, net.spec.fingerprint())
        assert meta["note"] == "x"
        assert np.array_equal(back.forward(grids, tn), net.forward(grids, tn))

    def test_fingerprint_rejected(self, tmp_path):
        net, *_ = tiny_net(0)
        path = save_checkpoint(tmp_path / "n.npz", net)
        other = QNetSpec(size=16, n_actions=2, channels=(2, 2, 2, 2), hidden=16)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, other.fingerprint())

    def test_channel_order_in_fingerprint(self):
        a = QNetSpec(size=16, channels=(2, 2, 2, 2))
        b = QNetSpec(size=16, channels=(2, 2, 2, 2), channel_order=("variance", "mean", "position"))
        assert a.fingerprint() != b.fingerprint()
