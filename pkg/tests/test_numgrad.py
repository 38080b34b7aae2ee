import io
import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from protoprop import numgrad as ng
from protoprop.errors import ContractError, ShapeError
from protoprop.numgrad import Tape, Tensor, backward, fd_check, gradient_report
from protoprop.protolayer import ce_loss
from protoprop.tensorio import MAGIC, load_tensors, read_tensor, save_tensors, tensor_to_bytes, write_tensor


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        b = Tensor([[3, 4], [5, 6]])
        np.testing.assert_array_equal(ng.matmul(Tensor(np.eye(2)), b).data, b.data)

    def test_column(self):
        a, b = np.array([[1.0, 2], [3, 4]]), np.array([[0.0], [1]])
        assert loop_matmul(a, b).tolist() == [[2.0], [4.0]]
        np.testing.assert_array_equal(ng.matmul(a, b).data, loop_matmul(a, b))

    def test_zero(self):
        out = ng.matmul(np.zeros((2, 3)), np.random.default_rng(0).normal(size=(3, 2)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 2)))

    def test_mismatch(self):
        with pytest.raises(ShapeError):
            ng.matmul(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_random_vs_loop(self):
        rng = np.random.default_rng(1)
        a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(ng.matmul(a, b).data, loop_matmul(a, b), atol=1e-12)


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ng.softmax([2.5, 2.5, 2.5]).data, [1 / 3] * 3, atol=1e-15)

    def test_saturation(self):
        np.testing.assert_allclose(ng.softmax([1000.0, 0.0]).data, [1.0, 0.0], atol=1e-12)

    def test_two(self):
        e1, e2 = math.exp(1), math.exp(2)
        oracle = [e1 / (e1 + e2), e2 / (e1 + e2)]
        np.testing.assert_allclose(oracle, [0.26894, 0.73106], atol=1e-5)
        np.testing.assert_allclose(ng.softmax([1.0, 2.0]).data, oracle, atol=1e-12)

    def test_temperature(self):
        np.testing.assert_allclose(ng.softmax([1.0, 2.0], temperature=2.0).data, ng.softmax([0.5, 1.0]).data)
        with pytest.raises(ContractError):
            ng.softmax([1.0], temperature=0.0)

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-1e6, 1e6)))
    def test_simplex(self, v):
        p = ng.softmax(v).data
        assert np.all(p >= 0) and np.all(p <= 1)
        assert abs(p.sum() - 1) < 1e-12


class TestLogsumexp:
    def test_cases(self):
        assert ng.logsumexp([0.0, 0.0]).item() == pytest.approx(math.log(2), abs=1e-15)
        assert ng.logsumexp([7.25]).item() == 7.25
        oracle = math.log(math.exp(1) + math.exp(2) + math.exp(3))
        assert oracle == pytest.approx(3.40760, abs=1e-5)
        assert ng.logsumexp([1.0, 2.0, 3.0]).item() == pytest.approx(oracle, abs=1e-12)

    def test_large(self):
        assert ng.logsumexp([1000.0, 1000.0]).item() == pytest.approx(1000 + math.log(2))


class TestBackward:
    def test_square(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape() as tape:
            y = (x * x).sum()
        assert backward(tape, y, [x])[x].tolist() == [6.0]

    def test_softmax_ce_fd(self):
        rng = np.random.default_rng(3)
        s = Tensor(rng.normal(size=6), requires_grad=True)
        assert fd_check(lambda: ce_loss(s, 2), [s]) < 1e-4

    def test_constant_output(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = (x * 0.0).sum() + 3.0
        report = backward(tape, y, [x])
        np.testing.assert_array_equal(report[x], np.zeros(3))

    def test_unreached_leaf_gets_zero(self):
        x = Tensor(np.ones(2), requires_grad=True)
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        with Tape() as tape:
            y = (x * 2.0).sum()
        np.testing.assert_array_equal(backward(tape, y, [x, w])[w], np.zeros((2, 2)))

    def test_non_scalar(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ContractError):
            backward(tape, y)

    def test_default_params_are_leaves(self):
        x = Tensor(np.ones(2), requires_grad=True)
        c = Tensor(np.ones(2))
        with Tape() as tape:
            y = (x * c).sum()
        assert tape.leaves == [x]
        report = backward(tape, y)
        assert report.params == [x] and report[x].shape == x.shape

    def test_linearity(self):
        rng = np.random.default_rng(4)
        w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        x = rng.normal(size=(5, 3))

        def f1():
            return (ng.relu(x @ w) ** 2).sum()

        def f2():
            return ng.logsumexp((x @ w).reshape(-1))

        reports = []
        for f in (f1, f2, lambda: f1() + f2()):
            with Tape() as tape:
                out = f()
            reports.append(backward(tape, out, [w])[w])
        np.testing.assert_allclose(reports[2], reports[0] + reports[1], rtol=1e-12, atol=1e-12)

    def test_no_recording_without_tape(self):
        x = Tensor([1.0], requires_grad=True)
        y = x * 2.0
        with Tape() as tape:
            pass
        assert len(tape) == 0 and y.requires_grad


class TestReplay:
    def test_bit_exact(self):
        rng = np.random.default_rng(5)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(6, 4)))
        with Tape() as tape:
            out = ng.logsumexp(ng.softmax(ng.relu(x @ w), axis=1).reshape(-1)) + (w * w).mean()
        first = [a.copy() for a in (n.output.data for n in tape.nodes)]
        replayed = tape.replay()
        for a, b in zip(first, replayed):
            assert a.tobytes() == b.tobytes()
        assert out.data.tobytes() == first[-1].tobytes()

    def test_topological(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = (x * 2.0).exp().sum()
        seen = {id(x)}
        for node in tape.nodes:
            for t in node.inputs:
                assert id(t) in seen or not t.requires_grad
            seen.add(id(node.output))


class TestFdCheck:
    def test_quadratic(self):
        rng = np.random.default_rng(6)
        a = rng.normal(size=(4, 4))
        q = a @ a.T
        x = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
        assert fd_check(lambda: (x.T @ (q @ x)).sum(), [x]) < 1e-7

    def test_linear(self):
        rng = np.random.default_rng(7)
        c = rng.normal(size=5)
        x = Tensor(rng.normal(size=5), requires_grad=True)
        assert fd_check(lambda: (x * c).sum(), [x]) < 1e-9

    def test_report_shapes(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        rep = gradient_report(lambda: (x**2).sum(), [x])
        assert rep[x].shape == x.shape and rep.max_rel_error < 1e-7

    def test_eps_positive(self):
        with pytest.raises(ContractError):
            fd_check(lambda: Tensor(0.0), [], eps=0.0)

    @pytest.mark.parametrize(
        "op",
        [
            lambda t: ng.exp(t).sum(),
            lambda t: ng.log(t * t + 1.0).sum(),
            lambda t: ng.sqrt(t * t + 1.0).mean(),
            lambda t: (t / (t * t + 2.0)).sum(),
            lambda t: t.max(axis=0).sum(),
            lambda t: t.min(axis=1).sum(),
            lambda t: ng.concat([t, t * 2.0], axis=1).sum(axis=0)[1:].sum(),
            lambda t: (t.T @ t).sum(),
            lambda t: t[np.array([0, 0, 2]), 1].sum(),
            lambda t: ng.softmax(t, axis=0)[0].sum() * 3.0,
        ],
    )
    def test_primitives(self, op):
        t = Tensor(np.random.default_rng(8).normal(size=(3, 4)), requires_grad=True)
        assert fd_check(lambda: op(t), [t]) < 1e-6

    def test_conv2d(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(2, 6, 6, 2)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 3, 2, 3)), requires_grad=True)
        assert fd_check(lambda: (ng.conv2d(x, w, stride=2, padding=1) ** 2).sum(), [x, w]) < 1e-6


def test_conv2d_matches_loop():
    rng = np.random.default_rng(10)
    x = rng.normal(size=(1, 5, 5, 2))
    w = rng.normal(size=(3, 3, 2, 4))
    out = ng.conv2d(x, w, stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 3, 3, 4))
    for i in range(3):
        for j in range(3):
            patch = xp[0, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
            for c in range(4):
                ref[0, i, j, c] = np.sum(patch * w[..., c])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_tapes_are_thread_local():
    errors = []

    def work(seed):
        try:
            rng = np.random.default_rng(seed)
            w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
            for _ in range(20):
                with Tape() as tape:
                    y = ((w @ w) ** 2).sum()
                g = backward(tape, y, [w])[w]
                ref = 2 * ((w.data @ w.data) @ w.data.T + w.data.T @ (w.data @ w.data))
                assert np.allclose(g, ref)
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(s,)) for s in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors


class TestSerialization:
    def test_header_layout(self):
        blob = tensor_to_bytes(np.arange(6.0).reshape(2, 3))
        assert blob[:4] == MAGIC
        assert int.from_bytes(blob[4:8], "little") == 2
        assert int.from_bytes(blob[8:16], "little") == 2
        assert int.from_bytes(blob[16:24], "little") == 3
        assert np.frombuffer(blob[24:], "<f8").tolist() == [0, 1, 2, 3, 4, 5]

    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(11)
        arrays = [rng.normal(size=(2, 3, 4)), np.array(5.0), np.zeros((0, 3))]
        save_tensors(tmp_path / "x.ppt", arrays)
        back = load_tensors(tmp_path / "x.ppt")
        for a, b in zip(arrays, back):
            assert a.shape == b.shape and a.tobytes() == b.tobytes()

    def test_bad_magic(self):
        with pytest.raises(ContractError):
            read_tensor(io.BytesIO(b"XXXX" + bytes(20)))

    def test_stream(self):
        buf = io.BytesIO()
        write_tensor(buf, [[1.0, 2.0]])
        buf.seek(0)
        assert read_tensor(buf).tolist() == [[1.0, 2.0]]


class TestExactSum:
    def test_order_independent(self):
        x = np.array([1e16, 1.0, -1e16, 1.0, 3.0])
        assert ng.exact_sum(x).item() == 5.0
        assert ng.exact_sum(x[::-1]).item() == 5.0

    def test_axis_matches_sum(self):
        x = np.random.default_rng(12).normal(size=(3, 4, 5))
        for axis in (0, 1, 2):
            np.testing.assert_allclose(ng.exact_sum(x, axis=axis).data, x.sum(axis=axis), atol=1e-13)

    def test_gradient(self):
        t = Tensor(np.random.default_rng(13).normal(size=(3, 4)), requires_grad=True)
        assert fd_check(lambda: (ng.exact_sum(t * t, axis=1) ** 2).sum(), [t]) < 1e-6
