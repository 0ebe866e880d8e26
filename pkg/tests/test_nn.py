import numpy as np
import pytest

from memplan import serialize
from memplan.nn import MLP, Adam, SGDMomentum, cross_entropy, make_optimizer


def _numeric_grad(f, p, idx, h=1e-5):
    old = p[idx]
    p[idx] = old + h
    up = f()
    p[idx] = old - h
    down = f()
    p[idx] = old
    return (up - down) / (2 * h)


def test_mlp_backward_matches_finite_differences():
    rng = np.random.default_rng(0)
    net = MLP([5, 7, 6, 3], rng)
    x = rng.normal(size=(9, 5))
    w = rng.normal(size=(9, 3))

    def f():
        return float(np.sum(net(x) * w))

    out, cache = net.forward(x)
    grads, gin = net.backward(cache, w)
    for k, p in enumerate(net.params):
        for _ in range(4):
            idx = tuple(rng.integers(0, s) for s in p.shape)
            num = _numeric_grad(f, p, idx)
            assert grads[k][idx] == pytest.approx(num, rel=1e-5, abs=1e-7)
    idx = (3, 2)
    num = _numeric_grad(f, x, idx)
    assert gin[idx] == pytest.approx(num, rel=1e-5, abs=1e-7)


def test_cross_entropy_uniform_and_onehot():
    loss, _ = cross_entropy(np.zeros((4, 11)), np.array([0, 3, 10, 5]))
    assert loss == pytest.approx(np.log(11))
    big = np.full((2, 4), -1e3)
    big[[0, 1], [2, 1]] = 1e3
    loss, grad = cross_entropy(big, np.array([2, 1]))
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.allclose(grad, 0.0)


def test_cross_entropy_gradient():
    rng = np.random.default_rng(1)
    logits = rng.normal(size=(6, 5))
    labels = rng.integers(0, 5, 6)
    _, grad = cross_entropy(logits, labels)
    for idx in [(0, 0), (2, 3), (5, 4)]:
        num = _numeric_grad(lambda: cross_entropy(logits, labels)[0], logits, idx)
        assert grad[idx] == pytest.approx(num, rel=1e-6, abs=1e-9)


@pytest.mark.parametrize("cls", [Adam, SGDMomentum])
def test_optimizers_descend_a_quadratic(cls):
    p = [np.array([3.0, -2.0])]
    opt = cls(p, lr=0.05)
    for _ in range(500):
        opt.step([2 * p[0]])
    assert np.linalg.norm(p[0]) < 0.1


def test_unknown_optimizer():
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", [], 0.1)


def test_model_file_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    arrays = {"w": rng.normal(size=(3, 4)), "ids": np.arange(5, dtype=np.int32), "s": np.float32(2.5)}
    p = tmp_path / "m.bin"
    serialize.save_arrays(p, "demo", {"a": 1}, arrays)
    kind, meta, back = serialize.load_arrays(p, "demo")
    assert kind == "demo" and meta == {"a": 1}
    for k in arrays:
        assert np.array_equal(back[k], arrays[k]) and back[k].dtype == np.asarray(arrays[k]).dtype
    q = tmp_path / "m2.bin"
    serialize.save_arrays(q, "demo", {"a": 1}, arrays)
    assert p.read_bytes() == q.read_bytes()


def test_model_file_errors(tmp_path):
    p = tmp_path / "m.bin"
    serialize.save_arrays(p, "demo", {}, {"w": np.ones(100)})
    with pytest.raises(serialize.ModelFileError):
        serialize.load_arrays(p, "other")
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(serialize.ModelFileError):
        serialize.load_arrays(p)
    p.write_bytes(b"nope")
    with pytest.raises(serialize.ModelFileError):
        serialize.load_arrays(p)
