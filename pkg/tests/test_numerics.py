import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from qgc import numerics as nx
from qgc.numerics.checkpoint import deserialize, serialize

from conftest import central_difference, grad_check, rel_err

RNG = np.random.default_rng(1234)


def leaf(*shape, rng=RNG):
    return nx.Tensor(rng.normal(size=shape), requires_grad=True)


# -- matmul ------------------------------------------------------------------

def test_matmul_identity_and_dot():
    eye = nx.Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = nx.Tensor([[2.0, 3.0], [4.0, 5.0]])
    assert np.array_equal(nx.matmul(eye, b).data, b.data)
    assert nx.matmul(nx.Tensor([[1.0, 2.0]]), nx.Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    a, b = RNG.normal(size=(3, 4)), RNG.normal(size=(4, 2))
    ref = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                ref[i, j] += a[i, k] * b[k, j]
    assert np.allclose(nx.matmul(nx.Tensor(a), nx.Tensor(b)).data, ref, rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(nx.DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        nx.matmul(nx.Tensor(np.ones((2, 3))), nx.Tensor(np.ones((2, 3))))


# -- softmax -----------------------------------------------------------------

def test_softmax_examples():
    assert np.allclose(nx.softmax(nx.Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    # independent closed form: e / (e + 1)
    e = math.e
    assert np.allclose(nx.softmax(nx.Tensor([1.0, 0.0])).data, [e / (e + 1), 1 / (e + 1)], atol=1e-15)
    assert np.allclose(nx.softmax(nx.Tensor([1.0, 0.0])).data, [0.73106, 0.26894], atol=5e-6)
    big = nx.softmax(nx.Tensor([3.0, 1003.0])).data
    assert np.all(np.isfinite(big)) and big[0] < 1e-300 and big[1] == 1.0


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        nx.softmax(nx.Tensor([0.0, np.nan]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    y = nx.softmax(nx.Tensor(x), axis=-1).data
    assert np.all((y >= 0) & (y <= 1))
    assert np.allclose(y.sum(-1), 1.0, rtol=0, atol=1e-12)


def test_masked_softmax_zeroes_masked_entries():
    x = nx.Tensor(RNG.normal(size=(2, 4)))
    mask = np.array([[True, False, True, False], [False, False, False, False]])
    y = nx.softmax(x, axis=-1, mask=mask).data
    assert y[0, 1] == 0 and y[0, 3] == 0 and abs(y[0].sum() - 1) < 1e-12
    assert np.all(y[1] == 0)  # fully masked row


# -- backward ----------------------------------------------------------------

def test_backward_sum_and_square():
    x = nx.Tensor([1.0, 2.0, 3.0], requires_grad=True)
    nx.backward(nx.sum_(x))
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    x.grad = None
    nx.backward(nx.sum_(x * x))
    assert x.grad.tolist() == [2.0, 4.0, 6.0]


def test_backward_requires_scalar():
    with pytest.raises(nx.GraphError):
        nx.backward(leaf(3) * 2.0)


def test_frozen_leaf_gets_no_grad():
    x, w = leaf(3), nx.Tensor(RNG.normal(size=3))
    nx.backward(nx.sum_(x * w))
    assert w.grad is None and x.grad is not None


def test_graph_is_topological_and_visits_once():
    x = leaf(3)
    y = x * x
    z = nx.sum_(y + y)
    nodes = nx.graph_nodes(z)
    pos = {id(n): i for i, n in enumerate(nodes)}
    assert len(pos) == len(nodes)
    for n in nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]
    nx.backward(z)
    assert np.allclose(x.grad, 4 * x.data)


OPS = {
    "add_broadcast": (lambda a, b: nx.sum_(nx.add(a, b) * nx.add(a, b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: nx.sum_(nx.square(nx.sub(a, b))), [(2, 3), (2, 3)]),
    "mul": (lambda a, b: nx.sum_(nx.mul(a, b)), [(2, 3), (1, 3)]),
    "div": (lambda a, b: nx.sum_(a / (nx.exp(b) + 1.0)), [(2, 3), (2, 3)]),
    "exp_log": (lambda a: nx.sum_(nx.log(nx.exp(a) + 2.0)), [(3, 2)]),
    "relu": (lambda a: nx.sum_(nx.relu(a) * a), [(4, 3)]),
    "gelu": (lambda a: nx.sum_(nx.gelu(a) * a), [(4, 3)]),
    "matmul_batched": (lambda a, b: nx.sum_(nx.square(nx.matmul(a, b))), [(2, 3, 4), (4, 5)]),
    "mean_axis": (lambda a: nx.sum_(nx.square(nx.mean(a, axis=1))), [(3, 4)]),
    "reshape_transpose": (lambda a: nx.sum_(nx.transpose(nx.reshape(a, (4, 3))) * nx.Tensor(np.arange(12.).reshape(3, 4))), [(2, 6)]),
    "index": (lambda a: nx.sum_(nx.square(a[np.array([0, 2, 0]), 1:])), [(3, 3)]),
    "take_rows": (lambda a: nx.sum_(nx.square(nx.take_rows(a, np.array([2, 0, 2, 1])))), [(3, 2)]),
    "embedding": (lambda a: nx.sum_(nx.square(nx.embedding(a, np.array([[1, 1], [0, 3]])))), [(4, 3)]),
    "scatter_rows": (lambda a: nx.sum_(nx.square(nx.scatter_rows(a, np.array([3, 0]), 5) + 1.0)), [(2, 3)]),
    "concat_stack": (lambda a, b: nx.sum_(nx.square(nx.concat([a, b], axis=1))) + nx.sum_(nx.stack([a, b]) * 3.0), [(2, 3), (2, 3)]),
    "pad_axis": (lambda a: nx.sum_(nx.square(nx.pad_axis(a, 1, 2) + 1.0)), [(2, 3)]),
    "softmax": (lambda a: nx.sum_(nx.softmax(a, axis=-1) * nx.Tensor(np.arange(12.).reshape(3, 4))), [(3, 4)]),
    "masked_softmax": (lambda a: nx.sum_(nx.softmax(a, axis=-1, mask=np.array([True, False, True, True])) * nx.Tensor(np.arange(12.).reshape(3, 4))), [(3, 4)]),
    "log_softmax": (lambda a: nx.sum_(nx.log_softmax(a, axis=-1) * nx.Tensor(np.arange(12.).reshape(3, 4))), [(3, 4)]),
    "layer_norm": (lambda a, g, b: nx.sum_(nx.layer_norm(a, g, b) * nx.Tensor(np.arange(12.).reshape(3, 4))), [(3, 4), (4,), (4,)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_central_differences(name):
    fn, shapes = OPS[name]
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    args = [leaf(*s, rng=rng) for s in shapes]
    assert grad_check(lambda: fn(*args), args, rng, samples=12) < 1e-4


def test_backward_deterministic():
    def run():
        rng = np.random.default_rng(5)
        layer = nx.TransformerLayer(8, 2, 16, rng)
        x = nx.Tensor(rng.normal(size=(2, 5, 8)), requires_grad=True)
        nx.backward(nx.mean(layer(x, None)))
        return layer(x, None).data, x.grad, [p.grad for p in layer.parameters()]

    a, b = run(), run()
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert all(np.array_equal(p, q) for p, q in zip(a[2], b[2]))


# -- transformer layer -------------------------------------------------------

def test_zero_weight_layer_is_identity():
    rng = np.random.default_rng(0)
    layer = nx.TransformerLayer(8, 2, 16, rng)
    for name, p in layer.named_parameters():
        if not name.startswith("ln"):
            p.data[...] = 0.0
    x = nx.Tensor(rng.normal(size=(5, 8)))
    assert np.array_equal(nx.transformer_encoder_layer(x, layer, None).data, x.data)


def test_masked_position_does_not_influence_others():
    rng = np.random.default_rng(1)
    layer = nx.TransformerLayer(8, 2, 16, rng)
    x = rng.normal(size=(1, 5, 8))
    mask = np.ones((1, 5, 5), bool)
    mask[:, :, 3] = False  # nobody may attend to position 3
    mask[:, 3, 3] = True
    y1 = layer(nx.Tensor(x), mask).data
    x2 = x.copy()
    x2[0, 3] += rng.normal(size=8) * 10
    y2 = layer(nx.Tensor(x2), mask).data
    keep = [0, 1, 2, 4]
    assert np.array_equal(y1[0, keep], y2[0, keep])


def test_layer_gradients_match_central_differences():
    rng = np.random.default_rng(2)
    layer = nx.TransformerLayer(8, 2, 16, rng)
    x = nx.Tensor(rng.normal(size=(2, 4, 8)))
    mask = nx.key_padding_mask(np.array([4, 3]), 4)
    assert grad_check(lambda: nx.mean(layer(x, mask)), layer.parameters(), rng) < 1e-4


def test_transformer_layer_dimension_mismatch():
    layer = nx.TransformerLayer(8, 2, 16, np.random.default_rng(0))
    with pytest.raises(nx.DimensionError):
        layer(nx.Tensor(np.ones((3, 6))), None)


def test_key_padding_mask_causal():
    m = nx.key_padding_mask(np.array([2]), 3, causal=True)[0]
    # real rows: causal over real keys only; the pad row keeps a non-empty row
    assert m[:2].tolist() == [[True, False, False], [True, True, False]]
    assert m[2, 2]


# -- optimizer ---------------------------------------------------------------

def test_adam_single_step_matches_closed_form():
    p = nx.Tensor([1.0, -2.0], requires_grad=True)
    opt = nx.Adam([p], lr=0.1)
    p.grad = np.array([0.5, -4.0])
    opt.step()
    # first bias-corrected step moves each coordinate by lr * g / (|g| + eps')
    assert np.allclose(p.data, [1.0 - 0.1, -2.0 + 0.1], atol=1e-7)


def test_adam_refuses_frozen_and_leaves_them_alone():
    frozen = nx.Tensor([1.0])
    with pytest.raises(nx.FrozenParameterError):
        nx.Adam([frozen])


def test_adam_minimises_quadratic():
    p = nx.Tensor([3.0, -1.0], requires_grad=True)
    opt = nx.Adam([p], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        nx.backward(nx.sum_(nx.square(p - nx.Tensor([0.5, 0.25]))))
        opt.step()
    assert np.allclose(p.data, [0.5, 0.25], atol=1e-3)


# -- checkpoint --------------------------------------------------------------

def test_checkpoint_round_trip_and_layout(tmp_path):
    tensors = {"b": np.arange(6.0).reshape(2, 3), "a": np.array(1.5)}
    blob = serialize(tensors)
    assert blob[:4] == b"QGC1"
    assert int.from_bytes(blob[4:8], "little") == 1 and int.from_bytes(blob[8:12], "little") == 2
    # first record is "a" (names sorted): len, name, rank 0, payload
    assert int.from_bytes(blob[12:16], "little") == 1 and blob[16:17] == b"a"
    back = deserialize(blob)
    assert set(back) == {"a", "b"} and np.array_equal(back["b"], tensors["b"]) and back["a"] == 1.5
    digest = nx.save(tmp_path / "x.ckpt", tensors)
    assert digest == nx.tensor_hash(tensors)
    assert all(np.array_equal(nx.load(tmp_path / "x.ckpt")[k], v) for k, v in tensors.items())


@pytest.mark.parametrize("mutate", [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\0"])
def test_checkpoint_corruption_detected(mutate):
    blob = serialize({"w": np.ones((2, 2))})
    with pytest.raises(nx.CheckpointError):
        deserialize(mutate(blob))


def test_module_state_dict_round_trip():
    rng = np.random.default_rng(0)
    a, b = nx.TransformerLayer(8, 2, 16, rng), nx.TransformerLayer(8, 2, 16, rng)
    b.load_state_dict(a.state_dict())
    assert nx.tensor_hash(a.state_dict()) == nx.tensor_hash(b.state_dict())
    with pytest.raises(KeyError, match="missing"):
        b.load_state_dict({k: v for k, v in a.state_dict().items() if "attn" not in k})


def test_central_difference_helper_is_exact_on_quadratic():
    x = np.array([1.0, 2.0])
    fd = central_difference(lambda: float((x ** 2).sum()), x)
    assert rel_err([fd[(0,)], fd[(1,)]], [2.0, 4.0]) < 1e-9
