import numpy as np
import pytest

from gradcheck import check_gradients, projection, weighted_sum
from localtrans.tensor import ops
from localtrans.tensor.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from localtrans.tensor.core import (
    NumericalError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    concat,
    get_default_dtype,
    set_default_dtype,
)
from localtrans.tensor.nn import BatchNorm, ConvBNReLU, Module


def conv_reference(x, k, b=None):
    # direct sum over taps on a zero-padded input
    n, ci, h, w = x.shape
    co = k.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, co, h, w))
    for ky in range(3):
        for kx in range(3):
            out += np.einsum("nchw,oc->nohw", xp[:, :, ky:ky + h, kx:kx + w], k[:, :, ky, kx])
    if b is not None:
        out += b[None, :, None, None]
    return out


# --- core -------------------------------------------------------------------------------------

def test_arithmetic_gradients_with_broadcasting(rng):
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4,)), requires_grad=True)

    def f():
        return ((a * b - a) + 2.0 - b * 3.0).abs().mean()

    assert check_gradients(f, [a, b]) < 1e-7


def test_reshape_transpose_getitem_gradients(rng):
    a = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    w = projection((4, 3, 1))

    def f():
        y = a.transpose(2, 1, 0)[:, :, 1:]
        return weighted_sum(y.reshape(4, 3, 1), w)

    assert check_gradients(f, [a]) < 1e-8


def test_concat_routes_gradient_slices(rng):
    a = Tensor(rng.standard_normal((2, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal((1, 3)), requires_grad=True)
    y = concat([a, b], axis=0)
    backward(weighted_sum(y, np.arange(9.0).reshape(3, 3)))
    np.testing.assert_array_equal(a.grad, np.arange(6.0).reshape(2, 3))
    np.testing.assert_array_equal(b.grad, [[6.0, 7.0, 8.0]])


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    y = x * x
    backward((y + y).sum())
    assert x.grad[0] == 12.0


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(x * 2.0)
    with pytest.raises(ShapeError):
        (x * 2.0).item()


def test_non_finite_forward_raises():
    x = Tensor(np.array([1e308]), requires_grad=True)
    with pytest.raises(NumericalError):
        x * 1e10


def test_leaf_gradients_accumulate_until_zeroed():
    p = Parameter(np.array([1.0, 2.0]), name="p")
    backward((p * 2.0).sum())
    backward((p * 2.0).sum())
    np.testing.assert_array_equal(p.grad, [4.0, 4.0])
    p.zero_grad()
    np.testing.assert_array_equal(p.grad, [0.0, 0.0])


def test_default_dtype_switch():
    set_default_dtype(np.float32)
    assert Tensor([1.0]).dtype == np.float32
    set_default_dtype(np.float64)
    assert get_default_dtype() == np.float64
    with pytest.raises(ValueError):
        set_default_dtype(np.int32)


# --- conv and pooling -------------------------------------------------------------------------

@pytest.mark.parametrize("shape", [(1, 1, 1, 1), (2, 3, 5, 4), (1, 4, 7, 7)])
def test_conv2d_matches_direct_sum(rng, shape):
    x = rng.standard_normal(shape)
    k = rng.standard_normal((5, shape[1], 3, 3))
    b = rng.standard_normal(5)
    y = ops.conv2d(Tensor(x), Tensor(k), Tensor(b))
    np.testing.assert_allclose(y.data, conv_reference(x, k, b), atol=1e-12)


def test_conv2d_delta_kernel_is_identity(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(ops.conv2d(Tensor(x), Tensor(k)).data, x)


def test_conv2d_unbatched_input(rng):
    x = rng.standard_normal((3, 4, 4))
    k = rng.standard_normal((2, 3, 3, 3))
    y = ops.conv2d(Tensor(x), Tensor(k))
    assert y.shape == (2, 4, 4)
    np.testing.assert_allclose(y.data, conv_reference(x[None], k)[0], atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))


@pytest.mark.parametrize("seed", range(5))
def test_conv2d_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3, 5, 4)), requires_grad=True)
    k = Tensor(rng.standard_normal((4, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(4), requires_grad=True)
    w = projection((2, 4, 5, 4), seed)
    assert check_gradients(lambda: weighted_sum(ops.conv2d(x, k, b), w), [x, k, b]) <= 1e-5


@pytest.mark.parametrize("seed", range(5))
def test_conv1x1_gradients(seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((2, 3, 4, 5)), requires_grad=True)
    k = Tensor(rng.standard_normal((6, 3, 1, 1)), requires_grad=True)
    b = Tensor(rng.standard_normal(6), requires_grad=True)
    w = projection((2, 6, 4, 5), seed)
    y = ops.conv1x1(x, k, b)
    np.testing.assert_allclose(y.data, np.einsum("nchw,oc->nohw", x.data, k.data[:, :, 0, 0]) + b.data[:, None, None])
    assert check_gradients(lambda: weighted_sum(ops.conv1x1(x, k, b), w), [x, k, b]) <= 1e-5


def test_maxpool_values_and_tie_rule():
    x = np.array([[1.0, 5.0, 2.0, 2.0], [3.0, 0.0, 2.0, 2.0]]).reshape(1, 1, 2, 4)
    t = Tensor(x, requires_grad=True)
    y = ops.maxpool2x2(t)
    np.testing.assert_array_equal(y.data.ravel(), [5.0, 2.0])
    backward(y.sum())
    # the first maximum in row-major order takes the gradient
    np.testing.assert_array_equal(t.grad.ravel(), [0, 1, 1, 0, 0, 0, 0, 0])


def test_maxpool_odd_extent_rejected():
    with pytest.raises(ShapeError):
        ops.maxpool2x2(Tensor(np.zeros((1, 1, 3, 4))))


@pytest.mark.parametrize("seed", range(5))
def test_pool_gradients(seed):
    rng = np.random.default_rng(seed)
    # distinct values keep the max away from ties under perturbation
    x = Tensor(rng.permutation(96).reshape(2, 3, 4, 4) * 0.1, requires_grad=True)
    w1, w2 = projection((2, 3, 2, 2), seed), projection((2, 3, 1, 1), seed + 1)
    assert check_gradients(lambda: weighted_sum(ops.maxpool2x2(x), w1), [x]) <= 1e-5
    assert check_gradients(lambda: weighted_sum(ops.global_avgpool(x), w2), [x]) <= 1e-5


def test_relu_gradient(rng):
    x = Tensor(rng.standard_normal((3, 4)) + 0.05, requires_grad=True)
    assert check_gradients(lambda: weighted_sum(ops.relu(x), projection((3, 4))), [x]) <= 1e-5


# --- batch normalisation ----------------------------------------------------------------------

def test_batchnorm_training_statistics(rng):
    x = rng.standard_normal((4, 3, 5, 5)) * 2 + 1
    bn = BatchNorm(3)
    y = bn(Tensor(x)).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)
    m = x.size // 3
    np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))


def test_batchnorm_eval_uses_running_statistics(rng):
    bn = BatchNorm(2)
    bn.running_mean[:] = [1.0, -1.0]
    bn.running_var[:] = [4.0, 0.25]
    bn.eval()
    x = rng.standard_normal((1, 2, 3, 3))
    y = bn(Tensor(x)).data
    expect = (x - np.array([1.0, -1.0])[None, :, None, None]) / np.sqrt(np.array([4.0, 0.25]) + 1e-5)[None, :, None, None]
    np.testing.assert_allclose(y, expect, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("training", [True, False])
def test_batchnorm_gradients(seed, training):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.standard_normal((3, 2, 4, 3)), requires_grad=True)
    gamma = Tensor(rng.uniform(0.5, 1.5, 2), requires_grad=True)
    beta = Tensor(rng.standard_normal(2), requires_grad=True)
    rm, rv = np.zeros(2), np.ones(2)
    w = projection((3, 2, 4, 3), seed)

    def f():
        # fresh running buffers so repeated evaluations see identical inputs
        return weighted_sum(ops.batchnorm(x, gamma, beta, rm.copy(), rv.copy(), training), w)

    assert check_gradients(f, [x, gamma, beta]) <= 1e-5


# --- resize -----------------------------------------------------------------------------------

def test_resize_same_size_is_copy(rng):
    img = rng.random((3, 8, 6))
    out = ops.resize_bicubic(img, size=(8, 6))
    np.testing.assert_array_equal(out, img)
    assert out is not img


def test_resize_preserves_constants():
    img = np.full((3, 10, 12), 0.37)
    for size in [(5, 6), (20, 24), (7, 13)]:
        np.testing.assert_allclose(ops.resize_bicubic(img, size=size), 0.37, atol=1e-14)


def test_resize_reproduces_linear_ramp_in_interior():
    # Catmull-Rom reproduces linear functions away from the clamped border
    x = np.arange(32, dtype=float)
    img = np.broadcast_to(x, (1, 4, 32)).copy()
    up = ops.resize_bicubic(img, size=(4, 64))
    src = (np.arange(64) + 0.5) / 2 - 0.5
    np.testing.assert_allclose(up[0, 0, 4:-4], src[4:-4], atol=1e-12)


def test_resize_by_scale(rng):
    img = rng.random((3, 16, 16))
    assert ops.resize_bicubic(img, scale=0.25).shape == (3, 4, 4)


# --- modules and checkpoints ------------------------------------------------------------------

class Tiny(Module):
    def __init__(self, rng):
        super().__init__()
        self.block = self.add_child("block", ConvBNReLU(3, 4, rng))


def test_module_names_and_state_round_trip(tmp_path, rng):
    m = Tiny(rng)
    names = [n for n, _ in m.named_parameters()]
    assert names == ["block.conv.weight", "block.bn.gamma", "block.bn.beta"]
    m.block(Tensor(rng.standard_normal((2, 3, 4, 4))))  # moves the running statistics
    save_checkpoint(tmp_path / "m.ltck", m.state_dict())
    m2 = Tiny(np.random.default_rng(99))
    m2.load_state_dict(load_checkpoint(tmp_path / "m.ltck"))
    for k, v in m.state_dict().items():
        np.testing.assert_array_equal(m2.state_dict()[k], v)


def test_load_state_dict_strict(rng):
    m = Tiny(rng)
    state = m.state_dict()
    state.pop("block.bn.beta")
    with pytest.raises(KeyError):
        m.load_state_dict(state)
    with pytest.raises(KeyError):
        m.load_state_dict({**m.state_dict(), "extra": np.zeros(1)})


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "a.ltck"
    save_checkpoint(path, {"w": np.array([[1.0, 2.0]])})
    raw = path.read_bytes()
    assert raw[:4] == b"LTCK"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == 1
    assert raw.endswith(np.array([1.0, 2.0], dtype="<f8").tobytes())


def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    state = {"a": rng.standard_normal((3, 2, 1)), "b.c": np.array([np.pi]), "z": np.zeros((0, 4))}
    save_checkpoint(tmp_path / "x.ltck", state)
    back = load_checkpoint(tmp_path / "x.ltck")
    assert list(back) == list(state)
    for k in state:
        assert back[k].shape == state[k].shape
        assert back[k].tobytes() == state[k].tobytes()


@pytest.mark.parametrize("cut", [3, 11, 20, -1])
def test_checkpoint_truncation_detected(tmp_path, cut):
    path = tmp_path / "x.ltck"
    save_checkpoint(path, {"w": np.ones(4)})
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_trailing_bytes_detected(tmp_path):
    path = tmp_path / "x.ltck"
    save_checkpoint(path, {"w": np.ones(4)})
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
