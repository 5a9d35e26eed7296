import numpy as np
import pytest

from oracles import central_diff, explicit_pointconv, random_rotation, rel_err, sobolev_gram
from pointconv_robust.conv import (
    Activation,
    PointConvLayerParams,
    WeightFnParams,
    WeightFnSpec,
    activation_apply,
    activation_grad,
    init_layer,
    layer_backward,
    layer_forward,
    pointconv_backward,
    pointconv_forward,
    sobolev_penalty,
    weight_fn_forward,
)
from pointconv_robust.descriptors import poly_basis, vi_descriptors
from pointconv_robust.geometry import Neighborhood, PointCloud, build_index, knn_table

ACTS = list(Activation)
VARIANTS = [("cubic", "offset", 2), ("cubic", "offset", 3), ("mlp", "offset", 2),
            ("mlp", "offset", 3), ("mlp", "vi", 3), ("mlp", "vi+offset", 3)]


def _perturb(layer, rng, scale=0.3):
    """Random non-zero biases everywhere so tests sit away from activation kinks."""
    t = {k: v + scale * rng.standard_normal(v.shape) for k, v in layer.tensors().items()}
    return layer.replace_tensors(t)


def _layer(kind, input_kind, dim, act="relu", c_in=2, c_out=3, c_mid=3, seed=0):
    rng = np.random.default_rng(seed)
    spec = WeightFnSpec(kind=kind, c_mid=c_mid, dim=dim, input_kind=input_kind, activation=act, hidden=(4, 5))
    return _perturb(init_layer(spec, c_in, c_out, rng), rng), rng


def _nbhd(rng, K, dim=2):
    return Neighborhood(0, np.arange(K), rng.standard_normal((K, dim)), rng.random(K) + 0.1)


# --- activations -------------------------------------------------------------

def test_activation_examples():
    assert activation_apply("relu", [-1, 2]).tolist() == [0, 2]
    assert activation_apply("sine", 0.0) == 0.0
    assert activation_apply("selu", 0.0) == 0.0
    assert activation_apply("selu", 1.0) == 1.0507009873554805
    assert np.isclose(activation_apply("leaky_relu", -2.0), -0.02)


@pytest.mark.parametrize("act", ACTS)
def test_activation_grad_matches_fd(act):
    x = np.array([-1.3, -0.4, 0.25, 1.7])
    num = np.array([(activation_apply(act, v + 1e-6) - activation_apply(act, v - 1e-6)) / 2e-6 for v in x])
    assert np.allclose(activation_grad(act, x), num, atol=1e-8)


# --- weight functions ---------------------------------------------------------------

def test_cubic_constant_column():
    spec = WeightFnSpec("cubic", c_mid=4, dim=2)
    theta = np.zeros((4, 10))
    theta[:, -1] = 1.0
    p = WeightFnParams(spec, {"theta": theta})
    assert np.allclose(weight_fn_forward(p, np.random.default_rng(0).standard_normal((7, 2))), 1.0)


def test_cubic_x_term():
    theta = np.zeros((1, 10))
    theta[0, 7] = 1.0
    p = WeightFnParams(WeightFnSpec("cubic", c_mid=1, dim=2), {"theta": theta})
    assert np.isclose(weight_fn_forward(p, [0.3, 0.0])[0], 0.3)


def test_mlp_zero_weights_returns_bias():
    spec = WeightFnSpec("mlp", c_mid=3, dim=2)
    t = {}
    for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        t[f"W{i}"], t[f"b{i}"] = np.zeros((b, a)), np.zeros(b)
    t["b2"] = np.array([1.0, -2.0, 0.5])
    out = weight_fn_forward(WeightFnParams(spec, t), np.random.default_rng(1).standard_normal((5, 2)))
    assert np.allclose(out, [1.0, -2.0, 0.5])


def test_weight_fn_dimension_mismatch():
    layer, _ = _layer("mlp", "vi", 3)
    with pytest.raises(ValueError):
        weight_fn_forward(layer.weight_fn, np.zeros((4, 3)))


def test_invalid_weight_fn_combinations():
    with pytest.raises(ValueError):
        WeightFnSpec("cubic", input_kind="vi", dim=3)
    with pytest.raises(ValueError):
        WeightFnSpec("mlp", input_kind="vi", dim=2)
    with pytest.raises(ValueError):
        WeightFnSpec("spline")


def test_mlp_widths_default():
    assert WeightFnSpec("mlp", c_mid=16, dim=3, input_kind="vi+offset").widths == (11, 16, 16, 16)


# --- layer forward -----------------------------------------------------------------

def _unit_layer(w_const):
    spec = WeightFnSpec("cubic", c_mid=1, dim=2)
    theta = np.zeros((1, 10))
    theta[0, -1] = w_const
    return PointConvLayerParams(WeightFnParams(spec, {"theta": theta}), np.ones((1, 1)), np.zeros(1), 1, 1)


def test_forward_mean_of_constants():
    layer = _unit_layer(1.0)
    K = 5
    nb = Neighborhood(0, np.arange(K), np.random.default_rng(0).random((K, 2)), np.full(K, 1 / K), "eps")
    assert np.isclose(pointconv_forward(layer, nb, np.full((K, 1), 2.5), nb.offsets)[0], 2.5)


def test_forward_single_neighbor_hand_expansion():
    layer = _unit_layer(2.0)
    nb = Neighborhood(0, np.array([0]), np.zeros((1, 2)), np.ones(1))
    assert np.isclose(pointconv_forward(layer, nb, [[3.0]], nb.offsets)[0], 6.0)


def test_forward_misaligned_arrays():
    layer, rng = _layer("cubic", "offset", 2)
    nb = _nbhd(rng, 4)
    with pytest.raises(ValueError):
        pointconv_forward(layer, nb, rng.random((3, 2)), nb.offsets)


@pytest.mark.parametrize("kind,input_kind,dim", VARIANTS)
@pytest.mark.parametrize("act", ACTS)
def test_factorized_equals_explicit_sum(kind, input_kind, dim, act):
    for trial in range(3):
        rng = np.random.default_rng(trial)
        c_in, c_out, c_mid = (int(v) for v in rng.integers(1, 4, 3))
        K = int(rng.integers(1, 6))
        layer, rng = _layer(kind, input_kind, dim, act, c_in, c_out, c_mid, seed=trial)
        nb = _nbhd(rng, K, dim)
        desc = rng.standard_normal((K, layer.weight_fn.spec.in_dim))
        feats = rng.standard_normal((K, c_in))
        fast = pointconv_forward(layer, nb, feats, desc)
        w = weight_fn_forward(layer.weight_fn, desc)
        ref = explicit_pointconv(w, layer.H, layer.bias, c_in, nb.normalizer, feats)
        assert np.allclose(fast, ref, rtol=0, atol=1e-10)


# --- layer backward ------------------------------------------------------------------

def _check_grads(layer, nb, feats, desc, rng, tol):
    g_out = rng.standard_normal(layer.c_out)
    grads = pointconv_backward(layer, nb, feats, desc, g_out)
    base = layer.tensors()
    for name, value in base.items():
        def f(x, name=name):
            t = dict(base)
            t[name] = x
            return g_out @ pointconv_forward(layer.replace_tensors(t), nb, feats, desc)
        assert rel_err(grads[name], central_diff(f, value, h=1e-5)) < tol, name
    num = central_diff(lambda x: g_out @ pointconv_forward(layer, nb, x, desc), feats, h=1e-5)
    assert rel_err(grads["feats"], num) < tol


@pytest.mark.parametrize("kind,input_kind,dim", VARIANTS)
@pytest.mark.parametrize("act", ACTS)
def test_layer_gradients_match_finite_differences(kind, input_kind, dim, act):
    layer, rng = _layer(kind, input_kind, dim, act, c_in=2, c_out=3, c_mid=3, seed=11)
    nb = _nbhd(rng, 5, dim)
    desc = rng.standard_normal((5, layer.weight_fn.spec.in_dim))
    _check_grads(layer, nb, rng.standard_normal((5, 2)), desc, rng, 1e-5)


def test_zero_grad_out_gives_zero_grads():
    layer, rng = _layer("mlp", "offset", 2, "selu")
    nb = _nbhd(rng, 4)
    grads = pointconv_backward(layer, nb, rng.random((4, 2)), nb.offsets, np.zeros(3))
    assert all(np.all(v == 0) for v in grads.values())


def test_bias_grad_equals_grad_out():
    layer, rng = _layer("cubic", "offset", 2)
    nb = _nbhd(rng, 4)
    g = np.array([0.3, -1.0, 2.0])
    grads = pointconv_backward(layer, nb, np.ones((4, 2)), nb.offsets, g)
    assert np.array_equal(grads["bias"], g)


def test_batched_layer_gradients_with_padding():
    rng = np.random.default_rng(4)
    spec = WeightFnSpec("mlp", c_mid=3, dim=2, activation="sine", hidden=(4, 4))
    layer = _perturb(init_layer(spec, 2, 3, rng), rng)
    pos = rng.random((12, 2))
    index = rng.integers(0, 12, (5, 4))
    mask = np.ones((5, 4), dtype=bool)
    mask[1, 2:] = False
    mask[3, 1:] = False
    norm = np.where(mask, rng.random((5, 4)) + 0.1, 0.0)
    desc = pos[index] - pos[:5, None, :]
    X = rng.standard_normal((2, 12, 2))
    G = rng.standard_normal((2, 5, 3))
    out, cache = layer_forward(layer, desc, norm, index, mask, X)
    grads, dX = layer_backward(layer, cache, G)
    base = layer.tensors()
    for name, value in base.items():
        def f(x, name=name):
            t = dict(base)
            t[name] = x
            return np.sum(G * layer_forward(layer.replace_tensors(t), desc, norm, index, mask, X)[0])
        assert rel_err(grads[name], central_diff(f, value, h=1e-5)) < 1e-7
    num = central_diff(lambda x: np.sum(G * layer_forward(layer, desc, norm, index, mask, x)[0]), X, h=1e-5)
    assert rel_err(dX, num) < 1e-7


# --- invariances ----------------------------------------------------------------------

def test_permutation_invariance():
    layer, rng = _layer("mlp", "offset", 2, "leaky_relu", c_in=3, c_out=4, c_mid=5)
    nb = _nbhd(rng, 7)
    feats = rng.standard_normal((7, 3))
    out = pointconv_forward(layer, nb, feats, nb.offsets)
    perm = rng.permutation(7)
    nb_p = Neighborhood(0, nb.neighbors[perm], nb.offsets[perm], nb.normalizer[perm])
    assert np.allclose(pointconv_forward(layer, nb_p, feats[perm], nb_p.offsets), out, rtol=0, atol=1e-12)


def test_translation_invariance_of_offsets():
    rng = np.random.default_rng(6)
    # dyadic coordinates keep the shifted subtraction exact in floating point
    pos = rng.choice(1024, size=(30, 2), replace=False) / 1024
    layer, _ = _layer("cubic", "offset", 2, c_in=1)
    feats = rng.random((30, 1))

    def run(p):
        table = knn_table(build_index(PointCloud(p)), p, 6)
        desc = table.offsets(p)
        return layer_forward(layer, desc, np.where(table.mask, 1 / 6, 0.0), table.index, table.mask, feats[None])[0]

    t = np.array([0.25, 0.5])  # exactly representable shift
    assert np.array_equal(run(pos), run(pos + t))


def test_vi_layer_rotation_invariance():
    rng = np.random.default_rng(7)
    pos = rng.random((60, 3))
    normals = rng.standard_normal((60, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    layer, _ = _layer("mlp", "vi", 3, "selu", c_in=2, c_out=3, c_mid=4)
    feats = rng.standard_normal((1, 60, 2))
    R = random_rotation(rng)

    def run(p, n):
        cloud = PointCloud(p, normals=n)
        table = knn_table(build_index(cloud), p, 8)
        desc = vi_descriptors(cloud, table)
        norm = np.where(table.mask, 1 / 8, 0.0)
        return table.index, layer_forward(layer, desc, norm, table.index, table.mask, feats)[0]

    i1, out1 = run(pos, normals)
    i2, out2 = run(pos @ R.T, normals @ R.T)
    assert np.array_equal(i1, i2)
    assert np.allclose(out1, out2, rtol=0, atol=1e-8)


# --- Sobolev penalty --------------------------------------------------------------

def _cubic_params(theta, dim=2):
    return WeightFnParams(WeightFnSpec("cubic", c_mid=theta.shape[0], dim=dim), {"theta": theta})


def test_sobolev_excludes_linear_and_constant():
    theta = np.zeros((2, 10))
    theta[:, 7:] = 3.0
    assert sobolev_penalty(_cubic_params(theta), 1.0)[0] == 0.0


def test_sobolev_single_entry_matches_quadrature():
    theta = np.zeros((1, 10))
    theta[0, 4] = 1 / np.sqrt(3)  # coefficient of the sqrt(3) x^2 term
    pen, _ = sobolev_penalty(_cubic_params(theta), 1.0)
    assert np.isclose(pen, 1 / 3)
    G = sobolev_gram(poly_basis, 2)
    assert np.isclose(theta[0] @ G @ theta[0] / 12, pen, rtol=1e-9)


def test_sobolev_lambda_zero():
    theta = np.random.default_rng(0).standard_normal((3, 10))
    pen, g = sobolev_penalty(_cubic_params(theta), 0.0)
    assert pen == 0 and np.all(g == 0)


@pytest.mark.parametrize("dim", [2, 3])
def test_sobolev_gradient_fd(dim):
    rng = np.random.default_rng(dim)
    theta = rng.standard_normal((4, 10 if dim == 2 else 20))
    _, g = sobolev_penalty(_cubic_params(theta, dim), 0.37)
    num = central_diff(lambda t: sobolev_penalty(_cubic_params(t, dim), 0.37)[0], theta, h=1e-4)
    assert rel_err(g, num) < 1e-8


def test_sobolev_requires_polynomial():
    layer, _ = _layer("mlp", "offset", 2)
    with pytest.raises(ValueError, match="Sobolev penalty requires polynomial weight function"):
        sobolev_penalty(layer.weight_fn, 1e-6)
