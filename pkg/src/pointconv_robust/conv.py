"""PointConv layers with MLP or cubic-polynomial weight functions.

A layer computes, for one center with neighbors k,

    M = sum_k S_k * w(d_k) (outer) f_k          (c_mid x c_in)
    out = H @ vec(M) + bias                     (c_out)

which equals the direct sum ``sum_k S_k W(d_k) f_k + bias`` with the
materialized kernel ``W(d)[o, c] = sum_j H[o, j * c_in + c] * w_j(d)``.
Gradients are written out by hand; everything runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import sparse

from .descriptors import poly_basis, poly_degree_mask

__all__ = [
    "Activation",
    "activation_apply",
    "activation_grad",
    "WeightFnSpec",
    "WeightFnParams",
    "PointConvLayerParams",
    "SobolevPenalty",
    "init_weight_fn",
    "init_layer",
    "weight_fn_input_dim",
    "weight_fn_forward",
    "weight_fn_backward",
    "pointconv_forward",
    "pointconv_backward",
    "sobolev_penalty",
    "LayerCache",
    "layer_forward",
    "layer_backward",
]

SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805
LEAKY_SLOPE = 0.01


class Activation(str, Enum):
    RELU = "relu"
    SELU = "selu"
    LEAKY_RELU = "leaky_relu"
    SINE = "sine"


def activation_apply(kind: Activation | str, x) -> np.ndarray:
    kind = Activation(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind is Activation.RELU:
        return np.maximum(x, 0.0)
    if kind is Activation.SELU:
        return SELU_SCALE * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))
    if kind is Activation.LEAKY_RELU:
        return np.where(x > 0, x, LEAKY_SLOPE * x)
    return np.sin(x)


def activation_grad(kind: Activation | str, x) -> np.ndarray:
    """Elementwise derivative at the pre-activation ``x``."""
    kind = Activation(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind is Activation.RELU:
        return (x > 0).astype(np.float64)
    if kind is Activation.SELU:
        return SELU_SCALE * np.where(x > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))
    if kind is Activation.LEAKY_RELU:
        return np.where(x > 0, 1.0, LEAKY_SLOPE)
    return np.cos(x)


_INPUT_KINDS = ("offset", "vi", "vi+offset")


def weight_fn_input_dim(input_kind: str, dim: int) -> int:
    if input_kind == "offset":
        return dim
    if input_kind == "vi":
        return 8
    if input_kind == "vi+offset":
        return 8 + dim
    raise ValueError(f"unknown input kind {input_kind!r}")


@dataclass(frozen=True)
class WeightFnSpec:
    """Static description of a weight function.

    ``kind`` is ``"mlp"`` or ``"cubic"``; ``input_kind`` one of ``"offset"``,
    ``"vi"``, ``"vi+offset"`` (the last concatenates the 8 descriptor entries
    followed by the raw offset). Cubic weight functions take offsets only.
    """

    kind: str = "cubic"
    c_mid: int = 16
    dim: int = 2
    input_kind: str = "offset"
    activation: Activation = Activation.RELU
    hidden: tuple = (16, 16)

    def __post_init__(self):
        if self.kind not in ("mlp", "cubic"):
            raise ValueError(f"unknown weight function kind {self.kind!r}")
        if self.input_kind not in _INPUT_KINDS:
            raise ValueError(f"unknown input kind {self.input_kind!r}")
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.kind == "cubic" and self.input_kind != "offset":
            raise ValueError("cubic weight functions take coordinate offsets only")
        if self.input_kind != "offset" and self.dim != 3:
            raise ValueError("VI inputs require 3D clouds")
        if self.c_mid < 1:
            raise ValueError("c_mid must be at least 1")
        object.__setattr__(self, "activation", Activation(self.activation))
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @property
    def in_dim(self) -> int:
        return weight_fn_input_dim(self.input_kind, self.dim)

    @property
    def basis_len(self) -> int:
        return 10 if self.dim == 2 else 20

    @property
    def widths(self) -> tuple:
        return (self.in_dim, *self.hidden, self.c_mid)


@dataclass(frozen=True, eq=False)
class WeightFnParams:
    """A weight function's spec plus its tensors.

    MLP tensors are ``W0, b0, W1, b1, ...`` with ``W_l`` of shape
    (out, in); the cubic variant holds ``theta`` of shape (c_mid, basis_len).
    """

    spec: WeightFnSpec
    tensors: dict

    @property
    def theta(self) -> np.ndarray:
        return self.tensors["theta"]

    @property
    def degree_mask(self) -> np.ndarray:
        return poly_degree_mask(self.spec.dim)

    def replace_tensors(self, tensors: dict) -> "WeightFnParams":
        return WeightFnParams(self.spec, dict(tensors))


def _glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_out, fan_in))


def init_weight_fn(spec: WeightFnSpec, rng: np.random.Generator) -> WeightFnParams:
    if spec.kind == "cubic":
        return WeightFnParams(spec, {"theta": _glorot(rng, spec.c_mid, spec.basis_len)})
    tensors = {}
    widths = spec.widths
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        tensors[f"W{i}"] = _glorot(rng, b, a)
        tensors[f"b{i}"] = np.zeros(b)
    return WeightFnParams(spec, tensors)


def _check_input(spec: WeightFnSpec, desc: np.ndarray) -> np.ndarray:
    desc = np.asarray(desc, dtype=np.float64)
    if desc.shape[-1] != spec.in_dim:
        raise ValueError(
            f"weight function expects inputs of length {spec.in_dim} ({spec.input_kind}), got {desc.shape[-1]}"
        )
    return desc


def _weight_fn_run(params: WeightFnParams, desc: np.ndarray):
    spec = params.spec
    desc = _check_input(spec, desc)
    if spec.kind == "cubic":
        phi = poly_basis(desc)
        return phi @ params.tensors["theta"].T, {"phi": phi}
    n_layers = len(spec.widths) - 1
    a = desc
    pre = []
    acts = [a]
    for i in range(n_layers):
        z = a @ params.tensors[f"W{i}"].T + params.tensors[f"b{i}"]
        if i < n_layers - 1:
            pre.append(z)
            a = activation_apply(spec.activation, z)
            acts.append(a)
        else:
            a = z
    return a, {"pre": pre, "acts": acts}


def weight_fn_forward(params: WeightFnParams, descriptor_in) -> np.ndarray:
    """Evaluate the weight function on inputs of shape (..., in_dim) -> (..., c_mid)."""
    return _weight_fn_run(params, descriptor_in)[0]


def weight_fn_backward(params: WeightFnParams, cache: dict, grad_out: np.ndarray) -> dict:
    """Parameter gradients given d(loss)/d(output) of shape (..., c_mid)."""
    spec = params.spec
    g = grad_out.reshape(-1, spec.c_mid)
    if spec.kind == "cubic":
        phi = cache["phi"].reshape(-1, spec.basis_len)
        return {"theta": g.T @ phi}
    grads = {}
    n_layers = len(spec.widths) - 1
    acts = [a.reshape(-1, a.shape[-1]) for a in cache["acts"]]
    pre = [z.reshape(-1, z.shape[-1]) for z in cache["pre"]]
    for i in reversed(range(n_layers)):
        grads[f"W{i}"] = g.T @ acts[i]
        grads[f"b{i}"] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.tensors[f"W{i}"]) * activation_grad(spec.activation, pre[i - 1])
    return grads


@dataclass(frozen=True, eq=False)
class PointConvLayerParams:
    weight_fn: WeightFnParams
    H: np.ndarray  # (c_out, c_mid * c_in)
    bias: np.ndarray  # (c_out,)
    c_in: int
    c_out: int

    def __post_init__(self):
        if self.H.shape != (self.c_out, self.c_mid * self.c_in):
            raise ValueError(f"H must have shape {(self.c_out, self.c_mid * self.c_in)}, got {self.H.shape}")
        if self.bias.shape != (self.c_out,):
            raise ValueError("bias must have shape (c_out,)")

    @property
    def c_mid(self) -> int:
        return self.weight_fn.spec.c_mid

    def tensors(self) -> dict:
        out = {"H": self.H, "bias": self.bias}
        out.update({f"wf.{k}": v for k, v in self.weight_fn.tensors.items()})
        return out

    def replace_tensors(self, tensors: dict) -> "PointConvLayerParams":
        wf = {k[3:]: v for k, v in tensors.items() if k.startswith("wf.")}
        return PointConvLayerParams(
            self.weight_fn.replace_tensors(wf), tensors["H"], tensors["bias"], self.c_in, self.c_out
        )


def init_layer(weight_fn: WeightFnSpec, c_in: int, c_out: int, rng: np.random.Generator) -> PointConvLayerParams:
    wf = init_weight_fn(weight_fn, rng)
    H = _glorot(rng, c_out, weight_fn.c_mid * c_in)
    return PointConvLayerParams(wf, H, np.zeros(c_out), c_in, c_out)


@dataclass(frozen=True)
class SobolevPenalty:
    lam: float = 1e-6

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("Sobolev coefficient must be non-negative")

    def __call__(self, params: WeightFnParams):
        return sobolev_penalty(params, self.lam)


def sobolev_penalty(params: WeightFnParams, lam: float):
    """``lam * sum(theta[:, deg >= 2] ** 2)`` and its gradient w.r.t. theta."""
    if params.spec.kind != "cubic":
        raise ValueError("Sobolev penalty requires polynomial weight function")
    theta = params.theta
    mask = params.degree_mask
    masked = np.where(mask[None, :], theta, 0.0)
    return float(lam * np.sum(masked ** 2)), 2.0 * lam * masked


# --------------------------------------------------------------------------
# Batched layer evaluation over a neighbor table. The weight-function output
# depends only on geometry, so it is computed once and shared by the batch.


@dataclass(eq=False)
class LayerCache:
    wf_cache: dict
    sw: np.ndarray  # (m, K, c_mid) normalizer-weighted weight-function output
    normalizer: np.ndarray  # (m, K)
    index: np.ndarray  # (m, K)
    mask: np.ndarray  # (m, K)
    F: np.ndarray  # (B, m, K, c_in) gathered input features
    M: np.ndarray  # (B, m, c_mid * c_in)
    n_src: int
    scatter: sparse.csr_matrix | None = field(default=None)


def layer_forward(layer: PointConvLayerParams, desc: np.ndarray, normalizer: np.ndarray,
                  index: np.ndarray, mask: np.ndarray, X: np.ndarray, scatter=None):
    """Apply a layer to features ``X`` of shape (B, n_src, c_in).

    ``desc`` (m, K, in_dim) are the weight-function inputs of every neighbor
    slot, ``normalizer`` (m, K) the S values (0 on padding slots).
    ``scatter`` optionally supplies a precomputed :func:`scatter_matrix`.
    Returns (B, m, c_out) outputs and a cache for :func:`layer_backward`.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != layer.c_in:
        raise ValueError(f"features must have shape (B, n, {layer.c_in}), got {X.shape}")
    if desc.shape[:2] != index.shape or normalizer.shape != index.shape:
        raise ValueError("neighbor arrays are misaligned")
    w, wf_cache = _weight_fn_run(layer.weight_fn, desc)
    norm = np.where(mask, normalizer, 0.0)
    sw = norm[..., None] * w
    B = X.shape[0]
    m = index.shape[0]
    F = X[:, index]
    M = np.matmul(sw.transpose(0, 2, 1)[None], F).reshape(B, m, -1)
    out = M @ layer.H.T + layer.bias
    return out, LayerCache(wf_cache, sw, norm, index, mask, F, M, X.shape[1], scatter)


def scatter_matrix(index: np.ndarray, mask: np.ndarray, n_src: int) -> sparse.csr_matrix:
    """Sparse (n_src, m*K) map that sums neighbor-slot gradients back onto points."""
    m, K = index.shape
    cols = np.arange(m * K)[mask.ravel()]
    rows = index.ravel()[mask.ravel()]
    return sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_src, m * K))


def _scatter_matrix(cache: LayerCache) -> sparse.csr_matrix:
    if cache.scatter is None:
        cache.scatter = scatter_matrix(cache.index, cache.mask, cache.n_src)
    return cache.scatter


def layer_backward(layer: PointConvLayerParams, cache: LayerCache, grad_out: np.ndarray,
                   need_input_grad: bool = True):
    """Gradients of a batched layer.

    Returns ``(param_grads, dX)`` where ``param_grads`` uses the key layout of
    :meth:`PointConvLayerParams.tensors` and ``dX`` has the shape of the
    layer's input features (None when ``need_input_grad`` is False).
    """
    B, m, c_out = grad_out.shape
    c_mid, c_in = layer.c_mid, layer.c_in
    K = cache.index.shape[1]
    g2 = grad_out.reshape(B * m, c_out)
    grads = {
        "H": g2.T @ cache.M.reshape(B * m, -1),
        "bias": g2.sum(axis=0),
    }
    dM = (g2 @ layer.H).reshape(B, m, c_mid, c_in)
    # d sw[m, k, d] = sum_b sum_c F[b, m, k, c] dM[b, m, d, c]
    Fm = cache.F.transpose(1, 2, 0, 3).reshape(m, K, B * c_in)
    dMm = dM.transpose(1, 0, 3, 2).reshape(m, B * c_in, c_mid)
    dsw = np.matmul(Fm, dMm)
    dw = dsw * cache.normalizer[..., None]
    for k, v in weight_fn_backward(layer.weight_fn, cache.wf_cache, dw).items():
        grads[f"wf.{k}"] = v
    dX = None
    if need_input_grad:
        dF = np.matmul(cache.sw[None], dM)  # (B, m, K, c_in)
        flat = dF.transpose(1, 2, 0, 3).reshape(m * K, B * c_in)
        dX = np.asarray(_scatter_matrix(cache) @ flat).reshape(cache.n_src, B, c_in).transpose(1, 0, 2)
    return grads, np.ascontiguousarray(dX) if dX is not None else None


# --------------------------------------------------------------------------
# Single-neighborhood API.


def _single_args(nbhd, feats, descriptors):
    feats = np.asarray(feats, dtype=np.float64)
    desc = np.asarray(descriptors, dtype=np.float64)
    n = len(nbhd.neighbors)
    if feats.ndim != 2 or feats.shape[0] != n or desc.ndim != 2 or desc.shape[0] != n:
        raise ValueError("per-neighbor arrays are misaligned with the neighborhood")
    normalizer = np.asarray(nbhd.normalizer, dtype=np.float64)
    if normalizer.shape != (n,):
        raise ValueError("normalizer is misaligned with the neighborhood")
    index = np.arange(n)[None, :]
    mask = np.ones((1, n), dtype=bool)
    return feats[None], desc[None], normalizer[None], index, mask


def pointconv_forward(layer: PointConvLayerParams, nbhd, feats, descriptors) -> np.ndarray:
    """Layer output for one neighborhood.

    ``feats`` (K, c_in) and ``descriptors`` (K, in_dim) are aligned with
    ``nbhd.neighbors``; ``nbhd.normalizer`` supplies S.
    """
    X, desc, norm, index, mask = _single_args(nbhd, feats, descriptors)
    out, _ = layer_forward(layer, desc, norm, index, mask, X)
    return out[0, 0]


def pointconv_backward(layer: PointConvLayerParams, nbhd, feats, descriptors, grad_out) -> dict:
    """Gradients of ``grad_out . pointconv_forward(...)``.

    Keys: ``H``, ``bias``, ``wf.<tensor>`` for the weight function and
    ``feats`` for the (K, c_in) neighbor features.
    """
    X, desc, norm, index, mask = _single_args(nbhd, feats, descriptors)
    _, cache = layer_forward(layer, desc, norm, index, mask, X)
    g = np.asarray(grad_out, dtype=np.float64).reshape(1, 1, layer.c_out)
    grads, dX = layer_backward(layer, cache, g)
    grads["feats"] = dX[0]
    return grads

