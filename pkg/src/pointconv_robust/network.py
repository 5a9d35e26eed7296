"""The 4-layer MNIST PointConv classifier, cross-entropy loss, Adam and the
training loop.

Layer sequence (every conv followed by ReLU)::

    Conv(64) -> FPS(196) -> Conv(128) -> FPS(49) -> Conv(128) -> Conv(128)
      -> global average pool -> FC(10)

A subsampling layer picks centers from the current cloud; the next conv
gathers features from the pre-subsample cloud around those centers.

Neighborhoods depend only on point positions, and every raster image of a
given size (and rotation) has the same positions, so neighbor tables are
computed once per geometry and shared by all images and batch members.
"""

from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensorfile
from .conv import (
    Activation,
    PointConvLayerParams,
    WeightFnParams,
    WeightFnSpec,
    _glorot,
    init_layer,
    layer_backward,
    layer_forward,
    scatter_matrix,
    sobolev_penalty,
)
from .descriptors import vi_descriptors
from .geometry import (
    PointCloud,
    build_index,
    epsilon_ball_table,
    farthest_point_sampling,
    knn_table,
    pc2d_indices,
)

__all__ = [
    "KNN",
    "EpsBall",
    "ConvLayer",
    "Subsample",
    "GlobalAveragePool",
    "FullyConnected",
    "NetworkSpec",
    "TrainConfig",
    "ModelState",
    "TrainingDiverged",
    "GeometryCache",
    "TrainHistory",
    "calibrate_init",
    "build_mnist_network",
    "init_state",
    "network_forward",
    "loss_and_grads",
    "train_step",
    "train",
    "evaluate",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
    "MNIST_EPSILONS",
    "MNIST_FPS",
    "MNIST_CHANNELS",
]

MNIST_CHANNELS = (64, 128, 128, 128)
MNIST_EPSILONS = (1 / 10, 1 / 5, 1 / 2, 1 / 2)
MNIST_FPS = (196, 49)
EVAL_TAG = "eval"


class TrainingDiverged(RuntimeError):
    pass


# --------------------------------------------------------------------------
# Architecture description


@dataclass(frozen=True)
class KNN:
    k: int = 9
    include_center: bool = True


@dataclass(frozen=True)
class EpsBall:
    epsilon: float
    k_cap: int = 16


@dataclass(frozen=True)
class ConvLayer:
    c_out: int
    neighborhood: KNN | EpsBall
    weight_fn: str = "cubic"
    activation: Activation = Activation.RELU
    c_mid: int = 16
    input_kind: str = "offset"
    # multiplies geometric offsets before they reach the weight function;
    # 1/epsilon maps the neighborhood onto the unit ball
    offset_scale: float = 1.0

    def __post_init__(self):
        if not (self.offset_scale > 0 and np.isfinite(self.offset_scale)):
            raise ValueError("offset_scale must be a positive finite number")


@dataclass(frozen=True)
class Subsample:
    kind: str = "fps"
    m: int | None = None

    def __post_init__(self):
        if self.kind not in ("fps", "pc2d"):
            raise ValueError(f"unknown subsampling {self.kind!r}")
        if self.kind == "fps" and (self.m is None or self.m < 1):
            raise ValueError("FPS subsampling needs a positive point count")


@dataclass(frozen=True)
class GlobalAveragePool:
    pass


@dataclass(frozen=True)
class FullyConnected:
    c_out: int = 10


_LAYER_TYPES = {c.__name__: c for c in (ConvLayer, Subsample, GlobalAveragePool, FullyConnected)}


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    in_channels: int = 1
    dim: int = 2
    name: str = "pointconv"

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        pools = [i for i, l in enumerate(layers) if isinstance(l, GlobalAveragePool)]
        if len(pools) != 1:
            raise ValueError("network needs exactly one global average pooling layer")
        p = pools[0]
        if p + 1 >= len(layers) or not isinstance(layers[p + 1], FullyConnected) or p + 2 != len(layers):
            raise ValueError("a single fully connected layer must follow the global average pooling")
        if not any(isinstance(l, ConvLayer) for l in layers[:p]):
            raise ValueError("network needs at least one conv layer")
        for l in layers[:p]:
            if not isinstance(l, (ConvLayer, Subsample)):
                raise ValueError(f"unexpected layer {l!r} before pooling")
        if isinstance(layers[0], Subsample):
            raise ValueError("network must start with a conv layer")
        # validates weight-function combinations early
        self.weight_fn_specs()

    @property
    def convs(self) -> list:
        return [l for l in self.layers if isinstance(l, ConvLayer)]

    @property
    def uses_pc2d(self) -> bool:
        return any(isinstance(l, Subsample) and l.kind == "pc2d" for l in self.layers)

    @property
    def n_classes(self) -> int:
        return self.layers[-1].c_out

    def weight_fn_specs(self) -> list:
        return [
            WeightFnSpec(kind=c.weight_fn, c_mid=c.c_mid, dim=self.dim,
                         input_kind=c.input_kind, activation=c.activation)
            for c in self.convs
        ]

    def to_dict(self) -> dict:
        layers = []
        for l in self.layers:
            d = {"type": type(l).__name__}
            if isinstance(l, ConvLayer):
                nb = l.neighborhood
                d.update(c_out=l.c_out, weight_fn=l.weight_fn, activation=Activation(l.activation).value,
                         c_mid=l.c_mid, input_kind=l.input_kind, offset_scale=l.offset_scale,
                         neighborhood={"type": type(nb).__name__, **asdict(nb)})
            else:
                d.update(asdict(l))
            layers.append(d)
        return {"name": self.name, "in_channels": self.in_channels, "dim": self.dim, "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = []
        for ld in d["layers"]:
            ld = dict(ld)
            kind = _LAYER_TYPES[ld.pop("type")]
            if kind is ConvLayer:
                nb = dict(ld.pop("neighborhood"))
                nb_type = {"KNN": KNN, "EpsBall": EpsBall}[nb.pop("type")]
                ld["neighborhood"] = nb_type(**nb)
                ld["activation"] = Activation(ld.get("activation", "relu"))
            layers.append(kind(**ld))
        return cls(tuple(layers), d.get("in_channels", 1), d.get("dim", 2), d.get("name", "pointconv"))


def build_mnist_network(neighborhood: str = "eps", weight_fn: str = "cubic", activation="relu",
                        k: int | None = None, *, channels=MNIST_CHANNELS, epsilons=MNIST_EPSILONS,
                        fps=MNIST_FPS, subsample: str = "fps", c_mid: int = 16,
                        normalize_offsets: bool = True, name: str | None = None) -> NetworkSpec:
    """Four-conv MNIST classifier.

    ``neighborhood`` is ``"eps"`` (``k`` is the cap K, default 16) or
    ``"knn"`` (``k`` neighbors, default 9). ``epsilons`` are the per-conv
    radii used in ε-ball mode. With ``normalize_offsets`` each layer feeds
    offset/epsilon to its weight function, in both modes, so both families
    see inputs on the same scale.
    """
    if neighborhood not in ("eps", "knn"):
        raise ValueError(f"neighborhood must be 'eps' or 'knn', got {neighborhood!r}")
    if weight_fn not in ("cubic", "mlp"):
        raise ValueError(f"weight_fn must be 'cubic' or 'mlp', got {weight_fn!r}")
    if len(channels) != 4 or len(epsilons) != 4 or len(fps) != 2:
        raise ValueError("the MNIST network has four conv layers and two subsampling layers")
    if k is None:
        k = 16 if neighborhood == "eps" else 9
    act = Activation(activation)

    def conv(i):
        nb = EpsBall(float(epsilons[i]), k) if neighborhood == "eps" else KNN(k)
        scale = 1.0 / float(epsilons[i]) if normalize_offsets else 1.0
        return ConvLayer(channels[i], nb, weight_fn, act, c_mid, offset_scale=scale)

    def sub(i):
        return Subsample("pc2d") if subsample == "pc2d" else Subsample("fps", fps[i])

    layers = (conv(0), sub(0), conv(1), sub(1), conv(2), conv(3), GlobalAveragePool(), FullyConnected(10))
    if name is None:
        name = f"{neighborhood}{k}-{weight_fn}" + (f"-{act.value}" if weight_fn == "mlp" else "")
    return NetworkSpec(layers, in_channels=1, dim=2, name=name)


# --------------------------------------------------------------------------
# Parameters and optimizer state


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 60
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    sobolev_lambda: float = 1e-6
    epochs: int = 20
    seed: int = 0
    # rescale a fresh init so each conv's pre-activations have unit RMS
    calibrate: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.sobolev_lambda < 0:
            raise ValueError("sobolev_lambda must be non-negative")


@dataclass(frozen=True, eq=False)
class ModelState:
    """Flat parameter dict plus Adam moments (same keys and shapes)."""

    params: dict
    m: dict
    v: dict
    step: int = 0


def init_state(spec: NetworkSpec, seed: int = 0) -> ModelState:
    rng = np.random.default_rng(seed)
    params = {}
    c_in = spec.in_channels
    for i, (conv, wf) in enumerate(zip(spec.convs, spec.weight_fn_specs())):
        layer = init_layer(wf, c_in, conv.c_out, rng)
        for k, v in layer.tensors().items():
            params[f"conv{i}.{k}"] = v
        c_in = conv.c_out
    params["fc.W"] = _glorot(rng, spec.n_classes, c_in)
    params["fc.b"] = np.zeros(spec.n_classes)
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return ModelState(params, zeros, {k: np.zeros_like(v) for k, v in params.items()}, 0)


def _conv_params(spec: NetworkSpec, params: dict, i: int) -> PointConvLayerParams:
    wf_spec = spec.weight_fn_specs()[i]
    prefix = f"conv{i}."
    t = {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
    wf = WeightFnParams(wf_spec, {k[3:]: v for k, v in t.items() if k.startswith("wf.")})
    c_in = spec.in_channels if i == 0 else spec.convs[i - 1].c_out
    return PointConvLayerParams(wf, t["H"], t["bias"], c_in, spec.convs[i].c_out)


# --------------------------------------------------------------------------
# Geometry planning


def _positions_key(positions: np.ndarray) -> str:
    h = hashlib.blake2b(digest_size=16)
    h.update(str(positions.shape).encode())
    h.update(np.ascontiguousarray(positions).tobytes())
    return h.hexdigest()


def canonical_order(cloud: PointCloud) -> np.ndarray:
    """Lexicographic point order (x, then y[, z], then features)."""
    keys = [cloud.positions[:, j] for j in range(cloud.dim)]
    if cloud.features is not None:
        keys = [cloud.features[:, j] for j in range(cloud.features.shape[1])][::-1] + keys[::-1]
    else:
        keys = keys[::-1]
    return np.lexsort(keys)


@dataclass(eq=False)
class _Plan:
    levels: list  # PointCloud per resolution level (positions + normals only)
    stages: list  # per conv: (src_level, dst_level, center ids into src level)
    raster_shape: tuple | None


class GeometryCache:
    """Memoizes subsampling plans and neighbor tables per point geometry."""

    def __init__(self, max_entries: int = 256):
        self.max_entries = max_entries
        self._plans = OrderedDict()
        self._tables = OrderedDict()
        self._indices = OrderedDict()

    def _remember(self, store: OrderedDict, key, value):
        store[key] = value
        store.move_to_end(key)
        while len(store) > self.max_entries:
            store.popitem(last=False)
        return value

    def plan(self, spec: NetworkSpec, key: str, geom: PointCloud, raster_shape=None) -> _Plan:
        ck = (spec.name, hash(spec), key)
        if ck in self._plans:
            self._plans.move_to_end(ck)
            return self._plans[ck]
        levels = [geom]
        stages = []
        pending = None
        shape = raster_shape
        for layer in spec.layers:
            cur = len(levels) - 1
            if isinstance(layer, Subsample):
                pts = levels[cur]
                if layer.kind == "fps":
                    sel = farthest_point_sampling(pts, min(layer.m, len(pts)), start=0)
                else:
                    if shape is None:
                        raise ValueError("PC-2D subsampling needs the raster shape of the input")
                    h, w = shape
                    sel = pc2d_indices(w, h)
                    shape = (h // 2, w // 2)
                pending = sel
            elif isinstance(layer, ConvLayer):
                if pending is None:
                    stages.append((cur, cur, np.arange(len(levels[cur]))))
                else:
                    levels.append(levels[cur].subset(pending))
                    stages.append((cur, cur + 1, pending))
                    pending = None
        plan = _Plan(levels, stages, raster_shape)
        return self._remember(self._plans, ck, plan)

    def index(self, key: str, level: int, cloud: PointCloud):
        ik = (key, level, len(cloud))
        if ik in self._indices:
            self._indices.move_to_end(ik)
            return self._indices[ik]
        return self._remember(self._indices, ik, build_index(cloud))

    def tables(self, spec: NetworkSpec, key: str, plan: _Plan, seed: int, tag):
        """Per conv layer: (neighbor index, mask, normalizer, weight-fn inputs, scatter map)."""
        out = []
        for i, (conv, (src, dst, centers)) in enumerate(zip(spec.convs, plan.stages)):
            nb = conv.neighborhood
            random = isinstance(nb, EpsBall)
            tk = (key, hash(spec), i, seed if random else None, tag if random else None)
            if tk in self._tables:
                self._tables.move_to_end(tk)
                out.append(self._tables[tk])
                continue
            source = plan.levels[src]
            dst_cloud = plan.levels[dst]
            index = self.index(key, src, source)
            if random:
                tag_ints = [1] if tag == EVAL_TAG else [0, int(tag)]
                table = epsilon_ball_table(index, dst_cloud.positions, nb.epsilon, nb.k_cap,
                                           seed=[int(seed), *tag_ints, i], centers=centers)
            else:
                table = knn_table(index, dst_cloud.positions, min(nb.k, len(source)), centers=centers,
                                  include_center=nb.include_center)
            offsets = table.offsets(source.positions, dst_cloud.positions)
            if conv.offset_scale != 1.0:
                offsets = offsets * conv.offset_scale
            if conv.input_kind == "offset":
                desc = offsets
            else:
                vi = vi_descriptors(source, table, dst_cloud)
                desc = vi if conv.input_kind == "vi" else np.concatenate([vi, offsets], axis=-1)
            entry = (table.index, table.mask, table.normalizer, desc,
                     scatter_matrix(table.index, table.mask, len(source)))
            out.append(self._remember(self._tables, tk, entry))
        return out


def _prepare(spec: NetworkSpec, cloud: PointCloud, raster_shape=None):
    """Canonicalize point order; returns (features, geometry cloud, key)."""
    if cloud.dim != spec.dim:
        raise ValueError(f"network expects {spec.dim}D clouds, got {cloud.dim}D")
    if cloud.features is None or cloud.features.shape[1] != spec.in_channels:
        raise ValueError(f"network expects {spec.in_channels} input channels")
    if spec.uses_pc2d:
        order = None
    else:
        order = canonical_order(cloud)
    pos = cloud.positions if order is None else cloud.positions[order]
    feats = cloud.features if order is None else cloud.features[order]
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals if order is None else cloud.normals[order]
    geom = PointCloud(pos, None, normals)
    key = _positions_key(pos) + ("" if normals is None else _positions_key(normals))
    if spec.uses_pc2d and raster_shape is None:
        side = int(round(np.sqrt(len(cloud))))
        if side * side != len(cloud):
            raise ValueError("PC-2D networks need square rasters or an explicit raster shape")
        raster_shape = (side, side)
    return feats, geom, key, raster_shape


# --------------------------------------------------------------------------
# Forward / backward over a group of clouds sharing one geometry


def _forward_group(spec, params, tables, X):
    caches = []
    for i, (index, mask, normalizer, desc, scatter) in enumerate(tables):
        layer = _conv_params(spec, params, i)
        pre, cache = layer_forward(layer, desc, normalizer, index, mask, X, scatter)
        X = np.maximum(pre, 0.0)
        caches.append((layer, cache, pre > 0))
    pooled = X.mean(axis=1)
    logits = pooled @ params["fc.W"].T + params["fc.b"]
    return logits, (caches, pooled, X.shape[1])


def _backward_group(params, state, dlogits, grads):
    caches, pooled, n_last = state
    grads["fc.W"] += dlogits.T @ pooled
    grads["fc.b"] += dlogits.sum(axis=0)
    dpooled = dlogits @ params["fc.W"]
    dX = np.repeat((dpooled / n_last)[:, None, :], n_last, axis=1)
    for i in reversed(range(len(caches))):
        layer, cache, active = caches[i]
        dpre = dX * active
        g, dX = layer_backward(layer, cache, dpre, need_input_grad=i > 0)
        for k, v in g.items():
            grads[f"conv{i}.{k}"] += v


def _softmax_xent(logits, labels):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    nll = -logp[np.arange(len(labels)), labels]
    return nll, np.exp(logp)


def _group_samples(spec, samples, cache: GeometryCache, seed, tag):
    groups = OrderedDict()
    for pos_in_batch, item in enumerate(samples):
        cloud, label = item[0], item[1]
        raster_shape = item[2] if len(item) > 2 else None
        feats, geom, key, shape = _prepare(spec, cloud, raster_shape)
        g = groups.setdefault(key, {"geom": geom, "shape": shape, "feats": [], "labels": [], "pos": []})
        g["feats"].append(feats)
        g["labels"].append(int(label))
        g["pos"].append(pos_in_batch)
    out = []
    for key, g in groups.items():
        plan = cache.plan(spec, key, g["geom"], g["shape"])
        tables = cache.tables(spec, key, plan, seed, tag)
        out.append((tables, np.stack(g["feats"]), np.array(g["labels"]), np.array(g["pos"])))
    return out


def network_forward(spec: NetworkSpec, state: ModelState, cloud: PointCloud, *,
                    cache: GeometryCache | None = None, seed: int = 0, tag=EVAL_TAG,
                    raster_shape=None) -> np.ndarray:
    """Class logits for one point cloud."""
    cache = cache or GeometryCache()
    feats, geom, key, shape = _prepare(spec, cloud, raster_shape)
    plan = cache.plan(spec, key, geom, shape)
    tables = cache.tables(spec, key, plan, seed, tag)
    logits, _ = _forward_group(spec, state.params, tables, feats[None])
    return logits[0]


def predict(spec: NetworkSpec, state: ModelState, samples, *, cache: GeometryCache | None = None,
            seed: int = 0, batch_size: int = 50) -> np.ndarray:
    """Logits for a list of ``(cloud, label)`` samples, shape (N, n_classes)."""
    cache = cache or GeometryCache()
    out = np.zeros((len(samples), spec.n_classes))
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        for tables, X, _, pos in _group_samples(spec, chunk, cache, seed, EVAL_TAG):
            logits, _ = _forward_group(spec, state.params, tables, X)
            out[start + pos] = logits
    return out


def loss_and_grads(spec: NetworkSpec, params: dict, batch, cfg: TrainConfig, *,
                   cache: GeometryCache | None = None, tag=0):
    """Mean cross-entropy plus Sobolev penalties, and gradients w.r.t. ``params``."""
    cache = cache or GeometryCache()
    if len(batch) == 0:
        raise ValueError("empty batch")
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    total = 0.0
    n = len(batch)
    for tables, X, labels, _ in _group_samples(spec, batch, cache, cfg.seed, tag):
        logits, st = _forward_group(spec, params, tables, X)
        if not np.all(np.isfinite(logits)):
            raise TrainingDiverged("diverged")
        nll, probs = _softmax_xent(logits, labels)
        total += nll.sum()
        dlogits = probs
        dlogits[np.arange(len(labels)), labels] -= 1.0
        _backward_group(params, st, dlogits / n, grads)
    loss = total / n
    if cfg.sobolev_lambda > 0:
        for i, conv in enumerate(spec.convs):
            if conv.weight_fn == "cubic":
                p, g = sobolev_penalty(_conv_params(spec, params, i).weight_fn, cfg.sobolev_lambda)
                loss += p
                grads[f"conv{i}.wf.theta"] += g
    return float(loss), grads


def _adam(state: ModelState, grads: dict, cfg: TrainConfig) -> ModelState:
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    params, m_new, v_new = {}, {}, {}
    for k, p in state.params.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_new[k], v_new[k] = m, v
        if cfg.lr == 0:
            params[k] = p
        else:
            params[k] = p - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return ModelState(params, m_new, v_new, t)


def train_step(spec: NetworkSpec, state: ModelState, batch, cfg: TrainConfig, *,
               cache: GeometryCache | None = None, epoch: int = 0):
    """One Adam update on ``batch``; returns ``(new_state, loss)``."""
    loss, grads = loss_and_grads(spec, state.params, batch, cfg, cache=cache, tag=epoch)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise TrainingDiverged("diverged")
    return _adam(state, grads, cfg), loss


def calibrate_init(spec: NetworkSpec, state: ModelState, batch, *, cache: GeometryCache | None = None,
                   seed: int = 0, target: float = 1.0) -> ModelState:
    """Rescale every conv layer's H so its pre-activations have RMS ``target`` on ``batch``.

    Without normalization layers the fan-based draws lose most of the signal
    per layer (the weight functions emit small values on small offsets); a
    single multiplicative correction per layer, computed front to back,
    restores unit scale. Only H changes; the draws keep their shape.
    """
    cache = cache or GeometryCache()
    params = dict(state.params)
    for tables, X, _, _ in _group_samples(spec, batch, cache, seed, EVAL_TAG)[:1]:
        for i, (index, mask, normalizer, desc, scatter) in enumerate(tables):
            layer = _conv_params(spec, params, i)
            pre, _ = layer_forward(layer, desc, normalizer, index, mask, X, scatter)
            rms = float(np.sqrt(np.mean((pre - layer.bias) ** 2)))
            if rms > 0 and np.isfinite(rms):
                params[f"conv{i}.H"] = params[f"conv{i}.H"] * (target / rms)
                pre = (pre - layer.bias) * (target / rms) + layer.bias
            X = np.maximum(pre, 0.0)
    return ModelState(params, state.m, state.v, state.step)


class TrainHistory(list):
    """Per-epoch mean training loss, plus validation tracking when used."""

    def __init__(self):
        super().__init__()
        self.val_accuracy: list[float] = []
        self.best_epoch: int | None = None


def train(spec: NetworkSpec, dataset, cfg: TrainConfig, *, state: ModelState | None = None,
          cache: GeometryCache | None = None, log=None, validation=None):
    """Run ``cfg.epochs`` epochs of minibatch Adam.

    The sample order of epoch ``e`` is a permutation drawn from
    ``default_rng([seed, e])``; ε-ball subselection is reseeded per epoch.
    A fresh state (``state=None``) is calibrated on the first minibatch
    when ``cfg.calibrate`` is set.

    With a ``validation`` set the model is scored after every epoch and the
    state from the best epoch (earliest on ties) is returned instead of the
    last one. Returns ``(state, history)``.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    cache = cache or GeometryCache()
    if state is None:
        state = init_state(spec, cfg.seed)
        if cfg.calibrate:
            first = np.random.default_rng([cfg.seed, 0]).permutation(len(dataset))[:cfg.batch_size]
            state = calibrate_init(spec, state, [dataset[j] for j in first], cache=cache, seed=cfg.seed)
    history = TrainHistory()
    best = None
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [dataset[j] for j in order[start:start + cfg.batch_size]]
            state, loss = train_step(spec, state, batch, cfg, cache=cache, epoch=epoch)
            losses.append(loss * len(batch))
        history.append(float(np.sum(losses) / len(order)))
        if validation:
            acc = evaluate(spec, state, validation, cache=cache, seed=cfg.seed)
            history.val_accuracy.append(acc)
            if best is None or acc > best[0]:
                best = (acc, state)
                history.best_epoch = epoch
        if log is not None:
            log(epoch, history[-1])
    if best is not None:
        state = best[1]
    return state, history


def evaluate(spec: NetworkSpec, state: ModelState, dataset, *, cache: GeometryCache | None = None,
             seed: int = 0) -> float:
    """Fraction of samples whose arg-max logit equals the label."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    logits = predict(spec, state, dataset, cache=cache, seed=seed)
    labels = np.array([int(item[1]) for item in dataset])
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# --------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path, spec: NetworkSpec, state: ModelState, extra: dict | None = None) -> None:
    tensors, variants = {}, {}
    kinds = {f"conv{i}.": c.weight_fn for i, c in enumerate(spec.convs)}
    for group, store in (("param", state.params), ("adam_m", state.m), ("adam_v", state.v)):
        for k, v in store.items():
            name = f"{group}/{k}"
            tensors[name] = v
            for prefix, kind in kinds.items():
                if k.startswith(prefix + "wf."):
                    variants[name] = kind
    meta = {"network": spec.to_dict(), "step": state.step, **(extra or {})}
    tensorfile.save_tensors(path, tensors, meta, variants)


def load_checkpoint(path):
    """Return ``(spec, state, meta)``."""
    tensors, meta, _ = tensorfile.load_tensors(path)
    spec = NetworkSpec.from_dict(meta["network"])
    stores = {"param": {}, "adam_m": {}, "adam_v": {}}
    for name, arr in tensors.items():
        group, key = name.split("/", 1)
        stores[group][key] = arr
    state = ModelState(stores["param"], stores["adam_m"], stores["adam_v"], int(meta.get("step", 0)))
    return spec, state, meta
