"""Scale and rotation robustness protocols."""

from __future__ import annotations

import hashlib
import json
import subprocess
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..network import (
    GeometryCache,
    NetworkSpec,
    TrainConfig,
    TrainingDiverged,
    build_mnist_network,
    evaluate,
    train,
)
from .data import make_dataset, split_indices
from .report import RobustnessReport

__all__ = [
    "RobustnessProtocol",
    "SCALE_PROTOCOL",
    "ROTATION_PROTOCOL",
    "protocol_preset",
    "network_from_config",
    "variant_name",
    "build_split",
    "run_protocol",
    "config_hash",
]


@dataclass(frozen=True)
class RobustnessProtocol:
    """Variants are side lengths (scale) or degrees counter-clockwise (rotation)."""

    kind: str
    train_variants: tuple
    validation_variants: tuple
    test_variants: tuple
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 1000
    base_size: int = 28

    def __post_init__(self):
        if self.kind not in ("scale", "rotation"):
            raise ValueError(f"protocol kind must be 'scale' or 'rotation', got {self.kind!r}")
        for name in ("train_variants", "validation_variants", "test_variants"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        tr, va, te = map(set, (self.train_variants, self.validation_variants, self.test_variants))
        if tr & te or va & te:
            raise ValueError("test variants must be disjoint from train and validation variants")
        if not self.train_variants:
            raise ValueError("protocol needs at least one training variant")


# Validation rotations coincide with training rotations in the standard preset;
# only the test variants are required to be out of sample.
SCALE_PROTOCOL = RobustnessProtocol("scale", (20, 28, 36), (24, 32), (34, 38, 44, 56, 72, 18, 14, 10))
ROTATION_PROTOCOL = RobustnessProtocol("rotation", (-15, 0, 15), (-15, 15), (-10, 10, -20, 20, -40, 40))


def protocol_preset(name: str, **overrides) -> RobustnessProtocol:
    base = {"scale": SCALE_PROTOCOL, "rotation": ROTATION_PROTOCOL}.get(name)
    if base is None:
        raise ValueError(f"unknown protocol preset {name!r}")
    return replace(base, **overrides) if overrides else base


def variant_name(kind: str, v) -> str:
    if kind == "scale":
        return f"{int(v)}x{int(v)}"
    return f"{float(v):+g}deg"


def network_from_config(cfg) -> NetworkSpec:
    """Accept a NetworkSpec, a ``{"layers": ...}`` dict, or builder keywords."""
    if isinstance(cfg, NetworkSpec):
        return cfg
    cfg = dict(cfg)
    if "layers" in cfg:
        return NetworkSpec.from_dict(cfg)
    allowed = {"neighborhood", "weight_fn", "activation", "k", "channels", "epsilons", "fps",
               "subsample", "c_mid", "normalize_offsets", "name"}
    unknown = set(cfg) - allowed - {"sobolev_lambda"}
    if unknown:
        raise ValueError(f"unknown network config keys {sorted(unknown)}")
    kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg.items() if k in allowed}
    return build_mnist_network(**kwargs)


def config_hash(payload) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _commit() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def build_split(protocol: RobustnessProtocol, images, labels, variants) -> dict:
    """``{variant: samples}`` for every variant of one split."""
    out = {}
    for v in variants:
        if protocol.kind == "scale":
            out[v] = make_dataset(images, labels, size=int(v))
        else:
            out[v] = make_dataset(images, labels, size=protocol.base_size, angle=float(v))
    return out


def run_protocol(protocol: RobustnessProtocol, configs, cfg: TrainConfig, images, labels, *,
                 log=None) -> RobustnessReport:
    """Train every config on the union of training variants and sweep the tests.

    ``images``/``labels`` are the raw image pool; disjoint train, validation
    and test subsets of the protocol's sizes are drawn from it with
    ``cfg.seed``. A diverging config is recorded in ``report.errors`` and the
    run moves on.
    """
    t0 = time.perf_counter()
    specs = []
    for i, c in enumerate(configs):
        spec = network_from_config(c)
        lam = dict(c).get("sobolev_lambda") if isinstance(c, dict) else None
        specs.append((spec, cfg if lam is None else replace(cfg, sobolev_lambda=float(lam))))
    names = [s.name for s, _ in specs]
    if len(set(names)) != len(names):
        raise ValueError(f"config names must be unique, got {names}")

    labels = np.asarray(labels)
    report = RobustnessReport()
    report.metadata = {
        "seed": cfg.seed,
        "commit": _commit(),
        "config_hash": config_hash({"protocol": asdict(protocol), "train": asdict(cfg),
                                    "configs": [s.to_dict() for s, _ in specs]}),
        "protocol": protocol.kind,
    }
    if specs:
        tr, va, te = split_indices(labels, (protocol.n_train, protocol.n_val, protocol.n_test), cfg.seed)
        train_sets = build_split(protocol, images[tr], labels[tr], protocol.train_variants)
        train_data = [s for v in protocol.train_variants for s in train_sets[v]]
        val_sets = build_split(protocol, images[va], labels[va], protocol.validation_variants)
        test_sets = build_split(protocol, images[te], labels[te], protocol.test_variants)

    for spec, tcfg in specs:
        cache = GeometryCache()
        try:
            state, history = train(spec, train_data, tcfg, cache=cache,
                                   log=(lambda e, l, n=spec.name: log(f"{n} epoch {e} loss {l:.4f}")) if log else None)
        except TrainingDiverged as exc:
            report.errors[spec.name] = str(exc)
            continue
        for split, sets in (("val", val_sets), ("test", test_sets)):
            for v, data in sets.items():
                acc = evaluate(spec, state, data, cache=cache, seed=tcfg.seed)
                report.add(spec.name, variant_name(protocol.kind, v), split, acc)
                if log:
                    log(f"{spec.name} {split} {variant_name(protocol.kind, v)} {acc:.4f}")
    report.metadata["wall_time"] = round(time.perf_counter() - t0, 3)
    return report
