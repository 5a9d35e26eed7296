"""Command line entry point.

Every subcommand reads a JSON config (``--config``), takes ``--seed`` and
writes its result to ``--out``. Exit status is 0 on success and 1 on any
error.
"""

from __future__ import annotations

import json
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import click
import numpy as np

from ..descriptors import poly_features, raster_to_pointcloud, vi_descriptor
from ..geometry import (
    PointCloud,
    build_index,
    epsilon_ball_query,
    estimate_normals,
    farthest_point_sampling,
    grid_subsample,
    knn_query,
    pc2d_indices,
)
from ..network import (
    GeometryCache,
    TrainConfig,
    evaluate,
    init_state,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .data import load_mnist, make_dataset, rescale_image, rotate_pointcloud, split_indices
from .protocol import (
    build_split,
    network_from_config,
    protocol_preset,
    run_protocol,
    variant_name,
)
from .report import RobustnessReport, emit_report

DATA_ENV = "POINTCONV_ROBUST_DATA"
DEFAULT_IMAGES = "mnist5k-images-idx3-ubyte.gz"
DEFAULT_LABELS = "mnist5k-labels-idx1-ubyte.gz"


def _data_dir() -> Path:
    env = os.environ.get(DATA_ENV)
    if env:
        return Path(env)
    return Path(__file__).resolve().parents[3] / "data"


def _load_pool(cfg: dict, base: Path):
    d = cfg.get("data", {})
    root = _data_dir()

    def resolve(key, default):
        p = d.get(key)
        if p is None:
            return root / default
        p = Path(p)
        return p if p.is_absolute() else base / p

    return load_mnist(resolve("images", DEFAULT_IMAGES), resolve("labels", DEFAULT_LABELS))


def _read_config(path) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    return json.loads(p.read_text(encoding="utf-8")), p.resolve().parent


def _train_config(cfg: dict, seed: int | None) -> TrainConfig:
    t = dict(cfg.get("train", {}))
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(t) - known
    if unknown:
        raise click.UsageError(f"unknown train keys {sorted(unknown)}")
    tc = TrainConfig(**t)
    return replace(tc, seed=seed) if seed is not None else tc


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _echo(msg: str) -> None:
    click.echo(msg, err=True)


def _common(f):
    f = click.option("--out", "out", type=click.Path(dir_okay=False), required=True,
                     help="Output file.")(f)
    f = click.option("--seed", type=int, default=None,
                     help="Seed for every random choice (overrides the config).")(f)
    f = click.option("--config", "config", type=click.Path(exists=True, dir_okay=False),
                     default=None, help="JSON config file.")(f)
    return f


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def app():
    """Point-cloud convolution toolkit and MNIST robustness harness."""


@app.command()
@_common
def convert(config, seed, out):
    """Turn MNIST IDX images into point clouds (.npz).

    Config keys: data.images, data.labels, count (default all), size (side
    after bilinear rescaling), angle (degrees counter-clockwise).
    The output holds positions (n, P, 2), features (n, P, 1) and labels (n,).
    """
    cfg, base = _read_config(config)
    images, labels = _load_pool(cfg, base)
    count = cfg.get("count")
    if count is not None:
        (idx,) = split_indices(labels, (int(count),), seed if seed is not None else cfg.get("seed", 0))
        images, labels = images[idx], labels[idx]
    data = make_dataset(images, labels, size=cfg.get("size"), angle=float(cfg.get("angle", 0.0)))
    pos = np.stack([c.positions for c, _, _ in data]) if data else np.zeros((0, 0, 2))
    feats = np.stack([c.features for c, _, _ in data]) if data else np.zeros((0, 0, 1))
    with open(out, "wb") as fh:
        np.savez(fh, positions=pos, features=feats, labels=np.asarray(labels, dtype=np.int64))
    _echo(f"wrote {len(data)} clouds to {out}")


def _cloud_from_config(cfg: dict, base: Path, seed: int) -> tuple[PointCloud, tuple | None]:
    src = cfg.get("input", {})
    if "points" in src:
        return PointCloud(src["points"], src.get("features"), src.get("normals")), None
    if "random" in src:
        n, dim = int(src["random"]), int(src.get("dim", 3))
        rng = np.random.default_rng(seed)
        return PointCloud(rng.random((n, dim))), None
    if "image_index" in src:
        images, _ = _load_pool(cfg, base)
        img = images[int(src["image_index"])]
        if "size" in src:
            img = rescale_image(img, int(src["size"]))
        cloud = raster_to_pointcloud(img)
        if src.get("angle"):
            cloud = rotate_pointcloud(cloud, float(src["angle"]), shape=img.shape[:2])
        return cloud, img.shape[:2]
    raise click.UsageError("config.input needs one of: points, random, image_index")


@app.command()
@_common
def sample(config, seed, out):
    """Run a subsampling or neighbor query on one cloud.

    Config: input (points | random+dim | image_index[+size,+angle]) and
    method: fps (m, start), pc2d, grid (grid_size), knn (center, k) or
    eps (center, epsilon, k_cap). Writes selected indices (and positions).
    """
    cfg, base = _read_config(config)
    seed = seed if seed is not None else int(cfg.get("seed", 0))
    cloud, shape = _cloud_from_config(cfg, base, seed)
    method = cfg.get("method", "fps")
    result: dict = {"method": method}
    if method == "fps":
        idx = farthest_point_sampling(cloud, int(cfg["m"]), start=int(cfg.get("start", 0)))
        result["indices"] = idx.tolist()
    elif method == "pc2d":
        if shape is None:
            raise click.UsageError("pc2d needs an image input")
        idx = pc2d_indices(shape[1], shape[0])
        result["indices"] = idx.tolist()
    elif method == "grid":
        if cfg.get("normals_k"):
            cloud = estimate_normals(cloud, int(cfg["normals_k"]))
        sub = grid_subsample(cloud, float(cfg["grid_size"]))
        result["positions"] = sub.positions.tolist()
        if sub.normals is not None:
            result["normals"] = sub.normals.tolist()
    elif method in ("knn", "eps"):
        index = build_index(cloud)
        c = int(cfg.get("center", 0))
        if method == "knn":
            nb = knn_query(index, c, int(cfg["k"]))
        else:
            nb = epsilon_ball_query(index, c, float(cfg["epsilon"]), int(cfg.get("k_cap", 16)), seed=seed)
        result.update(center=int(nb.center), neighbors=np.asarray(nb.neighbors).tolist(),
                      offsets=np.asarray(nb.offsets).tolist(), normalizer=np.asarray(nb.normalizer).tolist())
    else:
        raise click.UsageError(f"unknown method {method!r}")
    if "indices" in result:
        result["positions"] = cloud.positions[np.asarray(result["indices"], dtype=int)].tolist()
    _write_json(out, result)


@app.command()
@_common
def descriptor(config, seed, out):
    """Compute weight-function inputs.

    Config kind "vi": lists p_mu, n_mu, p_alpha, n_alpha (single 3-vectors
    or equal-length lists of them). Kind "poly": offsets (2- or 3-vectors).
    """
    cfg, _ = _read_config(config)
    kind = cfg.get("kind", "vi")
    if kind == "vi":
        arrs = [np.atleast_2d(np.asarray(cfg[k], dtype=float)) for k in ("p_mu", "n_mu", "p_alpha", "n_alpha")]
        n = max(len(a) for a in arrs)
        arrs = [np.broadcast_to(a, (n, 3)) for a in arrs]
        rows = []
        for pm, nm, pa, na in zip(*arrs):
            d = vi_descriptor(pm, nm, pa, na)
            rows.append({"beta": d.beta.tolist(), "degenerate": d.basis.degenerate,
                         "basis": d.basis.matrix().T.tolist()})
        _write_json(out, {"kind": "vi", "descriptors": rows})
    elif kind == "poly":
        offs = np.atleast_2d(np.asarray(cfg["offsets"], dtype=float))
        rows = [poly_features(o).values.tolist() for o in offs]
        _write_json(out, {"kind": "poly", "features": rows,
                          "degree_mask": poly_features(offs[0]).degree_mask.tolist()})
    else:
        raise click.UsageError(f"unknown descriptor kind {kind!r}")


def _prepare_training(cfg: dict, base: Path, tcfg: TrainConfig):
    images, labels = _load_pool(cfg, base)
    split = cfg.get("split", {})
    counts = (int(split.get("train", 2000)), int(split.get("val", 500)), int(split.get("test", 1000)))
    tr, va, te = split_indices(labels, counts, tcfg.seed)
    return images, labels, tr, va, te


@app.command("train")
@_common
def train_cmd(config, seed, out):
    """Train one network and write a checkpoint.

    Config: network (builder keys or a layer list), train (TrainConfig
    fields), data, split {train, val, test}, sizes (training side lengths,
    default [28]), angles (default [0]), select_on_validation (keep the
    epoch with the best validation accuracy, default false).
    """
    cfg, base = _read_config(config)
    tcfg = _train_config(cfg, seed)
    spec = network_from_config(cfg.get("network", {}))
    images, labels, tr, va, _ = _prepare_training(cfg, base, tcfg)
    sizes = cfg.get("sizes", [28])
    angles = cfg.get("angles", [0])
    train_data = [s for z in sizes for a in angles
                  for s in make_dataset(images[tr], labels[tr], size=int(z), angle=float(a))]
    cache = GeometryCache()
    val = make_dataset(images[va], labels[va], size=int(sizes[0]))
    select = bool(cfg.get("select_on_validation", False)) and len(va) > 0
    state, history = train(spec, train_data, tcfg, cache=cache, validation=val if select else None,
                           log=lambda e, l: _echo(f"epoch {e} loss {l:.4f}"))
    acc = evaluate(spec, state, val, cache=cache, seed=tcfg.seed) if len(va) else float("nan")
    _echo(f"validation accuracy {acc:.4f}")
    save_checkpoint(out, spec, state, {"train": asdict(tcfg), "history": list(history),
                                       "best_epoch": history.best_epoch, "val_accuracy": acc,
                                       "split_seed": tcfg.seed, "split": [len(tr), len(va)]})


@app.command("eval")
@_common
def eval_cmd(config, seed, out):
    """Evaluate a checkpoint on held-out images at several variants.

    Config: checkpoint, data, split (must match training to stay held
    out), kind (scale | rotation) and variants. Writes a CSV or JSON report
    depending on the --out suffix.
    """
    cfg, base = _read_config(config)
    ckpt = Path(cfg["checkpoint"])
    spec, state, meta = load_checkpoint(ckpt if ckpt.is_absolute() else base / ckpt)
    tcfg = TrainConfig(**meta.get("train", {}))
    if seed is not None:
        tcfg = replace(tcfg, seed=seed)
    images, labels, _, _, te = _prepare_training(cfg, base, tcfg)
    kind = cfg.get("kind", "scale")
    variants = cfg.get("variants", [28] if kind == "scale" else [0])
    proto = protocol_preset(kind)
    report = RobustnessReport(metadata={"seed": tcfg.seed, "checkpoint": str(ckpt)})
    cache = GeometryCache()
    for v, data in build_split(proto, images[te], labels[te], variants).items():
        report.add(spec.name, variant_name(kind, v), "test", evaluate(spec, state, data, cache=cache, seed=tcfg.seed))
    emit_report(report, "json" if str(out).endswith(".json") else "csv", out)


@app.command()
@_common
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]), default=None,
              help="Report format (default from the --out suffix, csv otherwise).")
def robustness(config, seed, out, fmt):
    """Run the scale or rotation protocol over several network configs.

    Config: protocol (scale | rotation), protocol_overrides (n_train,
    n_val, n_test, variant lists), configs (list of network configs, each
    with a unique name), train (TrainConfig fields), data.
    """
    cfg, base = _read_config(config)
    tcfg = _train_config(cfg, seed)
    overrides = {k: (tuple(v) if isinstance(v, list) else v) for k, v in cfg.get("protocol_overrides", {}).items()}
    proto = protocol_preset(cfg.get("protocol", "scale"), **overrides)
    images, labels = _load_pool(cfg, base)
    report = run_protocol(proto, cfg.get("configs", []), tcfg, images, labels, log=_echo)
    if fmt is None:
        fmt = "json" if str(out).endswith(".json") else "csv"
    emit_report(report, fmt, out)
    for name, err in report.errors.items():
        _echo(f"{name}: {err}")


def main(argv=None) -> int:
    try:
        app.main(args=argv, prog_name="pointconv-robust", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.ClickException as exc:
        exc.show()
        return 1
    except click.exceptions.Abort:
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure maps to exit status 1
        click.echo(f"error: {exc}", err=True)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
