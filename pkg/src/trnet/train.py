"""Training on the ring-factored form: datasets, optimizers, the loop.

Runs are deterministic for a fixed seed: layer init streams are split
from one root seed, epoch shuffles come from a dedicated generator, and
gradient accumulation order is fixed by the tape.  A run writes
``log.csv`` (epoch, train error, test error, loss, wall time),
``model.trm`` plus a ``model.json`` sidecar, and ``config.echo.json``.
"""

from __future__ import annotations

import importlib.resources
import json
import math
import os
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .archspec import ArchSpec, load_arch
from .layers import DenseConv2d, DenseFullyConnected, TRConv2d, TRFullyConnected
from .ring import load_trm, save_trm
from .tensor import ConvSpec

__all__ = [
    "Dataset",
    "load_mnist_images",
    "load_mnist_labels",
    "load_mnist",
    "synthetic_blobs",
    "SGDMomentum",
    "Adam",
    "TrainConfig",
    "Network",
    "build_network",
    "TrainLog",
    "train",
    "save_network",
    "load_network",
]


@dataclass
class Dataset:
    """Features (N, ...) float64 plus integer labels (N,)."""

    features: np.ndarray
    labels: np.ndarray
    name: str = "data"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} labels")

    @property
    def n(self) -> int:
        return self.features.shape[0]


# --- MNIST-style IDX files ---------------------------------------------------

_IDX_IMAGES_MAGIC = 0x00000803
_IDX_LABELS_MAGIC = 0x00000801


def load_mnist_images(path) -> np.ndarray:
    """Big-endian IDX image file -> (N, rows, cols, 1) floats in [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 16:
        raise ValueError(f"{path}: truncated header ({len(buf)} bytes)")
    magic, count, rows, cols = struct.unpack_from(">IIII", buf, 0)
    if magic != _IDX_IMAGES_MAGIC:
        raise ValueError(
            f"{path}: bad magic 0x{magic:08x} (expected 0x{_IDX_IMAGES_MAGIC:08x})")
    need = 16 + count * rows * cols
    if len(buf) != need:
        raise ValueError(f"{path}: expected {need} bytes for {count} images, got {len(buf)}")
    pixels = np.frombuffer(buf, dtype=np.uint8, offset=16)
    return pixels.reshape(count, rows, cols, 1).astype(np.float64) / 255.0


def load_mnist_labels(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 8:
        raise ValueError(f"{path}: truncated header ({len(buf)} bytes)")
    magic, count = struct.unpack_from(">II", buf, 0)
    if magic != _IDX_LABELS_MAGIC:
        raise ValueError(
            f"{path}: bad magic 0x{magic:08x} (expected 0x{_IDX_LABELS_MAGIC:08x})")
    if len(buf) != 8 + count:
        raise ValueError(f"{path}: expected {8 + count} bytes for {count} labels")
    return np.frombuffer(buf, dtype=np.uint8, offset=8).astype(np.int64)


def load_mnist_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    """Pair one IDX image file with one IDX label file."""
    images = load_mnist_images(images_path)
    labels = load_mnist_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    return Dataset(features=images, labels=labels, name=name)


def load_mnist(data_dir, split: str = "train") -> Dataset:
    """Load one split from a directory of the four standard IDX files."""
    stem = {"train": "train", "test": "t10k"}.get(split)
    if stem is None:
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    base = Path(data_dir)
    return load_mnist_idx(base / f"{stem}-images-idx3-ubyte",
                          base / f"{stem}-labels-idx1-ubyte",
                          name=f"mnist-{split}")


def synthetic_blobs(classes: int, per_class: int, feature_shape, separation: float,
                    seed: int = 0, noise_stream: int = 0,
                    name: str = "blobs") -> Dataset:
    """Equidistant Gaussian clusters with unit isotropic noise.

    Class means are scaled orthonormal directions, so every pair of
    means is exactly ``separation`` apart regardless of class count.
    The means depend on ``seed`` alone; ``noise_stream`` selects an
    independent sample draw, so train/test splits share geometry.
    """
    feature_shape = tuple(int(s) for s in feature_shape)
    dim = math.prod(feature_shape)
    if classes < 1 or per_class < 1:
        raise ValueError("classes and per_class must be >= 1")
    if classes > dim:
        raise ValueError(f"{classes} classes need at least {classes} feature dims")
    mean_rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    q, _ = np.linalg.qr(mean_rng.standard_normal((dim, classes)))
    means = q.T * (separation / np.sqrt(2.0))
    rng = np.random.default_rng(np.random.SeedSequence((seed, 1, noise_stream)))
    feats = np.empty((classes * per_class, dim))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c in range(classes):
        lo = c * per_class
        feats[lo:lo + per_class] = means[c] + rng.standard_normal((per_class, dim))
        labels[lo:lo + per_class] = c
    return Dataset(features=feats.reshape((classes * per_class,) + feature_shape),
                   labels=labels, name=name)


# --- optimizers --------------------------------------------------------------

class SGDMomentum:
    """v = mu * v + g; p -= lr * v."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = float(momentum)
        self._velocity: dict[int, np.ndarray] = {}

    def step(self, params, grads, lr: float) -> None:
        for p in params:
            g = grads.get(p)
            if g is None:
                continue
            v = self._velocity.get(id(p))
            if v is None:
                v = np.zeros_like(p.value)
            v = self.momentum * v + g
            self._velocity[id(p)] = v
            p.value -= lr * v


class Adam:
    """Bias-corrected first/second moment update, standard constants."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self._t = 0

    def step(self, params, grads, lr: float) -> None:
        self._t += 1
        t = self._t
        for p in params:
            g = grads.get(p)
            if g is None:
                continue
            m = self._m.get(id(p), 0.0)
            v = self._v.get(id(p), 0.0)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * (g * g)
            self._m[id(p)] = m
            self._v[id(p)] = v
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.value -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(kind: str, momentum: float = 0.9):
    if kind == "sgd_momentum":
        return SGDMomentum(momentum=momentum)
    if kind == "adam":
        return Adam()
    raise ValueError(f"unknown optimizer {kind!r}")


# --- the network -------------------------------------------------------------

class Network:
    """An ordered stack of layers with ReLU between parameterized ones.

    Pool markers apply where listed; activations flatten automatically
    before the first fully connected layer.  The same forward serves
    training (with a tape active) and inference (without).
    """

    def __init__(self, stages, arch: ArchSpec, rank: int | None, compressed: bool):
        self.stages = stages  # (kind, layer-or-size) pairs
        self.arch = arch
        self.rank = rank
        self.compressed = compressed

    def params(self) -> list:
        out = []
        for kind, obj in self.stages:
            if kind == "layer":
                out.extend(obj.params())
        return out

    def param_count(self) -> int:
        return sum(p.value.size for p in self.params())

    def invalidate(self) -> None:
        for kind, obj in self.stages:
            if kind == "layer":
                obj.invalidate()

    def forward(self, x) -> ad.Var:
        """Logits Var for a batch; records onto the ambient tape if any."""
        v = ad.constant(np.asarray(x, dtype=np.float64))
        param_layers = [obj for kind, obj in self.stages if kind == "layer"]
        last = param_layers[-1] if param_layers else None
        for kind, obj in self.stages:
            if kind == "pool":
                v = ad.maxpool2x2(v)
                continue
            if isinstance(obj, (TRFullyConnected, DenseFullyConnected)) and v.value.ndim > 2:
                v = ad.reshape(v, (v.value.shape[0], -1))
            v = obj.forward_tape(v)
            if obj is not last:
                v = ad.relu(v)
        return v

    def loss(self, x, labels) -> ad.Var:
        return ad.softmax_xent(self.forward(x), labels)

    def predict(self, x, batch: int = 256) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        out = []
        for lo in range(0, x.shape[0], batch):
            logits = self.forward(x[lo:lo + batch]).value
            out.append(np.argmax(logits, axis=1))
        return np.concatenate(out) if out else np.empty(0, dtype=np.int64)

    def error_rate(self, ds: Dataset) -> float:
        return float(np.mean(self.predict(ds.features) != ds.labels))

    def mean_loss(self, ds: Dataset, batch: int = 256) -> float:
        total = 0.0
        for lo in range(0, ds.n, batch):
            xb = ds.features[lo:lo + batch]
            lb = ds.labels[lo:lo + batch]
            total += float(self.loss(xb, lb).value) * xb.shape[0]
        return total / ds.n


def build_network(arch: ArchSpec, rank: int | None = None, seed: int = 0,
                  compressed: bool = True) -> Network:
    """Instantiate the layers of an arch description.

    ``compressed=False`` builds the dense twin (same stack, full
    weights).  resblock rows are analysis-only and refuse to build.
    """
    if compressed and rank is None:
        raise ValueError("a compressed network needs a rank")
    param_rows = [ld for ld in arch.layers if ld.kind in ("fc", "conv", "resblock")]
    streams = np.random.SeedSequence(seed).spawn(max(len(param_rows), 1))
    seeds = iter(int(s.generate_state(1)[0]) for s in streams)
    stages = []
    for ld in arch.layers:
        if ld.kind == "maxpool":
            if ld.pool != 2:
                raise ValueError("only 2x2 pooling is supported in networks")
            stages.append(("pool", None))
            continue
        if ld.kind == "resblock":
            raise NotImplementedError(
                "resblock rows are for cost analysis; building them is not supported")
        layer_seed = next(seeds)
        if ld.kind == "fc":
            if compressed:
                layer = TRFullyConnected(ld.in_shape, ld.out_shape, rank=rank,
                                         seed=layer_seed, name=ld.name)
            else:
                layer = DenseFullyConnected(ld.in_size, ld.out_size,
                                            seed=layer_seed, name=ld.name)
        else:
            spec = ConvSpec(height=ld.geom.height, width=ld.geom.width,
                            in_channels=ld.in_size, out_channels=ld.out_size,
                            filter_size=ld.geom.filter_size, stride=ld.geom.stride,
                            padding=ld.geom.padding)
            if compressed:
                layer = TRConv2d(spec, ld.in_shape, ld.out_shape,
                                 spatial_mode=ld.spatial_mode, rank=rank,
                                 seed=layer_seed, name=ld.name)
            else:
                layer = DenseConv2d(spec, seed=layer_seed, name=ld.name)
        stages.append(("layer", layer))
    return Network(stages, arch, rank, compressed)


# --- the loop ----------------------------------------------------------------

def _resolve_arch_file(path: str, config_source) -> str:
    """Literal path, then relative to the config file, then bundled names."""
    if os.path.exists(path):
        return path
    if not isinstance(config_source, dict):
        sibling = Path(config_source).parent / path
        if sibling.exists():
            return str(sibling)
    bundled = importlib.resources.files("trnet").joinpath(
        "specs", os.path.basename(path))
    if bundled.is_file():
        return str(bundled)
    return path  # let load_arch report the path the config named


@dataclass
class TrainConfig:
    arch: ArchSpec
    rank: int | None = None
    compressed: bool = True
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    batch_size: int = 32
    epochs: int = 10
    lr_schedule: tuple = ()  # ((epoch, lr), ...) applied from that epoch on
    seed: int = 0
    dataset: dict = field(default_factory=dict)  # {"kind": "mnist"|"blobs", ...}

    @classmethod
    def from_json(cls, source, seed_override: int | None = None) -> "TrainConfig":
        if isinstance(source, dict):
            doc = dict(source)
        else:
            with open(source, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        known = {"arch", "arch_file", "rank", "compressed", "optimizer", "lr",
                 "momentum", "batch_size", "epochs", "lr_schedule", "seed",
                 "dataset"}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if ("arch" in doc) == ("arch_file" in doc):
            raise ValueError("config needs exactly one of 'arch' or 'arch_file'")
        if "arch" in doc:
            arch = load_arch(doc["arch"])
        else:
            arch = load_arch(_resolve_arch_file(doc["arch_file"], source))
        cfg = cls(
            arch=arch,
            rank=doc.get("rank"),
            compressed=bool(doc.get("compressed", True)),
            optimizer=doc.get("optimizer", "adam"),
            lr=float(doc.get("lr", 1e-3)),
            momentum=float(doc.get("momentum", 0.9)),
            batch_size=int(doc.get("batch_size", 32)),
            epochs=int(doc.get("epochs", 10)),
            lr_schedule=tuple((int(e), float(v)) for e, v in doc.get("lr_schedule", [])),
            seed=int(doc.get("seed", 0)),
            dataset=dict(doc.get("dataset", {})))
        if seed_override is not None:
            cfg.seed = seed_override
        return cfg

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for start, value in sorted(self.lr_schedule):
            if epoch >= start:
                lr = value
        return lr

    def echo(self) -> dict:
        return {
            "arch": self.arch.name,
            "rank": self.rank,
            "compressed": self.compressed,
            "optimizer": self.optimizer,
            "lr": self.lr,
            "momentum": self.momentum,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "lr_schedule": [list(x) for x in self.lr_schedule],
            "seed": self.seed,
            "dataset": self.dataset,
        }


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # dicts per epoch
    aborted: bool = False
    network: object = None

    @property
    def final_train_error(self) -> float:
        return self.rows[-1]["train_error"] if self.rows else float("nan")

    @property
    def final_test_error(self) -> float:
        return self.rows[-1]["test_error"] if self.rows else float("nan")

    def to_csv(self, path, timestamps: bool = True) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_error", "test_error", "loss", "wall_time"])
            for r in self.rows:
                w.writerow([r["epoch"], f"{r['train_error']:.6f}",
                            f"{r['test_error']:.6f}", f"{r['loss']:.6f}",
                            f"{r['wall_time']:.3f}" if timestamps else "0.000"])


def save_network(net: Network, path, sidecar_path=None) -> None:
    """Write all parameters to a .trm container plus a JSON sidecar."""
    records = []
    for p in net.params():
        records.append((p.name, p.value))
    save_trm(path, records)
    sidecar = {
        "arch_name": net.arch.name,
        "rank": net.rank,
        "compressed": net.compressed,
        "layers": [
            {"kind": ld.kind, "name": ld.name,
             "in_shape": list(ld.in_shape), "out_shape": list(ld.out_shape),
             "spatial_mode": ld.spatial_mode}
            for ld in net.arch.layers
        ],
        "arch": _arch_to_dict(net.arch),
    }
    if sidecar_path is None:
        sidecar_path = Path(path).with_suffix(".json")
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _arch_to_dict(arch: ArchSpec) -> dict:
    layers = []
    for ld in arch.layers:
        row = {"kind": ld.kind, "name": ld.name}
        if ld.in_shape:
            row["in_shape"] = list(ld.in_shape)
        if ld.out_shape:
            row["out_shape"] = list(ld.out_shape)
        if ld.geom is not None:
            row.update({"filter": ld.geom.filter_size, "stride": ld.geom.stride,
                        "padding": ld.geom.padding, "height": ld.geom.height,
                        "width": ld.geom.width})
            row["spatial_mode"] = ld.spatial_mode
        if ld.kind == "maxpool":
            row["pool"] = ld.pool
        if ld.repeat != 1:
            row["repeat"] = ld.repeat
        layers.append(row)
    doc = {"name": arch.name, "layers": layers}
    if arch.default_rank is not None:
        doc["default_rank"] = arch.default_rank
    return doc


def load_network(path, sidecar_path=None) -> Network:
    """Rebuild a network from model.trm + sidecar and load its weights."""
    if sidecar_path is None:
        sidecar_path = Path(path).with_suffix(".json")
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    arch = load_arch(sidecar["arch"])
    net = build_network(arch, rank=sidecar.get("rank"),
                        compressed=sidecar.get("compressed", True))
    records = dict(load_trm(path))
    for p in net.params():
        if p.name not in records:
            raise ValueError(f"model file is missing parameter {p.name!r}")
        stored = records[p.name].array
        if stored.shape != p.value.shape:
            raise ValueError(
                f"parameter {p.name!r} has shape {stored.shape}, expected {p.value.shape}")
        p.value[...] = stored
    net.invalidate()
    return net


def train(config: TrainConfig, train_ds: Dataset, test_ds: Dataset | None = None,
          out_dir=None, timestamps: bool = True) -> TrainLog:
    """Mini-batch training; returns the epoch log.

    Epoch 0 is the untrained evaluation row.  A non-finite loss aborts
    the run, keeping the last finished epoch's weights (the current
    in-flight step is rolled back to that checkpoint).
    """
    net = build_network(config.arch, rank=config.rank, seed=config.seed,
                        compressed=config.compressed)
    optimizer = make_optimizer(config.optimizer, momentum=config.momentum)
    test = test_ds if test_ds is not None else train_ds
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))

    log = TrainLog()
    start = time.perf_counter()

    def evaluate(epoch, mean_loss):
        log.rows.append({
            "epoch": epoch,
            "train_error": net.error_rate(train_ds),
            "test_error": net.error_rate(test),
            "loss": mean_loss,
            "wall_time": time.perf_counter() - start,
        })

    evaluate(0, net.mean_loss(train_ds))
    checkpoint = [p.value.copy() for p in net.params()]

    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(train_ds.n)
        lr = config.lr_at(epoch)
        epoch_loss = 0.0
        for lo in range(0, train_ds.n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            xb = train_ds.features[idx]
            yb = train_ds.labels[idx]
            with ad.Tape() as tape:
                loss = net.loss(xb, yb)
            value = float(loss.value)
            if not np.isfinite(value):
                for p, saved in zip(net.params(), checkpoint):
                    p.value[...] = saved
                net.invalidate()
                log.aborted = True
                log.network = net
                evaluate(epoch, value)
                if out_dir is not None:
                    _write_outputs(net, config, log, out_dir, timestamps)
                return log
            grads = tape.backward(loss)
            optimizer.step(net.params(), grads, lr)
            net.invalidate()
            epoch_loss += value * xb.shape[0]
        evaluate(epoch, epoch_loss / train_ds.n)
        checkpoint = [p.value.copy() for p in net.params()]

    if out_dir is not None:
        _write_outputs(net, config, log, out_dir, timestamps)
    log.network = net
    return log


def _write_outputs(net, config, log, out_dir, timestamps) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log.to_csv(out / "log.csv", timestamps=timestamps)
    save_network(net, out / "model.trm", out / "model.json")
    with open(out / "config.echo.json", "w", encoding="utf-8") as fh:
        json.dump(config.echo(), fh, indent=2, sort_keys=True)
        fh.write("\n")
